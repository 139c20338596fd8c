"""Reverse-mode differentiation on an explicit tape.

A ``Tape`` is opened per training step (``with Tape() as tape:``). Every differentiable
operation applied while the tape is active appends a record (function, input node-ids,
output node-id); ``tape.backward(loss)`` walks the records once in reverse and returns the
gradients of every leaf that requires them. Tape state is thread-local.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from typing import (
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from core.errors import ContractError, NumericError

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}
STANDARDIZE_EPS = 1e-5

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class _ThreadState(threading.local):
    def __init__(self):
        self.tapes: List["Tape"] = []
        self.dtype = np.float32
        self.recording = True


_state = _ThreadState()


def get_default_dtype():
    return _state.dtype


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Switch the default element precision ("float32" or "float64") for new tensors."""
    if name not in DTYPES:
        raise ContractError(f"unknown precision {name!r}, expected one of {sorted(DTYPES)}")
    previous = _state.dtype
    _state.dtype = DTYPES[name]
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_record() -> Iterator[None]:
    """Run operations without recording them on any tape (teacher passes, evaluation)."""
    previous = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


def active_tape() -> Optional["Tape"]:
    if not _state.recording or not _state.tapes:
        return None
    return _state.tapes[-1]


class Function:
    """Base class for differentiable operations.

    ``forward`` receives the input arrays and keyword arguments and saves whatever the
    backward pass needs on ``self``. ``backward`` receives dL/d(output) and returns one
    gradient (or ``None``) per input.
    """

    needs_input_grad: Tuple[bool, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        for tensor in tensors:
            if not isinstance(tensor, Tensor):
                raise ContractError(f"{cls.__name__} expects Tensor inputs, got {type(tensor).__name__}")
        function = cls()
        function.needs_input_grad = tuple(t.requires_grad for t in tensors)
        out = np.asarray(function.forward(*(t.data for t in tensors), **kwargs))
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{cls.__name__} produced non-finite values for inputs of shapes "
                               f"{[t.shape for t in tensors]}")
        tape = active_tape()
        requires_grad = tape is not None and any(t.requires_grad for t in tensors)
        result = Tensor.wrap(out, requires_grad=requires_grad)
        if requires_grad:
            tape.record(function, tensors, result)
        return result

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out the axes numpy broadcasting added or stretched so grad matches ``shape``."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, size in enumerate(shape):
            if size == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class TapeRecord(NamedTuple):
    function: Function
    inputs: Tuple[Optional[int], ...]
    output: int


class Gradients(Mapping):
    """Gradient map {node-id -> Tensor}, also indexable by the tensors themselves."""

    def __init__(self, arrays: Dict[int, np.ndarray], index: Dict[int, int], shapes: Dict[int, Tuple[int, ...]],
                 dtype):
        self._arrays = arrays
        self._index = index
        self._shapes = shapes
        self._dtype = dtype

    def _node(self, key: Union[int, "Tensor"]) -> Optional[int]:
        if isinstance(key, Tensor):
            return self._index.get(id(key))
        return key

    def array(self, key: Union[int, "Tensor"]) -> np.ndarray:
        node = self._node(key)
        if node is not None and node in self._arrays:
            return self._arrays[node]
        if isinstance(key, Tensor):
            return np.zeros(key.shape, dtype=key.dtype)
        if node in self._shapes:
            return np.zeros(self._shapes[node], dtype=self._dtype)
        raise KeyError(key)

    def __getitem__(self, key: Union[int, "Tensor"]) -> "Tensor":
        return Tensor.wrap(self.array(key), requires_grad=False)

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)


class Tape:
    _serials = itertools.count(1)

    def __init__(self):
        self.serial = next(Tape._serials)
        self.records: List[TapeRecord] = []
        self._index: Dict[int, int] = {}
        self._tensors: Dict[int, "Tensor"] = {}
        self._shapes: Dict[int, Tuple[int, ...]] = {}
        self._leaves: set = set()
        self._next_id = 0
        self._consumed = False

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _state.tapes.remove(self)

    def _assign(self, tensor: "Tensor") -> int:
        node = self._next_id
        self._next_id += 1
        self._index[id(tensor)] = node
        self._tensors[node] = tensor
        self._shapes[node] = tensor.shape
        return node

    def node_of(self, tensor: "Tensor") -> Optional[int]:
        node = self._index.get(id(tensor))
        if node is None and tensor.requires_grad:
            node = self._assign(tensor)
            self._leaves.add(node)
        return node

    def record(self, function: Function, inputs: Sequence["Tensor"], output: "Tensor") -> None:
        input_nodes = tuple(self.node_of(t) if t.requires_grad else None for t in inputs)
        self.records.append(TapeRecord(function, input_nodes, self._assign(output)))

    def backward(self, loss: "Tensor") -> Gradients:
        if self._consumed:
            raise ContractError("backward was already called on this tape recording")
        node = self._index.get(id(loss))
        if node is None:
            raise ContractError("loss was not produced on this tape")
        if loss.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: Dict[int, np.ndarray] = {node: np.ones_like(loss.data)}
        for record in reversed(self.records):
            grad = grads.get(record.output)
            if grad is None:
                continue
            if record.output not in self._leaves:
                del grads[record.output]
            input_grads = record.function.backward(grad)
            for input_node, input_grad in zip(record.inputs, input_grads):
                if input_node is None or input_grad is None:
                    continue
                if input_node in grads:
                    grads[input_node] = grads[input_node] + input_grad
                else:
                    grads[input_node] = input_grad
        leaf_grads = {n: g for n, g in grads.items() if n in self._leaves}
        return Gradients(leaf_grads, dict(self._index), dict(self._shapes), loss.dtype)


class Tensor:
    """n-dimensional array taking part in tape recording."""

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.requires_grad = requires_grad

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self) -> Optional[int]:
        tape = active_tape()
        if tape is None:
            return None
        return tape._index.get(id(self))

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def _coerce(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.dtype)

    # Arithmetic
    def __add__(self, other):
        return F.Add.apply(self, self._coerce(other))

    def __radd__(self, other):
        return F.Add.apply(self._coerce(other), self)

    def __sub__(self, other):
        return F.Sub.apply(self, self._coerce(other))

    def __rsub__(self, other):
        return F.Sub.apply(self._coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return F.Scale.apply(self, factor=float(other))
        return F.Mul.apply(self, self._coerce(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return F.Scale.apply(self, factor=1.0 / float(other))
        return F.Div.apply(self, self._coerce(other))

    def __rtruediv__(self, other):
        return F.Div.apply(self._coerce(other), self)

    def __neg__(self):
        return F.Scale.apply(self, factor=-1.0)

    def __pow__(self, exponent: int):
        return F.Pow.apply(self, exponent=exponent)

    def __matmul__(self, other):
        return F.MatMul.apply(self, self._coerce(other))

    # Reductions and elementwise maps
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return F.Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return F.Mean.apply(self, axis=axis, keepdims=keepdims)

    def log(self) -> "Tensor":
        return F.Log.apply(self)

    def log2(self) -> "Tensor":
        return F.Log2.apply(self)

    def exp(self) -> "Tensor":
        return F.Exp.apply(self)

    def relu(self) -> "Tensor":
        return F.ReLU.apply(self)

    def square(self) -> "Tensor":
        return F.Pow.apply(self, exponent=2)

    def softmax(self, axis: int = 1) -> "Tensor":
        return F.Softmax.apply(self, axis=axis)

    def log_softmax(self, axis: int = 1) -> "Tensor":
        return F.LogSoftmax.apply(self, axis=axis)

    # Shape and matrix helpers
    def reshape(self, *shape: int) -> "Tensor":
        return F.Reshape.apply(self, shape=shape)

    def transpose(self) -> "Tensor":
        return F.Transpose.apply(self)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def trace(self) -> "Tensor":
        return F.Trace.apply(self)

    def diagonal(self) -> "Tensor":
        return F.Diagonal.apply(self)

    def standardize_columns(self, eps: float = STANDARDIZE_EPS) -> "Tensor":
        return F.StandardizeColumns.apply(self, eps=eps)

    def stop_gradient(self) -> "Tensor":
        return F.StopGradient.apply(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def backward(loss: Tensor) -> Gradients:
    """Backward pass on the active tape."""
    tape = active_tape() or (_state.tapes[-1] if _state.tapes else None)
    if tape is None:
        raise ContractError("backward called with no active tape")
    return tape.backward(loss)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Union[Tensor, np.ndarray],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    skip_kinks: bool = False,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    Runs in double precision. ``max_coords`` samples a seeded subset of coordinates;
    ``skip_kinks`` drops coordinates whose one-sided differences disagree, which happens
    when the stencil straddles a ReLU kink. Explicit flat ``coords`` override ``max_coords``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision("float64"):
        leaf = Tensor(base, requires_grad=True)
        with Tape() as tape:
            out = f(leaf)
            grads = tape.backward(out)
        analytic = grads.array(leaf).reshape(-1)

        def evaluate(values: np.ndarray) -> float:
            with no_record():
                return f(Tensor(values)).item()

        if coords is not None:
            coords = np.unique(np.asarray(coords, dtype=np.int64))
        elif max_coords is not None and max_coords < base.size:
            coords = np.sort(np.random.default_rng(seed).choice(base.size, size=max_coords, replace=False))
        else:
            coords = np.arange(base.size)
        centre = evaluate(base) if skip_kinks else 0.0

        worst = 0.0
        for index in coords:
            shifted = base.copy()
            shifted.flat[index] += step
            f_plus = evaluate(shifted)
            shifted.flat[index] -= 2 * step
            f_minus = evaluate(shifted)
            numeric = (f_plus - f_minus) / (2 * step)
            if skip_kinks:
                forward_slope = (f_plus - centre) / step
                backward_slope = (centre - f_minus) / step
                if abs(forward_slope - backward_slope) > 1e-3 * max(1.0, abs(numeric)):
                    continue
            error = abs(analytic[index] - numeric) / max(1.0, abs(analytic[index]))
            worst = max(worst, float(error))
    return worst


from core import functional as F  # noqa: E402
