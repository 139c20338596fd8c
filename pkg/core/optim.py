"""Parameter update rules and the cosine learning-rate schedule."""

import math
from typing import Dict, List, Sequence

import numpy as np

from core.errors import ContractError
from core.tensor import Tensor


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    """base_lr * (1 + cos(pi * step / total)) / 2; equals base_lr at 0 and 0 at total."""
    if total <= 0:
        raise ContractError(f"schedule length must be positive, got {total}")
    step = min(max(step, 0), total)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


class Optimizer:
    kind = ""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0

    def _check(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ContractError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        raise NotImplementedError

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count


class SGDMomentum(Optimizer):
    """v <- mu * v + g;  theta <- theta - lr * (v + wd * theta)."""

    kind = "sgd-momentum"

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr):
        self._check(grads)
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g, dtype=p.dtype)
            self.velocity[i] = self.momentum * self.velocity[i] + g
            p.data = (p.data - lr * (self.velocity[i] + self.weight_decay * p.data)).astype(p.dtype, copy=False)
        self.step_count += 1

    def state_arrays(self):
        return {f"velocity.{i}": v for i, v in enumerate(self.velocity)}

    def load_state_arrays(self, arrays, step_count):
        self.velocity = [np.array(arrays[f"velocity.{i}"], dtype=p.dtype) for i, p in enumerate(self.params)]
        self.step_count = step_count


class AdaptiveMoments(Optimizer):
    """Bias-corrected first/second moments with decoupled weight decay (AdamW form)."""

    kind = "adaptive-moments"

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.05):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr):
        self._check(grads)
        self.step_count += 1
        t = self.step_count
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g, dtype=p.dtype)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1 - self.beta1 ** t)
            v_hat = self.v[i] / (1 - self.beta2 ** t)
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)

    def state_arrays(self):
        arrays = {f"m.{i}": m for i, m in enumerate(self.m)}
        arrays.update({f"v.{i}": v for i, v in enumerate(self.v)})
        return arrays

    def load_state_arrays(self, arrays, step_count):
        self.m = [np.array(arrays[f"m.{i}"], dtype=p.dtype) for i, p in enumerate(self.params)]
        self.v = [np.array(arrays[f"v.{i}"], dtype=p.dtype) for i, p in enumerate(self.params)]
        self.step_count = step_count


def build_optimizer(params: Sequence[Tensor], train) -> Optimizer:
    """Optimizer for a ``TrainConfig``."""
    if train.optimizer == "sgd-momentum":
        return SGDMomentum(params, train.lr, momentum=train.momentum, weight_decay=train.effective_weight_decay)
    return AdaptiveMoments(params, train.lr, beta1=train.beta1, beta2=train.beta2, eps=train.adam_eps,
                           weight_decay=train.effective_weight_decay)
