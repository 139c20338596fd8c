"""Kernel Gram matrices and small symmetric eigenproblems.

A Gram matrix here is a square ``Tensor`` (b x b) built from a b x d feature batch; it is
symmetric and positive semidefinite for every supported kernel. ``validate_gram`` checks
those invariants on a concrete array.
"""

import logging
from typing import Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist

from core.errors import ContractError, NumericError
from core.tensor import Tensor
from schemas.config_schema import KernelSpec

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-8
# float32 Gram matrices carry roundoff far above 1e-8 in their smallest eigenvalues
PSD_TOL_FLOAT32 = 1e-6


def _as_array(m: Union[Tensor, np.ndarray]) -> np.ndarray:
    return m.data if isinstance(m, Tensor) else np.asarray(m)


def median_bandwidth(z: Union[Tensor, np.ndarray]) -> float:
    """Median pairwise Euclidean distance over i < j; 1.0 when the median is zero."""
    values = np.asarray(_as_array(z), dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise ContractError(f"median bandwidth needs at least 2 feature rows, got shape {values.shape}")
    median = float(np.median(pdist(values)))
    return median if median > 0 else 1.0


def resolve_kernel(z: Union[Tensor, np.ndarray], spec: KernelSpec) -> KernelSpec:
    """Fill in the per-batch median bandwidth when an RBF spec leaves it open."""
    if spec.kind == "rbf" and spec.bandwidth is None:
        return spec.model_copy(update={"bandwidth": median_bandwidth(z)})
    return spec


def gram_matrix(z: Tensor, spec: KernelSpec) -> Tensor:
    """K_ij = k(z_i, z_j), differentiable in z. The RBF bandwidth is a constant."""
    if z.ndim != 2 or z.shape[0] < 1 or z.shape[1] < 1:
        raise ContractError(f"gram matrix expects a b x d feature batch, got shape {z.shape}")
    spec = resolve_kernel(z, spec)
    if spec.kind == "linear":
        kernel = z @ z.T
    elif spec.kind == "polynomial":
        kernel = (z @ z.T + spec.offset) ** spec.degree
    else:
        if spec.bandwidth is None or spec.bandwidth <= 0:
            raise ContractError(f"rbf bandwidth must be > 0, got {spec.bandwidth}")
        squared = (z * z).sum(axis=1, keepdims=True)
        distances = squared + squared.T - 2.0 * (z @ z.T)
        kernel = (distances * (-0.5 / spec.bandwidth ** 2)).exp()
    return (kernel + kernel.T) * 0.5


def trace_normalize(k: Tensor) -> Tensor:
    trace = k.trace()
    if not trace.item() > 0:
        raise NumericError(f"cannot trace-normalize a Gram matrix with trace {trace.item()} (degenerate batch)")
    return k / trace


def psd_tolerance(dtype) -> float:
    return PSD_TOL if np.dtype(dtype) == np.float64 else PSD_TOL_FLOAT32


def hadamard(k1: Tensor, k2: Tensor, check_psd: bool = True) -> Tensor:
    """Entrywise product, renormalized to unit trace."""
    if k1.shape != k2.shape or k1.ndim != 2 or k1.shape[0] != k1.shape[1]:
        raise ContractError(f"hadamard needs two Gram matrices of equal order, got {k1.shape} and {k2.shape}")
    product = trace_normalize(k1 * k2)
    if check_psd:
        smallest = symmetric_eigenvalues(product.data)[-1]
        if smallest < -psd_tolerance(product.dtype):
            raise NumericError(f"Hadamard product lost positive semidefiniteness (min eigenvalue {smallest:.3e})")
    return product


def validate_gram(k: Union[Tensor, np.ndarray], normalized: bool = False) -> None:
    values = np.asarray(_as_array(k), dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ContractError(f"Gram matrix must be square, got shape {values.shape}")
    if np.max(np.abs(values - values.T), initial=0.0) > SYMMETRY_TOL:
        raise ContractError("Gram matrix is not symmetric")
    if symmetric_eigenvalues(values)[-1] < -PSD_TOL:
        raise ContractError("Gram matrix is not positive semidefinite")
    if normalized and abs(np.trace(values) - 1.0) > SYMMETRY_TOL:
        raise ContractError(f"Gram matrix trace is {np.trace(values)}, expected 1")


def jacobi_eigh(m: Union[Tensor, np.ndarray], tol: float = 1e-12, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations. Returns (eigenvalues, eigenvectors) with M = V diag(w) V^T.

    Eigenvalues are in the diagonal order left by the rotations; ``symmetric_eigenvalues``
    sorts them.
    """
    a = np.array(_as_array(m), dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"eigendecomposition needs a square matrix, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_TOL:
        raise ContractError("eigendecomposition needs a symmetric matrix")
    n = a.shape[0]
    v = np.eye(n)
    for sweep in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off < tol:
            return np.diagonal(a).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * col_p - s * col_q, s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * row_p - s * row_q, s * row_p + c * row_q
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vec_p - s * vec_q, s * vec_p + c * vec_q
    off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
    if off < tol:
        return np.diagonal(a).copy(), v
    raise NumericError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps (off-diagonal norm {off:.3e})")


def symmetric_eigenvalues(m: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Real eigenvalues of a symmetric matrix, descending."""
    values, _ = jacobi_eigh(m)
    return np.sort(values)[::-1]
