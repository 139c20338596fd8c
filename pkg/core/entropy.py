"""Rényi entropies in bits: discrete, matrix-based (eigenvalue path), and the α=2 closed form.

The eigenvalue path is an analysis/oracle path and is not differentiable. Training uses
``matrix_renyi_entropy_alpha2``, which only needs traces.
"""

from typing import Union

import numpy as np

from core.errors import ContractError, NumericError
from core.linalg import hadamard, symmetric_eigenvalues
from core.tensor import Tensor, no_record

EIGEN_CLAMP = 1e-12
NORMALIZATION_TOL = 1e-6


def _check_order(alpha: float) -> None:
    if not alpha > 0:
        raise ContractError(f"Rényi order must be > 0, got {alpha}")


def _renyi_bits(p: np.ndarray, alpha: float) -> float:
    support = p[p > 0]
    if alpha == 1:
        return float(-np.sum(support * np.log2(support)))
    return float(np.log2(np.sum(support ** alpha)) / (1.0 - alpha))


def renyi_entropy_discrete(p, alpha: float) -> float:
    """(1/(1-α)) log2 Σ p_i^α; the Shannon entropy at α = 1 (0 log 0 = 0)."""
    _check_order(alpha)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if np.any(p < 0):
        raise ContractError("probability vector has negative entries")
    if abs(p.sum() - 1.0) > NORMALIZATION_TOL:
        raise ContractError(f"probability vector sums to {p.sum()}, expected 1")
    return _renyi_bits(p, alpha)


def _check_normalized(k: np.ndarray, tol: float = NORMALIZATION_TOL) -> None:
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ContractError(f"expected a square Gram matrix, got shape {k.shape}")
    if abs(float(np.trace(k)) - 1.0) > tol:
        raise ContractError(f"Gram matrix is not trace-normalized (trace {np.trace(k)})")


def matrix_renyi_entropy(k: Union[Tensor, np.ndarray], alpha: float) -> float:
    """Rényi entropy of the eigenvalue spectrum of a trace-1 PSD matrix."""
    _check_order(alpha)
    values = np.asarray(k.data if isinstance(k, Tensor) else k, dtype=np.float64)
    _check_normalized(values)
    eigenvalues = symmetric_eigenvalues(values)
    eigenvalues[eigenvalues < EIGEN_CLAMP] = 0.0
    return _renyi_bits(eigenvalues, alpha)


def matrix_renyi_entropy_alpha2(k: Tensor) -> Tensor:
    """-log2 trace(K K) = -log2 ||K||_F^2 for symmetric K, on the tape."""
    tol = NORMALIZATION_TOL if k.dtype == np.float64 else 1e-4
    _check_normalized(k.data, tol)
    purity = (k * k).sum()
    if not purity.item() > 0:
        raise NumericError(f"trace(K^2) = {purity.item()} is not positive; corrupt Gram matrix")
    return -purity.log2()


def matrix_mutual_information(k1: Union[Tensor, np.ndarray], k2: Union[Tensor, np.ndarray], alpha: float) -> float:
    """H(K1) + H(K2) - H(K1 ∘ K2) on the eigenvalue path."""
    k1 = k1 if isinstance(k1, Tensor) else Tensor(np.asarray(k1, dtype=np.float64), dtype=np.float64)
    k2 = k2 if isinstance(k2, Tensor) else Tensor(np.asarray(k2, dtype=np.float64), dtype=np.float64)
    if k1.shape != k2.shape:
        raise ContractError(f"mutual information needs Gram matrices of equal order, got {k1.shape} and {k2.shape}")
    with no_record():
        joint = hadamard(k1, k2, check_psd=False)
    return matrix_renyi_entropy(k1, alpha) + matrix_renyi_entropy(k2, alpha) - matrix_renyi_entropy(joint, alpha)
