import logging
from typing import Dict, Optional

import numpy as np

from core import functional as F
from core.entropy import matrix_renyi_entropy_alpha2
from core.errors import ContractError
from core.linalg import gram_matrix, hadamard, trace_normalize
from core.tensor import Tensor
from schemas.config_schema import KernelSpec, LossWeights

logger = logging.getLogger(__name__)

LOSS_NAMES = ("sup", "cg", "mi", "pix")


def _one_hot(mask: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= num_classes:
        raise ContractError(f"mask values must lie in [0, {num_classes}), got range "
                            f"[{mask.min()}, {mask.max()}]")
    return np.moveaxis(np.eye(num_classes, dtype=dtype)[mask.astype(np.int64)], -1, 1)


class LossService:
    @staticmethod
    def cross_entropy(logits: Tensor, mask: np.ndarray) -> Tensor:
        """Mean over images and pixels of -log softmax(logits)[true class]."""
        if logits.ndim != 4 or np.shape(mask) != (logits.shape[0],) + logits.shape[2:]:
            raise ContractError(f"logits {logits.shape} and mask {np.shape(mask)} do not match")
        target = Tensor(_one_hot(mask, logits.shape[1], logits.dtype), dtype=logits.dtype)
        per_pixel = -(logits.log_softmax(axis=1) * target).sum(axis=1)
        return per_pixel.mean()

    @staticmethod
    def supervised_loss(p1: Tensor, p2: Tensor, mask: np.ndarray) -> Tensor:
        if p1.shape != p2.shape:
            raise ContractError(f"decoder outputs differ in shape: {p1.shape} vs {p2.shape}")
        return LossService.cross_entropy(p1, mask) + LossService.cross_entropy(p2, mask)

    @staticmethod
    def correlation_matrix(zs: Tensor, zt: Tensor) -> Tensor:
        """Zs^T Zt / b on column-standardized feature batches."""
        if zs.shape != zt.shape or zs.ndim != 2:
            raise ContractError(f"feature batches differ in shape: {zs.shape} vs {zt.shape}")
        if zs.shape[0] < 2:
            raise ContractError(f"correlation needs a batch of at least 2, got {zs.shape[0]}")
        return (zs.T @ zt) / zs.shape[0]

    @staticmethod
    def cg_loss(c: Tensor, alpha: int = 2, eps: float = 1e-8) -> Tensor:
        """log2(eps + sum_i (C_ii - 1)^(2 alpha))."""
        deviation = c.diagonal() - 1.0
        return ((deviation ** (2 * alpha)).sum() + eps).log2()

    @staticmethod
    def correlation_guidance(zs: Tensor, zt: Tensor, weights: LossWeights) -> Tensor:
        """Standardize student and (gradient-stopped) teacher features, then the CG loss."""
        zs_n = zs.standardize_columns()
        zt_n = F.stop_gradient(zt).standardize_columns()
        return LossService.cg_loss(LossService.correlation_matrix(zs_n, zt_n), weights.cg_alpha, weights.cg_eps)

    @staticmethod
    def mi_loss(f1: Tensor, f2: Tensor, spec: KernelSpec) -> Tensor:
        """H2(K1 o K2) - H2(K2) with K1 built from gradient-stopped main-decoder features."""
        if f1.ndim != 2 or f1.shape[0] != f2.shape[0]:
            raise ContractError(f"feature batches differ in batch size: {f1.shape} vs {f2.shape}")
        if f1.shape[0] < 2:
            raise ContractError(f"mutual information needs a batch of at least 2, got {f1.shape[0]}")
        k1 = trace_normalize(gram_matrix(F.stop_gradient(f1), spec))
        k2 = trace_normalize(gram_matrix(f2, spec))
        k12 = hadamard(k1, k2, check_psd=False)
        return matrix_renyi_entropy_alpha2(k12) - matrix_renyi_entropy_alpha2(k2)

    @staticmethod
    def pixel_consistency_loss(p1u: Tensor, p2u: Tensor, y_hat: Tensor) -> Tensor:
        if not (p1u.shape == p2u.shape == y_hat.shape):
            raise ContractError(f"probability maps differ in shape: {p1u.shape}, {p2u.shape}, {y_hat.shape}")
        target = F.stop_gradient(y_hat)
        return ((p1u - target) ** 2).mean() + ((p2u - target) ** 2).mean()

    @staticmethod
    def active_terms(weights: LossWeights) -> Dict[str, float]:
        """Loss name -> weight for every term that contributes to the total."""
        terms = {"sup": 1.0 if weights.enable_sup else 0.0,
                 "cg": weights.beta_cg if weights.enable_cg else 0.0,
                 "mi": weights.beta_mi if weights.enable_mi else 0.0,
                 "pix": 1.0 if weights.enable_pix else 0.0}
        return {name: w for name, w in terms.items() if w != 0.0}

    @staticmethod
    def total_loss(parts: Dict[str, Optional[Tensor]], weights: LossWeights) -> Tensor:
        """L_sup + beta_cg L_cg + beta_mi L_mi + L_pix over the enabled, nonzero-weight terms."""
        total = None
        for name, weight in LossService.active_terms(weights).items():
            part = parts.get(name)
            if part is None:
                continue
            term = part if weight == 1.0 else part * weight
            total = term if total is None else total + term
        if total is None:
            raise ContractError("no loss term is enabled")
        return total
