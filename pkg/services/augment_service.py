from typing import List, Optional, Tuple

import numpy as np

from core.errors import ContractError
from core.rng import SeededRng
from core.tensor import Tensor
from schemas.schema import AugmentSpec

# Magnitudes of the strong view at distortion strength s = 1
CONTRAST_RANGE = 0.4
BRIGHTNESS_RANGE = 0.2
NOISE_STD = 0.1
AUTO_CONTRAST_PROBABILITY = 0.5


class AugmentService:
    # Weak (geometric) view
    @staticmethod
    def draw_weak(rng: SeededRng) -> AugmentSpec:
        return AugmentSpec(
            level="weak",
            flip_h=rng.random() < 0.5,
            flip_v=rng.random() < 0.5,
            rotation=int(rng.integers(0, 4)) * 90,
            transpose=rng.random() < 0.5,
        )

    @staticmethod
    def apply_weak(array: np.ndarray, spec: AugmentSpec) -> np.ndarray:
        """Geometric transform on the last two axes: rotate, transpose, then flip."""
        out = np.rot90(array, k=spec.rotation // 90, axes=(-2, -1))
        if spec.transpose:
            out = np.swapaxes(out, -2, -1)
        if spec.flip_h:
            out = out[..., :, ::-1]
        if spec.flip_v:
            out = out[..., ::-1, :]
        return np.ascontiguousarray(out)

    @staticmethod
    def weak_augment(image: np.ndarray, mask: Optional[np.ndarray], rng: SeededRng
                     ) -> Tuple[np.ndarray, Optional[np.ndarray], AugmentSpec]:
        if mask is not None and mask.shape[-2:] != image.shape[-2:]:
            raise ContractError(f"image {image.shape} and mask {mask.shape} are not spatially aligned")
        spec = AugmentService.draw_weak(rng)
        out_mask = None if mask is None else AugmentService.apply_weak(mask, spec)
        return AugmentService.apply_weak(image, spec), out_mask, spec

    # Strong (intensity) view
    @staticmethod
    def draw_strong(rng: SeededRng, max_strength: float = 1.0) -> AugmentSpec:
        s = float(rng.uniform(0.0, max_strength))
        contrast = float(rng.uniform(1 - CONTRAST_RANGE * s, 1 + CONTRAST_RANGE * s))
        brightness = float(rng.uniform(-BRIGHTNESS_RANGE * s, BRIGHTNESS_RANGE * s))
        auto_contrast = s > 0 and rng.random() < AUTO_CONTRAST_PROBABILITY
        return AugmentSpec(level="strong", contrast=contrast, brightness=brightness, auto_contrast=auto_contrast,
                           noise_std=NOISE_STD * s, strength=s)

    @staticmethod
    def apply_strong(image: np.ndarray, spec: AugmentSpec, rng: Optional[SeededRng] = None) -> np.ndarray:
        """Jitter, optional auto-contrast, additive Gaussian noise, clamp to [0, 1]. Never moves pixels."""
        out = np.asarray(image, dtype=np.float64)
        if spec.contrast is not None:
            out = out * spec.contrast
        if spec.brightness is not None:
            out = out + spec.brightness
        if spec.auto_contrast:
            low, high = out.min(), out.max()
            if high > low:
                out = (out - low) / (high - low)
        if spec.noise_std:
            if rng is None:
                raise ContractError("a noise draw needs an rng")
            out = out + rng.normal(0.0, spec.noise_std, size=out.shape)
        return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)

    @staticmethod
    def strong_augment(image: np.ndarray, rng: SeededRng, max_strength: float = 1.0) -> np.ndarray:
        spec = AugmentService.draw_strong(rng.child(0), max_strength)
        return AugmentService.apply_strong(image, spec, rng.child(1))

    # Batches; image i uses the sub-stream rng.child(i)
    @staticmethod
    def weak_batch(images: np.ndarray, masks: Optional[np.ndarray], rng: SeededRng
                   ) -> Tuple[np.ndarray, Optional[np.ndarray], List[AugmentSpec]]:
        out_images, out_masks, specs = [], [], []
        for i in range(images.shape[0]):
            image, mask, spec = AugmentService.weak_augment(images[i], None if masks is None else masks[i],
                                                            rng.child(i))
            out_images.append(image)
            out_masks.append(mask)
            specs.append(spec)
        return np.stack(out_images), None if masks is None else np.stack(out_masks), specs

    @staticmethod
    def strong_batch(images: np.ndarray, rng: SeededRng, max_strength: float = 1.0) -> np.ndarray:
        return np.stack([AugmentService.strong_augment(images[i], rng.child(i), max_strength)
                         for i in range(images.shape[0])])

    # Feature-level noise
    @staticmethod
    def f_noise(z: Tensor, gamma: float, rng: SeededRng) -> Tensor:
        """z * (1 + N), N ~ Uniform(-gamma, gamma) elementwise; N is a constant on the tape."""
        if gamma < 0:
            raise ContractError(f"F-noise half-width must be >= 0, got {gamma}")
        noise = rng.uniform(-gamma, gamma, size=z.shape)
        return z * Tensor(1.0 + noise, dtype=z.dtype)
