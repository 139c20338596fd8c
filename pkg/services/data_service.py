import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from config import settings
from core.errors import ContractError, FormatError
from core.rng import SeededRng
from core.tensor import get_default_dtype
from schemas.schema import Batch, DatasetManifest, ManifestRecord, Sample, Split
from storage import pgm
from storage.manifest import write_manifest

logger = logging.getLogger(__name__)

BACKGROUND_LEVEL = 0.45
FOREGROUND_LEVEL = 0.55
SECOND_STRUCTURE_LEVEL = 0.65
SPECKLE_SHAPE = 4.0
SHADOW_FACTOR = 0.4
FOREGROUND_RANGE = (0.03, 0.5)
SECOND_STRUCTURE_MIN = 0.01
MAX_ATTEMPTS = 200

BLUR_KERNEL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0

IMAGE_DIR = "images"
MASK_DIR = "masks"
# Masks of unlabeled training samples; only oracle diagnostics read this directory
SIDECAR_DIR = ".oracle"

# Stream for the labeled/unlabeled assignment; sample ids use their own streams
_ASSIGNMENT_STREAM = 1 << 40


def _rotated_coordinates(h: int, w: int, cy: float, cx: float, angle: float) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rows - cy, cols - cx
    cos, sin = math.cos(angle), math.sin(angle)
    return dx * cos + dy * sin, -dx * sin + dy * cos


def _draw_structure(rng: SeededRng, h: int, w: int, scale: Tuple[float, float] = (0.15, 0.40),
                    centre: Optional[Tuple[float, float]] = None) -> Tuple[np.ndarray, float, float, float]:
    """Ellipse or curved band, half-axes a fraction of the image size.

    Returns (region, centre row, centre column, major half-axis).
    """
    size = min(h, w)
    if centre is None:
        cy, cx = rng.uniform(0.3 * h, 0.7 * h), rng.uniform(0.3 * w, 0.7 * w)
    else:
        cy, cx = centre
    a = rng.uniform(*scale) * size
    b = rng.uniform(*scale) * size
    angle = rng.uniform(0.0, math.pi)
    u, v = _rotated_coordinates(h, w, cy, cx, angle)
    if rng.random() < 0.5:
        region = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    else:
        thickness = max(2.0, b / 2)
        curvature = rng.uniform(-1.5, 1.5) / max(a, 1.0)
        region = (np.abs(v - curvature * u ** 2) <= thickness / 2) & (np.abs(u) <= a)
    return region, cy, cx, max(a, b)


def _render(mask: np.ndarray, rng: SeededRng, centre_col: float, half_axis: float) -> np.ndarray:
    h, w = mask.shape
    image = np.full((h, w), BACKGROUND_LEVEL)
    image[mask == 1] = FOREGROUND_LEVEL
    image[mask == 2] = SECOND_STRUCTURE_LEVEL
    image = image * rng.gamma(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE, size=(h, w))

    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(int(rng.integers(0, 3))):
        apex = rng.uniform(centre_col - half_axis, centre_col + half_axis)
        top, bottom = rng.uniform(0.5, 2.0), rng.uniform(3.0, 0.15 * w + 3.0)
        half_width = top + (bottom - top) * rows / max(h - 1, 1)
        image[np.abs(cols - apex) <= half_width] *= SHADOW_FACTOR

    for _ in range(int(rng.integers(1, 3))):
        image = ndimage.convolve(image, BLUR_KERNEL, mode="nearest")
    return np.clip(image, 0.0, 1.0)


class DataService:
    @staticmethod
    def generate_sample(seed: int, sample_id: int, height: int, width: int, num_classes: int = 2) -> Sample:
        """Ultrasound-like image and mask, fully determined by (seed, id)."""
        if height < 32 or width < 32 or height % 8 or width % 8:
            raise ContractError(f"image size {height}x{width} must be >= 32 and divisible by 8")
        if num_classes not in (2, 3):
            raise ContractError(f"synthetic data has 2 or 3 classes, got {num_classes}")
        stream = SeededRng(seed).child(sample_id)
        for attempt in range(MAX_ATTEMPTS):
            rng = stream.child(attempt)
            region, cy, cx, half_axis = _draw_structure(rng.child(0), height, width)
            mask = region.astype(np.uint8)
            if num_classes == 3:
                shape_rng = rng.child(1)
                direction = shape_rng.uniform(0.0, 2 * math.pi)
                offset = half_axis * shape_rng.uniform(0.7, 1.1)
                centre = (cy + offset * math.sin(direction), cx + offset * math.cos(direction))
                second, _, _, _ = _draw_structure(shape_rng, height, width, scale=(0.08, 0.20), centre=centre)
                mask[second & ~region] = 2
                if np.mean(mask == 2) < SECOND_STRUCTURE_MIN:
                    continue
            fraction = float(np.mean(mask > 0))
            if FOREGROUND_RANGE[0] <= fraction <= FOREGROUND_RANGE[1]:
                image = _render(mask, rng.child(2), cx, half_axis)
                return Sample(id=sample_id, image=image, mask=mask, labeled=True)
        raise ContractError(f"no admissible structure for sample {sample_id} after {MAX_ATTEMPTS} attempts")

    @staticmethod
    def labeled_count(n_total: int, labeled_fraction: float) -> int:
        if not 0 < labeled_fraction <= 1:
            raise ContractError(f"labeled fraction must lie in (0, 1], got {labeled_fraction}")
        return min(n_total, max(1, int(round(n_total * labeled_fraction))))

    @staticmethod
    def generate_dataset(seed: int, n_total: int, labeled_fraction: float, height: int, width: int,
                         out_dir: Union[str, Path], n_val: int = 10, n_test: int = 50,
                         num_classes: int = 2) -> DatasetManifest:
        """Writes images, masks, the oracle sidecar and ``manifest.txt`` under ``out_dir``."""
        out_dir = Path(out_dir)
        n_labeled = DataService.labeled_count(n_total, labeled_fraction)
        order = SeededRng(seed).child(_ASSIGNMENT_STREAM).permutation(n_total)
        labeled_ids = set(int(i) for i in order[:n_labeled])

        plan: List[Tuple[int, Split, bool]] = [(i, Split.TRAIN, i in labeled_ids) for i in range(n_total)]
        plan += [(n_total + i, Split.VAL, True) for i in range(n_val)]
        plan += [(n_total + n_val + i, Split.TEST, True) for i in range(n_test)]

        def write(entry: Tuple[int, Split, bool]) -> ManifestRecord:
            sample_id, split, labeled = entry
            sample = DataService.generate_sample(seed, sample_id, height, width, num_classes)
            name = f"{sample_id:06d}.pgm"
            image_path = f"{IMAGE_DIR}/{split.value}/{name}"
            pgm.write_pgm(out_dir / image_path, pgm.to_pixels(sample.image))
            if labeled:
                mask_path = f"{MASK_DIR}/{split.value}/{name}"
                pgm.write_pgm(out_dir / mask_path, sample.mask)
                return ManifestRecord(split=split, image=image_path, mask=mask_path)
            pgm.write_pgm(out_dir / SIDECAR_DIR / MASK_DIR / name, sample.mask)
            return ManifestRecord(split=split, image=image_path)

        with ThreadPoolExecutor(max_workers=settings.HDC_THREADS) as pool:
            records = list(pool.map(write, plan))

        manifest = DatasetManifest(root=str(out_dir), seed=seed, width=width, height=height, labeled=n_labeled,
                                   unlabeled=n_total - n_labeled, num_classes=num_classes, records=records)
        write_manifest(manifest)
        logger.info("wrote %d samples (%d labeled, %d unlabeled, %d val, %d test) to %s", len(records),
                    n_labeled, n_total - n_labeled, n_val, n_test, out_dir)
        return manifest

    @staticmethod
    def _read_checked(path: Path, manifest: DatasetManifest) -> np.ndarray:
        pixels = pgm.read_pgm(path)
        if pixels.shape != (manifest.height, manifest.width):
            raise FormatError(f"image is {pixels.shape[1]}x{pixels.shape[0]}, manifest says "
                              f"{manifest.width}x{manifest.height}", path=str(path))
        return pixels

    @staticmethod
    def load_batch(manifest: DatasetManifest, ids: Sequence[int], labeled_only: bool) -> Batch:
        """Images as B x 3 x H x W in [0, 1]; masks (class indices) only when every record has one.

        Masks are opened only through manifest mask paths, so unlabeled records never touch
        a mask file.
        """
        root = Path(manifest.root)
        images, masks, flags = [], [], []
        for i in ids:
            if not 0 <= i < len(manifest.records):
                raise ContractError(f"sample id {i} is outside the manifest (0..{len(manifest.records) - 1})")
            record = manifest.records[i]
            if labeled_only and not record.labeled:
                raise ContractError(f"sample {i} is unlabeled but a labeled batch was requested")
            pixels = DataService._read_checked(root / record.image, manifest)
            images.append(np.repeat(pgm.from_pixels(pixels)[None], 3, axis=0))
            flags.append(record.labeled)
            if record.labeled:
                mask = DataService._read_checked(root / record.mask, manifest)
                if mask.max(initial=0) >= manifest.num_classes:
                    raise FormatError(f"mask holds class {mask.max()} but the dataset has "
                                      f"{manifest.num_classes} classes", path=str(root / record.mask))
                masks.append(mask.astype(np.int64))
        stacked = np.stack(images).astype(get_default_dtype()) if images else np.zeros((0, 3, manifest.height,
                                                                                        manifest.width))
        return Batch(ids=list(ids), images=stacked, masks=np.stack(masks) if masks and all(flags) else None,
                     labeled=flags)

    @staticmethod
    def load_oracle_masks(manifest: DatasetManifest, ids: Sequence[int]) -> np.ndarray:
        """Hidden masks of unlabeled training samples, for diagnostics only."""
        root = Path(manifest.root)
        return np.stack([pgm.read_pgm(root / SIDECAR_DIR / MASK_DIR / f"{i:06d}.pgm").astype(np.int64)
                         for i in ids])
