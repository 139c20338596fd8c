import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from config import settings
from core.entropy import matrix_mutual_information
from core.errors import ContractError, DataIOError
from core.linalg import gram_matrix, trace_normalize
from core.rng import SeededRng
from core.tensor import no_record
from models.network import ModelState
from schemas.config_schema import KernelSpec
from schemas.schema import DatasetManifest, MetricReport, MetricRow, Split
from services.data_service import DataService
from services.model_service import ModelService

logger = logging.getLogger(__name__)


class SurfaceDistance(NamedTuple):
    value: float
    degenerate: bool = False


class SampleMetrics(NamedTuple):
    dsc: float
    hd: SurfaceDistance
    hd95: SurfaceDistance
    asd: SurfaceDistance


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape or a.ndim != 2:
        raise ContractError(f"masks differ in shape: {a.shape} vs {b.shape}")
    return a, b


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the foreground (border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    """ceil(p/100 * n)-th smallest value."""
    ordered = np.sort(values)
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def directed_distances(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """d(p, boundary b) for p on boundary a, and d(q, boundary a) for q on boundary b."""
    points_a = np.argwhere(boundary(a)).astype(np.float64)
    points_b = np.argwhere(boundary(b)).astype(np.float64)
    distances = cdist(points_a, points_b)
    return distances.min(axis=1), distances.min(axis=0)


def _diagonal(shape) -> float:
    return float(math.hypot(*shape))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def hausdorff(a: np.ndarray, b: np.ndarray, percentile: float = 100.0) -> SurfaceDistance:
    a, b = _check_pair(a, b)
    if not a.any() or not b.any():
        return SurfaceDistance(_diagonal(a.shape), True)
    d_ab, d_ba = directed_distances(a, b)
    if percentile >= 100.0:
        return SurfaceDistance(float(max(d_ab.max(), d_ba.max())))
    return SurfaceDistance(max(nearest_rank(d_ab, percentile), nearest_rank(d_ba, percentile)))


def asd(a: np.ndarray, b: np.ndarray) -> SurfaceDistance:
    a, b = _check_pair(a, b)
    if not a.any() or not b.any():
        return SurfaceDistance(_diagonal(a.shape), True)
    d_ab, d_ba = directed_distances(a, b)
    return SurfaceDistance(float((d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba))))


class MetricService:
    @staticmethod
    def sample_metrics(prediction: np.ndarray, truth: np.ndarray) -> SampleMetrics:
        return SampleMetrics(dice(prediction, truth), hausdorff(prediction, truth),
                             hausdorff(prediction, truth, 95.0), asd(prediction, truth))

    @staticmethod
    def evaluate_predictions(predictions: np.ndarray, masks: np.ndarray, split: str, num_classes: int
                             ) -> MetricReport:
        """Per-class means over samples plus the macro mean; degenerate distances are excluded from means."""
        if predictions.shape != masks.shape or len(predictions) == 0:
            raise ContractError(f"cannot evaluate predictions {predictions.shape} against masks {masks.shape}")
        jobs = [(i, c) for i in range(len(predictions)) for c in range(1, num_classes)]
        with ThreadPoolExecutor(max_workers=settings.HDC_THREADS) as pool:
            results = list(pool.map(lambda job: MetricService.sample_metrics(predictions[job[0]] == job[1],
                                                                             masks[job[0]] == job[1]), jobs))
        diagonal = _diagonal(predictions.shape[1:])
        rows: List[MetricRow] = []
        for c in range(1, num_classes):
            per_class = [m for (_, cls), m in zip(jobs, results) if cls == c]

            def mean_distance(key: str) -> float:
                values = [getattr(m, key).value for m in per_class if not getattr(m, key).degenerate]
                return float(np.mean(values)) if values else diagonal

            rows.append(MetricRow(split=split, cls=str(c), dsc=float(np.mean([m.dsc for m in per_class])),
                                  hd=mean_distance("hd"), hd95=mean_distance("hd95"), asd=mean_distance("asd"),
                                  degenerate_count=sum(m.hd.degenerate for m in per_class), n=len(per_class)))
        rows.append(MetricRow(split=split, cls="mean",
                              dsc=float(np.mean([r.dsc for r in rows])), hd=float(np.mean([r.hd for r in rows])),
                              hd95=float(np.mean([r.hd95 for r in rows])), asd=float(np.mean([r.asd for r in rows])),
                              degenerate_count=sum(r.degenerate_count for r in rows), n=len(predictions)))
        return MetricReport(split=split, rows=rows)

    @staticmethod
    def evaluate_model(state: ModelState, manifest: DatasetManifest, split: Union[Split, str],
                       network: str = "student", batch_size: int = 16) -> MetricReport:
        split = Split(split)
        ids = manifest.ids(split)
        if not ids:
            raise ContractError(f"split {split.value!r} is empty")
        if not all(manifest.records[i].labeled for i in ids):
            raise ContractError(f"split {split.value!r} has unlabeled samples")
        predictions, masks = [], []
        for start in range(0, len(ids), batch_size):
            batch = DataService.load_batch(manifest, ids[start:start + batch_size], labeled_only=True)
            predictions.append(ModelService.predict(state, batch.images, network).argmax(axis=1))
            masks.append(batch.masks)
        report = MetricService.evaluate_predictions(np.concatenate(predictions), np.concatenate(masks),
                                                    split.value, manifest.num_classes)
        logger.info("%s split: mean dsc=%.4f hd=%.3f hd95=%.3f asd=%.3f (%d degenerate)", split.value,
                    report.mean.dsc, report.mean.hd, report.mean.hd95, report.mean.asd, report.mean.degenerate_count)
        return report

    @staticmethod
    def mutual_information_diagnostic(state: ModelState, images: np.ndarray, kernel: KernelSpec, gamma: float,
                                      rng: SeededRng) -> Optional[float]:
        """Full matrix MI between main and noisy decoder features on one batch (eigenvalue path), in bits."""
        if len(images) < 2:
            return None
        with no_record():
            out = ModelService.forward_student(state, images, gamma, rng)
            k1 = trace_normalize(gram_matrix(out.f1, kernel))
            k2 = trace_normalize(gram_matrix(out.f2, kernel))
        return matrix_mutual_information(k1, k2, 2.0)

    @staticmethod
    def write_report(report: MetricReport, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(report.to_csv(), encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"cannot write {path}: {e.strerror or e}") from e
        return path
