"""Property suites behind the ``verify`` command.

Each suite is a list of named properties; a property returns ``(passed, detail)``. All
suites run in double precision with fixed seeds, so a run is reproducible.
"""

import logging
import math
import time
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from core import functional as F
from core.entropy import matrix_renyi_entropy, matrix_renyi_entropy_alpha2, renyi_entropy_discrete
from core.errors import HDCError, UsageError, VerificationError
from core.linalg import gram_matrix, hadamard, median_bandwidth, symmetric_eigenvalues, trace_normalize
from core.rng import SeededRng
from core.tensor import Tape, Tensor, finite_diff_check, no_record, precision
from models.network import ConvLayer, ModelState
from schemas.config_schema import ExperimentConfig, KernelSpec, LossWeights, NetworkConfig
from schemas.schema import Batch, VerifyResult
from services.config_service import ConfigService
from services.loss_service import LossService
from services.metric_service import MetricService, asd, dice, hausdorff
from services.model_service import ModelService
from services.train_service import TrainService

logger = logging.getLogger(__name__)

GRADIENT_TOL = 1e-4
GRADIENT_SEEDS = 20
GRADIENT_COORDS = 16
ENTROPY_TOL = 1e-8
ENTROPY_MATRICES = 100
METRIC_PAIRS = 1000
LIMIT_TOL = 1e-9

Check = Callable[[], Tuple[bool, str]]


# Full-model fixture: 4 images, 3 channels, 16 x 16
class _Fixture(NamedTuple):
    state: ModelState
    images: np.ndarray
    masks: np.ndarray
    kernel: KernelSpec
    weights: LossWeights
    gamma: float
    rng: SeededRng


def _fixture(seed: int) -> _Fixture:
    rng = SeededRng(seed)
    state = ModelService.init_model(NetworkConfig(width=4, depth=2), rng.child(0))
    images = rng.child(1).uniform(size=(4, 3, 16, 16))
    masks = rng.child(2).integers(0, 2, size=(4, 16, 16))
    gamma = 0.3
    with no_record():
        out = ModelService.forward_student(state, images, gamma, rng.child(3))
    # fixed bandwidth so the perturbed and unperturbed evaluations see one kernel
    kernel = KernelSpec(kind="rbf", bandwidth=median_bandwidth(out.f2))
    return _Fixture(state, images, masks, kernel, LossWeights(), gamma, rng.child(3))


def _loss(name: str, fx: _Fixture) -> Tensor:
    out = ModelService.forward_student(fx.state, fx.images, fx.gamma, fx.rng.child(0))
    if name == "sup":
        return LossService.supervised_loss(out.p1, out.p2, fx.masks)
    teacher = ModelService.forward_teacher(fx.state, fx.images)
    parts = {
        "cg": lambda: LossService.correlation_guidance(out.zs, teacher.zt, fx.weights),
        "mi": lambda: LossService.mi_loss(out.f1, out.f2, fx.kernel),
        "pix": lambda: LossService.pixel_consistency_loss(out.p1.softmax(axis=1), out.p2.softmax(axis=1),
                                                          teacher.y_hat),
    }
    if name == "total":
        values = {"sup": LossService.supervised_loss(out.p1, out.p2, fx.masks)}
        values.update({key: make() for key, make in parts.items()})
        return LossService.total_loss(values, fx.weights)
    return parts[name]()


def _layers_for(name: str, state: ModelState) -> List[ConvLayer]:
    # main-decoder features enter the MI loss gradient-stopped, so its numeric
    # derivative only matches on noisy-decoder weights
    if name in ("mi", "total"):
        return [state.decoder2.ups[0], state.decoder2.head]
    return [state.encoder.layers[0], state.decoder1.head, state.decoder2.head]


def channel_coords(shape: Sequence[int], seed: int, total: int = GRADIENT_COORDS) -> np.ndarray:
    """Flat weight indices with at least one per output channel, topped up to ``total``."""
    size = int(np.prod(shape))
    per_channel = size // shape[0]
    rng = np.random.default_rng(seed)
    picked = np.arange(shape[0]) * per_channel + rng.integers(0, per_channel, size=shape[0])
    rest = np.setdiff1d(np.arange(size), picked)
    extra = max(0, min(total - picked.size, rest.size))
    return np.sort(np.concatenate([picked, rng.choice(rest, size=extra, replace=False)]))


def _worst_error(name: str, seed: int) -> Tuple[float, str]:
    fx = _fixture(seed)
    worst, where = 0.0, ""
    for layer in _layers_for(name, fx.state):
        original = layer.weight

        def f(t: Tensor) -> Tensor:
            layer.weight = t
            try:
                return _loss(name, fx)
            finally:
                layer.weight = original

        coords = channel_coords(original.shape, seed)
        error = finite_diff_check(f, original.data, seed=seed, skip_kinks=True, coords=coords)
        if error > worst:
            worst, where = error, layer.name
    return worst, where


def _model_gradient(name: str, seeds: int) -> Check:
    def check():
        for seed in range(seeds):
            error, layer = _worst_error(name, seed)
            if not error < GRADIENT_TOL:
                return False, f"seed {seed}: relative error {error:.3e} on {layer}"
        return True, f"{seeds} seeds below {GRADIENT_TOL:g}"
    return check


def _op_gradient(f: Callable[[Tensor], Tensor], shape: Sequence[int], seed: int = 0) -> Check:
    def check():
        x = SeededRng(seed).normal(size=tuple(shape))
        error = finite_diff_check(f, x, skip_kinks=True)
        return error < GRADIENT_TOL, f"relative error {error:.3e}"
    return check


def gradient_suite(seeds: int = GRADIENT_SEEDS) -> Dict[str, Check]:
    weight = SeededRng(7).normal(size=(3, 2, 3, 3))
    return {
        "conv2d": _op_gradient(lambda x: (F.conv2d(x, Tensor(weight), stride=2) ** 2).sum(), (2, 2, 8, 8)),
        "upsample2x": _op_gradient(lambda x: (F.upsample2x(x) ** 2).mean(), (1, 2, 4, 4)),
        "standardize_columns": _op_gradient(lambda x: (x.standardize_columns() ** 3).sum(), (6, 4)),
        "gram_rbf": _op_gradient(lambda x: trace_normalize(gram_matrix(x, KernelSpec(bandwidth=2.0))).log2().sum(),
                                 (5, 3)),
        "gram_polynomial": _op_gradient(
            lambda x: trace_normalize(gram_matrix(x, KernelSpec(kind="polynomial"))).square().sum(), (5, 3)),
        "renyi_alpha2": _op_gradient(
            lambda x: matrix_renyi_entropy_alpha2(trace_normalize(gram_matrix(x, KernelSpec(bandwidth=1.5)))), (6, 4)),
        **{f"model_{name}": _model_gradient(name, seeds) for name in ("sup", "cg", "mi", "pix", "total")},
    }


# Entropy and kernel properties
def _random_gram(rng: SeededRng, b: Optional[int] = None) -> np.ndarray:
    b = b or int(rng.integers(2, 17))
    z = rng.normal(size=(b, int(rng.integers(1, 9))))
    kind = ("rbf", "linear", "polynomial")[int(rng.integers(0, 3))]
    with no_record():
        return trace_normalize(gram_matrix(Tensor(z), KernelSpec(kind=kind))).data


def entropy_suite() -> Dict[str, Check]:
    grams = [_random_gram(SeededRng(11).child(i)) for i in range(ENTROPY_MATRICES)]

    def alpha2_matches_eigen_path():
        worst = max(abs(matrix_renyi_entropy_alpha2(Tensor(k)).item() - matrix_renyi_entropy(k, 2.0)) for k in grams)
        return worst < ENTROPY_TOL, f"max difference {worst:.3e}"

    def entropy_bounds():
        for k in grams:
            upper = math.log2(k.shape[0])
            for alpha in (0.5, 1.0, 2.0, 3.0):
                h = matrix_renyi_entropy(k, alpha)
                if not -ENTROPY_TOL <= h <= upper + ENTROPY_TOL:
                    return False, f"H_{alpha} = {h} outside [0, {upper}] for b = {k.shape[0]}"
        return True, f"{len(grams)} matrices, orders 0.5, 1, 2, 3"

    def hadamard_psd():
        worst = 0.0
        for i, a in enumerate(grams):
            b = _random_gram(SeededRng(12).child(i), a.shape[0])
            with no_record():
                product = hadamard(Tensor(a), Tensor(b), check_psd=False).data
            worst = min(worst, float(symmetric_eigenvalues(product)[-1]))
        return worst >= -ENTROPY_TOL, f"smallest eigenvalue {worst:.3e}"

    def discrete_uniform():
        h = renyi_entropy_discrete(np.full(8, 1 / 8), 2.0)
        return abs(h - 3.0) < ENTROPY_TOL, f"H_2(uniform 8) = {h}"

    def identity_and_rank_one():
        b = 6
        h_identity = matrix_renyi_entropy_alpha2(Tensor(np.eye(b) / b)).item()
        h_rank_one = matrix_renyi_entropy_alpha2(Tensor(np.full((b, b), 1 / b))).item()
        passed = abs(h_identity - math.log2(b)) < ENTROPY_TOL and abs(h_rank_one) < ENTROPY_TOL
        return passed, f"H_2(I/b) = {h_identity}, H_2(rank one) = {h_rank_one}"

    return {
        "alpha2_matches_eigen_path": alpha2_matches_eigen_path,
        "entropy_bounds": entropy_bounds,
        "hadamard_psd": hadamard_psd,
        "discrete_uniform": discrete_uniform,
        "identity_and_rank_one": identity_and_rank_one,
    }


# Segmentation metric oracles
def _points(shape: Tuple[int, int], *pixels: Tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for r, c in pixels:
        mask[r, c] = True
    return mask


def metric_suite(pairs: int = METRIC_PAIRS) -> Dict[str, Check]:
    def three_four_five():
        value = hausdorff(_points((16, 16), (0, 0)), _points((16, 16), (3, 4))).value
        return value == 5.0, f"hd = {value}"

    def parallel_lines():
        a, b = np.zeros((16, 16), dtype=bool), np.zeros((16, 16), dtype=bool)
        a[2, 3:12] = True
        b[5, 3:12] = True
        value = asd(a, b).value
        return value == 3.0, f"asd = {value}"

    def hd95_drops_outlier():
        a = np.zeros((64, 64), dtype=bool)
        a[10, 0:40] = True
        b = a.copy()
        b[50, 60] = True
        hd, hd95 = hausdorff(a, b).value, hausdorff(a, b, 95.0).value
        return hd95 == 0.0 and hd > 40.0, f"hd = {hd}, hd95 = {hd95}"

    def dice_extremes():
        a = _points((8, 8), (1, 1), (2, 2))
        values = dice(a, a), dice(a, _points((8, 8), (5, 5))), dice(np.zeros((8, 8)), np.zeros((8, 8)))
        return values == (1.0, 0.0, 1.0), f"dice = {values}"

    def empty_prediction_is_flagged():
        truth = _points((8, 8), (3, 3))
        result = hausdorff(np.zeros((8, 8)), truth)
        return result.degenerate and result.value == math.hypot(8, 8), f"{result}"

    def random_pairs():
        rng = SeededRng(17)
        for i in range(pairs):
            a = rng.uniform(size=(16, 16)) < 0.3
            b = rng.uniform(size=(16, 16)) < 0.3
            ab, ba = MetricService.sample_metrics(a, b), MetricService.sample_metrics(b, a)
            if ab != ba:
                return False, f"pair {i}: metrics are not symmetric"
            if ab.hd95.value > ab.hd.value or ab.asd.value > ab.hd.value or not 0.0 <= ab.dsc <= 1.0:
                return False, f"pair {i}: ordering violated ({ab})"
            shifted = MetricService.sample_metrics(np.pad(a, ((2, 0), (3, 0))), np.pad(b, ((2, 0), (3, 0))))
            if not np.allclose(shifted[:1] + tuple(m.value for m in shifted[1:]),
                               ab[:1] + tuple(m.value for m in ab[1:])):
                return False, f"pair {i}: metrics change under translation"
        return True, f"{pairs} random pairs"

    return {
        "hausdorff_3_4_5": three_four_five,
        "asd_parallel_lines": parallel_lines,
        "hd95_drops_outlier": hd95_drops_outlier,
        "dice_extremes": dice_extremes,
        "empty_prediction_is_flagged": empty_prediction_is_flagged,
        "random_pairs": random_pairs,
    }


# Stop-gradient partition and the EMA contract
def _gradients(name: str, fx: _Fixture):
    with Tape() as tape:
        loss = _loss(name, fx)
        return tape.backward(loss)


def partition_suite() -> Dict[str, Check]:
    def mi_skips_main_decoder():
        fx = _fixture(0)
        grads = _gradients("mi", fx)
        main = max(float(np.max(np.abs(grads.array(t)))) for _, t in fx.state.decoder1.parameters())
        noisy = max(float(np.max(np.abs(grads.array(t)))) for _, t in fx.state.decoder2.parameters())
        return main == 0.0 and noisy > 0.0, f"max |grad| main decoder {main}, noisy decoder {noisy:.3e}"

    def teacher_receives_no_gradient():
        fx = _fixture(1)
        for name in ("sup", "cg", "mi", "pix", "total"):
            grads = _gradients(name, fx)
            for param, tensor in fx.state.teacher_parameters():
                if np.any(grads.array(tensor) != 0.0):
                    return False, f"{name} loss reaches teacher parameter {param}"
        return True, "all losses"

    def optimizer_leaves_teacher():
        config = ConfigService.updated(ExperimentConfig(), model={"width": 4, "depth": 2},
                                       train={"ema_decay": 1.0, "ema_warmup": 0, "labeled_batch": 2,
                                              "unlabeled_batch": 2, "lr": 1e-2, "precision": "float64"})
        session = TrainService.new_session(config)
        rng = SeededRng(5)
        labeled = Batch(ids=[0, 1], images=rng.uniform(size=(2, 3, 16, 16)),
                        masks=rng.integers(0, 2, size=(2, 16, 16)), labeled=[True, True])
        unlabeled = Batch(ids=[2, 3], images=rng.uniform(size=(2, 3, 16, 16)), labeled=[False, False])
        before_teacher = [t.data.copy() for _, t in session.model.teacher_parameters()]
        before_student = [t.data.copy() for _, t in session.model.student_parameters()]
        TrainService.train_step(session, labeled, unlabeled)
        teacher_same = all(np.array_equal(a, t.data) for a, (_, t) in zip(before_teacher,
                                                                          session.model.teacher_parameters()))
        student_moved = any(not np.array_equal(a, t.data) for a, (_, t) in zip(before_student,
                                                                               session.model.student_parameters()))
        return teacher_same and student_moved, f"teacher unchanged {teacher_same}, student moved {student_moved}"

    return {
        "mi_skips_main_decoder": mi_skips_main_decoder,
        "teacher_receives_no_gradient": teacher_receives_no_gradient,
        "optimizer_leaves_teacher": optimizer_leaves_teacher,
    }


def ema_suite() -> Dict[str, Check]:
    def scalar_fixtures():
        state = ModelService.init_model(NetworkConfig(width=4, depth=2), SeededRng(3))
        teacher_value, student_value = 0.3, 0.7
        for decay in (0.0, 0.5, 0.9, 1.0):
            for _, t in state.teacher_parameters():
                t.data = np.full(t.shape, teacher_value)
            for _, s in state.main_parameters():
                s.data = np.full(s.shape, student_value)
            ModelService.ema_update(state, decay)
            expected = decay * teacher_value + (1.0 - decay) * student_value
            for name, t in state.teacher_parameters():
                if np.max(np.abs(t.data - expected)) > np.spacing(expected):
                    return False, f"decay {decay}: {name} differs from {expected!r} by more than 1 ulp"
        return True, "decay 0, 0.5, 0.9, 1"

    def noisy_decoder_excluded():
        state = ModelService.init_model(NetworkConfig(width=4, depth=2), SeededRng(4))
        before = [t.data.copy() for _, t in state.teacher_parameters()]
        for _, s in state.decoder2.parameters():
            s.data = s.data + 1.0
        ModelService.ema_update(state, 0.5)
        same = all(np.array_equal(a, t.data) for a, (_, t) in zip(before, state.teacher_parameters()))
        return same, "teacher follows encoder and main decoder only"

    return {"scalar_fixtures": scalar_fixtures, "noisy_decoder_excluded": noisy_decoder_excluded}


# Loss values at their limits
def limit_suite() -> Dict[str, Check]:
    weights = LossWeights()

    def cg_perfect_correlation():
        z = Tensor(SeededRng(21).normal(size=(8, 6)))
        value = LossService.correlation_guidance(z, z, weights).item()
        expected = math.log2(weights.cg_eps)
        return abs(value - expected) < LIMIT_TOL, f"cg = {value!r}, log2(eps) = {expected!r}"

    def mi_rank_one_main_branch():
        rng = SeededRng(22)
        f1 = Tensor(np.tile(rng.normal(size=(1, 5)), (6, 1)))
        f2 = Tensor(rng.normal(size=(6, 5)))
        value = LossService.mi_loss(f1, f2, KernelSpec()).item()
        return abs(value) < LIMIT_TOL, f"mi = {value!r}"

    def pixel_agreement():
        p = Tensor(SeededRng(23).normal(size=(2, 2, 4, 4))).softmax(axis=1)
        value = LossService.pixel_consistency_loss(p, p, p).item()
        return value == 0.0, f"pix = {value!r}"

    return {
        "cg_perfect_correlation": cg_perfect_correlation,
        "mi_rank_one_main_branch": mi_rank_one_main_branch,
        "pixel_agreement": pixel_agreement,
    }


SUITES: Dict[str, Callable[[], Dict[str, Check]]] = {
    "gradient": gradient_suite,
    "entropy": entropy_suite,
    "metrics": metric_suite,
    "partition": partition_suite,
    "ema": ema_suite,
    "limits": limit_suite,
}


class VerifyService:
    @staticmethod
    def run(suites: Optional[Sequence[str]] = None) -> List[VerifyResult]:
        names = list(suites or SUITES)
        unknown = [n for n in names if n not in SUITES]
        if unknown:
            raise UsageError(f"unknown verify suite(s) {', '.join(unknown)}; choose from {', '.join(SUITES)}")
        results: List[VerifyResult] = []
        with precision("float64"):
            for suite in names:
                for prop, check in SUITES[suite]().items():
                    started = time.perf_counter()
                    try:
                        passed, detail = check()
                    except HDCError as e:
                        passed, detail = False, f"{type(e).__name__}: {e.detail}"
                    result = VerifyResult(suite=suite, prop=prop, passed=bool(passed), detail=detail,
                                          seconds=time.perf_counter() - started)
                    if result.passed:
                        logger.info("%s.%s passed (%s)", suite, prop, detail)
                    else:
                        logger.error("%s.%s FAILED (%s)", suite, prop, detail)
                    results.append(result)
        return results

    @staticmethod
    def table(results: Sequence[VerifyResult]) -> str:
        width = max((len(r.suite) + len(r.prop) + 1 for r in results), default=10)
        lines = [f"{'property':<{width}}  result  seconds  detail"]
        for r in results:
            lines.append(f"{r.suite + '.' + r.prop:<{width}}  {'pass' if r.passed else 'FAIL':<6}  "
                         f"{r.seconds:7.2f}  {r.detail}")
        return "\n".join(lines)

    @staticmethod
    def require_all(results: Sequence[VerifyResult]) -> None:
        failed = [f"{r.suite}.{r.prop}" for r in results if not r.passed]
        if failed:
            raise VerificationError(f"{len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed: "
                                    f"{', '.join(failed)}")
