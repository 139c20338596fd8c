import csv
import io
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from core.errors import DataIOError, FormatError, NumericError
from core.optim import Optimizer, build_optimizer, cosine_lr
from core.rng import SeededRng
from core.tensor import Tape, precision
from models.network import ModelState
from schemas.config_schema import ExperimentConfig
from schemas.schema import AblationRow, Batch, DatasetManifest, MetricReport, Split, TrainRecord
from services.augment_service import AugmentService
from services.config_service import ConfigService
from services.data_service import DataService
from services.loss_service import LossService
from services.metric_service import MetricService
from services.model_service import ModelService
from storage import checkpoint

logger = logging.getLogger(__name__)

# Independent streams under the training seed
INIT_STREAM = 1
STEP_STREAM = 2
DIAGNOSTIC_STREAM = 3

# Sub-streams of one step
_LABELED_SAMPLE, _UNLABELED_SAMPLE = 0, 1
_LABELED_WEAK, _LABELED_NOISE = 2, 3
_UNLABELED_WEAK, _UNLABELED_STRONG, _UNLABELED_NOISE = 4, 5, 6

FAILURE_TAIL = 10
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"

ABLATION_ROWS: Dict[str, Dict[str, bool]] = {
    "SupOnly": {"enable_pix": False, "enable_cg": False, "enable_mi": False},
    "pix": {"enable_pix": True, "enable_cg": False, "enable_mi": False},
    "pix+cg": {"enable_pix": True, "enable_cg": True, "enable_mi": False},
    "pix+mi": {"enable_pix": True, "enable_cg": False, "enable_mi": True},
    "pix+cg+mi": {"enable_pix": True, "enable_cg": True, "enable_mi": True},
}
FULL_ROW = "pix+cg+mi"


@dataclass
class TrainLog:
    records: List[TrainRecord] = field(default_factory=list)
    reports: Dict[int, MetricReport] = field(default_factory=dict)

    def append(self, record: TrainRecord) -> None:
        if self.records and record.iter <= self.records[-1].iter:
            raise NumericError(f"train log iteration {record.iter} does not follow {self.records[-1].iter}")
        self.records.append(record)

    def to_csv(self, with_timing: bool = True) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TrainRecord.FIXED_COLUMNS + (("step_seconds",) if with_timing else ()))
        for record in self.records:
            writer.writerow(record.row(with_timing))
        return buffer.getvalue()

    def write(self, path: Union[str, Path], with_timing: bool = True) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_csv(with_timing), encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"cannot write {path}: {e.strerror or e}") from e
        return path


@dataclass
class TrainingSession:
    """Everything a train step mutates: model, optimizer, iteration counter, seed streams."""

    config: ExperimentConfig
    model: ModelState
    optimizer: Optimizer
    rng: SeededRng
    iteration: int = 0
    best_dsc: float = -1.0

    @property
    def step_rng(self) -> SeededRng:
        return self.rng.child(STEP_STREAM, self.iteration)


@dataclass
class ExperimentResult:
    log: TrainLog
    report: Optional[MetricReport]
    out_dir: Path
    best_dsc: float
    parameters: Dict[str, int]


@dataclass
class DataPools:
    """Training images held in memory; unlabeled images come without masks."""

    labeled: Batch
    unlabeled: Optional[Batch]

    @classmethod
    def load(cls, manifest: DatasetManifest) -> "DataPools":
        labeled = DataService.load_batch(manifest, manifest.ids(Split.TRAIN, labeled=True), labeled_only=True)
        unlabeled_ids = manifest.ids(Split.TRAIN, labeled=False)
        unlabeled = DataService.load_batch(manifest, unlabeled_ids, labeled_only=False) if unlabeled_ids else None
        return cls(labeled, unlabeled)

    @staticmethod
    def _draw(pool: Batch, size: int, rng: SeededRng) -> Batch:
        picks = rng.choice(len(pool), size=size, replace=len(pool) < size)
        return Batch(ids=[pool.ids[i] for i in picks], images=pool.images[picks],
                     masks=None if pool.masks is None else pool.masks[picks],
                     labeled=[pool.labeled[i] for i in picks])

    def sample(self, session: TrainingSession):
        train = session.config.train
        rng = session.step_rng
        labeled = self._draw(self.labeled, train.labeled_batch, rng.child(_LABELED_SAMPLE))
        unlabeled = None
        if self.unlabeled is not None and len(self.unlabeled) >= 2:
            unlabeled = self._draw(self.unlabeled, train.unlabeled_batch, rng.child(_UNLABELED_SAMPLE))
        return labeled, unlabeled


def ema_decay_at(config: ExperimentConfig, iteration: int) -> float:
    """Linear ramp of the EMA decay from 0 over the warmup iterations."""
    train = config.train
    if train.ema_warmup <= 0:
        return train.ema_decay
    return train.ema_decay * min(1.0, iteration / train.ema_warmup)


class TrainService:
    @staticmethod
    def new_session(config: ExperimentConfig) -> TrainingSession:
        rng = SeededRng(config.train.seed)
        model = ModelService.init_model(config.model, rng.child(INIT_STREAM))
        optimizer = build_optimizer([t for _, t in model.student_parameters()], config.train)
        return TrainingSession(config, model, optimizer, rng)

    @staticmethod
    def compute_losses(session: TrainingSession, labeled: Optional[Batch], unlabeled: Optional[Batch]):
        """Every active loss term of one step, recorded on the active tape."""
        config = session.config
        terms = LossService.active_terms(config.loss)
        gamma = config.train.noise_gamma
        rng = session.step_rng
        model = session.model
        parts = {}

        if "sup" in terms and labeled is not None:
            x, y, _ = AugmentService.weak_batch(labeled.images, labeled.masks, rng.child(_LABELED_WEAK))
            out = ModelService.forward_student(model, x, gamma, rng.child(_LABELED_NOISE))
            parts["sup"] = LossService.supervised_loss(out.p1, out.p2, y)

        if unlabeled is not None and terms.keys() & {"cg", "mi", "pix"}:
            weak, _, _ = AugmentService.weak_batch(unlabeled.images, None, rng.child(_UNLABELED_WEAK))
            teacher = ModelService.forward_teacher(model, weak)
            strong = AugmentService.strong_batch(weak, rng.child(_UNLABELED_STRONG), config.train.strong_strength)
            out = ModelService.forward_student(model, strong, gamma, rng.child(_UNLABELED_NOISE))
            if "pix" in terms:
                parts["pix"] = LossService.pixel_consistency_loss(out.p1.softmax(axis=1), out.p2.softmax(axis=1),
                                                                  teacher.y_hat)
            if "cg" in terms:
                parts["cg"] = LossService.correlation_guidance(out.zs, teacher.zt, config.loss)
            if "mi" in terms:
                parts["mi"] = LossService.mi_loss(out.f1, out.f2, config.kernel)
        return parts

    @staticmethod
    def train_step(session: TrainingSession, labeled: Optional[Batch], unlabeled: Optional[Batch]) -> TrainRecord:
        """Supervised and unsupervised losses, one optimizer step on the student, one EMA update."""
        started = time.perf_counter()
        config = session.config
        lr = cosine_lr(config.train.lr, session.iteration, config.train.iterations)
        params = [t for _, t in session.model.student_parameters()]

        with Tape() as tape:
            parts = TrainService.compute_losses(session, labeled, unlabeled)
            total = LossService.total_loss(parts, config.loss)
            values = {name: part.item() for name, part in parts.items()}
            if not math.isfinite(total.item()):
                raise NumericError(f"non-finite total loss {total.item()} at iteration {session.iteration}")
            grads = tape.backward(total)

        arrays = [grads.array(p) for p in params]
        grad_norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in arrays))
        if not math.isfinite(grad_norm):
            raise NumericError(f"non-finite gradient norm at iteration {session.iteration}")
        if grad_norm > config.train.max_grad_norm:
            logger.warning("gradient norm %.3e exceeds %.1e at iteration %d", grad_norm,
                           config.train.max_grad_norm, session.iteration)
        session.optimizer.step(arrays, lr)
        ModelService.ema_update(session.model, ema_decay_at(config, session.iteration))

        record = TrainRecord(iter=session.iteration, l_sup=values.get("sup", 0.0), l_cg=values.get("cg", 0.0),
                             l_mi=values.get("mi", 0.0), l_pix=values.get("pix", 0.0), l_total=total.item(), lr=lr,
                             grad_norm=grad_norm, step_seconds=time.perf_counter() - started)
        session.iteration += 1
        session.model.iteration = session.iteration
        return record

    # Checkpoints
    @staticmethod
    def save(session: TrainingSession, path: Union[str, Path]) -> Path:
        tensors = {f"param.{name}": array for name, array in ModelService.to_arrays(session.model).items()}
        tensors.update({f"optim.{name}": array for name, array in session.optimizer.state_arrays().items()})
        meta = {
            "config": session.config.model_dump(mode="json"),
            "iteration": session.iteration,
            "rng": session.rng.state(),
            "optimizer": {"kind": session.optimizer.kind, "step_count": session.optimizer.step_count},
            "best_dsc": session.best_dsc,
        }
        return checkpoint.save_checkpoint(path, tensors, meta)

    @staticmethod
    def load(path: Union[str, Path], config: Optional[ExperimentConfig] = None) -> TrainingSession:
        """Session from a checkpoint; ``config`` replaces the stored one (same architecture required)."""
        tensors, meta = checkpoint.load_checkpoint(path)
        try:
            stored = ExperimentConfig.model_validate(meta["config"])
            iteration, rng_state = int(meta["iteration"]), meta["rng"]
            optimizer_meta = meta["optimizer"]
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"checkpoint meta section is incomplete: {e}", path=str(path)) from None
        config = config or stored
        with precision(config.train.precision):
            session = TrainService.new_session(config)
        session.rng = SeededRng.from_state(rng_state)
        params = {name[len("param."):]: array for name, array in tensors.items() if name.startswith("param.")}
        ModelService.load_arrays(session.model, params)
        if optimizer_meta.get("kind") == session.optimizer.kind:
            optim = {name[len("optim."):]: array for name, array in tensors.items() if name.startswith("optim.")}
            try:
                session.optimizer.load_state_arrays(optim, int(optimizer_meta["step_count"]))
            except KeyError as e:
                raise FormatError(f"checkpoint lacks optimizer state {e}", path=str(path)) from None
        else:
            logger.warning("checkpoint optimizer %r differs from configured %r; moments restart",
                           optimizer_meta.get("kind"), session.optimizer.kind)
        session.iteration = iteration
        session.model.iteration = iteration
        session.best_dsc = float(meta.get("best_dsc", -1.0))
        return session

    # Full runs
    @staticmethod
    def _validate(session: TrainingSession, manifest: DatasetManifest, log: TrainLog, out_dir: Path) -> None:
        config = session.config
        if not manifest.ids(Split.VAL):
            return
        report = MetricService.evaluate_model(session.model, manifest, Split.VAL, config.eval.network,
                                              config.eval.batch_size)
        val_ids = manifest.ids(Split.VAL)[:config.eval.batch_size]
        images = DataService.load_batch(manifest, val_ids, labeled_only=True).images
        report.mi_bits = MetricService.mutual_information_diagnostic(
            session.model, images, config.kernel, config.train.noise_gamma,
            session.rng.child(DIAGNOSTIC_STREAM, session.iteration))
        log.reports[session.iteration] = report
        if report.mi_bits is not None:
            logger.info("iteration %d: val mutual information between decoders %.4f bits", session.iteration,
                        report.mi_bits)
        if report.mean.dsc > session.best_dsc:
            session.best_dsc = report.mean.dsc
            TrainService.save(session, out_dir / BEST_CHECKPOINT)
            logger.info("iteration %d: new best val dsc %.4f", session.iteration, report.mean.dsc)

    @staticmethod
    def _dump_failure(log: TrainLog, out_dir: Path) -> Path:
        tail = TrainLog(records=log.records[-FAILURE_TAIL:])
        path = tail.write(out_dir / "failure-records.csv")
        for record in tail.records:
            logger.error("iter=%d l_sup=%r l_cg=%r l_mi=%r l_pix=%r l_total=%r grad_norm=%r", record.iter,
                         record.l_sup, record.l_cg, record.l_mi, record.l_pix, record.l_total, record.grad_norm)
        return path

    @staticmethod
    def run_experiment(config: ExperimentConfig, manifest: DatasetManifest, out_dir: Union[str, Path],
                       max_steps: Optional[int] = None, resume: Union[str, Path, None] = None,
                       evaluate: bool = True, progress: bool = True) -> ExperimentResult:
        """Train, validate periodically, write checkpoints, logs and the final test report.

        ``max_steps`` stops early without changing the schedule (used to split a run in two).
        """
        out_dir = Path(out_dir)
        ConfigService.write(config, out_dir / "effective-config")
        if config.model.num_classes != manifest.num_classes:
            logger.warning("model has %d classes, dataset %d", config.model.num_classes, manifest.num_classes)

        with precision(config.train.precision):
            session = TrainService.load(resume, config) if resume else TrainService.new_session(config)
            counts = ModelService.parameter_count(session.model)
            logger.info("student parameters: %d (encoder %d, decoders %d + %d); teacher %d", counts["student"],
                        counts["encoder"], counts["decoder1"], counts["decoder2"], counts["teacher"])
            pools = DataPools.load(manifest)
            if pools.unlabeled is None and LossService.active_terms(config.loss).keys() & {"cg", "mi", "pix"}:
                logger.warning("dataset has no unlabeled training images; unsupervised losses are skipped")

            stop = config.train.iterations if max_steps is None else min(config.train.iterations, max_steps)
            log = TrainLog()
            steps = tqdm(range(session.iteration, stop), desc="train", file=sys.stderr, leave=False,
                         disable=not progress or not sys.stderr.isatty())
            for _ in steps:
                labeled, unlabeled = pools.sample(session)
                try:
                    record = TrainService.train_step(session, labeled, unlabeled)
                except NumericError as e:
                    path = TrainService._dump_failure(log, out_dir)
                    raise NumericError(f"{e.detail}; last records in {path}") from e
                log.append(record)
                if record.iter % config.train.log_every == 0:
                    logger.info("iter %d: l_sup=%.4f l_cg=%.4f l_mi=%.4f l_pix=%.4f l_total=%.4f lr=%.2e",
                                record.iter, record.l_sup, record.l_cg, record.l_mi, record.l_pix, record.l_total,
                                record.lr)
                if evaluate and config.train.eval_every and session.iteration % config.train.eval_every == 0:
                    TrainService._validate(session, manifest, log, out_dir)
            steps.close()

            TrainService.save(session, out_dir / LAST_CHECKPOINT)
            log.write(out_dir / "train-log.csv")

            report = None
            if evaluate and session.iteration >= config.train.iterations:
                model = session.model
                if config.eval.select == "best" and (out_dir / BEST_CHECKPOINT).exists():
                    model = TrainService.load(out_dir / BEST_CHECKPOINT, config).model
                report = MetricService.evaluate_model(model, manifest, Split.TEST, config.eval.network,
                                                      config.eval.batch_size)
                MetricService.write_report(report, out_dir / "metrics-test.csv")
        return ExperimentResult(log, report, out_dir, session.best_dsc, counts)

    # Loss-switch ablation
    @staticmethod
    def run_ablation(config: ExperimentConfig, manifest: DatasetManifest, out_dir: Union[str, Path],
                     seeds: Sequence[int], rows: Sequence[str] = tuple(ABLATION_ROWS)) -> Dict[str, object]:
        """SupOnly and the loss-switch rows for every seed; writes ablation.csv and ablation-summary.csv."""
        out_dir = Path(out_dir)
        results: List[AblationRow] = []
        for seed in seeds:
            for row in rows:
                row_config = ConfigService.updated(config, train={"seed": seed}, loss=ABLATION_ROWS[row])
                logger.info("ablation seed %d row %s", seed, row)
                result = TrainService.run_experiment(row_config, manifest, out_dir / f"seed{seed}" / row)
                mean = result.report.mean
                results.append(AblationRow(seed=seed, row=row, dsc=mean.dsc, hd=mean.hd, hd95=mean.hd95,
                                           asd=mean.asd))

        table = io.StringIO()
        writer = csv.writer(table, lineterminator="\n")
        writer.writerow(["seed", "row", "dsc", "hd", "hd95", "asd"])
        for r in results:
            writer.writerow([r.seed, r.row, repr(r.dsc), repr(r.hd), repr(r.hd95), repr(r.asd)])

        by_seed = {seed: {r.row: r.dsc for r in results if r.seed == seed} for seed in seeds}
        switch_rows = [r for r in rows if r != "SupOnly"]
        full_beats_sup = all(s[FULL_ROW] > s["SupOnly"] for s in by_seed.values()) \
            if FULL_ROW in rows and "SupOnly" in rows else None
        full_best = sum(max(switch_rows, key=lambda r: s[r]) == FULL_ROW for s in by_seed.values()) \
            if FULL_ROW in rows else 0

        summary = io.StringIO()
        writer = csv.writer(summary, lineterminator="\n")
        writer.writerow(["row", "mean_dsc", "seeds"])
        for row in rows:
            writer.writerow([row, repr(float(np.mean([s[row] for s in by_seed.values()]))), len(seeds)])
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "ablation.csv").write_text(table.getvalue(), encoding="utf-8")
            (out_dir / "ablation-summary.csv").write_text(summary.getvalue(), encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"cannot write ablation tables under {out_dir}: {e.strerror or e}") from e
        return {"rows": results, "full_beats_suponly": full_beats_sup, "full_best_count": full_best}
