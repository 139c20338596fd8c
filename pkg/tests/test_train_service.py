import csv
import shutil
from pathlib import Path

import numpy as np
import pytest

from core.errors import NumericError
from core.optim import AdaptiveMoments
from core.rng import SeededRng
from core.tensor import Tape, no_record, precision
from schemas.config_schema import NetworkConfig
from schemas.schema import Split
from services.config_service import ConfigService
from services.data_service import DataService
from services.loss_service import LossService
from services.model_service import ModelService
from services.train_service import ABLATION_ROWS, DataPools, TrainLog, TrainService, ema_decay_at
from storage import pgm
from storage.checkpoint import load_checkpoint
from storage.manifest import read_manifest

SUP_ONLY = {"enable_cg": False, "enable_mi": False, "enable_pix": False}


def _params(session):
    return {name: t.data.copy() for name, t in session.model.named_tensors().items()}


def _log_rows(path: Path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


def test_ema_decay_ramp(tiny_config):
    assert ema_decay_at(tiny_config, 0) == 0.0
    assert ema_decay_at(tiny_config, 1) == pytest.approx(0.99 / 2)
    assert ema_decay_at(tiny_config, 50) == 0.99


def test_zero_weights_match_supervised_only_bitwise(tiny_config, tiny_dataset):
    zero_weights = ConfigService.updated(tiny_config, loss={"beta_cg": 0.0, "beta_mi": 0.0, "enable_pix": False})
    sup_only = ConfigService.updated(tiny_config, loss=SUP_ONLY)
    pools = DataPools.load(tiny_dataset)
    results = []
    for config in (zero_weights, sup_only):
        session = TrainService.new_session(config)
        for _ in range(2):
            TrainService.train_step(session, *pools.sample(session))
        results.append(_params(session))
    for name in results[0]:
        assert results[0][name].tobytes() == results[1][name].tobytes()


def test_mi_alone_never_reaches_the_main_decoder(tiny_config, tiny_dataset):
    config = ConfigService.updated(tiny_config, loss={"enable_sup": False, "enable_cg": False, "enable_pix": False})
    session = TrainService.new_session(config)
    labeled, unlabeled = DataPools.load(tiny_dataset).sample(session)
    with Tape() as tape:
        parts = TrainService.compute_losses(session, labeled, unlabeled)
        grads = tape.backward(LossService.total_loss(parts, config.loss))
    assert set(parts) == {"mi"}
    for _, t in session.model.decoder1.parameters():
        assert not np.any(grads.array(t))
    assert any(np.any(grads.array(t)) for _, t in session.model.decoder2.parameters())
    for _, t in session.model.teacher_parameters():
        assert not np.any(grads.array(t))


def test_teacher_only_moves_through_ema(tiny_config, tiny_dataset):
    config = ConfigService.updated(tiny_config, train={"ema_decay": 1.0, "ema_warmup": 0})
    session = TrainService.new_session(config)
    pools = DataPools.load(tiny_dataset)
    teacher = [t.data.copy() for _, t in session.model.teacher_parameters()]
    student = [t.data.copy() for _, t in session.model.student_parameters()]
    record = TrainService.train_step(session, *pools.sample(session))
    assert all(np.array_equal(a, t.data) for a, (_, t) in zip(teacher, session.model.teacher_parameters()))
    assert not all(np.array_equal(a, t.data) for a, (_, t) in zip(student, session.model.student_parameters()))
    assert record.iter == 0 and session.iteration == 1
    assert all(np.isfinite([record.l_sup, record.l_cg, record.l_mi, record.l_pix, record.l_total]))


def test_supervised_loss_falls_on_a_fixed_batch(tiny_dataset):
    with precision("float64"):
        state = ModelService.init_model(NetworkConfig(width=4, depth=2), SeededRng(0))
        batch = DataService.load_batch(tiny_dataset, tiny_dataset.ids(Split.TRAIN, labeled=True), labeled_only=True)
        params = [t for _, t in state.student_parameters()]
        optimizer = AdaptiveMoments(params, lr=1e-4)
        losses = []
        for _ in range(51):
            with Tape() as tape:
                out = ModelService.forward_student(state, batch.images, 0.0, SeededRng(1))
                loss = LossService.supervised_loss(out.p1, out.p2, batch.masks)
                grads = tape.backward(loss)
            losses.append(loss.item())
            optimizer.step([grads.array(p) for p in params], 1e-4)
    decreases = sum(b < a for a, b in zip(losses, losses[1:]))
    assert decreases >= 45


def test_run_experiment_writes_its_artifacts(tiny_config, tiny_dataset, tmp_path):
    result = TrainService.run_experiment(tiny_config, tiny_dataset, tmp_path, progress=False)
    for name in ("train-log.csv", "metrics-test.csv", "effective-config", "last.ckpt", "best.ckpt"):
        assert (tmp_path / name).exists(), name
    rows = _log_rows(tmp_path / "train-log.csv")
    assert rows[0] == ["iter", "l_sup", "l_cg", "l_mi", "l_pix", "l_total", "lr", "grad_norm", "step_seconds"]
    assert [int(r[0]) for r in rows[1:]] == list(range(6))
    assert sorted(result.log.reports) == [3, 6]
    assert result.report.split == "test"
    assert result.parameters["student"] == sum(t.size for _, t in
                                               ModelService.init_model(tiny_config.model, SeededRng(0))
                                               .student_parameters())
    assert ConfigService.load(tmp_path / "effective-config") == tiny_config


def test_runs_are_bitwise_reproducible(tiny_config, tiny_dataset, tmp_path):
    logs = [TrainService.run_experiment(tiny_config, tiny_dataset, tmp_path / name, evaluate=False,
                                        progress=False).log for name in ("a", "b")]
    assert logs[0].to_csv(with_timing=False) == logs[1].to_csv(with_timing=False)


def test_resume_matches_an_uninterrupted_run(tiny_config, tiny_dataset, tmp_path):
    config = ConfigService.updated(tiny_config, train={"iterations": 8})
    full = TrainService.run_experiment(config, tiny_dataset, tmp_path / "full", evaluate=False, progress=False)
    TrainService.run_experiment(config, tiny_dataset, tmp_path / "first", max_steps=4, evaluate=False,
                                progress=False)
    resumed = TrainService.run_experiment(config, tiny_dataset, tmp_path / "second",
                                          resume=tmp_path / "first" / "last.ckpt", evaluate=False, progress=False)
    assert [r.iter for r in resumed.log.records] == [4, 5, 6, 7]
    assert TrainLog(records=full.log.records[4:]).to_csv(False) == resumed.log.to_csv(False)
    full_tensors, full_meta = load_checkpoint(tmp_path / "full" / "last.ckpt")
    resumed_tensors, resumed_meta = load_checkpoint(tmp_path / "second" / "last.ckpt")
    assert full_meta == resumed_meta
    assert full_tensors.keys() == resumed_tensors.keys()
    for name, array in full_tensors.items():
        assert array.tobytes() == resumed_tensors[name].tobytes(), name


def test_checkpoint_round_trip_restores_the_session(tiny_config, tiny_dataset, tmp_path):
    session = TrainService.new_session(tiny_config)
    pools = DataPools.load(tiny_dataset)
    for _ in range(2):
        TrainService.train_step(session, *pools.sample(session))
    TrainService.save(session, tmp_path / "s.ckpt")
    loaded = TrainService.load(tmp_path / "s.ckpt")
    assert loaded.config == tiny_config
    assert loaded.iteration == 2 and loaded.optimizer.step_count == 2
    assert loaded.rng.state() == session.rng.state()
    for name, array in _params(session).items():
        np.testing.assert_array_equal(loaded.model.named_tensors()[name].data, array)
    for name, array in session.optimizer.state_arrays().items():
        np.testing.assert_array_equal(loaded.optimizer.state_arrays()[name], array)


def test_numeric_failure_dumps_the_last_records(tiny_config, tiny_dataset, tmp_path, monkeypatch):
    original = LossService.supervised_loss
    calls = []

    def failing(p1, p2, mask):
        calls.append(1)
        if len(calls) > 3:
            raise NumericError("non-finite supervised loss")
        return original(p1, p2, mask)

    monkeypatch.setattr(LossService, "supervised_loss", staticmethod(failing))
    with pytest.raises(NumericError, match="failure-records.csv") as info:
        TrainService.run_experiment(tiny_config, tiny_dataset, tmp_path, evaluate=False, progress=False)
    assert info.value.exit_code == 4
    rows = _log_rows(tmp_path / "failure-records.csv")
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2]


def test_ablation_rows(tiny_config, tiny_dataset, tmp_path):
    config = ConfigService.updated(tiny_config, train={"iterations": 2, "eval_every": 0})
    summary = TrainService.run_ablation(config, tiny_dataset, tmp_path, seeds=[0])
    rows = _log_rows(tmp_path / "ablation.csv")
    assert rows[0] == ["seed", "row", "dsc", "hd", "hd95", "asd"]
    assert [r[1] for r in rows[1:]] == list(ABLATION_ROWS)
    logs = {row: (tmp_path / "seed0" / row / "train-log.csv").read_text() for row in ABLATION_ROWS}
    assert len(set(logs.values())) == len(ABLATION_ROWS)
    assert summary["full_beats_suponly"] in (True, False)
    assert 0 <= summary["full_best_count"] <= 1
    assert (tmp_path / "ablation-summary.csv").exists()


def test_training_never_reads_unlabeled_masks(tiny_config, tiny_dataset, tmp_path, monkeypatch):
    root = tmp_path / "data"
    shutil.copytree(tiny_dataset.root, root, ignore=shutil.ignore_patterns(".oracle"))
    manifest = read_manifest(root)
    allowed = {(root / r.image).resolve() for r in manifest.records}
    allowed |= {(root / r.mask).resolve() for r in manifest.records if r.labeled}
    reads = []
    original = pgm.read_pgm

    def recording(path):
        reads.append(Path(path).resolve())
        return original(path)

    monkeypatch.setattr(pgm, "read_pgm", recording)
    pools = DataPools.load(manifest)
    assert pools.unlabeled.masks is None
    TrainService.run_experiment(tiny_config, manifest, tmp_path / "run", progress=False)
    assert reads and set(reads) <= allowed


def test_pix_row_total_is_sup_plus_pix(tiny_config, tiny_dataset):
    config = ConfigService.updated(tiny_config, loss=ABLATION_ROWS["pix"])
    session = TrainService.new_session(config)
    labeled, unlabeled = DataPools.load(tiny_dataset).sample(session)
    with Tape():
        parts = TrainService.compute_losses(session, labeled, unlabeled)
        total = LossService.total_loss(parts, config.loss)
    assert set(parts) == {"sup", "pix"}
    assert total.numpy().tobytes() == (parts["sup"].numpy() + parts["pix"].numpy()).tobytes()


# Full-length experiments
@pytest.mark.slow
def test_overfit_one_batch_reaches_low_loss(tiny_dataset):
    state = ModelService.init_model(NetworkConfig(), SeededRng(0))
    batch = DataService.load_batch(tiny_dataset, tiny_dataset.ids(Split.TRAIN, labeled=True), labeled_only=True)
    params = [t for _, t in state.student_parameters()]
    optimizer = AdaptiveMoments(params, lr=1e-3)
    for _ in range(300):
        with Tape() as tape:
            out = ModelService.forward_student(state, batch.images, 0.3, SeededRng(1))
            grads = tape.backward(LossService.supervised_loss(out.p1, out.p2, batch.masks))
        optimizer.step([grads.array(p) for p in params], 1e-3)
    with no_record():
        out = ModelService.forward_student(state, batch.images, 0.3, SeededRng(1))
        final = LossService.supervised_loss(out.p1, out.p2, batch.masks).item()
    assert final < 0.05


@pytest.fixture(scope="module")
def default_split(tmp_path_factory):
    out = tmp_path_factory.mktemp("split")
    return DataService.generate_dataset(seed=0, n_total=500, labeled_fraction=0.1, height=64, width=64,
                                        out_dir=out)


@pytest.mark.slow
def test_supervised_only_smoke_run(default_split, tmp_path):
    config = ConfigService.load(overrides=[f"loss.{key}=false" for key in SUP_ONLY])
    result = TrainService.run_experiment(config, default_split, tmp_path, progress=False)
    assert result.report.mean.dsc > 0.5


@pytest.mark.slow
def test_full_method_beats_supervised_only(default_split, tmp_path):
    summary = TrainService.run_ablation(ConfigService.load(), default_split, tmp_path, seeds=[0, 1, 2])
    assert summary["full_beats_suponly"]
    assert summary["full_best_count"] >= 2
