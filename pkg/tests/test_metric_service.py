import math

import numpy as np
import pytest

from core.errors import ContractError
from core.rng import SeededRng
from schemas.config_schema import NetworkConfig
from schemas.schema import MetricReport, Split
from services.metric_service import MetricService, asd, boundary, dice, hausdorff, nearest_rank
from services.model_service import ModelService


def _mask(shape, *pixels):
    mask = np.zeros(shape, dtype=bool)
    for r, c in pixels:
        mask[r, c] = True
    return mask


def test_boundary_of_a_filled_square():
    square = np.zeros((7, 7), dtype=bool)
    square[1:6, 1:6] = True
    edge = boundary(square)
    assert edge.sum() == 16
    assert not edge[3, 3]


def test_boundary_counts_the_image_border_as_outside():
    assert boundary(np.ones((3, 3), dtype=bool)).sum() == 8


def test_three_four_five_hausdorff():
    assert hausdorff(_mask((16, 16), (0, 0)), _mask((16, 16), (3, 4))).value == 5.0


def test_parallel_lines_asd():
    a, b = np.zeros((16, 16), dtype=bool), np.zeros((16, 16), dtype=bool)
    a[2, 2:10] = True
    b[5, 2:10] = True
    assert asd(a, b).value == 3.0
    assert hausdorff(a, b).value == 3.0


def test_hd95_ignores_a_single_outlier():
    a = np.zeros((64, 64), dtype=bool)
    a[10, 0:40] = True
    b = a.copy()
    b[50, 60] = True
    assert hausdorff(a, b, 95.0).value == 0.0
    assert hausdorff(a, b).value == pytest.approx(math.hypot(40, 21))


def test_nearest_rank():
    values = np.arange(1.0, 21.0)
    assert nearest_rank(values, 95.0) == 19.0
    assert nearest_rank(values, 100.0) == 20.0
    assert nearest_rank(np.array([4.0]), 95.0) == 4.0


def test_dice_cases():
    a = _mask((8, 8), (1, 1), (1, 2))
    b = _mask((8, 8), (1, 2), (1, 3))
    assert dice(a, b) == 0.5
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    with pytest.raises(ContractError, match=r"\(4, 4\)"):
        dice(np.zeros((4, 4)), np.zeros((4, 5)))


def test_empty_masks_give_the_diagonal_and_a_flag():
    result = hausdorff(np.zeros((6, 8)), _mask((6, 8), (2, 2)))
    assert result.degenerate and result.value == 10.0
    assert asd(_mask((6, 8), (2, 2)), np.zeros((6, 8))).degenerate


def test_random_pairs_are_symmetric_and_ordered():
    rng = SeededRng(31)
    for _ in range(200):
        a = rng.uniform(size=(12, 12)) < 0.4
        b = rng.uniform(size=(12, 12)) < 0.4
        ab, ba = MetricService.sample_metrics(a, b), MetricService.sample_metrics(b, a)
        assert ab == ba
        assert ab.hd95.value <= ab.hd.value and ab.asd.value <= ab.hd.value
        assert 0.0 <= ab.dsc <= 1.0


def test_translation_invariance():
    a = _mask((16, 16), (3, 3), (3, 4), (4, 4))
    b = _mask((16, 16), (6, 6), (7, 7))
    shifted = [np.roll(m, (4, 5), axis=(0, 1)) for m in (a, b)]
    assert MetricService.sample_metrics(a, b) == MetricService.sample_metrics(*shifted)


def test_report_rows_and_degenerate_exclusion():
    masks = np.zeros((2, 8, 8), dtype=np.int64)
    masks[:, 2:5, 2:5] = 1
    predictions = masks.copy()
    predictions[1] = 0
    report = MetricService.evaluate_predictions(predictions, masks, "test", 2)
    row = report.row("1")
    assert row.dsc == 0.5
    assert row.hd == 0.0
    assert row.degenerate_count == 1 and row.n == 2
    assert [r.cls for r in report.rows] == ["1", "mean"]


def test_report_csv_layout():
    masks = np.ones((1, 4, 4), dtype=np.int64)
    report = MetricService.evaluate_predictions(masks, masks, "val", 2)
    lines = report.to_csv().splitlines()
    assert lines[0] == MetricReport.CSV_HEADER == "split,class,dsc,hd,hd95,asd,degenerate_count,n"
    assert lines[1].startswith("val,1,1.0,0.0,")
    assert lines[2].startswith("val,mean,")


def test_every_sample_degenerate_reports_the_diagonal():
    masks = np.zeros((2, 6, 8), dtype=np.int64)
    masks[:, 1, 1] = 1
    report = MetricService.evaluate_predictions(np.zeros_like(masks), masks, "test", 2)
    assert report.mean.hd == 10.0 and report.mean.degenerate_count == 2


def test_evaluate_model_three_classes(float64, three_class_dataset):
    state = ModelService.init_model(NetworkConfig(width=4, depth=2, num_classes=3), SeededRng(0))
    report = MetricService.evaluate_model(state, three_class_dataset, Split.VAL)
    assert [r.cls for r in report.rows] == ["1", "2", "mean"]
    assert report.split == "val"


def test_evaluate_model_refuses_unlabeled_train_split(float64, tiny_dataset):
    state = ModelService.init_model(NetworkConfig(width=4, depth=2), SeededRng(0))
    with pytest.raises(ContractError, match="unlabeled"):
        MetricService.evaluate_model(state, tiny_dataset, Split.TRAIN)
