import hashlib
from pathlib import Path

import numpy as np
import pytest

from core.errors import ContractError
from schemas.schema import Split
from services.data_service import FOREGROUND_RANGE, SIDECAR_DIR, DataService
from storage.manifest import read_manifest


def _tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def test_sample_is_determined_by_seed_and_id():
    a = DataService.generate_sample(1, 4, 32, 32)
    b = DataService.generate_sample(1, 4, 32, 32)
    c = DataService.generate_sample(1, 5, 32, 32)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert not np.array_equal(a.image, c.image)


def test_sample_ranges_and_foreground_fraction():
    for sample_id in range(8):
        sample = DataService.generate_sample(2, sample_id, 64, 64)
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
        assert set(np.unique(sample.mask)) <= {0, 1}
        assert FOREGROUND_RANGE[0] <= sample.mask.mean() <= FOREGROUND_RANGE[1]


def test_foreground_is_brighter_on_average():
    sample = DataService.generate_sample(0, 0, 64, 64)
    assert sample.image[sample.mask == 1].mean() > sample.image[sample.mask == 0].mean() * 0.9


def test_three_class_sample_has_both_structures():
    sample = DataService.generate_sample(4, 1, 64, 64, num_classes=3)
    assert set(np.unique(sample.mask)) == {0, 1, 2}


def test_invalid_size_is_rejected():
    with pytest.raises(ContractError, match="divisible"):
        DataService.generate_sample(0, 0, 30, 32)


@pytest.mark.parametrize("n,fraction,expected", [(500, 0.08, 40), (500, 0.1, 50), (10, 0.01, 1), (7, 1.0, 7)])
def test_labeled_count(n, fraction, expected):
    assert DataService.labeled_count(n, fraction) == expected


def test_zero_labeled_fraction_is_rejected():
    with pytest.raises(ContractError, match=r"\(0, 1\]"):
        DataService.labeled_count(10, 0.0)


def test_dataset_layout_and_hidden_masks(tiny_dataset):
    root = Path(tiny_dataset.root)
    assert (tiny_dataset.labeled, tiny_dataset.unlabeled) == (3, 9)
    unlabeled = tiny_dataset.ids(Split.TRAIN, labeled=False)
    for i in unlabeled:
        record = tiny_dataset.records[i]
        assert record.mask is None
        assert not (root / "masks" / "train" / f"{i:06d}.pgm").exists()
        assert (root / SIDECAR_DIR / "masks" / f"{i:06d}.pgm").exists()
    assert len(tiny_dataset.ids(Split.VAL)) == 2 and len(tiny_dataset.ids(Split.TEST)) == 3
    assert read_manifest(root) == tiny_dataset


def test_regeneration_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        DataService.generate_dataset(9, 6, 0.5, 32, 32, tmp_path / name, n_val=1, n_test=1)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_load_batch_shapes_and_mask_policy(tiny_dataset):
    labeled = tiny_dataset.ids(Split.TRAIN, labeled=True)
    batch = DataService.load_batch(tiny_dataset, labeled, labeled_only=True)
    assert batch.images.shape == (3, 3, 32, 32)
    assert batch.images.dtype == np.float32
    assert batch.masks.shape == (3, 32, 32)
    np.testing.assert_array_equal(batch.images[:, 0], batch.images[:, 2])

    unlabeled = tiny_dataset.ids(Split.TRAIN, labeled=False)[:2]
    batch = DataService.load_batch(tiny_dataset, unlabeled, labeled_only=False)
    assert batch.masks is None and batch.labeled == [False, False]
    with pytest.raises(ContractError, match="unlabeled"):
        DataService.load_batch(tiny_dataset, unlabeled, labeled_only=True)


def test_oracle_masks_match_generation(tiny_dataset):
    i = tiny_dataset.ids(Split.TRAIN, labeled=False)[0]
    hidden = DataService.load_oracle_masks(tiny_dataset, [i])[0]
    np.testing.assert_array_equal(hidden, DataService.generate_sample(3, i, 32, 32).mask)


def test_three_class_dataset(three_class_dataset):
    batch = DataService.load_batch(three_class_dataset, three_class_dataset.ids(Split.TEST), labeled_only=True)
    assert batch.masks.max() == 2
