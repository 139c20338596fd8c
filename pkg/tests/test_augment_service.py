import numpy as np
import pytest
from pydantic import ValidationError

from core.errors import ContractError
from core.rng import SeededRng
from core.tensor import Tensor
from schemas.schema import AugmentSpec
from services.augment_service import AugmentService


def test_weak_view_moves_image_and_mask_together(rng):
    image = rng.uniform(size=(3, 16, 16))
    mask = (image[0] > 0.5).astype(np.int64)
    for i in range(20):
        out_image, out_mask, spec = AugmentService.weak_augment(image, mask, SeededRng(5).child(i))
        np.testing.assert_array_equal(out_mask, (out_image[0] > 0.5).astype(np.int64))
        assert spec.level == "weak"


def test_weak_view_is_a_permutation_of_pixels(rng):
    image = rng.uniform(size=(1, 8, 8))
    out, _, _ = AugmentService.weak_augment(image, None, rng)
    np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(image.ravel()))


def test_weak_replay_from_spec():
    image = np.arange(16.0).reshape(1, 4, 4)
    spec = AugmentSpec(level="weak", rotation=90, flip_h=True)
    expected = np.rot90(image, k=1, axes=(-2, -1))[..., :, ::-1]
    np.testing.assert_array_equal(AugmentService.apply_weak(image, spec), expected)


def test_identity_specs_leave_images_unchanged(rng):
    image = rng.uniform(size=(3, 8, 8))
    np.testing.assert_array_equal(AugmentService.apply_weak(image, AugmentSpec(level="weak")), image)
    np.testing.assert_array_equal(AugmentService.apply_strong(image, AugmentSpec(level="strong")), image)


def test_strong_view_keeps_geometry_and_range(rng):
    image = np.zeros((3, 16, 16))
    image[:, 4:8, 4:8] = 0.9
    out = AugmentService.strong_augment(image, SeededRng(8), max_strength=0.0)
    np.testing.assert_array_equal(out, image)
    for i in range(10):
        out = AugmentService.strong_augment(image, SeededRng(8).child(i))
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.shape == image.shape


def test_same_stream_gives_the_same_view(rng):
    images = rng.uniform(size=(4, 3, 8, 8))
    a = AugmentService.strong_batch(images, SeededRng(3))
    b = AugmentService.strong_batch(images, SeededRng(3))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a[0], a[1])


def test_spec_levels_are_exclusive():
    with pytest.raises(ValidationError):
        AugmentSpec(level="weak", contrast=1.1)
    with pytest.raises(ValidationError):
        AugmentSpec(level="strong", flip_h=True)


def test_f_noise_bounds(float64, rng):
    z = Tensor(np.ones((4, 8)))
    noisy = AugmentService.f_noise(z, 0.3, rng).numpy()
    assert noisy.min() >= 0.7 and noisy.max() <= 1.3
    np.testing.assert_array_equal(AugmentService.f_noise(z, 0.0, rng).numpy(), z.numpy())
    with pytest.raises(ContractError):
        AugmentService.f_noise(z, -0.1, rng)


def test_two_quarter_turns_make_a_half_turn(rng):
    image = rng.uniform(size=(3, 8, 8))
    quarter = AugmentSpec(level="weak", rotation=90)
    twice = AugmentService.apply_weak(AugmentService.apply_weak(image, quarter), quarter)
    np.testing.assert_array_equal(twice, AugmentService.apply_weak(image, AugmentSpec(level="weak", rotation=180)))


def test_horizontal_flip_moves_a_left_half_mask_right():
    mask = np.zeros((6, 6), dtype=np.int64)
    mask[:, :3] = 1
    flipped = AugmentService.apply_weak(mask, AugmentSpec(level="weak", flip_h=True))
    assert np.all(flipped[:, 3:] == 1) and np.all(flipped[:, :3] == 0)


def test_jitter_is_affine():
    image = np.full((3, 4, 4), 0.5)
    out = AugmentService.apply_strong(image, AugmentSpec(level="strong", contrast=1.2, brightness=0.1, strength=0.5))
    np.testing.assert_allclose(out, 0.7, atol=1e-12)


def test_auto_contrast_rescales_to_the_unit_range():
    image = np.array([[[0.2, 0.45, 0.7]]])
    out = AugmentService.apply_strong(image, AugmentSpec(level="strong", auto_contrast=True, strength=0.5))
    np.testing.assert_allclose(out, [[[0.0, 0.5, 1.0]]], atol=1e-12)


def test_f_noise_is_unbiased(float64):
    draws, gamma = 100_000, 0.3
    z = np.array([1.5, -0.4, 2.0, -3.0])
    noisy = AugmentService.f_noise(Tensor(np.tile(z, (draws, 1))), gamma, SeededRng(17)).numpy()
    tolerance = 3 * gamma * np.abs(z) / np.sqrt(3 * draws)
    assert np.all(np.abs(noisy.mean(axis=0) - z) <= tolerance)


def test_f_noise_keeps_zero_features_zero(float64, rng):
    z = Tensor(np.zeros((3, 5)))
    np.testing.assert_array_equal(AugmentService.f_noise(z, 0.3, rng).numpy(), 0.0)
