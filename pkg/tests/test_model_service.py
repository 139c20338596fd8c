import numpy as np
import pytest

from core.errors import ContractError, FormatError
from core.rng import SeededRng
from core.tensor import Tape
from schemas.config_schema import NetworkConfig
from services.model_service import ModelService


@pytest.fixture
def state(float64):
    return ModelService.init_model(NetworkConfig(width=4, depth=2), SeededRng(0))


def test_parameter_counts_at_default_width():
    counts = ModelService.parameter_count(ModelService.init_model(NetworkConfig(), SeededRng(0)))
    assert counts["encoder"] == 60_512
    assert counts["decoder1"] == counts["decoder2"] == 50_786
    assert counts["student"] == 162_084
    assert counts["teacher"] == 60_512 + 50_786


@pytest.mark.parametrize("depth", [2, 3, 4])
def test_forward_shapes(float64, depth):
    config = NetworkConfig(width=4, depth=depth, num_classes=3)
    state = ModelService.init_model(config, SeededRng(1))
    x = SeededRng(2).uniform(size=(2, 3, 32, 32))
    out = ModelService.forward_student(state, x, 0.3, SeededRng(3))
    assert out.p1.shape == out.p2.shape == (2, 3, 32, 32)
    assert out.zs.shape == (2, config.feature_dim)
    assert out.f1.shape == out.f2.shape == (2, 4)
    teacher = ModelService.forward_teacher(state, x)
    np.testing.assert_allclose(teacher.y_hat.numpy().sum(axis=1), 1.0)


def test_teacher_starts_as_a_copy_of_the_main_branch(state):
    x = SeededRng(4).uniform(size=(2, 3, 16, 16))
    np.testing.assert_array_equal(ModelService.predict(state, x, "student"), ModelService.predict(state, x, "teacher"))
    for (_, t), (_, s) in zip(state.teacher_parameters(), state.main_parameters()):
        assert t is not s and not t.requires_grad


def test_noise_only_reaches_the_noisy_decoder(state):
    x = SeededRng(5).uniform(size=(2, 3, 16, 16))
    clean = ModelService.forward_student(state, x, 0.0, SeededRng(6))
    noisy = ModelService.forward_student(state, x, 0.5, SeededRng(6))
    np.testing.assert_array_equal(clean.p1.numpy(), noisy.p1.numpy())
    np.testing.assert_array_equal(clean.zs.numpy(), noisy.zs.numpy())
    assert not np.array_equal(clean.p2.numpy(), noisy.p2.numpy())


def test_teacher_forward_records_nothing(state):
    x = SeededRng(7).uniform(size=(2, 3, 16, 16))
    with Tape() as tape:
        ModelService.forward_teacher(state, x)
    assert tape.records == []


def test_bad_input_is_rejected(state):
    with pytest.raises(ContractError, match="divisible"):
        ModelService.forward_student(state, np.zeros((1, 3, 18, 18)), 0.3, SeededRng(0))
    with pytest.raises(ContractError, match="input"):
        ModelService.forward_student(state, np.zeros((1, 1, 16, 16)), 0.3, SeededRng(0))


@pytest.mark.parametrize("decay", [0.0, 0.5, 0.9, 1.0])
def test_ema_update_matches_the_scalar_formula(state, decay):
    for _, t in state.teacher_parameters():
        t.data = np.full(t.shape, 0.25)
    for _, s in state.main_parameters():
        s.data = np.full(s.shape, -1.5)
    ModelService.ema_update(state, decay)
    expected = decay * 0.25 + (1 - decay) * -1.5
    for _, t in state.teacher_parameters():
        assert np.all(np.abs(t.data - expected) <= np.spacing(abs(expected)))


def test_ema_decay_out_of_range(state):
    with pytest.raises(ContractError):
        ModelService.ema_update(state, 1.5)


def test_array_round_trip_and_shape_check(state):
    arrays = ModelService.to_arrays(state)
    other = ModelService.init_model(NetworkConfig(width=4, depth=2), SeededRng(99))
    ModelService.load_arrays(other, arrays)
    for name, array in ModelService.to_arrays(other).items():
        np.testing.assert_array_equal(array, arrays[name])
    arrays["enc0.weight"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(FormatError, match="enc0.weight"):
        ModelService.load_arrays(other, arrays)
    del arrays["enc0.weight"]
    with pytest.raises(FormatError, match="lacks"):
        ModelService.load_arrays(other, arrays)


def _outputs(state, x):
    out = ModelService.forward_student(state, x, 0.3, SeededRng(4))
    return out.p1.numpy().copy(), out.p2.numpy().copy()


def _nudge(tensor, seed):
    tensor.data = tensor.data + 0.1 * SeededRng(seed).normal(size=tensor.shape)


def test_noisy_decoder_weights_only_reach_the_noisy_output(state):
    x = SeededRng(2).uniform(size=(2, 3, 16, 16))
    p1, p2 = _outputs(state, x)
    _nudge(state.decoder2.ups[0].weight, 5)
    q1, q2 = _outputs(state, x)
    assert q1.tobytes() == p1.tobytes()
    assert not np.array_equal(q2, p2)


def test_encoder_weights_reach_both_decoders(state):
    x = SeededRng(2).uniform(size=(2, 3, 16, 16))
    p1, p2 = _outputs(state, x)
    _nudge(state.encoder.layers[0].weight, 6)
    q1, q2 = _outputs(state, x)
    assert not np.array_equal(q1, p1)
    assert not np.array_equal(q2, p2)
