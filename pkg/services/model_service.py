import logging
from typing import Dict, NamedTuple

import numpy as np

from core import functional as F
from core.errors import ContractError, FormatError
from core.rng import SeededRng
from core.tensor import Tensor, get_default_dtype, no_record
from models.network import Decoder, Encoder, ModelState, mirror, parameter_count
from schemas.config_schema import NetworkConfig
from services.augment_service import AugmentService

logger = logging.getLogger(__name__)


class StudentOutput(NamedTuple):
    p1: Tensor
    p2: Tensor
    zs: Tensor
    f1: Tensor
    f2: Tensor


class TeacherOutput(NamedTuple):
    y_hat: Tensor
    zt: Tensor


def _as_input(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=get_default_dtype())


class ModelService:
    @staticmethod
    def init_model(config: NetworkConfig, rng: SeededRng) -> ModelState:
        """He-normal kernels, zero biases; the decoders draw from separate streams."""
        encoder = Encoder.create(config, rng.child(0))
        decoder1 = Decoder.create("dec1", config, rng.child(1))
        decoder2 = Decoder.create("dec2", config, rng.child(2))
        teacher_encoder, teacher_decoder = mirror(encoder, decoder1)
        state = ModelState(config, encoder, decoder1, decoder2, teacher_encoder, teacher_decoder)
        logger.debug("initialized model with %d student parameters", parameter_count(state.student_parameters()))
        return state

    @staticmethod
    def forward_student(state: ModelState, x, gamma: float, rng: SeededRng) -> StudentOutput:
        """Main decoder on the bottleneck, noisy decoder on its F-noise perturbation."""
        bottleneck, skips = state.encoder(_as_input(x))
        p1, penultimate1 = state.decoder1(bottleneck, skips)
        noisy = AugmentService.f_noise(bottleneck, gamma, rng)
        p2, penultimate2 = state.decoder2(noisy, skips)
        return StudentOutput(p1, p2, F.global_avg_pool(bottleneck), F.global_avg_pool(penultimate1),
                             F.global_avg_pool(penultimate2))

    @staticmethod
    def forward_teacher(state: ModelState, x) -> TeacherOutput:
        with no_record():
            bottleneck, skips = state.teacher_encoder(_as_input(x))
            logits, _ = state.teacher_decoder(bottleneck, skips)
            return TeacherOutput(logits.softmax(axis=1), F.global_avg_pool(bottleneck))

    @staticmethod
    def predict(state: ModelState, x, network: str = "student") -> np.ndarray:
        """Logits of the evaluated network (student = encoder + main decoder), no recording."""
        encoder, decoder = ((state.encoder, state.decoder1) if network == "student"
                            else (state.teacher_encoder, state.teacher_decoder))
        with no_record():
            bottleneck, skips = encoder(_as_input(x))
            logits, _ = decoder(bottleneck, skips)
        return logits.data

    @staticmethod
    def ema_update(state: ModelState, decay: float) -> ModelState:
        """theta_t <- decay * theta_t + (1 - decay) * theta_s for encoder + main decoder."""
        if not 0.0 <= decay <= 1.0:
            raise ContractError(f"EMA decay must lie in [0, 1], got {decay}")
        for (_, teacher), (_, student) in zip(state.teacher_parameters(), state.main_parameters()):
            teacher.data = (decay * teacher.data + (1.0 - decay) * student.data).astype(teacher.dtype, copy=False)
        return state

    @staticmethod
    def parameter_count(state: ModelState) -> Dict[str, int]:
        return {
            "encoder": parameter_count(state.encoder.parameters()),
            "decoder1": parameter_count(state.decoder1.parameters()),
            "decoder2": parameter_count(state.decoder2.parameters()),
            "student": parameter_count(state.student_parameters()),
            "teacher": parameter_count(state.teacher_parameters()),
        }

    @staticmethod
    def to_arrays(state: ModelState) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in state.named_tensors().items()}

    @staticmethod
    def load_arrays(state: ModelState, arrays: Dict[str, np.ndarray]) -> ModelState:
        """Overwrite every parameter of ``state`` from a name -> array map."""
        for name, tensor in state.named_tensors().items():
            if name not in arrays:
                raise FormatError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != tensor.shape:
                raise FormatError(f"parameter {name!r} has shape {arrays[name].shape}, model expects {tensor.shape}")
            tensor.data = np.array(arrays[name], dtype=tensor.dtype)
        return state
