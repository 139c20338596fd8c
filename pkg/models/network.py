"""Shared-encoder, dual-decoder segmentation network and its EMA teacher.

Architecture for base width w and depth 3 (C classes, 3 input channels)::

    enc0  conv3x3 s1   3   -> w
    enc1  conv3x3 s2   w   -> 2w
    enc2  conv3x3 s2   2w  -> 4w
    enc3  conv3x3 s2   4w  -> 4w     bottleneck, pooled to Zs / Zt (d = 4w)
    up3   up2x, cat enc2, conv3x3   8w -> 2w
    up2   up2x, cat enc1, conv3x3   4w -> w
    up1   up2x, cat enc0, conv3x3   2w -> w   penultimate, pooled to F1 / F2
    head  conv1x1   w -> C

Every conv except the head is followed by ReLU. Each decoder has its own copy of
up3..head; the teacher mirrors the encoder and the main decoder.
"""

import copy
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple

import numpy as np

from core import functional as F
from core.errors import ContractError
from core.rng import SeededRng
from core.tensor import Tensor, get_default_dtype
from schemas.config_schema import NetworkConfig


@dataclass
class ConvLayer:
    name: str
    weight: Tensor
    bias: Tensor
    stride: int = 1
    activation: bool = True

    @classmethod
    def create(cls, name: str, in_channels: int, out_channels: int, kernel: int, rng: SeededRng,
               stride: int = 1, activation: bool = True, requires_grad: bool = True) -> "ConvLayer":
        fan_in = in_channels * kernel * kernel
        values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel, kernel))
        dtype = get_default_dtype()
        weight = Tensor(values, requires_grad=requires_grad, dtype=dtype)
        bias = Tensor(np.zeros(out_channels), requires_grad=requires_grad, dtype=dtype)
        return cls(name, weight, bias, stride, activation)

    def __call__(self, x: Tensor) -> Tensor:
        out = F.conv2d(x, self.weight, self.bias, stride=self.stride)
        return out.relu() if self.activation else out

    def parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield f"{self.name}.weight", self.weight
        yield f"{self.name}.bias", self.bias

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class Encoder:
    layers: List[ConvLayer]

    @classmethod
    def create(cls, config: NetworkConfig, rng: SeededRng, requires_grad: bool = True) -> "Encoder":
        widths = config.stage_widths
        layers = [ConvLayer.create("enc0", config.in_channels, widths[0], 3, rng.child(0), requires_grad=requires_grad)]
        for i in range(1, config.depth + 1):
            layers.append(ConvLayer.create(f"enc{i}", widths[i - 1], widths[i], 3, rng.child(i), stride=2,
                                           requires_grad=requires_grad))
        return cls(layers)

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.layers) - 1)

    def __call__(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        """Returns the bottleneck map and the skip maps (enc0 .. enc{depth-1})."""
        if x.ndim != 4 or x.shape[1] != self.layers[0].in_channels:
            raise ContractError(f"encoder expects B x {self.layers[0].in_channels} x H x W input, got {x.shape}")
        factor = self.downsampling
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ContractError(f"spatial size {x.shape[2]}x{x.shape[3]} is not divisible by {factor}")
        skips = []
        for layer in self.layers[:-1]:
            x = layer(x)
            skips.append(x)
        return self.layers[-1](x), skips

    def parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for layer in self.layers:
            yield from layer.parameters()


@dataclass
class Decoder:
    name: str
    ups: List[ConvLayer]
    head: ConvLayer

    @classmethod
    def create(cls, name: str, config: NetworkConfig, rng: SeededRng, requires_grad: bool = True) -> "Decoder":
        widths = config.stage_widths
        ups = []
        channels = widths[config.depth]
        for i in range(config.depth, 0, -1):
            out_channels = widths[i - 2] if i >= 2 else widths[0]
            # upsampled map concatenated with the enc{i-1} skip
            ups.append(ConvLayer.create(f"{name}.up{i}", channels + widths[i - 1], out_channels, 3, rng.child(i),
                                        requires_grad=requires_grad))
            channels = out_channels
        head = ConvLayer.create(f"{name}.head", widths[0], config.num_classes, 1, rng.child(0), activation=False,
                                requires_grad=requires_grad)
        return cls(name, ups, head)

    def __call__(self, bottleneck: Tensor, skips: List[Tensor]) -> Tuple[Tensor, Tensor]:
        """Returns (logits B x C x H x W, penultimate map)."""
        if len(skips) != len(self.ups):
            raise ContractError(f"{self.name}: expected {len(self.ups)} skip maps, got {len(skips)}")
        x = bottleneck
        for layer, skip in zip(self.ups, reversed(skips)):
            x = layer(F.concat([F.upsample2x(x), skip], axis=1))
        return self.head(x), x

    def parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for layer in self.ups:
            yield from layer.parameters()
        yield from self.head.parameters()


@dataclass
class ModelState:
    """Student (encoder, main decoder, noisy decoder) plus the EMA teacher.

    ``teacher_parameters()`` and ``main_parameters()`` are index-aligned.
    """

    config: NetworkConfig
    encoder: Encoder
    decoder1: Decoder
    decoder2: Decoder
    teacher_encoder: Encoder
    teacher_decoder: Decoder
    iteration: int = 0
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    def main_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.encoder.parameters()) + list(self.decoder1.parameters())

    def student_parameters(self) -> List[Tuple[str, Tensor]]:
        return self.main_parameters() + list(self.decoder2.parameters())

    def teacher_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.teacher_encoder.parameters()) + list(self.teacher_decoder.parameters())

    def named_tensors(self) -> Dict[str, Tensor]:
        """Every parameter under a unique name (teacher entries prefixed ``teacher.``)."""
        tensors = dict(self.student_parameters())
        tensors.update({f"teacher.{name}": t for name, t in self.teacher_parameters()})
        return tensors


def mirror(encoder: Encoder, decoder: Decoder) -> Tuple[Encoder, Decoder]:
    """Deep copy of a student branch with gradients disabled; no tensor is shared."""
    teacher_encoder, teacher_decoder = copy.deepcopy(encoder), copy.deepcopy(decoder)
    for _, tensor in list(teacher_encoder.parameters()) + list(teacher_decoder.parameters()):
        tensor.requires_grad = False
    return teacher_encoder, teacher_decoder


def parameter_count(tensors) -> int:
    return int(sum(t.size for _, t in tensors))
