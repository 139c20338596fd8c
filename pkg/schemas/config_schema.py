from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False, validate_assignment=True)


# Network
class NetworkConfig(_Section):
    in_channels: int = Field(3, ge=1, description="Input channels (grayscale replicated to 3)")
    num_classes: int = Field(2, ge=2, description="Class count C, background included")
    width: int = Field(16, ge=4, description="Base width w; bottleneck has 4w channels")
    depth: int = Field(3, ge=2, le=4, description="Number of stride-2 downsampling stages")

    @property
    def feature_dim(self) -> int:
        return 4 * self.width

    @property
    def stage_widths(self) -> list:
        return [self.width * min(2 ** i, 4) for i in range(self.depth + 1)]


# Kernel used for the mutual information Gram matrices
class KernelSpec(_Section):
    kind: Literal["rbf", "linear", "polynomial"] = Field("rbf", description="Kernel family")
    bandwidth: Optional[float] = Field(None, description="RBF sigma; empty means per-batch median heuristic")
    degree: int = Field(2, ge=1, description="Polynomial degree")
    offset: float = Field(1.0, ge=0, description="Polynomial offset c in (x.y + c)^p")


# Loss weights and switches
class LossWeights(_Section):
    beta_cg: float = Field(0.5, ge=0, description="Weight of the correlation guidance loss")
    beta_mi: float = Field(0.1, ge=0, description="Weight of the mutual information loss")
    cg_alpha: int = Field(2, ge=1, description="Half-power of the diagonal deviation penalty")
    cg_eps: float = Field(1e-8, gt=0, lt=1, description="Floor inside the correlation loss logarithm")
    enable_sup: bool = Field(True, description="Supervised cross-entropy on labeled batches")
    enable_cg: bool = Field(True, description="Correlation guidance between student and teacher features")
    enable_mi: bool = Field(True, description="Mutual information between main and noisy decoder features")
    enable_pix: bool = Field(True, description="Pixel consistency against teacher probability maps")

    @property
    def uses_unlabeled(self) -> bool:
        return self.enable_cg or self.enable_mi or self.enable_pix


# Training
class TrainConfig(_Section):
    seed: int = Field(0, ge=0, description="Seed for initialization, sampling and augmentation")
    iterations: int = Field(2000, ge=1, description="Optimizer steps")
    labeled_batch: int = Field(8, ge=1, description="Labeled images per step")
    unlabeled_batch: int = Field(8, ge=2, description="Unlabeled images per step (batch statistics need >= 2)")
    optimizer: Literal["adaptive-moments", "sgd-momentum"] = Field("adaptive-moments", description="Update rule")
    lr: float = Field(1e-4, gt=0, description="Initial learning rate of the cosine schedule")
    momentum: float = Field(0.9, ge=0, lt=1, description="SGD momentum")
    beta1: float = Field(0.9, ge=0, lt=1, description="First-moment decay of adaptive moments")
    beta2: float = Field(0.999, ge=0, lt=1, description="Second-moment decay of adaptive moments")
    adam_eps: float = Field(1e-8, gt=0, description="Denominator floor of adaptive moments")
    weight_decay: Optional[float] = Field(None, ge=0, description="Empty means 0.05 (adaptive) or 1e-4 (sgd)")
    ema_decay: float = Field(0.99, ge=0, le=1, description="Teacher EMA decay")
    ema_warmup: int = Field(100, ge=0, description="Iterations of linear EMA-decay ramp from 0")
    noise_gamma: float = Field(0.3, ge=0, description="F-noise half-width")
    strong_strength: float = Field(1.0, ge=0, le=1, description="Upper bound of the random distortion strength")
    eval_every: int = Field(200, ge=0, description="Validation period in iterations (0 disables)")
    log_every: int = Field(50, ge=1, description="Progress log period in iterations")
    max_grad_norm: float = Field(1e4, gt=0, description="Gradient norms above this are reported")
    precision: Literal["float32", "float64"] = Field("float32", description="Element precision")

    @property
    def effective_weight_decay(self) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 0.05 if self.optimizer == "adaptive-moments" else 1e-4


# Synthetic data
class DataConfig(_Section):
    seed: int = Field(0, ge=0, description="Generation seed")
    n_total: int = Field(500, ge=2, description="Training images (labeled + unlabeled)")
    labeled_fraction: float = Field(0.1, gt=0, le=1, description="Fraction of training images with masks")
    height: int = Field(64, ge=32, description="Image height, divisible by 8")
    width: int = Field(64, ge=32, description="Image width, divisible by 8")
    num_classes: int = Field(2, ge=2, le=3, description="2 (structure) or 3 (two structures)")
    n_val: int = Field(10, ge=1, description="Fully labeled validation images")
    n_test: int = Field(50, ge=1, description="Fully labeled test images")

    @model_validator(mode="after")
    def _check_dims(self) -> "DataConfig":
        if self.height % 8 or self.width % 8:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by 8")
        return self


# Evaluation
class EvalConfig(_Section):
    network: Literal["student", "teacher"] = Field("student", description="Network evaluated (student = encoder + main decoder)")
    select: Literal["best", "last"] = Field("last", description="Checkpoint used for the final test report")
    batch_size: int = Field(16, ge=1, description="Images per evaluation forward pass")


class ExperimentConfig(_Section):
    model: NetworkConfig = Field(default_factory=NetworkConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
