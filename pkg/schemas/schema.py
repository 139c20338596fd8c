from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.errors import ContractError


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


UNLABELED = "UNLABELED"


# Augmentation
class AugmentSpec(BaseModel):
    """Every random draw behind one augmented view, kept so the view can be replayed."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    level: Literal["weak", "strong"]
    flip_h: bool = False
    flip_v: bool = False
    rotation: Literal[0, 90, 180, 270] = 0
    transpose: bool = False
    contrast: Optional[float] = None
    brightness: Optional[float] = None
    auto_contrast: bool = False
    noise_std: Optional[float] = None
    strength: float = Field(0.0, ge=0, le=1)

    @model_validator(mode="after")
    def _check_level(self) -> "AugmentSpec":
        intensity = (self.contrast, self.brightness, self.noise_std)
        if self.level == "weak" and (any(v is not None for v in intensity) or self.auto_contrast):
            raise ValueError("weak augmentation carries no intensity components")
        if self.level == "strong" and (self.flip_h or self.flip_v or self.rotation or self.transpose):
            raise ValueError("strong augmentation carries no geometric components")
        return self

    @property
    def is_identity(self) -> bool:
        if self.level == "weak":
            return not (self.flip_h or self.flip_v or self.rotation or self.transpose)
        return self.strength == 0 or (
            self.contrast in (None, 1.0) and self.brightness in (None, 0.0)
            and not self.auto_contrast and not self.noise_std
        )


# Samples and batches hold arrays, so they are plain dataclasses
@dataclass
class Sample:
    id: int
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    labeled: bool = False

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise ContractError(f"image {self.image.shape} and mask {self.mask.shape} are not aligned")


@dataclass
class Batch:
    ids: List[int]
    images: np.ndarray
    masks: Optional[np.ndarray] = None
    labeled: List[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


# Dataset on disk
class ManifestRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    split: Split
    image: str
    mask: Optional[str] = None

    @property
    def labeled(self) -> bool:
        return self.mask is not None


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    root: str
    seed: int
    width: int
    height: int
    labeled: int
    unlabeled: int
    num_classes: int = 2
    records: List[ManifestRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_counts(self) -> "DatasetManifest":
        train = [r for r in self.records if r.split == Split.TRAIN]
        if self.records and (sum(r.labeled for r in train) != self.labeled
                             or sum(not r.labeled for r in train) != self.unlabeled):
            raise ValueError(
                f"header counts labeled={self.labeled} unlabeled={self.unlabeled} do not match the train records"
            )
        return self

    def ids(self, split: Split, labeled: Optional[bool] = None) -> List[int]:
        """Record indices of a split, optionally filtered by labeled status."""
        return [
            i for i, r in enumerate(self.records)
            if r.split == split and (labeled is None or r.labeled == labeled)
        ]


# Training log
class TrainRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iter: int
    l_sup: float = 0.0
    l_cg: float = 0.0
    l_mi: float = 0.0
    l_pix: float = 0.0
    l_total: float = 0.0
    lr: float = 0.0
    grad_norm: float = 0.0
    step_seconds: float = 0.0

    FIXED_COLUMNS: ClassVar[Tuple[str, ...]] = ("iter", "l_sup", "l_cg", "l_mi", "l_pix", "l_total", "lr", "grad_norm")

    def row(self, with_timing: bool = True) -> List[str]:
        columns = self.FIXED_COLUMNS + (("step_seconds",) if with_timing else ())
        return [str(self.iter)] + [repr(float(getattr(self, c))) for c in columns[1:]]


# Metrics
class MetricRow(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    split: str
    cls: str = Field(alias="class")
    dsc: float
    hd: float
    hd95: float
    asd: float
    degenerate_count: int = 0
    n: int = 0


class MetricReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: str
    rows: List[MetricRow] = Field(default_factory=list)
    mi_bits: Optional[float] = None

    CSV_HEADER: ClassVar[str] = "split,class,dsc,hd,hd95,asd,degenerate_count,n"

    def row(self, cls: str) -> MetricRow:
        for row in self.rows:
            if row.cls == cls:
                return row
        raise KeyError(cls)

    @property
    def mean(self) -> MetricRow:
        return self.row("mean")

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(f"{r.split},{r.cls},{r.dsc!r},{r.hd!r},{r.hd95!r},{r.asd!r},{r.degenerate_count},{r.n}")
        return "\n".join(lines) + "\n"


# Verification
class VerifyResult(BaseModel):
    suite: str
    prop: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


class AblationRow(BaseModel):
    seed: int
    row: str
    dsc: float
    hd: float
    hd95: float
    asd: float
