"""
Data models for the light-DARTS pipeline.
"""

import math
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

Label = Literal["bonafide", "spoof"]
ScoreLabel = Literal["bonafide", "spoof", "unknown"]

BONAFIDE = 0
SPOOF = 1
LABEL_INDEX = {"bonafide": BONAFIDE, "spoof": SPOOF}


class ManifestEntry(BaseModel):
    """One manifest line."""

    utt_id: str = Field(..., min_length=1, description="Utterance identifier, unique per manifest")
    path: str = Field(..., min_length=1, description="Feature file path relative to the manifest")
    label: ScoreLabel = Field(..., description="Class label; 'unknown' for unlabeled data")

    @field_validator("utt_id", "path")
    @classmethod
    def validate_no_separators(cls, value: str) -> str:
        if any(ch in value for ch in "\t\n\r"):
            raise ValueError("must not contain tabs or newlines")
        return value

    @property
    def labeled(self) -> bool:
        return self.label != "unknown"


class ScoreRecord(BaseModel):
    """Countermeasure score of one utterance; higher means more bonafide."""

    utt_id: str = Field(..., min_length=1)
    score: float = Field(..., description="Bonafide logit minus spoof logit")
    label: ScoreLabel = "unknown"

    @field_validator("score")
    @classmethod
    def validate_finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("score must be finite")
        return value


class DetPoint(BaseModel):
    """FAR and FRR when accepting every score >= threshold as bonafide."""

    threshold: float
    far: float = Field(..., ge=0.0, le=1.0, description="False acceptance rate")
    frr: float = Field(..., ge=0.0, le=1.0, description="False rejection rate")


class SearchConfig(BaseModel):
    """Hyperparameters of the bilevel search and of discrete retraining."""

    epochs: int = Field(50, ge=1, description="Search epochs")
    lr: float = Field(1e-4, gt=0.0, description="Adam learning rate for the weights")
    arch_lr: float = Field(1e-4, gt=0.0, description="Adam learning rate for alpha")
    batch_size: int = Field(16, ge=1)
    cells: int = Field(8, ge=1, description="Number of stacked cells N")
    init_channels: int = Field(16, ge=2, description="Channels of the first cell")
    nodes: int = Field(4, ge=1, description="Intermediate nodes per cell")
    seed: int = Field(0, ge=0)
    order: Literal["first", "second"] = "first"
    unrolled_lr: Optional[float] = Field(
        None, ge=0.0, description="Virtual-step size for second order; defaults to lr"
    )
    retrain_epochs: Optional[int] = Field(
        None, ge=1, description="Retraining epochs; defaults to twice the search epochs"
    )
    retrain_lr: Optional[float] = Field(None, gt=0.0, description="Defaults to lr")
    frames: int = Field(40, ge=1, description="Frame-fixing target T")
    primitives: List[str] = Field(default_factory=list, description="Empty means all nine ops")

    @field_validator("init_channels")
    @classmethod
    def validate_even(cls, value: int) -> int:
        if value % 2:
            raise ValueError(f"init_channels must be even, got {value}")
        return value

    @property
    def xi(self) -> float:
        return self.lr if self.unrolled_lr is None else self.unrolled_lr

    @property
    def effective_retrain_epochs(self) -> int:
        return 2 * self.epochs if self.retrain_epochs is None else self.retrain_epochs

    @property
    def effective_retrain_lr(self) -> float:
        return self.lr if self.retrain_lr is None else self.retrain_lr


class HistoryRow(BaseModel):
    """Per-epoch search or retraining summary."""

    epoch: int = Field(..., ge=0)
    train_loss: float
    val_loss: Optional[float] = None
    train_acc: float = Field(..., ge=0.0, le=1.0)
    val_acc: Optional[float] = Field(None, ge=0.0, le=1.0)
    alpha_entropy_normal: Optional[float] = None
    alpha_entropy_reduce: Optional[float] = None


class RetrainRow(HistoryRow):
    """Retraining epoch; carries the development EER when a dev split is given."""

    dev_eer: Optional[float] = Field(None, ge=0.0, le=1.0)


HISTORY_COLUMNS = (
    "epoch",
    "train_loss",
    "val_loss",
    "train_acc",
    "val_acc",
    "alpha_entropy_normal",
    "alpha_entropy_reduce",
)


class ModelHeader(BaseModel):
    """Configuration echo stored in model files."""

    feature_dim: int = Field(..., ge=1)
    frames: int = Field(..., ge=1)
    cells: int = Field(..., ge=1)
    channels: int = Field(..., ge=2)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def validate_channels(self) -> "ModelHeader":
        if self.channels % 2:
            raise ValueError(f"channels must be even, got {self.channels}")
        return self
