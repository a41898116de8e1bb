"""Pydantic request/response models for the compression service."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..config import RunConfig


class ConfigModel(BaseModel):
    dataset_dir: str
    dataset_format: str = "idx"
    num_classes: int = 10
    seed: int = 0
    groups: int = 3
    branches: int = 3
    init_bits: list[int] = Field(default_factory=lambda: [6, 7, 8])
    b_min: int = 2
    p: float = 0.05
    patience: int = 3
    patience_mode: str = "consecutive"
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 6
    batch_size: int = 64
    baseline_epochs: int = 10
    baseline_lr: float = 0.05
    refit_every: int = 1
    thresholds: list[float] = Field(default_factory=list)
    prune_accuracy_budget: float = 1.0
    calib_samples: int = 512
    finetune_samples: int = 5000
    ema_decay: float = 0.99

    def to_run_config(self) -> RunConfig:
        data = self.model_dump()
        data["init_bits"] = tuple(data["init_bits"])
        data["thresholds"] = tuple(data["thresholds"])
        return RunConfig(**data).validate()

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "ConfigModel":
        return cls(**{**cfg.__dict__,
                      "init_bits": list(cfg.init_bits),
                      "thresholds": list(cfg.thresholds)})


class MakeDatasetRequest(BaseModel):
    out_dir: str
    num_train: int = 8192
    num_eval: int = 2048
    seed: int = 0
    format: str = "idx"
    num_classes: int = 10
    image_size: int = 32


class MakeDatasetResponse(BaseModel):
    out_dir: str
    format: str
    num_train: int
    num_eval: int
    num_classes: int
    image_size: int


class TrainBaselineRequest(BaseModel):
    config: ConfigModel
    out_dir: str


class TrainBaselineResponse(BaseModel):
    checkpoint: str
    float_accuracy: float
    baseline_accuracy: float
    epochs: int
    final_loss: float


class CompressRequest(BaseModel):
    config: ConfigModel
    checkpoint: str
    out_dir: str


class CompressResponse(BaseModel):
    policy: str
    checkpoint: str
    avg_bits: float
    soft_accuracy: float
    hard_accuracy: float
    baseline_accuracy: float | None = None
    num_shifts: int
    min_dominant_weight: float
    thresholds: list[float]
    reports: dict[str, str]


class EvaluateRequest(BaseModel):
    config: ConfigModel
    policy: str
    checkpoint: str


class GroupSummary(BaseModel):
    group: int
    channels: int
    bits: int
    lo: float
    hi: float


class LayerSummary(BaseModel):
    layer: int
    channels: int
    height: int
    width: int
    pruned_channels: int
    groups: list[GroupSummary]


class EvaluateResponse(BaseModel):
    accuracy: float
    avg_bits: float
    layers: list[LayerSummary]


class SweepRequest(BaseModel):
    config: ConfigModel
    checkpoint: str
    out_dir: str
    p_values: list[float]
    group_values: list[int] = Field(default_factory=lambda: [3])


class SweepRow(BaseModel):
    p: float
    groups: int
    avg_bits: float
    accuracy: float
    on_frontier: bool


class SweepResponse(BaseModel):
    csv: str
    rows: list[SweepRow]


class PolicySummaryResponse(BaseModel):
    num_groups: int
    b_min: int
    avg_bits: float
    seed: int
    config_hash: str
    layers: list[LayerSummary]


class ReportFileInfo(BaseModel):
    columns: list[str]
    rows: int


class ReportResponse(BaseModel):
    run_dir: str
    files: dict[str, ReportFileInfo]


class HealthResponse(BaseModel):
    status: str
    name: str
    version: str
