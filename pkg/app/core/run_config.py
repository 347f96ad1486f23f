"""
    运行配置 RunConfig

    完整的JSON文档：预设（desk / paper-90ep / paper-200ep）与用户JSON深度合并后校验，
    所有默认值都会物化并回写到输出目录，保证运行可以仅凭该文件复现。
"""
import copy
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import ConfigurationError
from app.lgd.banks import DEFAULT_MOMENTUM, DESK_QUEUE_SIZE, PAPER_QUEUE_SIZE
from app.lgd.losses import DEFAULT_TAU_STUDENT, DEFAULT_TAU_TEACHER, LossConfig
from app.lgd.student import BASE_LR, SGD_MOMENTUM, WARMUP_EPOCHS, WEIGHT_DECAY
from app.lgd.synthworld import WorldParams

SCHEMA_VERSION = 1
PresetName = Literal["desk", "paper-90ep", "paper-200ep"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Section):
    """预计算的输入与教师特征（嵌入文件格式）"""
    inputs_path: str
    teacher_path: str
    eval_inputs_path: Optional[str] = None
    eval_teacher_path: Optional[str] = None
    eval_labels_path: Optional[str] = None


class TsbConfig(_Section):
    embeddings_path: Optional[str] = None
    names_path: Optional[str] = None
    subset: Optional[list[str]] = None


class StudentConfig(_Section):
    hidden_dims: list[int] = Field(default_factory=lambda: [64])


class ProjectionConfig(_Section):
    enabled: bool = False
    hidden_dims: list[int] = Field(default_factory=list)


class OptimizerConfig(_Section):
    base_lr: float = Field(default=BASE_LR, ge=0.0)
    momentum: float = Field(default=SGD_MOMENTUM, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=WEIGHT_DECAY, ge=0.0)
    warmup_epochs: float = Field(default=WARMUP_EPOCHS, ge=0.0)


class BankConfig(_Section):
    momentum: float = Field(default=DEFAULT_MOMENTUM, ge=0.0, lt=1.0)
    vsb_init: Literal["replace", "random"] = "replace"
    queue_size: int = Field(default=DESK_QUEUE_SIZE, ge=1)


class TrainingConfig(_Section):
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=64, ge=1)
    steps_per_epoch: int = Field(default=32, ge=1)
    jitter_sigma: float = Field(default=0.0, ge=0.0)
    checkpoint_every_epochs: int = Field(default=0, ge=0)


class EvalConfig(_Section):
    every_epochs: int = Field(default=0, ge=0)
    eval_samples: int = Field(default=2048, ge=1)
    probe_train_samples: int = Field(default=2048, ge=1)
    probe_label_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    probe_lr: float = Field(default=1.0, gt=0.0)
    probe_max_iters: int = Field(default=2000, ge=1)


class RunConfig(_Section):
    schema_version: Literal[1] = SCHEMA_VERSION
    preset: PresetName = "desk"
    seed: int = Field(default=0, ge=0)
    world: Optional[WorldParams] = None
    dataset: Optional[DatasetConfig] = None
    tsb: TsbConfig = Field(default_factory=TsbConfig)
    loss: LossConfig
    student: StudentConfig = Field(default_factory=StudentConfig)
    projection: ProjectionConfig = Field(default_factory=ProjectionConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    banks: BankConfig = Field(default_factory=BankConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: str = "./temp/run"

    @model_validator(mode="after")
    def _check(self):
        if (self.world is None) == (self.dataset is None):
            raise ValueError("world 与 dataset 必须且只能给出一个")
        if self.dataset is not None and self.tsb.embeddings_path is None:
            raise ValueError("使用预计算数据集时必须给出 tsb.embeddings_path")
        if (self.tsb.embeddings_path is None) != (self.tsb.names_path is None):
            raise ValueError("tsb.embeddings_path 与 tsb.names_path 必须同时给出")
        if self.training.epochs <= self.optimizer.warmup_epochs:
            raise ValueError(f"epochs ({self.training.epochs}) 必须大于 warmup_epochs ({self.optimizer.warmup_epochs})")
        return self

    @property
    def total_steps(self) -> int:
        return self.training.epochs * self.training.steps_per_epoch

    def with_updates(self, **sections) -> "RunConfig":
        """
        返回修改了若干字段后重新校验的副本，如 with_updates(loss={"alpha": 1.0})
        """
        return RunConfig.model_validate(deep_merge(self.model_dump(mode="json"), sections))

    def dump_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), ensure_ascii=False, indent=2, sort_keys=True)


_DESK = {
    "preset": "desk",
    "world": WorldParams().model_dump(mode="json"),
    "loss": {"tau_teacher": DEFAULT_TAU_TEACHER, "tau_student": DEFAULT_TAU_STUDENT, "mode": "standard"},
    "training": {"epochs": 30, "batch_size": 64, "steps_per_epoch": 32},
}

PRESETS = {
    "desk": _DESK,
    "paper-90ep": {
        **_DESK,
        "preset": "paper-90ep",
        "banks": {"queue_size": PAPER_QUEUE_SIZE},
        "training": {"epochs": 90, "batch_size": 256, "steps_per_epoch": 128},
    },
    "paper-200ep": {
        **_DESK,
        "preset": "paper-200ep",
        "banks": {"queue_size": PAPER_QUEUE_SIZE},
        "training": {"epochs": 200, "batch_size": 256, "steps_per_epoch": 128},
    },
}


def deep_merge(base: dict, overrides: dict) -> dict:
    """递归合并字典，overrides中的值优先；值为None的键会删除对应项"""
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        elif value is None:
            merged.pop(key, None)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_run_config(preset: str = "desk", overrides: Optional[dict] = None) -> RunConfig:
    """
    合并预设与用户配置并物化所有默认值

    Args:
        preset: 预设名称
        overrides: 用户JSON文档（可为空）

    Returns:
        RunConfig
    """
    overrides = dict(overrides or {})
    preset = overrides.pop("preset", preset)
    if preset not in PRESETS:
        raise ConfigurationError(f"未知的预设: {preset}，可选 {sorted(PRESETS)}")
    base = PRESETS[preset]
    if "dataset" in overrides:
        base = {k: v for k, v in base.items() if k != "world"}
    return RunConfig.model_validate(deep_merge(base, overrides))


def load_run_config(path, preset: str = "desk", **overrides) -> RunConfig:
    document = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    return resolve_run_config(preset, deep_merge(document, overrides))
