from enum import Enum
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from models.scene import BackgroundKind, Category, SceneSpec, default_categories


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(Section):
    canvas_size: int = 32
    num_objects_range: Tuple[int, int] = (1, 4)
    categories: List[Category] = Field(default_factory=default_categories)
    background_kind: BackgroundKind = BackgroundKind.SPECKLE
    train_count: int = Field(default=500, ge=0)
    val_count: int = Field(default=100, ge=0)
    train_seed: int = 1
    val_seed: int = 2

    @model_validator(mode="after")
    def _spec_valid(self):
        self.to_scene_spec()
        return self

    def to_scene_spec(self) -> SceneSpec:
        return SceneSpec(
            canvas_size=self.canvas_size,
            num_objects_range=self.num_objects_range,
            categories=self.categories,
            background_kind=self.background_kind,
        )


class ModelConfig(Section):
    base_width: int = 32
    channel_mult: Tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 2
    groups: int = 8
    embedding_dim: int = 64
    num_categories: int = 3
    image_channels: int = 3

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    def widths(self) -> List[int]:
        return [self.base_width * m for m in self.channel_mult]


class ConsistencyMode(str, Enum):
    ANCHOR = "anchor"
    LITERAL = "literal"


class TrainConfig(Section):
    batch_size: int = Field(default=16, ge=1)
    iterations: int = Field(default=2000, ge=0)
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    timesteps: int = Field(default=200, ge=2)
    esgm: bool = True
    dcloss: bool = True
    consistency_mode: ConsistencyMode = ConsistencyMode.ANCHOR
    ema_decay: float = 0.999
    checkpoint_every: int = Field(default=500, ge=1)


class SamplerKind(str, Enum):
    ANCESTRAL = "ancestral"
    DETERMINISTIC = "deterministic"


class SampleConfig(Section):
    steps: int = Field(default=50, ge=1)
    sampler: SamplerKind = SamplerKind.ANCESTRAL
    batch_size: int = Field(default=16, ge=1)


class DDPOConfig(Section):
    enabled: bool = False
    k: int = Field(default=3, ge=1)
    omega: float = Field(default=1.0, ge=0.0)
    clip_eps: float = Field(default=0.2, gt=0.0)
    updates: int = Field(default=50, ge=0)
    batch_size: int = Field(default=8, ge=2)
    steps: int = Field(default=20, ge=1)
    learning_rate: float = 1e-5
    toy_reward: bool = False
    toy_target: float = 0.8

    @model_validator(mode="after")
    def _k_below_batch(self):
        if self.k >= self.batch_size:
            raise ValueError(f"k ({self.k}) must be smaller than batch_size ({self.batch_size})")
        return self


class EvalConfig(Section):
    low_threshold: float = 100.0
    high_threshold: float = 200.0
    padding_frac: float = Field(default=0.2, ge=0.0)
    out_size: int = Field(default=64, ge=8)
    mmd_bandwidth: Optional[float] = None
    permutations: int = Field(default=200, ge=0)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _thresholds(self):
        if not 0 <= self.low_threshold < self.high_threshold <= 255:
            raise ValueError("thresholds must satisfy 0 <= low < high <= 255")
        return self


class RunConfig(Section):
    """
    Full run configuration; every field has a default and unknown keys are rejected
    """
    seed: int = 0
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)
    ddpo: DDPOConfig = Field(default_factory=DDPOConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    precision: Literal["float32", "float64"] = "float32"


class RunManifest(BaseModel):
    """
    One appended record per command run
    """
    command: str
    config_hash: str
    seed: int
    started: str
    finished: str
    inputs: dict = Field(default_factory=dict)
    outputs: dict = Field(default_factory=dict)
    summary: dict = Field(default_factory=dict)
