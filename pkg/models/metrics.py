from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

METRIC_ORDER = ("iou", "dice", "cd", "hd", "ssim")


class HorizontalBox(BaseModel):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @model_validator(mode="after")
    def _ordered(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate horizontal box {self.x_min, self.y_min, self.x_max, self.y_max}")
        return self


class EdgeMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray

    @field_validator("pixels")
    @classmethod
    def _binary(cls, v):
        arr = np.asarray(v)
        if arr.ndim != 2 or not np.isin(arr, (0, 1)).all():
            raise ValueError("edge map must be a 2-D {0,1} raster")
        return arr.astype(np.uint8, copy=False)

    def points(self) -> np.ndarray:
        """(row, col) coordinates of edge pixels as float64."""
        return np.argwhere(self.pixels > 0).astype(np.float64)

    def is_empty(self) -> bool:
        return not self.pixels.any()


class InstanceScore(BaseModel):
    scene_id: str
    index: int
    category_id: int
    iou: float
    dice: float
    ssim: float
    cd: Optional[float] = None
    hd: Optional[float] = None
    empty_edge: bool = False


class Aggregate(BaseModel):
    count: int = 0
    iou: Optional[float] = None
    dice: Optional[float] = None
    cd: Optional[float] = None
    hd: Optional[float] = None
    ssim: Optional[float] = None


class ShapeFidelityReport(BaseModel):
    instances: List[InstanceScore] = Field(default_factory=list)
    overall: Aggregate = Field(default_factory=Aggregate)
    per_category: Dict[int, Aggregate] = Field(default_factory=dict)
    skipped: List[str] = Field(default_factory=list)
    empty_edge_count: int = 0
    mmd: Optional[float] = None
    mmd_stderr: Optional[float] = None
    mmd_p_value: Optional[float] = None

    @property
    def instance_count(self) -> int:
        return len(self.instances)
