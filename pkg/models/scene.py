import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class Glyph(str, Enum):
    RECTANGLE = "rectangle"
    CIRCLE = "circle"
    AIRPLANE = "airplane"


class BackgroundKind(str, Enum):
    FLAT = "flat"
    GRADIENT = "gradient"
    SPECKLE = "speckle"


class Category(BaseModel):
    """
    A category descriptor: glyph family and the pixel range of its larger side
    """
    id: int = Field(ge=0)
    glyph: Glyph
    size_range: Tuple[float, float]

    @field_validator("size_range")
    @classmethod
    def _ordered(cls, v):
        lo, hi = v
        if not 0 < lo <= hi:
            raise ValueError(f"size_range must satisfy 0 < low <= high, got {v}")
        return v


def default_categories() -> List[Category]:
    return [
        Category(id=0, glyph=Glyph.RECTANGLE, size_range=(6.0, 12.0)),
        Category(id=1, glyph=Glyph.CIRCLE, size_range=(5.0, 10.0)),
        Category(id=2, glyph=Glyph.AIRPLANE, size_range=(12.0, 16.0)),
    ]


class SceneSpec(BaseModel):
    canvas_size: int = 32
    num_objects_range: Tuple[int, int] = (1, 4)
    categories: List[Category] = Field(default_factory=default_categories)
    background_kind: BackgroundKind = BackgroundKind.SPECKLE

    @model_validator(mode="after")
    def _valid(self):
        if self.canvas_size < 16 or self.canvas_size % 4:
            raise ValueError(f"canvas_size must be >= 16 and a multiple of 4, got {self.canvas_size}")
        lo, hi = self.num_objects_range
        if lo < 1 or hi > 32 or lo > hi:
            raise ValueError(f"num_objects_range must satisfy 1 <= low <= high <= 32, got {[lo, hi]}")
        if not self.categories:
            raise ValueError("categories must be non-empty")
        ids = [c.id for c in self.categories]
        if len(set(ids)) != len(ids):
            raise ValueError(f"category ids must be unique, got {ids}")
        return self

    def category(self, category_id: int) -> Category:
        for c in self.categories:
            if c.id == category_id:
                return c
        raise KeyError(category_id)


class OrientedBox(BaseModel):
    """
    Rotated bounding box (R-Box); angle in radians in [-pi/2, pi/2)
    """
    center_x: float
    center_y: float
    width: float = Field(gt=0)
    height: float = Field(gt=0)
    angle: float = 0.0

    @field_validator("angle")
    @classmethod
    def _angle_range(cls, v):
        if not -math.pi / 2 <= v < math.pi / 2:
            raise ValueError(f"angle must lie in [-pi/2, pi/2), got {v}")
        return v

    def as_list(self) -> List[float]:
        return [self.center_x, self.center_y, self.width, self.height, self.angle]

    @classmethod
    def from_list(cls, values) -> "OrientedBox":
        cx, cy, w, h, a = values
        return cls(center_x=cx, center_y=cy, width=w, height=h, angle=a)


class Layout(BaseModel):
    boxes: List[OrientedBox] = Field(default_factory=list)
    category_ids: List[int] = Field(default_factory=list)
    scene_id: str = "scene"

    @model_validator(mode="after")
    def _parallel(self):
        if len(self.boxes) != len(self.category_ids):
            raise ValueError(
                f"boxes and category_ids must have equal length ({len(self.boxes)} != {len(self.category_ids)})"
            )
        return self

    def to_record(self) -> Dict:
        return {
            "scene_id": self.scene_id,
            "boxes": [b.as_list() for b in self.boxes],
            "category_ids": list(self.category_ids),
        }

    @classmethod
    def from_record(cls, record: Dict) -> "Layout":
        return cls(
            scene_id=record["scene_id"],
            boxes=[OrientedBox.from_list(b) for b in record["boxes"]],
            category_ids=list(record["category_ids"]),
        )


class DatasetManifest(BaseModel):
    directory: str
    count: int
    seed: Optional[int] = None
    digest: str
    canvas_size: Optional[int] = None
    category_ids: List[int] = Field(default_factory=list)
    scene_ids: List[str] = Field(default_factory=list)
    files: Dict[str, str] = Field(default_factory=dict)
