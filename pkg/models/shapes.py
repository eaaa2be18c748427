from typing import Dict, List, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from models.scene import Layout, OrientedBox


def _binary(pixels) -> np.ndarray:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"mask raster must be 2-D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask raster must be {0,1}-valued")
    return arr.astype(np.uint8, copy=False)


class ShapeMask(BaseModel):
    """
    Binary raster at canvas size
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray

    @field_validator("pixels")
    @classmethod
    def _is_binary(cls, v):
        return _binary(v)

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])

    def count(self) -> int:
        return int(self.pixels.sum())

    def __or__(self, other: "ShapeMask") -> "ShapeMask":
        return ShapeMask(pixels=np.maximum(self.pixels, other.pixels))

    def __eq__(self, other) -> bool:
        return isinstance(other, ShapeMask) and np.array_equal(self.pixels, other.pixels)

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.pixels.astype(np.float32))[None]

    @classmethod
    def zeros(cls, canvas_size: int) -> "ShapeMask":
        return cls(pixels=np.zeros((canvas_size, canvas_size), dtype=np.uint8))


class InstancePatchMask(BaseModel):
    """
    One instance mask cropped to the axis-aligned bounds of its box.
    `origin` is the (x, y) canvas pixel of the patch's top-left corner.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray
    source_box: OrientedBox
    category_id: int
    origin: Tuple[int, int] = (0, 0)

    @field_validator("pixels")
    @classmethod
    def _nonempty(cls, v):
        arr = _binary(v)
        if not arr.any():
            raise ValueError("instance patch must contain at least one nonzero pixel")
        return arr


class MaskPool(BaseModel):
    """
    Per-category store of instance patches harvested from one dataset
    """
    model_config = ConfigDict(frozen=True)

    entries: Dict[int, List[InstancePatchMask]] = Field(default_factory=dict)
    provenance: str
    canvas_size: int

    def categories(self) -> List[int]:
        return sorted(self.entries)

    def counts(self) -> Dict[int, int]:
        return {cid: len(items) for cid, items in sorted(self.entries.items())}


class SceneSample(BaseModel):
    """
    A rendered scene: image in [0,1], its layout and exact rasterizer masks
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: torch.Tensor
    layout: Layout
    instance_masks: List[ShapeMask]
    composite_mask: ShapeMask

    @model_validator(mode="after")
    def _consistent(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must have shape (3, S, S), got {tuple(self.image.shape)}")
        if len(self.instance_masks) != len(self.layout.boxes):
            raise ValueError("one instance mask per box is required")
        return self
