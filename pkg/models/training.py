from enum import Enum
from typing import List, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Phase(str, Enum):
    TRAINING = "training"
    SAMPLING = "sampling"


class Branch(str, Enum):
    SHAPE = "shape"
    MIX = "mix"
    BOTH = "both"


class ConditionBundle(BaseModel):
    """
    Condition pyramids for one batch. Every pyramid is a list of (N, C_l, H_l, W_l)
    tensors, one per resolution level, finest first.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    c_l: List[torch.Tensor]
    c_t: torch.Tensor
    c_i: Optional[List[torch.Tensor]] = None
    c_m: Optional[List[torch.Tensor]] = None
    c_f: Optional[List[torch.Tensor]] = None
    phase: Phase = Phase.TRAINING

    @property
    def c_s(self) -> List[torch.Tensor]:
        return self.c_l

    @model_validator(mode="after")
    def _compatible(self):
        if self.c_i is not None:
            if len(self.c_i) != len(self.c_l):
                raise ValueError("c_i and c_l must have the same number of levels")
            for a, b in zip(self.c_i, self.c_l):
                if a.shape != b.shape:
                    raise ValueError(f"c_i level {tuple(a.shape)} does not match c_l level {tuple(b.shape)}")
        return self


class NoisePrediction(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    eps_s: Optional[torch.Tensor] = None
    eps_m: Optional[torch.Tensor] = None


class LossBreakdown(BaseModel):
    l_s: float = Field(ge=0.0)
    l_m: float = Field(ge=0.0)
    l_c: float = Field(default=0.0, ge=0.0)
    total: float = Field(ge=0.0)
    dcloss: bool = True
    # float32 objectives round the sum; float64 ones hold to 1e-12
    tolerance: float = Field(default=1e-12, gt=0.0, exclude=True)

    @model_validator(mode="after")
    def _additive(self):
        if abs(self.total - (self.l_s + self.l_m + self.l_c)) > self.tolerance:
            raise ValueError(f"total {self.total} is not l_s + l_m + l_c")
        return self

    def to_record(self) -> dict:
        record = {"l_s": self.l_s, "l_m": self.l_m, "total": self.total}
        if self.dcloss:
            record["l_c"] = self.l_c
        return record


class TrainState(BaseModel):
    n: int = Field(default=0, ge=0)
    N: int = Field(ge=0)
    epoch: int = Field(default=0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _in_range(self):
        if self.n > self.N:
            raise ValueError(f"iteration {self.n} exceeds total {self.N}")
        return self
