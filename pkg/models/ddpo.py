from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator


class FeatureMap(str, Enum):
    GRAY_8X8 = "gray8x8"


class RewardConfig(BaseModel):
    k: int = Field(default=3, ge=1)
    omega: float = Field(default=1.0, ge=0.0)
    feature_map: FeatureMap = FeatureMap.GRAY_8X8


class Trajectory(BaseModel):
    """
    One recorded reverse chain. `latents[0]` is z_T and `latents[-1]` is z_0;
    step i moves from latents[i] at timesteps[i] to latents[i + 1].
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mask: torch.Tensor
    category_ids: List[int]
    timesteps: List[int]
    latents: torch.Tensor
    means: torch.Tensor
    sigmas: List[float]
    logprobs_old: List[float]
    reward: Optional[float] = None

    @model_validator(mode="after")
    def _lengths(self):
        steps = len(self.sigmas)
        if not (len(self.timesteps) == self.latents.shape[0] == steps + 1):
            raise ValueError("a trajectory needs one more state than it has steps")
        if self.means.shape[0] != steps or len(self.logprobs_old) != steps:
            raise ValueError("means and logprobs must have one entry per step")
        return self

    @property
    def states(self) -> List[Tuple[int, torch.Tensor]]:
        return list(zip(self.timesteps, self.latents))

    @property
    def actions(self) -> torch.Tensor:
        return self.latents[1:]

    def step_rewards(self) -> List[float]:
        """Reward per transition: zero everywhere except the final step into t = 0."""
        rewards = [0.0] * len(self.sigmas)
        if rewards and self.reward is not None:
            rewards[-1] = self.reward
        return rewards


class RealReference(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    @model_validator(mode="after")
    def _positive(self):
        if (self.var <= 0).any():
            raise ValueError("reference variances must be positive")
        return self


class RewardBreakdown(BaseModel):
    rewards: List[float]
    knn: List[float]
    kl: float
    variance_floored: bool = False


class GradientEstimate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    gradients: Dict[str, torch.Tensor]
    mean_ratio: float
    clipped_fraction: float
    loss: float

    @model_validator(mode="after")
    def _finite(self):
        for name, g in self.gradients.items():
            if not torch.isfinite(g).all():
                raise ValueError(f"non-finite gradient for {name}")
        return self
