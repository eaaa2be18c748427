"""
Policy-gradient fine-tuning of the shape branch. The reverse chain is an MDP
whose Gaussian transitions are the policy; rewards arrive only at t = 0.
"""
import copy
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist
from tqdm import tqdm

import numerics
from denoiser import DualBranchDenoiser, ShapeBranchView
from diffusion_service import (
    NoiseSchedule,
    SamplingPlan,
    gaussian_logprob,
    make_plan,
    sample_batch,
    to_image,
    transition_mean,
)
from exceptions import ContractError
from metrics_service import luminance
from models.ddpo import GradientEstimate, RealReference, RewardBreakdown, RewardConfig, Trajectory
from models.run_config import DDPOConfig, SamplerKind
from models.training import ConditionBundle, Phase

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

VARIANCE_FLOOR = 1e-6
FEATURE_GRID = 8


def image_features(images: Tensor) -> np.ndarray:
    """8x8 average-pooled luminance, flattened to 64 dims per image, float64."""
    gray = luminance(images.to(torch.float64))
    if gray.ndim == 2:
        gray = gray[None]
    pooled = F.adaptive_avg_pool2d(gray[:, None], FEATURE_GRID)
    return pooled.reshape(pooled.shape[0], -1).numpy()


def _floored_fit(features: np.ndarray):
    mean = features.mean(axis=0)
    var = features.var(axis=0)
    floored = bool((var < VARIANCE_FLOOR).any())
    return mean, np.maximum(var, VARIANCE_FLOOR), floored


def build_reference(images: Tensor) -> RealReference:
    features = image_features(images)
    if features.shape[0] < 2:
        raise ContractError("a reward reference needs at least two real images")
    mean, var, floored = _floored_fit(features)
    if floored:
        logger.warning("reference feature variance floored", extra={"floor": VARIANCE_FLOOR})
    return RealReference(features=features, mean=mean, var=var)


def gaussian_kl(mean_p: np.ndarray, var_p: np.ndarray, mean_q: np.ndarray, var_q: np.ndarray) -> float:
    """KL(P || Q) between diagonal Gaussians."""
    mean_p, var_p = np.asarray(mean_p, np.float64), np.asarray(var_p, np.float64)
    mean_q, var_q = np.asarray(mean_q, np.float64), np.asarray(var_q, np.float64)
    terms = 0.5 * np.log(var_q / var_p) + (var_p + (mean_p - mean_q) ** 2) / (2.0 * var_q) - 0.5
    return float(terms.sum())


def knn_distances(features: np.ndarray, k: int) -> np.ndarray:
    """Distance from each row to its k-th nearest other row."""
    if features.shape[0] <= k:
        raise ContractError(f"k-th neighbour needs more than {k} samples, got {features.shape[0]}")
    dist = cdist(features, features)
    np.fill_diagonal(dist, np.inf)
    return np.sort(dist, axis=1)[:, k - 1]


def compute_reward(x0_batch: Tensor, reference: RealReference, cfg: RewardConfig) -> RewardBreakdown:
    """
    Diversity minus consistency: the k-NN distance inside the generated batch,
    less omega times the KL from the batch feature fit to the reference fit.
    """
    features = image_features(x0_batch)
    knn = knn_distances(features, cfg.k)
    mean, var, floored = _floored_fit(features)
    if floored:
        logger.warning("batch feature variance floored", extra={"floor": VARIANCE_FLOOR})
    kl = gaussian_kl(mean, var, reference.mean, reference.var)
    rewards = knn - cfg.omega * kl
    return RewardBreakdown(rewards=rewards.tolist(), knn=knn.tolist(), kl=kl, variance_floored=floored)


def toy_brightness_reward(images: Tensor, target: float = 0.8) -> np.ndarray:
    means = images.to(torch.float64).reshape(images.shape[0], -1).mean(dim=1).numpy()
    return -((means - target) ** 2)


def rollout(
    view: ShapeBranchView,
    masks: Tensor,
    category_ids: Sequence[Sequence[int]],
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    sampler: SamplerKind = SamplerKind.ANCESTRAL,
) -> List[Trajectory]:
    """Sample one recorded trajectory per condition under frozen behaviour parameters."""
    if sampler is not SamplerKind.ANCESTRAL:
        raise ContractError("policy density undefined at sigma = 0; rollouts need the ancestral sampler")
    seeds = [numerics.derive_seed(seed, row) for row in range(masks.shape[0])]
    _, trajectories = sample_batch(view, masks, category_ids, schedule, steps, sampler, seeds, True)
    return trajectories


def transition_logprob(
    view: ShapeBranchView, x_t: Tensor, x_prev: Tensor, t: int, plan: SamplingPlan, bundle: ConditionBundle
) -> Tensor:
    """Log-density of x_prev under the current policy's Gaussian at timestep t, one value per row."""
    i = plan.index_of(t)
    mean = transition_mean(view, x_t, i, plan, bundle)
    return gaussian_logprob(x_prev, mean, plan.sigmas[i])


def normalized_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    std = r.std()
    if std == 0:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def clipped_objective(
    logp: Tensor, logp_old: Tensor, advantages: Tensor, clip_eps: float = 0.2
) -> Tuple[Tensor, Tensor]:
    """Negated clipped importance-weighted advantage, averaged over rows, and the ratios."""
    ratio = torch.exp(logp - logp_old)
    clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps)
    return -torch.min(ratio * advantages, clipped * advantages).mean(), ratio


def _plan_for(trajectories: Sequence[Trajectory], schedule: NoiseSchedule) -> SamplingPlan:
    steps = len(trajectories[0].sigmas)
    plan = make_plan(schedule, steps)
    expected = list(reversed(plan.timesteps)) + [0]
    for traj in trajectories:
        if traj.timesteps != expected:
            raise ContractError("trajectories were not recorded on this schedule")
    return plan


def policy_gradient_step(
    trajectories: Sequence[Trajectory],
    view: ShapeBranchView,
    optimizer: numerics.OptimizerState,
    schedule: NoiseSchedule,
    clip_eps: float = 0.2,
    apply: bool = True,
) -> GradientEstimate:
    """
    Clipped importance-weighted estimator over every step of every trajectory,
    with batch-normalized terminal rewards as advantages. Applies one
    optimizer step unless `apply` is False.
    """
    if not trajectories:
        raise ContractError("no trajectories to learn from")
    if any(traj.reward is None for traj in trajectories):
        raise ContractError("every trajectory needs its reward before a policy step")
    plan = _plan_for(trajectories, schedule)
    advantages = torch.as_tensor(normalized_advantages([traj.reward for traj in trajectories]))
    params = view.trainable()
    masks = torch.stack([traj.mask for traj in trajectories])
    category_ids = [traj.category_ids for traj in trajectories]
    steps = len(trajectories[0].sigmas)

    total: Dict[str, Tensor] = {name: torch.zeros_like(p) for name, p in params.items()}
    ratios, loss_value = [], 0.0
    for s in range(steps):
        x_t = torch.stack([traj.latents[s] for traj in trajectories])
        x_prev = torch.stack([traj.latents[s + 1] for traj in trajectories])
        old = torch.as_tensor([traj.logprobs_old[s] for traj in trajectories], dtype=torch.float64)
        bundle = view.encode_conditions(None, masks, category_ids, Phase.SAMPLING)
        logp = transition_logprob(view, x_t, x_prev, trajectories[0].timesteps[s], plan, bundle)
        objective, ratio = clipped_objective(logp, old, advantages, clip_eps)
        loss = objective / steps
        for name, g in numerics.gradients(loss, params).items():
            total[name] += g
        ratios.append(ratio.detach())
        loss_value += float(loss.item())

    ratio_all = torch.cat(ratios)
    estimate = GradientEstimate(
        gradients=total,
        mean_ratio=float(ratio_all.mean()),
        clipped_fraction=float(((ratio_all - 1.0).abs() > clip_eps).to(torch.float64).mean()),
        loss=loss_value,
    )
    if apply:
        numerics.adamw_step(params, total, optimizer)
    return estimate


class DDPOTrainer:
    """
    Alternates rollout, reward and one policy step per update, snapshotting the
    behaviour policy fresh before every rollout.
    """

    def __init__(
        self,
        model: DualBranchDenoiser,
        masks: Tensor,
        category_ids: Sequence[Sequence[int]],
        schedule: NoiseSchedule,
        config: DDPOConfig,
        reference: Optional[RealReference] = None,
        seed: int = 0,
    ):
        if not config.toy_reward and reference is None:
            raise ContractError("the KNN-KL reward needs a real reference")
        if masks.shape[0] < config.batch_size:
            raise ContractError(f"{masks.shape[0]} conditions cannot fill a batch of {config.batch_size}")
        self.view = model.sampling_view()
        self.masks = masks.to(next(model.parameters()).dtype)
        self.category_ids = [list(ids) for ids in category_ids]
        self.schedule = schedule
        self.config = config
        self.reference = reference
        self.seed = seed
        self.reward_config = RewardConfig(k=config.k, omega=config.omega)
        self.optimizer = numerics.OptimizerState(self.view.trainable(), lr=config.learning_rate, weight_decay=0.0)
        self.updates_done = 0

    def rewards(self, images: Tensor) -> RewardBreakdown:
        if self.config.toy_reward:
            values = toy_brightness_reward(images, self.config.toy_target).tolist()
            return RewardBreakdown(rewards=values, knn=[0.0] * len(values), kl=0.0)
        return compute_reward(images, self.reference, self.reward_config)

    def update(self) -> dict:
        u = self.updates_done
        rng = np.random.default_rng([self.seed, u, 13])
        rows = np.sort(rng.choice(self.masks.shape[0], size=self.config.batch_size, replace=False))
        behaviour = copy.deepcopy(self.view).requires_grad_(False)
        trajectories = rollout(
            behaviour,
            self.masks[torch.as_tensor(rows)],
            [self.category_ids[r] for r in rows],
            self.schedule,
            self.config.steps,
            numerics.derive_seed(self.seed, u),
        )
        images = to_image(torch.stack([traj.latents[-1] for traj in trajectories]))
        breakdown = self.rewards(images)
        for traj, reward in zip(trajectories, breakdown.rewards):
            traj.reward = reward
        estimate = policy_gradient_step(
            trajectories, self.view, self.optimizer, self.schedule, self.config.clip_eps
        )
        self.updates_done += 1
        record = {
            "update": u,
            "mean_reward": float(np.mean(breakdown.rewards)),
            "mean_ratio": estimate.mean_ratio,
            "clipped_fraction": estimate.clipped_fraction,
        }
        if not self.config.toy_reward:
            record["kl"] = breakdown.kl
            record["knn"] = float(np.mean(breakdown.knn))
        return record

    def run(self, callback: Optional[Callable[[dict], None]] = None, progress: bool = True) -> List[dict]:
        records = []
        for _ in tqdm(range(self.updates_done, self.config.updates), disable=not progress, desc="ddpo"):
            record = self.update()
            records.append(record)
            if callback is not None:
                callback(record)
        return records
