"""
Forward noising, the dual-branch training objective and shape-only sampling.

Diffusion runs in pixel space: images in [0, 1] map to latents z = 2x - 1.
Schedules are indexed 0..T with alpha_bar[0] = 1.
"""
import copy
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

import numerics
from denoiser import DualBranchDenoiser, ShapeBranchView, mix_conditions
from esgm_service import training_shape_condition
from exceptions import ContractError, ScheduleExhaustedError, ShapeError
from models.ddpo import Trajectory
from models.run_config import ConsistencyMode, SamplerKind, TrainConfig
from models.shapes import SceneSample, ShapeMask
from models.training import Branch, LossBreakdown, Phase, TrainState

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

BETA_START = 1e-4
BETA_END = 0.02
BETA_MAX = 0.999


class NoiseSchedule(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    T: int
    betas: Tensor
    alphas: Tensor
    alpha_bars: Tensor


class LatentState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    z: Tensor
    t: int = Field(ge=0)


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    """
    Linear betas from 1e-4 to 0.02 at T = 1000, with both endpoints scaled by
    1000 / T for other lengths and capped at 0.999.
    """
    if T < 2:
        raise ContractError(f"a schedule needs T >= 2, got {T}")
    if kind != "linear":
        raise ContractError(f"unknown schedule kind {kind!r}")
    scale = 1000.0 / T
    ramp = torch.linspace(BETA_START * scale, BETA_END * scale, T, dtype=torch.float64).clamp(max=BETA_MAX)
    betas = torch.cat([torch.zeros(1, dtype=torch.float64), ramp])
    alphas = 1.0 - betas
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))


def to_latent(image: Tensor) -> Tensor:
    return 2.0 * image - 1.0


def to_image(z: Tensor) -> Tensor:
    return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


def q_sample(z_0: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps, t scalar or one per batch row."""
    if eps.shape != z_0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match latent {tuple(z_0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 0).any() or (t > schedule.T).any():
        raise ContractError(f"timestep outside [0, {schedule.T}]")
    ab = schedule.alpha_bars[t].to(z_0.dtype)
    if ab.ndim == 1:
        ab = ab.reshape(-1, *([1] * (z_0.ndim - 1)))
    return ab.sqrt() * z_0 + (1.0 - ab).sqrt() * eps


class LossToggles(BaseModel):
    dcloss: bool = True
    consistency_mode: ConsistencyMode = ConsistencyMode.ANCHOR


def consistency_loss(eps_s: Tensor, eps_m: Tensor) -> Tensor:
    """mean || eps_s - sg[eps_m] ||^2"""
    return numerics.mse(eps_s, numerics.stop_gradient(eps_m))


def loss_breakdown(
    eps_s: Tensor, eps_m: Tensor, eps: Tensor, dcloss: bool = True, consistency: Optional[Tensor] = None
) -> Tuple[Tensor, LossBreakdown]:
    """
    The training objective from the two branch predictions. `consistency`
    overrides the anchored consistency term (used by the literal reading).
    """
    l_s = numerics.mse(eps_s, eps)
    l_m = numerics.mse(eps_m, eps)
    total = l_s + l_m
    l_c_value = 0.0
    if dcloss:
        l_c = consistency if consistency is not None else consistency_loss(eps_s, eps_m)
        total = total + l_c
        l_c_value = float(l_c.item())
    value = float(total.item())
    tolerance = 1e-12
    if total.dtype != torch.float64:
        tolerance = 4.0 * torch.finfo(total.dtype).eps * max(1.0, value)
    breakdown = LossBreakdown(
        l_s=float(l_s.item()), l_m=float(l_m.item()), l_c=l_c_value, total=value, dcloss=dcloss, tolerance=tolerance
    )
    return total, breakdown


class TrainingBatch(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: Tensor
    masks: Tensor
    category_ids: List[List[int]]


def make_batch(samples: Sequence[SceneSample], esgm_enabled: bool = True, dtype=torch.float32) -> TrainingBatch:
    if not samples:
        raise ContractError("a training batch must not be empty")
    masks = [training_shape_condition(s, esgm_enabled).to_tensor() for s in samples]
    return TrainingBatch(
        images=torch.stack([s.image for s in samples]).to(dtype),
        masks=torch.stack(masks).to(dtype),
        category_ids=[list(s.layout.category_ids) for s in samples],
    )


def training_step(
    model: DualBranchDenoiser,
    batch: TrainingBatch,
    state: TrainState,
    schedule: NoiseSchedule,
    toggles: LossToggles = LossToggles(),
    ema: Optional[DualBranchDenoiser] = None,
) -> Tuple[LossBreakdown, Dict[str, Tensor]]:
    """
    One dual-branch step: forward both branches on freshly noised latents and
    return the loss breakdown with gradients for every named parameter.
    Advances state.n.
    """
    if state.n >= state.N:
        raise ScheduleExhaustedError(state.n, state.N)
    size = batch.images.shape[0]
    if size == 0:
        raise ContractError("a training batch must not be empty")
    generator = numerics.seeded_generator(state.seed, state.epoch, state.n)
    t = torch.randint(1, schedule.T + 1, (size,), generator=generator)
    z_0 = to_latent(batch.images)
    eps = torch.randn(z_0.shape, generator=generator, dtype=z_0.dtype)
    z_t = q_sample(z_0, t, eps, schedule)

    bundle = model.encode_conditions(batch.images, batch.masks, batch.category_ids, Phase.TRAINING)
    bundle = bundle.model_copy(update={"c_m": mix_conditions(bundle.c_i, bundle.c_l, state.n, state.N)})
    pred = model.predict_noise(z_t, t, bundle, Branch.BOTH)

    consistency = None
    if toggles.dcloss and toggles.consistency_mode is ConsistencyMode.LITERAL:
        if ema is None:
            raise ContractError("the literal consistency reading needs an EMA denoiser")
        with torch.no_grad():
            ema_bundle = ema.encode_conditions(batch.images, batch.masks, batch.category_ids, Phase.TRAINING)
            ema_bundle = ema_bundle.model_copy(
                update={"c_m": mix_conditions(ema_bundle.c_i, ema_bundle.c_l, state.n, state.N)}
            )
            target = ema.predict_noise(z_t, t, ema_bundle, Branch.MIX).eps_m
        consistency = numerics.mse(pred.eps_m, target)

    total, breakdown = loss_breakdown(pred.eps_s, pred.eps_m, eps, toggles.dcloss, consistency)
    grads = numerics.gradients(total, dict(model.named_parameters()))
    state.n += 1
    return breakdown, grads


class Trainer:
    """
    Owns the denoiser, its optimizer and TrainState. Batches are drawn from a
    per-epoch permutation keyed on (seed, epoch), so a resumed run replays the
    same batches as an uninterrupted one.
    """

    def __init__(
        self,
        model: DualBranchDenoiser,
        samples: Sequence[SceneSample],
        config: TrainConfig,
        seed: int = 0,
        state: Optional[TrainState] = None,
    ):
        if not samples:
            raise ContractError("training needs at least one scene")
        self.model = model
        self.config = config
        self.schedule = make_schedule(config.timesteps)
        self.toggles = LossToggles(dcloss=config.dcloss, consistency_mode=config.consistency_mode)
        self.state = state or TrainState(n=0, N=config.iterations, seed=seed)
        dtype = next(model.parameters()).dtype
        self.data = make_batch(samples, config.esgm, dtype)
        self.optimizer = numerics.OptimizerState(
            dict(model.named_parameters()), lr=config.learning_rate, weight_decay=config.weight_decay
        )
        self.ema: Optional[DualBranchDenoiser] = None
        if config.dcloss and config.consistency_mode is ConsistencyMode.LITERAL:
            self.ema = copy.deepcopy(model).requires_grad_(False)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.data.category_ids) / self.config.batch_size)

    def batch_indices(self, n: int) -> Tuple[int, np.ndarray]:
        epoch, j = divmod(n, self.steps_per_epoch)
        order = np.random.default_rng([self.state.seed, epoch, 3]).permutation(len(self.data.category_ids))
        size = self.config.batch_size
        return epoch, order[j * size:(j + 1) * size]

    def _batch(self, indices: np.ndarray) -> TrainingBatch:
        index = torch.as_tensor(indices, dtype=torch.long)
        return TrainingBatch(
            images=self.data.images[index],
            masks=self.data.masks[index],
            category_ids=[self.data.category_ids[i] for i in indices],
        )

    def step(self) -> LossBreakdown:
        epoch, indices = self.batch_indices(self.state.n)
        self.state.epoch = epoch
        breakdown, grads = training_step(
            self.model, self._batch(indices), self.state, self.schedule, self.toggles, self.ema
        )
        numerics.adamw_step(dict(self.model.named_parameters()), grads, self.optimizer)
        if self.ema is not None:
            self._update_ema()
        return breakdown

    def _update_ema(self) -> None:
        decay = self.config.ema_decay
        with torch.no_grad():
            for target, source in zip(self.ema.parameters(), self.model.parameters()):
                target.mul_(decay).add_(source, alpha=1.0 - decay)

    def run(
        self, callback: Optional[Callable[[TrainState, LossBreakdown], None]] = None, progress: bool = True
    ) -> TrainState:
        with tqdm(total=self.state.N, initial=self.state.n, disable=not progress, desc="train") as bar:
            while self.state.n < self.state.N:
                breakdown = self.step()
                if callback is not None:
                    callback(self.state, breakdown)
                bar.set_postfix(l_s=f"{breakdown.l_s:.4f}", total=f"{breakdown.total:.4f}")
                bar.update(1)
        return self.state


class SamplingPlan(BaseModel):
    """
    Respaced reverse chain. Position i (0-based) moves from timesteps[i] to
    timesteps[i - 1], with timestep 0 before position 0.
    """
    model_config = ConfigDict(frozen=True)

    T: int
    timesteps: List[int]
    alpha_bars: List[float]
    alpha_bars_prev: List[float]
    betas: List[float]
    sigmas: List[float]

    @property
    def steps(self) -> int:
        return len(self.timesteps)

    def index_of(self, t: int) -> int:
        if t == 0:
            raise ContractError("there is no transition below t = 1")
        try:
            return self.timesteps.index(int(t))
        except ValueError:
            raise ContractError(f"timestep {t} is not on this sampling plan")


def make_plan(schedule: NoiseSchedule, steps: int) -> SamplingPlan:
    if not 1 <= steps <= schedule.T:
        raise ContractError(f"sampling steps must be in [1, {schedule.T}], got {steps}")
    # evenly spaced, rounded half up, always ending at T
    timesteps = [(2 * k * schedule.T + steps) // (2 * steps) for k in range(1, steps + 1)]
    ab = schedule.alpha_bars.tolist()
    alpha_bars = [ab[t] for t in timesteps]
    prev = [1.0] + alpha_bars[:-1]
    betas = [1.0 - a / p for a, p in zip(alpha_bars, prev)]
    variances = [(1.0 - p) / (1.0 - a) * b for a, p, b in zip(alpha_bars, prev, betas)]
    # the first posterior variance is zero; borrow the next one so every step is stochastic
    variances[0] = variances[1] if steps > 1 else betas[0]
    return SamplingPlan(
        T=schedule.T,
        timesteps=timesteps,
        alpha_bars=alpha_bars,
        alpha_bars_prev=prev,
        betas=betas,
        sigmas=[math.sqrt(v) for v in variances],
    )


def predict_x0(plan: SamplingPlan, i: int, z_t: Tensor, eps: Tensor) -> Tensor:
    a = plan.alpha_bars[i]
    return (z_t - math.sqrt(1.0 - a) * eps) / math.sqrt(a)


def posterior_mean(plan: SamplingPlan, i: int, z_t: Tensor, eps: Tensor) -> Tensor:
    """Mean of q(z_prev | z_t, x0_hat) with x0_hat recovered from the noise prediction."""
    a, p, b = plan.alpha_bars[i], plan.alpha_bars_prev[i], plan.betas[i]
    x0 = predict_x0(plan, i, z_t, eps)
    return (math.sqrt(p) * b / (1.0 - a)) * x0 + (math.sqrt(1.0 - b) * (1.0 - p) / (1.0 - a)) * z_t


def ddim_step(plan: SamplingPlan, i: int, z_t: Tensor, eps: Tensor) -> Tensor:
    p = plan.alpha_bars_prev[i]
    return math.sqrt(p) * predict_x0(plan, i, z_t, eps) + math.sqrt(1.0 - p) * eps


def transition_mean(view: ShapeBranchView, z_t: Tensor, i: int, plan: SamplingPlan, bundle) -> Tensor:
    t = torch.full((z_t.shape[0],), plan.timesteps[i], dtype=torch.long)
    eps = view.predict_noise(z_t, t, bundle, Branch.SHAPE).eps_s
    return posterior_mean(plan, i, z_t, eps)


def gaussian_logprob(x: Tensor, mean: Tensor, sigma: float) -> Tensor:
    """log N(x; mean, sigma^2 I) per batch row, summed over all other dims, in float64."""
    diff = x.to(torch.float64) - mean.to(torch.float64)
    dims = diff[0].numel()
    quad = (diff ** 2).reshape(diff.shape[0], -1).sum(dim=1) / (2.0 * sigma**2)
    return -quad - dims * (math.log(sigma) + 0.5 * math.log(2.0 * math.pi))


def sample_batch(
    view: ShapeBranchView,
    masks: Tensor,
    category_ids: Sequence[Sequence[int]],
    schedule: NoiseSchedule,
    steps: int,
    sampler: SamplerKind = SamplerKind.ANCESTRAL,
    seeds: Sequence[int] = (0,),
    record_trajectory: bool = False,
) -> Tuple[Tensor, Optional[List[Trajectory]]]:
    """
    Reverse diffusion from standard-normal noise using only the shape branch.
    Each batch row draws its noise from its own generator keyed on seeds[row].
    """
    if len(seeds) != masks.shape[0]:
        raise ContractError(f"{len(seeds)} seeds for {masks.shape[0]} conditions")
    if record_trajectory and sampler is not SamplerKind.ANCESTRAL:
        raise ContractError("policy density undefined at sigma = 0; trajectories need the ancestral sampler")
    plan = make_plan(schedule, steps)
    dtype = next(view.parameters()).dtype
    masks = masks.to(dtype)
    size = masks.shape[-1]
    channels = view.config.image_channels
    generators = [numerics.seeded_generator(seed, 5) for seed in seeds]

    def noise() -> Tensor:
        return torch.stack([torch.randn((channels, size, size), generator=g, dtype=dtype) for g in generators])

    latents: List[Tensor] = []
    means: List[Tensor] = []
    logprobs: List[Tensor] = []
    with torch.no_grad():
        bundle = view.encode_conditions(None, masks, category_ids, Phase.SAMPLING)
        state = LatentState(z=noise(), t=plan.timesteps[-1])
        latents.append(state.z)
        for i in reversed(range(plan.steps)):
            t = torch.full((masks.shape[0],), state.t, dtype=torch.long)
            eps = view.predict_noise(state.z, t, bundle, Branch.SHAPE).eps_s
            if sampler is SamplerKind.DETERMINISTIC:
                z = ddim_step(plan, i, state.z, eps)
            else:
                mean = posterior_mean(plan, i, state.z, eps)
                z = mean + plan.sigmas[i] * noise()
                if record_trajectory:
                    means.append(mean)
                    logprobs.append(gaussian_logprob(z, mean, plan.sigmas[i]))
            state = LatentState(z=z, t=plan.timesteps[i - 1] if i > 0 else 0)
            latents.append(state.z)

    images = to_image(state.z)
    if not record_trajectory:
        return images, None
    chain = torch.stack(latents, dim=1)
    mean_chain = torch.stack(means, dim=1)
    logprob_chain = torch.stack(logprobs, dim=1)
    timesteps = list(reversed(plan.timesteps)) + [0]
    sigmas = [plan.sigmas[i] for i in reversed(range(plan.steps))]
    trajectories = [
        Trajectory(
            mask=masks[row],
            category_ids=list(category_ids[row]),
            timesteps=timesteps,
            latents=chain[row],
            means=mean_chain[row],
            sigmas=sigmas,
            logprobs_old=logprob_chain[row].tolist(),
        )
        for row in range(masks.shape[0])
    ]
    return images, trajectories


def sample(
    view: ShapeBranchView,
    shape_condition: ShapeMask,
    category_ids: Sequence[int],
    schedule: NoiseSchedule,
    steps: int,
    sampler: SamplerKind = SamplerKind.ANCESTRAL,
    seed: int = 0,
    record_trajectory: bool = False,
) -> Tuple[Tensor, Optional[Trajectory]]:
    images, trajectories = sample_batch(
        view,
        shape_condition.to_tensor()[None],
        [list(category_ids)],
        schedule,
        steps,
        sampler,
        [seed],
        record_trajectory,
    )
    return images[0], trajectories[0] if trajectories else None
