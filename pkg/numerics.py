"""
Tensor primitives, reverse-mode gradients and the AdamW optimizer.

Tensors are torch tensors and the computation graph is torch's autograd tape:
every primitive below records onto it, `gradients` walks it in reverse, and
`stop_gradient` cuts it.
"""
import logging
import math
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from exceptions import ContractError, ShapeError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit seed derived from a root seed and a key path."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0])


def seeded_generator(seed: int, *keys: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, *keys) % (2**63))


def configure_determinism(enabled: bool, num_threads: Optional[int] = None) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)
    elif num_threads:
        torch.set_num_threads(num_threads)


def _shape_checked(op: Callable, name: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        return op(a, b)
    except RuntimeError as e:
        raise ShapeError(f"{name}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)} ({e})")


def conv2d(
    input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Optional[Tensor] = None
) -> Tensor:
    """Cross-correlation with zero padding on (C, H, W) or (N, C, H, W) input."""
    if kernel.ndim != 4 or kernel.shape[-1] != kernel.shape[-2]:
        raise ShapeError(f"conv2d: kernel must be (C_out, C_in, k, k), got {tuple(kernel.shape)}")
    if kernel.shape[-1] % 2 == 0:
        raise ContractError(f"conv2d: kernel size must be odd, got {kernel.shape[-1]}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if input.ndim not in (3, 4) or input.shape[-3] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d: channel mismatch between input {tuple(input.shape)} and kernel {tuple(kernel.shape)}"
        )
    return F.conv2d(input, kernel, bias, stride=stride, padding=padding)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _shape_checked(torch.matmul, "matmul", a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _shape_checked(torch.add, "add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _shape_checked(torch.mul, "mul", a, b)


def group_norm(
    x: Tensor, groups: int, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5
) -> Tensor:
    if x.shape[-3] % groups:
        raise ShapeError(f"group_norm: {x.shape[-3]} channels not divisible into {groups} groups")
    if x.ndim == 3:
        return F.group_norm(x[None], groups, weight, bias, eps)[0]
    return F.group_norm(x, groups, weight, bias, eps)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def upsample2x(x: Tensor) -> Tensor:
    if x.ndim == 3:
        return F.interpolate(x[None], scale_factor=2, mode="nearest")[0]
    return F.interpolate(x, scale_factor=2, mode="nearest")


def avg_pool2x(x: Tensor) -> Tensor:
    return F.avg_pool2d(x, 2)


def timestep_embedding(t: Tensor, dim: int, base: float = 10000.0) -> Tensor:
    """Sinusoidal embedding, interleaved as [sin f0 t, cos f0 t, sin f1 t, cos f1 t, ...]."""
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t[None]
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(t.shape[0], 2 * half)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(torch.get_default_dtype())


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


def gradients(loss: Tensor, params: Mapping[str, Tensor], retain_graph: bool = False) -> Dict[str, Tensor]:
    """
    Reverse-mode accumulation of d(loss)/d(param) for every named parameter.
    Parameters the loss does not reach get exact zeros.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    names = [n for n, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(
        loss, [params[n] for n in names], allow_unused=True, retain_graph=retain_graph
    ) if names and loss.requires_grad else [None] * len(names)
    out = {n: torch.zeros_like(p) for n, p in params.items()}
    for n, g in zip(names, grads):
        if g is not None:
            out[n] = g
    return out


class OptimizerState:
    """
    AdamW moments and step count for a named parameter set.
    Decoupled weight decay, bias-corrected moments.
    """

    def __init__(
        self,
        params: Mapping[str, torch.nn.Parameter],
        lr: float,
        weight_decay: float = 0.01,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.names = list(params)
        self.params = dict(params)
        self.optimizer = torch.optim.AdamW(
            list(self.params.values()), lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, foreach=False
        )

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step_count(self) -> int:
        counts = [int(s["step"]) for s in self.optimizer.state.values() if "step" in s]
        return max(counts, default=0)

    def export(self) -> Dict[str, Tensor]:
        arrays: Dict[str, Tensor] = {}
        for name in self.names:
            state = self.optimizer.state.get(self.params[name])
            if not state:
                continue
            arrays[f"{name}/exp_avg"] = state["exp_avg"].detach().clone()
            arrays[f"{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().clone()
            arrays[f"{name}/step"] = torch.as_tensor(state["step"], dtype=torch.float32).reshape(1).clone()
        return arrays

    def load(self, arrays: Mapping[str, Tensor]) -> None:
        for name in self.names:
            if f"{name}/step" not in arrays:
                continue
            p = self.params[name]
            exp_avg = arrays[f"{name}/exp_avg"]
            if exp_avg.shape != p.shape:
                raise ShapeError(f"optimizer moment for {name} has shape {tuple(exp_avg.shape)}, expected {tuple(p.shape)}")
            self.optimizer.state[p] = {
                "step": arrays[f"{name}/step"].reshape(()).clone(),
                "exp_avg": exp_avg.to(p.dtype).clone(),
                "exp_avg_sq": arrays[f"{name}/exp_avg_sq"].to(p.dtype).clone(),
            }


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: OptimizerState) -> None:
    """Apply one AdamW update in place. Parameters without a gradient entry are left untouched."""
    with torch.no_grad():
        for name, p in params.items():
            if state.params.get(name) is not p:
                raise ContractError(f"parameter {name} is not registered with this optimizer state")
            g = grads.get(name)
            if g is not None and g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
            p.grad = None if g is None else g.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
    surrogate: Optional[Callable[[Tensor], Tensor]] = None,
) -> float:
    """
    Worst-case relative error between the backward() gradient of f at x and
    central differences. Differences are taken on `surrogate` when given, so a
    function containing stop_gradient can be compared against the severed
    analytic gradient. Tensors with more than max_coords entries are checked at
    max_coords random coordinates.
    """
    if step <= 0:
        raise ContractError(f"finite difference step must be positive, got {step}")
    differenced = surrogate or f
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    if out.numel() != 1:
        raise ContractError("finite_diff_check requires a scalar function")
    (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    analytic = torch.zeros_like(x) if analytic is None else analytic
    flat = x.detach().reshape(-1)
    n = flat.numel()
    if n > max_coords:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    a_vals, n_vals = [], []
    with torch.no_grad():
        for i in coords:
            xp = flat.clone()
            xp[i] += step
            xm = flat.clone()
            xm[i] -= step
            numeric = (differenced(xp.view_as(x)).item() - differenced(xm.view_as(x)).item()) / (2 * step)
            a_vals.append(analytic.reshape(-1)[i].item())
            n_vals.append(numeric)
    a_arr, n_arr = np.array(a_vals), np.array(n_vals)
    scale = max(np.abs(a_arr).max(initial=0.0), np.abs(n_arr).max(initial=0.0))
    floor = max(1e-3 * scale, 1e-10)
    denom = np.maximum(np.maximum(np.abs(a_arr), np.abs(n_arr)), floor)
    return float((np.abs(a_arr - n_arr) / denom).max(initial=0.0))
