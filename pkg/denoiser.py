"""
Conditional noise predictor: a shared UNet encoder, twin decoders (shape and
mix branches) and ControlNet-style condition encoders for the real image and
the shape mask.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

import numerics
from exceptions import ContractError, ShapeError
from models.run_config import ModelConfig
from models.training import Branch, ConditionBundle, NoisePrediction, Phase

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


class Conv(nn.Conv2d):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__(in_channels, out_channels, kernel_size, padding=kernel_size // 2)

    def forward(self, x: Tensor) -> Tensor:
        return numerics.conv2d(x, self.weight, padding=self.padding[0], bias=self.bias)


class Norm(nn.GroupNorm):
    def forward(self, x: Tensor) -> Tensor:
        return numerics.group_norm(x, self.num_groups, self.weight, self.bias, self.eps)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.detach().zero_()
    return module


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, emb_channels: int, groups: int):
        super().__init__()
        self.norm1 = Norm(groups, in_channels)
        self.conv1 = Conv(in_channels, out_channels)
        self.emb = nn.Linear(emb_channels, out_channels)
        self.norm2 = Norm(groups, out_channels)
        self.conv2 = Conv(out_channels, out_channels)
        self.skip = Conv(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(numerics.silu(self.norm1(x)))
        h = numerics.add(h, self.emb(numerics.silu(emb))[:, :, None, None])
        h = self.conv2(numerics.silu(self.norm2(h)))
        return self.skip(x) + h


class Embeddings(nn.Module):
    """Timestep MLP plus the category table that stands in for the text prompt."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.dim = config.embedding_dim
        self.emb_channels = 4 * config.base_width
        self.time_mlp = nn.Sequential(
            nn.Linear(self.dim, self.emb_channels), nn.SiLU(), nn.Linear(self.emb_channels, self.emb_channels)
        )
        self.category_table = nn.Embedding(config.num_categories, self.dim)
        self.category_proj = nn.Linear(self.dim, self.emb_channels)

    def category_vector(self, category_ids: Sequence[Sequence[int]]) -> Tensor:
        """c_t: mean category embedding per layout; an empty layout gets the zero vector."""
        rows = []
        for ids in category_ids:
            if not ids:
                rows.append(torch.zeros(self.dim, dtype=self.category_table.weight.dtype))
                continue
            index = torch.as_tensor(list(ids), dtype=torch.long)
            if index.min() < 0 or index.max() >= self.category_table.num_embeddings:
                raise ContractError(f"category ids {list(ids)} outside the embedding table")
            rows.append(self.category_table(index).mean(dim=0))
        return torch.stack(rows)

    def forward(self, t: Tensor, c_t: Tensor) -> Tensor:
        temb = numerics.timestep_embedding(t, self.dim).to(c_t.dtype)
        return self.time_mlp(temb) + self.category_proj(c_t)


class SharedEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = config.widths()
        emb = 4 * config.base_width
        self.stem = Conv(config.image_channels, widths[0])
        self.levels = nn.ModuleList()
        prev = widths[0]
        for width in widths:
            blocks = nn.ModuleList()
            for _ in range(config.blocks_per_level):
                blocks.append(ResBlock(prev, width, emb, config.groups))
                prev = width
            self.levels.append(blocks)
        self.mid = ResBlock(prev, prev, emb, config.groups)

    def forward(self, z: Tensor, emb: Tensor) -> Tuple[Tensor, List[Tensor]]:
        h = self.stem(z)
        skips = []
        for i, blocks in enumerate(self.levels):
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
            if i < len(self.levels) - 1:
                h = numerics.avg_pool2x(h)
        return self.mid(h, emb), skips


class Decoder(nn.Module):
    """
    Mirror of the encoder; the condition pyramid is added to each skip
    connection before it is concatenated back in.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = config.widths()
        emb = 4 * config.base_width
        self.levels = nn.ModuleList()
        prev = widths[-1]
        for width in reversed(widths):
            blocks = nn.ModuleList([ResBlock(prev + width, width, emb, config.groups)])
            for _ in range(config.blocks_per_level - 1):
                blocks.append(ResBlock(width, width, emb, config.groups))
            self.levels.append(blocks)
            prev = width
        self.out_norm = Norm(config.groups, widths[0])
        self.out_conv = Conv(widths[0], config.image_channels)

    def forward(self, h: Tensor, skips: List[Tensor], condition: List[Tensor], emb: Tensor) -> Tensor:
        if len(condition) != len(skips):
            raise ShapeError(f"condition pyramid has {len(condition)} levels, decoder expects {len(skips)}")
        depth = len(skips)
        for j, blocks in enumerate(self.levels):
            level = depth - 1 - j
            skip = numerics.add(skips[level], condition[level])
            h = torch.cat([h, skip], dim=1)
            for block in blocks:
                h = block(h, emb)
            if level > 0:
                h = numerics.upsample2x(h)
        return self.out_conv(numerics.silu(self.out_norm(h)))


class ConditionEncoder(nn.Module):
    """Small convolutional pyramid with zero-initialized 1x1 output projections."""

    def __init__(self, in_channels: int, config: ModelConfig):
        super().__init__()
        widths = config.widths()
        self.stem = Conv(in_channels, widths[0])
        self.blocks = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.projections = nn.ModuleList()
        prev = widths[0]
        for width in widths:
            self.blocks.append(Conv(prev, width))
            self.norms.append(Norm(config.groups, width))
            self.projections.append(zero_module(Conv(width, width, 1)))
            prev = width

    def forward(self, x: Tensor) -> List[Tensor]:
        h = numerics.silu(self.stem(x))
        pyramid = []
        for i, (conv, norm, proj) in enumerate(zip(self.blocks, self.norms, self.projections)):
            if i > 0:
                h = numerics.avg_pool2x(h)
            h = numerics.silu(norm(conv(h)))
            pyramid.append(proj(h))
        return pyramid


def mix_conditions(c_i: List[Tensor], c_l: List[Tensor], n: int, N: int) -> List[Tensor]:
    """c_m = (n/N) * c_i + sg[c_l], level by level."""
    if N < 1 or not 0 <= n <= N:
        raise ContractError(f"mixing needs 0 <= n <= N and N >= 1, got n={n}, N={N}")
    if len(c_i) != len(c_l):
        raise ShapeError(f"pyramids differ in depth: {len(c_i)} vs {len(c_l)}")
    weight = n / N
    mixed = []
    for a, b in zip(c_i, c_l):
        if a.shape != b.shape:
            raise ShapeError(f"pyramid level mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        mixed.append(numerics.add(weight * a, numerics.stop_gradient(b)))
    return mixed


def _check_masks(masks: Tensor, levels: int) -> None:
    if masks.ndim != 4 or masks.shape[1] != 1:
        raise ShapeError(f"masks must be (N, 1, S, S), got {tuple(masks.shape)}")
    size = masks.shape[-1]
    if masks.shape[-2] != size or size % (2 ** (levels - 1)):
        raise ShapeError(f"mask canvas {tuple(masks.shape[-2:])} incompatible with {levels} levels")


class DualBranchDenoiser(nn.Module):
    """
    Noise predictor eps_theta with a shared encoder and two decoders of identical
    architecture. The shape decoder consumes c_s, the mix decoder consumes c_m.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(numerics.derive_seed(seed, 11) % (2**63))
            self.embeddings = Embeddings(config)
            self.encoder = SharedEncoder(config)
            self.shape_decoder = Decoder(config)
            self.mix_decoder = Decoder(config)
            self.image_encoder = ConditionEncoder(config.image_channels, config)
            self.mask_encoder = ConditionEncoder(1, config)

    def parameter_groups(self) -> Dict[str, Dict[str, nn.Parameter]]:
        """Exhaustive, disjoint partition of the trainable parameters."""

        def named(*attrs: str) -> Dict[str, nn.Parameter]:
            return {f"{a}.{n}": p for a in attrs for n, p in getattr(self, a).named_parameters()}

        return {
            "shared_encoder": named("encoder"),
            "shape_decoder": named("shape_decoder"),
            "mix_decoder": named("mix_decoder"),
            "condition_encoders": named("image_encoder", "mask_encoder"),
            "embeddings": named("embeddings"),
        }

    def encode_conditions(
        self,
        image: Optional[Tensor],
        masks: Tensor,
        category_ids: Sequence[Sequence[int]],
        phase: Phase = Phase.TRAINING,
    ) -> ConditionBundle:
        _check_masks(masks, self.config.levels)
        if len(category_ids) != masks.shape[0]:
            raise ShapeError(f"{len(category_ids)} category lists for a batch of {masks.shape[0]}")
        c_i = None
        if phase is Phase.TRAINING:
            if image is None:
                raise ContractError("training-phase conditions require the real image")
            if image.shape[0] != masks.shape[0] or image.shape[-2:] != masks.shape[-2:]:
                raise ShapeError(f"image {tuple(image.shape)} does not match masks {tuple(masks.shape)}")
            c_i = self.image_encoder(2.0 * image - 1.0)
        elif image is not None:
            raise ContractError("sampling-phase conditions never read a real image")
        return ConditionBundle(
            c_l=self.mask_encoder(masks),
            c_t=self.embeddings.category_vector(category_ids),
            c_i=c_i,
            phase=phase,
        )

    def predict_noise(
        self, z_t: Tensor, t: Tensor, bundle: ConditionBundle, branches: Branch = Branch.SHAPE
    ) -> NoisePrediction:
        if branches in (Branch.MIX, Branch.BOTH) and bundle.c_m is None:
            raise ContractError("the mix branch requires c_m")
        emb = self.embeddings(torch.as_tensor(t).reshape(-1), bundle.c_t)
        h, skips = self.encoder(z_t, emb)
        eps_s = eps_m = None
        if branches in (Branch.SHAPE, Branch.BOTH):
            eps_s = self.shape_decoder(h, skips, bundle.c_s, emb)
        if branches in (Branch.MIX, Branch.BOTH):
            eps_m = self.mix_decoder(h, skips, bundle.c_m, emb)
        return NoisePrediction(eps_s=eps_s, eps_m=eps_m)

    def sampling_view(self) -> "ShapeBranchView":
        return ShapeBranchView(self)


class ShapeBranchView(nn.Module):
    """
    The sampling-phase network: shared encoder, shape decoder, mask encoder and
    embeddings only. Parameters are shared with the owning denoiser.
    """

    def __init__(self, model: DualBranchDenoiser):
        super().__init__()
        self.config = model.config
        self.embeddings = model.embeddings
        self.encoder = model.encoder
        self.shape_decoder = model.shape_decoder
        self.mask_encoder = model.mask_encoder

    def encode_conditions(
        self,
        image: Optional[Tensor],
        masks: Tensor,
        category_ids: Sequence[Sequence[int]],
        phase: Phase = Phase.SAMPLING,
    ) -> ConditionBundle:
        if image is not None or phase is not Phase.SAMPLING:
            raise ContractError("the sampling view has no image path")
        _check_masks(masks, self.config.levels)
        return ConditionBundle(
            c_l=self.mask_encoder(masks), c_t=self.embeddings.category_vector(category_ids), phase=Phase.SAMPLING
        )

    def predict_noise(
        self, z_t: Tensor, t: Tensor, bundle: ConditionBundle, branches: Branch = Branch.SHAPE
    ) -> NoisePrediction:
        if branches is not Branch.SHAPE:
            raise ContractError("the sampling view only carries the shape branch")
        emb = self.embeddings(torch.as_tensor(t).reshape(-1), bundle.c_t)
        h, skips = self.encoder(z_t, emb)
        return NoisePrediction(eps_s=self.shape_decoder(h, skips, bundle.c_s, emb))

    def trainable(self) -> Dict[str, nn.Parameter]:
        return dict(self.named_parameters())
