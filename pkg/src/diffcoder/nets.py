"""Convolutional building blocks, the deterministic encoder, the VAE
baseline, and the conditional denoising U-Net.

All convolutions use circular padding (periodic boundaries). The basic
Convolution Block is conv -> RMS normalization -> SiLU; inside the U-Net
it additionally applies per-channel (1 + scale, shift) modulation from a
learned projection of a sinusoidal timestep embedding. ResNet Blocks are
two Convolution Blocks plus a residual connection. Every encoder level
downsamples 2x, so a depth-d encoder maps an H x W field to a latent of
size H/2^d x W/2^d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ARCHS = ("vae", "diffcoder")

MAX_WIDTH_MULT = 8
WIDTH_SEARCH_BOUNDS = (4, 1024)
BUDGET_TOLERANCE = 0.10


class NetError(ValueError):
    """Invalid architecture parameters or input shapes."""


class BudgetUnreachableError(NetError):
    """No width in the search range hits the parameter budget."""


def default_width_mult(depth: int, cap: int = MAX_WIDTH_MULT) -> tuple[int, ...]:
    """Channel multipliers double per level, capped (8x by default)."""
    return tuple(min(2 ** i, cap) for i in range(depth))


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters shared by the encoder, VAE and U-Net."""

    depth: int
    base_width: int
    width_mult: tuple[int, ...]
    attention: tuple[bool, bool]  # (encoder, decoder / U-Net)
    param_budget: int
    latent_channels: int = 1
    time_embed_dim: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise NetError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 4:
            raise NetError(f"base_width must be >= 4, got {self.base_width}")
        if self.latent_channels < 1:
            raise NetError(f"latent_channels must be >= 1, got {self.latent_channels}")
        if len(self.width_mult) != self.depth:
            raise NetError("width_mult must have one entry per level")
        if self.time_embed_dim % 2:
            raise NetError("time_embed_dim must be even")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.width_mult)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "base_width": self.base_width,
            "width_mult": list(self.width_mult),
            "attention": list(self.attention),
            "param_budget": self.param_budget,
            "latent_channels": self.latent_channels,
            "time_embed_dim": self.time_embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            depth=int(d["depth"]),
            base_width=int(d["base_width"]),
            width_mult=tuple(int(m) for m in d["width_mult"]),
            attention=(bool(d["attention"][0]), bool(d["attention"][1])),
            param_budget=int(d["param_budget"]),
            latent_channels=int(d["latent_channels"]),
            time_embed_dim=int(d["time_embed_dim"]),
        )


def make_model_spec(
    depth: int,
    base_width: int,
    attention: tuple[bool, bool] = (False, False),
    param_budget: int = 0,
    latent_channels: int = 1,
    time_embed_dim: int | None = None,
) -> ModelSpec:
    return ModelSpec(
        depth=depth,
        base_width=base_width,
        width_mult=default_width_mult(depth),
        attention=attention,
        param_budget=param_budget,
        latent_channels=latent_channels,
        time_embed_dim=4 * base_width if time_embed_dim is None else time_embed_dim,
    )


@dataclass(frozen=True)
class LatentField:
    """Compressed representation together with the grid it came from."""

    values: torch.Tensor  # (B, latent_channels, h, w)
    source_grid: tuple[int, int]


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / (half - 1)
    )
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class RMSNorm2d(nn.Module):
    """Root-mean-square normalization over channels at each spatial
    location, with a learnable per-channel gain."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels))

    def forward(self, x):
        rms = torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + self.eps)
        return x * rms * self.gain[None, :, None, None]


def circular_conv(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, padding_mode="circular")


class ConvBlock(nn.Module):
    """conv -> RMS norm -> optional timestep shift/scale -> SiLU."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int = 0):
        super().__init__()
        self.conv = circular_conv(in_ch, out_ch)
        self.norm = RMSNorm2d(out_ch)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch) if time_dim else None

    def forward(self, x, t_emb=None):
        h = self.norm(self.conv(x))
        if self.time_proj is not None:
            scale, shift = self.time_proj(t_emb)[:, :, None, None].chunk(2, dim=1)
            h = h * (1 + scale) + shift
        return F.silu(h)


class ResNetBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int = 0):
        super().__init__()
        self.block1 = ConvBlock(in_ch, out_ch, time_dim)
        self.block2 = ConvBlock(out_ch, out_ch, time_dim)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb=None):
        return self.block2(self.block1(x, t_emb), t_emb) + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head self-attention over spatial positions, pre-normalized,
    with a residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = RMSNorm2d(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3 * C, H * W).chunk(3, dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(C), dim=-1)
        h = (attn @ v.transpose(1, 2)).transpose(1, 2).reshape(B, C, H, W)
        return x + self.out(h)


class CrossAttention2d(nn.Module):
    """Single-head attention of field features onto conditioning tokens."""

    def __init__(self, channels: int, cond_channels: int):
        super().__init__()
        self.norm = RMSNorm2d(channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.kv = nn.Conv2d(cond_channels, 2 * channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x, cond):
        B, C, H, W = x.shape
        q = self.q(self.norm(x)).reshape(B, C, H * W)
        k, v = self.kv(cond).reshape(B, 2 * C, -1).chunk(2, dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(C), dim=-1)
        h = (attn @ v.transpose(1, 2)).transpose(1, 2).reshape(B, C, H, W)
        return x + self.out(h)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = circular_conv(channels, channels, stride=2)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = circular_conv(in_ch, out_ch)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class EncoderLayer(nn.Module):
    """Two ResNet Blocks, optional self-attention, then 2x downsampling."""

    def __init__(self, in_ch: int, out_ch: int, attention: bool):
        super().__init__()
        self.block1 = ResNetBlock(in_ch, out_ch)
        self.block2 = ResNetBlock(out_ch, out_ch)
        self.attn = SelfAttention2d(out_ch) if attention else None
        self.down = Downsample(out_ch)

    def forward(self, x):
        h = self.block2(self.block1(x))
        if self.attn is not None:
            h = self.attn(h)
        return self.down(h)


class Encoder(nn.Module):
    """Deterministic compressor: depth levels of (2 ResNet Blocks + 2x
    downsampling), then a 1x1 projection to the latent channels."""

    def __init__(self, spec: ModelSpec, out_channels: int | None = None):
        super().__init__()
        self.spec = spec
        widths = spec.widths
        self.stem = circular_conv(1, widths[0])
        self.layers = nn.ModuleList(
            EncoderLayer(widths[max(i - 1, 0)], widths[i], spec.attention[0])
            for i in range(spec.depth)
        )
        self.head = nn.Conv2d(widths[-1], out_channels or spec.latent_channels, 1)

    def forward(self, x):
        _check_encoder_input(x, self.spec.depth)
        h = self.stem(x)
        for layer in self.layers:
            h = layer(h)
        return self.head(h)


class DecoderLayer(nn.Module):
    """Two ResNet Blocks, optional self-attention, then 2x upsampling."""

    def __init__(self, in_ch: int, out_ch: int, attention: bool):
        super().__init__()
        self.block1 = ResNetBlock(in_ch, out_ch)
        self.block2 = ResNetBlock(out_ch, out_ch)
        self.attn = SelfAttention2d(out_ch) if attention else None
        self.up = Upsample(out_ch, out_ch)

    def forward(self, x):
        h = self.block2(self.block1(x))
        if self.attn is not None:
            h = self.attn(h)
        return self.up(h)


class Decoder(nn.Module):
    """Mirror of the encoder: depth levels of (2 ResNet Blocks + 2x
    upsampling) from the latent back to a full-resolution field."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths
        self.stem = circular_conv(spec.latent_channels, widths[-1])
        self.layers = nn.ModuleList(
            DecoderLayer(widths[min(i + 1, spec.depth - 1)], widths[i], spec.attention[1])
            for i in reversed(range(spec.depth))
        )
        self.head = circular_conv(widths[0], 1)

    def forward(self, z):
        h = self.stem(z)
        for layer in self.layers:
            h = layer(h)
        return self.head(h)


class VAE(nn.Module):
    """Same encoder trunk with a (mean, log-variance) head plus the mirror
    decoder; samples a single-channel latent so the bottleneck matches the
    deterministic encoder's."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec, out_channels=2 * spec.latent_channels)
        self.decoder = Decoder(spec)

    def encode(self, x):
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return mu, logvar

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x, generator: torch.Generator | None = None):
        mu, logvar = self.encode(x)
        if self.training:
            xi = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
            z = mu + torch.exp(0.5 * logvar) * xi
        else:
            z = mu
        return self.decode(z), mu, logvar


class UNetLevel(nn.Module):
    """Blocks of one resolution level of the U-Net, with optional self- and
    cross-attention (conditioning tokens come from the compressed field)."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, attention: bool, cond_ch: int):
        super().__init__()
        self.block1 = ResNetBlock(in_ch, out_ch, time_dim)
        self.block2 = ResNetBlock(out_ch, out_ch, time_dim)
        self.attn = SelfAttention2d(out_ch) if attention else None
        self.cross = CrossAttention2d(out_ch, cond_ch) if attention else None

    def forward(self, x, t_emb, cond):
        h = self.block2(self.block1(x, t_emb), t_emb)
        if self.attn is not None:
            h = self.attn(h)
            h = self.cross(h, cond)
        return h


class UNet(nn.Module):
    """Conditional denoiser: the noisy field concatenated with the
    nearest-upsampled latent runs through a skip-connected encoder-decoder
    modulated by the timestep embedding; the output is the predicted
    velocity target at full resolution."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths
        ted = spec.time_embed_dim
        attn = spec.attention[1]
        cond = spec.latent_channels

        self.time_mlp = nn.Sequential(
            nn.Linear(ted, ted), nn.SiLU(), nn.Linear(ted, ted)
        )
        self.stem = circular_conv(1 + cond, widths[0])
        self.down = nn.ModuleList(
            UNetLevel(widths[max(i - 1, 0)], widths[i], ted, attn, cond)
            for i in range(spec.depth)
        )
        self.downsamples = nn.ModuleList(Downsample(w) for w in widths)
        self.middle = UNetLevel(widths[-1], widths[-1], ted, attn, cond)
        self.upsamples = nn.ModuleList(
            Upsample(widths[min(i + 1, spec.depth - 1)], widths[i])
            for i in reversed(range(spec.depth))
        )
        self.up = nn.ModuleList(
            UNetLevel(2 * widths[i], widths[i], ted, attn, cond)
            for i in reversed(range(spec.depth))
        )
        self.head = circular_conv(widths[0], 1)

    def forward(self, x_t, t, z):
        B, _, H, W = x_t.shape
        factor = 2 ** self.spec.depth
        if z.ndim != 4 or z.shape[0] != B or z.shape[1] != self.spec.latent_channels:
            raise NetError(f"conditioning shape {tuple(z.shape)} inconsistent with input")
        if (z.shape[2] * factor, z.shape[3] * factor) != (H, W):
            raise NetError(
                f"latent {tuple(z.shape[2:])} does not upsample to field {(H, W)} "
                f"at depth {self.spec.depth}"
            )
        if isinstance(t, (int, np.integer)):
            t = torch.full((B,), int(t), device=x_t.device)
        if torch.any(t < 1):
            raise NetError("timesteps must be >= 1")

        t_emb = self.time_mlp(
            sinusoidal_time_embedding(t, self.spec.time_embed_dim).to(x_t.dtype)
        )
        cond = z.to(x_t.dtype)
        z_up = F.interpolate(cond, size=(H, W), mode="nearest")

        h = self.stem(torch.cat([x_t, z_up], dim=1))
        skips = []
        for level, down in zip(self.down, self.downsamples):
            h = level(h, t_emb, cond)
            skips.append(h)
            h = down(h)
        h = self.middle(h, t_emb, cond)
        for level, up in zip(self.up, self.upsamples):
            h = up(h)
            h = level(torch.cat([h, skips.pop()], dim=1), t_emb, cond)
        return self.head(h)


def build_encoder(spec: ModelSpec) -> Encoder:
    return Encoder(spec)


def build_vae(spec: ModelSpec) -> VAE:
    return VAE(spec)


def build_unet(spec: ModelSpec) -> UNet:
    return UNet(spec)


def encode(enc: Encoder, x) -> LatentField:
    """Compress a single field or a batch into a LatentField."""
    values = torch.as_tensor(np.asarray(getattr(x, "values", x)))
    if values.ndim == 2:
        values = values[None, None]
    elif values.ndim == 3:
        values = values[:, None]
    elif values.ndim != 4:
        raise NetError(f"expected a field or batch of fields, got shape {tuple(values.shape)}")
    values = values.to(next(enc.parameters()).dtype)
    z = enc(values)
    return LatentField(values=z, source_grid=(values.shape[2], values.shape[3]))


def vae_forward(vae: VAE, x, generator: torch.Generator | None = None):
    """Reconstruction plus posterior parameters; latent sampling happens
    only in training mode, evaluation decodes the posterior mean."""
    return vae(x, generator=generator)


def unet_forward(unet: UNet, x_t, t, z):
    """Denoiser call tagged with the velocity parameterization."""
    from .schedule import DenoiserPrediction

    z_values = z.values if isinstance(z, LatentField) else z
    return DenoiserPrediction(values=unet(x_t, t, z_values), parameterization="v")


def count_parameters(*modules: nn.Module) -> int:
    return sum(p.numel() for m in modules for p in m.parameters() if p.requires_grad)


def model_param_count(spec: ModelSpec, arch: str) -> int:
    """Total trainable parameters of the full model for an architecture."""
    if arch == "vae":
        return count_parameters(build_vae(spec))
    if arch == "diffcoder":
        return count_parameters(build_encoder(spec), build_unet(spec))
    raise NetError(f"unknown arch {arch!r}; expected one of {ARCHS}")


def solve_width_for_budget(
    budget: int,
    depth: int,
    arch: str,
    attention: tuple[bool, bool] = (False, False),
) -> ModelSpec:
    """Find a base width whose full-model parameter count lands within
    +-10% of the budget.

    The search is monotone over even widths with the standard capped-
    doubling channel progression. Where that granularity cannot reach the
    budget (small desk-scale budgets at the deeper settings), the single
    odd width between the bracketing evens is tried, and then the channel
    cap is lowered (8 -> 4 -> 2 -> 1) and the search repeated, narrowing
    the progression only as much as feasibility requires. Deterministic.
    """
    if arch not in ARCHS:
        raise NetError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    lo, hi = WIDTH_SEARCH_BOUNDS

    closest: tuple[int, int, int, int] | None = None  # (|count-budget|, width, cap, count)
    seen_mults = set()
    for cap in (8, 4, 2, 1):
        mult = default_width_mult(depth, cap)
        if mult in seen_mults:
            continue
        seen_mults.add(mult)

        def count(width: int) -> int:
            spec = ModelSpec(
                depth=depth, base_width=width, width_mult=mult, attention=attention,
                param_budget=budget, latent_channels=1, time_embed_dim=4 * width,
            )
            return model_param_count(spec, arch)

        # bracket the budget between adjacent even widths (count is
        # strictly increasing in width)
        w_hi = lo
        while w_hi < hi and count(w_hi) < budget:
            w_hi *= 2
        w_hi = min(w_hi, hi)
        w_lo = max(lo, w_hi // 2)
        while w_hi - w_lo > 2:
            mid = (w_lo + w_hi) // 2
            mid += mid % 2
            if count(mid) < budget:
                w_lo = mid
            else:
                w_hi = mid

        for width in sorted({w_lo, w_hi}, key=lambda w: abs(count(w) - budget)) + [w_lo + 1]:
            if not lo <= width <= hi:
                continue
            achieved = count(width)
            gap = abs(achieved - budget)
            if closest is None or gap < closest[0]:
                closest = (gap, width, cap, achieved)
            if gap <= BUDGET_TOLERANCE * budget:
                return ModelSpec(
                    depth=depth, base_width=width, width_mult=mult, attention=attention,
                    param_budget=budget, latent_channels=1, time_embed_dim=4 * width,
                )

    _, width, cap, achieved = closest
    raise BudgetUnreachableError(
        f"no width in {WIDTH_SEARCH_BOUNDS} reaches {budget} params within "
        f"{BUDGET_TOLERANCE:.0%} (closest: width {width} at channel cap {cap} "
        f"with {achieved} params)"
    )


def attention_module_count(*modules: nn.Module) -> int:
    return sum(
        isinstance(m, (SelfAttention2d, CrossAttention2d))
        for module in modules
        for m in module.modules()
    )


def _check_encoder_input(x, depth: int) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise NetError(f"expected (B, 1, H, W) input, got shape {tuple(x.shape)}")
    factor = 2 ** depth
    if x.shape[2] % factor or x.shape[3] % factor:
        raise NetError(
            f"input {tuple(x.shape[2:])} not divisible by 2^{depth} = {factor}"
        )
