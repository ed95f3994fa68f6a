"""Latent diffusion over 3-channel embeddings.

The sampler is deterministic: each reverse step applies the DDPM posterior
mean with the predicted noise and injects nothing. Training and inference
share ``unroll`` so the denoised embedding used by the loss is produced by
exactly the code that runs at test time.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .stca import group_norm


@dataclass(frozen=True)
class NoiseSchedule:
    beta: tuple[float, ...]

    def __post_init__(self):
        b = np.asarray(self.beta, np.float64)
        if b.ndim != 1 or b.size == 0 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "beta", tuple(float(v) for v in b))

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - np.asarray(self.beta)

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def alpha_at(self, t: int) -> float:
        self._check(t, allow_zero=False)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product up to step ``t``; step 0 is the clean sample (1.0)."""
        self._check(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def _check(self, t: int, allow_zero: bool):
        lo = 0 if allow_zero else 1
        if not lo <= int(t) <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    def to_dict(self) -> dict:
        return {"beta": list(self.beta)}


def make_schedule(T_steps: int = 5, beta_start: float = 1e-5, beta_end: float = 0.1) -> NoiseSchedule:
    """Linear schedule, endpoints inclusive; a single step uses ``beta_start``."""
    if T_steps < 1:
        raise ValueError("T_steps must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T_steps == 1:
        return NoiseSchedule((beta_start,))
    return NoiseSchedule(tuple(np.linspace(beta_start, beta_end, T_steps)))


def forward_diffuse(z_gt, t: int, eps, sched: NoiseSchedule):
    """Closed-form noising ``sqrt(abar_t) z + sqrt(1 - abar_t) eps``; ``t = 0`` returns ``z_gt``."""
    if eps.shape != z_gt.shape:
        raise ValueError("noise and embedding shapes differ")
    ab = sched.alpha_bar_at(t)
    return math.sqrt(ab) * z_gt + math.sqrt(1.0 - ab) * eps


def forward_step(z_prev, t: int, eps, sched: NoiseSchedule):
    """One Markov step of the forward chain, ``q(z_t | z_{t-1})``."""
    sched._check(t, allow_zero=False)
    b = sched.beta[t - 1]
    return math.sqrt(1.0 - b) * z_prev + math.sqrt(b) * eps


def denoise_step(z_t, t: int, eps_hat, sched: NoiseSchedule):
    a = sched.alpha_at(t)
    ab = sched.alpha_bar_at(t)
    return (z_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)


@dataclass(frozen=True)
class DenoiserConfig:
    channels: tuple[int, ...] = (128, 256, 256)
    time_embed_dim: int = 128
    condition_mode: str = "concat"
    n_cond: int = 2
    embed_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.condition_mode != "concat":
            raise ValueError("only concat conditioning is supported")
        if not self.channels:
            raise ValueError("need at least one U-Net level")

    @property
    def in_channels(self) -> int:
        return self.embed_channels * (1 + self.n_cond)

    @property
    def depth(self) -> int:
        return len(self.channels)

    def fit(self, latent_size: int) -> "DenoiserConfig":
        """Drop the deepest levels until every downsampling divides ``latent_size``."""
        d = self.depth
        while d > 1 and latent_size % 2 ** (d - 1):
            d -= 1
        return self if d == self.depth else DenoiserConfig(self.channels[:d], self.time_embed_dim,
                                                           self.condition_mode, self.n_cond,
                                                           self.embed_channels)

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], -1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb: int):
        super().__init__()
        self.norm1 = group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb, out_ch)
        self.norm2 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x))) + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ConditionalUNet(nn.Module):
    """Noise predictor over ``[z_t, z_cond...]`` concatenated on channels."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        ch, td = cfg.channels, cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, 2 * td), nn.SiLU(), nn.Linear(2 * td, 2 * td))
        te = 2 * td
        self.inc = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(TimeResBlock(ch[i], ch[i], te) for i in range(len(ch)))
        self.downs = nn.ModuleList(
            nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1) for i in range(len(ch) - 1)
        )
        self.mid = TimeResBlock(ch[-1], ch[-1], te)
        self.ups = nn.ModuleList(nn.Conv2d(ch[i + 1], ch[i], 3, padding=1) for i in range(len(ch) - 1))
        self.up_blocks = nn.ModuleList(TimeResBlock(2 * ch[i], ch[i], te) for i in range(len(ch) - 1))
        self.out_norm = group_norm(ch[0])
        self.outc = nn.Conv2d(ch[0], cfg.embed_channels, 3, padding=1)
        nn.init.zeros_(self.outc.weight)
        nn.init.zeros_(self.outc.bias)
        self.n_calls = 0

    def forward(self, z_t, t, conds):
        if len(conds) != self.cfg.n_cond:
            raise ValueError(f"expected {self.cfg.n_cond} condition embeddings, got {len(conds)}")
        for c in conds:
            if c.shape != z_t.shape:
                raise ValueError(f"condition shape {tuple(c.shape)} != sample shape {tuple(z_t.shape)}")
        f = 2 ** (self.cfg.depth - 1)
        if z_t.shape[-1] % f or z_t.shape[-2] % f:
            raise ValueError(f"latent {tuple(z_t.shape[-2:])} not divisible by {f}")
        self.n_calls += 1
        n = z_t.shape[0]
        tt = torch.as_tensor(t).reshape(-1)
        if tt.numel() == 1:
            tt = tt.expand(n)
        emb = self.time_mlp(timestep_embedding(tt, self.cfg.time_embed_dim).to(z_t.dtype))
        h = self.inc(torch.cat([z_t, *conds], 1))
        skips = []
        for i, blk in enumerate(self.down_blocks):
            h = blk(h, emb)
            if i < len(self.downs):
                skips.append(h)
                h = self.downs[i](h)
        h = self.mid(h, emb)
        for i in reversed(range(len(self.ups))):
            h = self.ups[i](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.up_blocks[i](torch.cat([h, skips[i]], 1), emb)
        return self.outc(F.silu(self.out_norm(h)))


def predict_noise(z_t, t, z_cond0, z_cond1, model: ConditionalUNet):
    return model(z_t, t, [z_cond0, z_cond1])


def unroll(model: ConditionalUNet, z_T, conds, sched: NoiseSchedule):
    """Run the reverse chain from step ``T`` down to 1 and return the final embedding."""
    z = z_T
    for t in range(sched.T, 0, -1):
        z = denoise_step(z, t, model(z, t, conds), sched)
    return z


def sample(z_cond0, z_cond1, sched: NoiseSchedule, model: ConditionalUNet, rng: torch.Generator | None = None):
    """Draw ``z_T ~ N(0, I)`` and denoise it; conditions only, never the target."""
    conds = [c for c in (z_cond0, z_cond1) if c is not None]
    z_T = torch.randn(conds[0].shape, generator=rng, dtype=conds[0].dtype).to(conds[0].device)
    return unroll(model, z_T, conds, sched)


def dm_loss(z_hat, z_gt):
    """Mean absolute error between the final denoised embedding and the target."""
    if z_hat.shape != z_gt.shape:
        raise ValueError("shape mismatch")
    return (z_hat - z_gt).abs().mean()


def traditional_dm_loss(eps, eps_theta):
    """Mean squared error between injected and predicted noise."""
    if eps.shape != eps_theta.shape:
        raise ValueError("shape mismatch")
    return ((eps - eps_theta) ** 2).mean()


def stage2_loss(I_hat, I_gt, z_hat, z_gt):
    if I_hat.shape != I_gt.shape:
        raise ValueError("image shape mismatch")
    return (I_hat - I_gt).abs().mean() + dm_loss(z_hat, z_gt)
