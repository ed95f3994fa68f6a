"""Spatial-temporal cross attention between event and image features.

Tensor layouts (batch first):
    event features  (N, T, C_e, H, W)   T temporal bins
    image features  (N, C_i, H, W)

TCA updates the event branch: per pooled location, each of the T event
tokens is scored against the single image token and the scores are
normalised across T (the temporal relevance of each bin).
SCA updates the image branch: flattened, channel-aligned event features act
as keys/values for windowed block attention followed by grid attention.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class AttentionConfig:
    pool: int = 2
    heads: int = 1
    window: int | None = 4  # None: one global spatial attention in SCA
    mbconv_expansion: int = 2


# -- instrumentation ----------------------------------------------------------

class ScoreCounter:
    """Tallies attention score elements (query-key pairs), summed over the batch."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, tag: str, n: int):
        self.counts[tag] = self.counts.get(tag, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


_COUNTER: ScoreCounter | None = None


@contextmanager
def count_scores():
    global _COUNTER
    prev, _COUNTER = _COUNTER, ScoreCounter()
    try:
        yield _COUNTER
    finally:
        _COUNTER = prev


def _record(tag: str, groups: int, lq: int, lk: int):
    if _COUNTER is not None:
        _COUNTER.add(tag, groups * lq * lk)


def attention_cost(bins: int, height: int, width: int, pool: int, window: int | None = None):
    """Return ``(full_pairs, factorized_pairs)`` score counts for one sample.

    ``full_pairs`` is joint spatio-temporal attention, ``bins*H*W*H*W``.
    With ``window=None`` the factorized count is ``(bins/pool**2 + H*W)*H*W``
    (temporal attention on the pooled grid plus global spatial attention).
    With a window size ``w`` the spatial part is block plus grid attention,
    ``2*H*W*w**2``.
    """
    if pool < 1 or height % pool or width % pool:
        raise ValueError(f"pool {pool} must divide {height}x{width}")
    hw = height * width
    full = bins * hw * hw
    temporal = bins * (hw // (pool * pool))
    if window is None:
        spatial = hw * hw
    else:
        w = effective_window(window, height, width)
        spatial = 2 * hw * w * w
    return full, temporal + spatial


def effective_window(window: int, height: int, width: int) -> int:
    w = min(window, height, width)
    if height % w or width % w:
        raise ValueError(f"window {w} must divide {height}x{width}")
    return w


# -- building blocks ----------------------------------------------------------

def group_norm(channels: int) -> nn.GroupNorm:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return nn.GroupNorm(g, channels)


class MBConv(nn.Module):
    """Inverted-residual channel aligner: 1x1 expand, 3x3 depthwise, 1x1 project."""

    def __init__(self, in_ch: int, out_ch: int, expansion: int = 2):
        super().__init__()
        hid = max(in_ch * expansion, 1)
        self.expand = nn.Conv2d(in_ch, hid, 1)
        self.depthwise = nn.Conv2d(hid, hid, 3, padding=1, groups=hid)
        self.project = nn.Conv2d(hid, out_ch, 1)
        self.skip = in_ch == out_ch

    def forward(self, x):
        h = F.silu(self.expand(x))
        h = F.silu(self.depthwise(h))
        h = self.project(h)
        return x + h if self.skip else h


def align_channels(x: torch.Tensor, c_target: int, cfg: AttentionConfig = AttentionConfig(),
                   module: MBConv | None = None) -> torch.Tensor:
    """Map ``(N, C, H, W)`` to ``(N, c_target, H, W)`` through an MBConv block."""
    if module is None:
        module = MBConv(x.shape[1], c_target, cfg.mbconv_expansion).to(x.dtype)
    return module(x)


class CrossAttention(nn.Module):
    """Multi-head scaled dot-product cross attention on token sets ``(G, L, C)``."""

    def __init__(self, q_dim: int, kv_dim: int, dim: int, heads: int = 1, tag: str = "attn"):
        super().__init__()
        if dim % heads:
            raise ValueError("attention dim must be divisible by heads")
        self.heads, self.dim, self.tag = heads, dim, tag
        self.q = nn.Linear(q_dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, q_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.last_weights = None

    def forward(self, q_tokens, kv_tokens, softmax_over: str = "keys"):
        g, lq, _ = q_tokens.shape
        lk = kv_tokens.shape[1]
        h, d = self.heads, self.dim // self.heads
        q = self.q(q_tokens).view(g, lq, h, d).transpose(1, 2)
        k = self.k(kv_tokens).view(g, lk, h, d).transpose(1, 2)
        v = self.v(kv_tokens).view(g, lk, h, d).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        _record(self.tag, g, lq, lk)
        weights = scores.softmax(dim=-1 if softmax_over == "keys" else -2)
        self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(g, lq, self.dim)
        return self.out(out)


class TemporalCrossAttention(nn.Module):
    def __init__(self, evt_ch: int, img_ch: int, cfg: AttentionConfig = AttentionConfig()):
        super().__init__()
        self.pool = cfg.pool
        self.align = MBConv(img_ch, evt_ch, cfg.mbconv_expansion)
        self.attn = CrossAttention(evt_ch, evt_ch, evt_ch, cfg.heads, tag="tca")

    def forward(self, f_evt: torch.Tensor, f_img: torch.Tensor) -> torch.Tensor:
        n, t, c, h, w = f_evt.shape
        if f_img.shape[0] != n or f_img.shape[-2:] != (h, w):
            raise ValueError(f"shape mismatch: event {tuple(f_evt.shape)} vs image {tuple(f_img.shape)}")
        p = self.pool
        if h % p or w % p:
            raise ValueError(f"pool {p} must divide {h}x{w}")
        hp, wp = h // p, w // p
        e = F.avg_pool2d(f_evt.reshape(n * t, c, h, w), p).view(n, t, c, hp, wp)
        i = F.avg_pool2d(self.align(f_img), p)  # (n, c, hp, wp)
        q_tok = e.permute(0, 3, 4, 1, 2).reshape(n * hp * wp, t, c)
        kv_tok = i.permute(0, 2, 3, 1).reshape(n * hp * wp, 1, c)
        out = self.attn(q_tok, kv_tok, softmax_over="queries")
        out = out.view(n, hp, wp, t, c).permute(0, 3, 4, 1, 2)
        out = out.repeat_interleave(p, dim=-2).repeat_interleave(p, dim=-1)
        return f_evt + out

    def attention_map(self) -> torch.Tensor:
        """Weights of the last call, shape ``(N*Hp*Wp, heads, T, 1)``; sums to 1 over T."""
        return self.attn.last_weights


def _to_blocks(x, w):
    n, c, h, wd = x.shape
    x = x.view(n, c, h // w, w, wd // w, w).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(n * (h // w) * (wd // w), w * w, c)


def _from_blocks(t, n, c, h, wd, w):
    t = t.view(n, h // w, wd // w, w, w, c).permute(0, 5, 1, 3, 2, 4)
    return t.reshape(n, c, h, wd)


def _to_grid(x, g):
    n, c, h, wd = x.shape
    x = x.view(n, c, g, h // g, g, wd // g).permute(0, 3, 5, 2, 4, 1)
    return x.reshape(n * (h // g) * (wd // g), g * g, c)


def _from_grid(t, n, c, h, wd, g):
    t = t.view(n, h // g, wd // g, g, g, c).permute(0, 5, 3, 1, 4, 2)
    return t.reshape(n, c, h, wd)


class ChannelNorm(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.norm = nn.LayerNorm(c)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class SpatialCrossAttention(nn.Module):
    """Image tokens attend to channel-aligned event tokens, block then grid partition."""

    def __init__(self, evt_ch: int, bins: int, img_ch: int, cfg: AttentionConfig = AttentionConfig()):
        super().__init__()
        self.window = cfg.window
        self.align = MBConv(bins * evt_ch, img_ch, cfg.mbconv_expansion)
        self.norm_q = ChannelNorm(img_ch)
        self.norm_kv = ChannelNorm(img_ch)
        self.block = CrossAttention(img_ch, img_ch, img_ch, cfg.heads, tag="sca_block")
        if cfg.window is not None:
            self.norm_q2 = ChannelNorm(img_ch)
            self.norm_kv2 = ChannelNorm(img_ch)
            self.grid = CrossAttention(img_ch, img_ch, img_ch, cfg.heads, tag="sca_grid")

    def forward(self, f_evt: torch.Tensor, f_img: torch.Tensor) -> torch.Tensor:
        n, t, c, h, w = f_evt.shape
        ci = f_img.shape[1]
        if f_img.shape[0] != n or f_img.shape[-2:] != (h, w):
            raise ValueError(f"shape mismatch: event {tuple(f_evt.shape)} vs image {tuple(f_img.shape)}")
        if self.align.expand.in_channels != t * c:
            raise ValueError(f"expected {self.align.expand.in_channels} flattened event channels, got {t * c}")
        e = self.align(f_evt.reshape(n, t * c, h, w))
        x = f_img
        if self.window is None:
            q = self.norm_q(x).flatten(2).transpose(1, 2)
            kv = self.norm_kv(e).flatten(2).transpose(1, 2)
            return x + self.block(q, kv).transpose(1, 2).reshape(n, ci, h, w)
        ws = effective_window(self.window, h, w)
        kv = _to_blocks(self.norm_kv(e), ws)
        x = x + _from_blocks(self.block(_to_blocks(self.norm_q(x), ws), kv), n, ci, h, w, ws)
        kv = _to_grid(self.norm_kv2(e), ws)
        x = x + _from_grid(self.grid(_to_grid(self.norm_q2(x), ws), kv), n, ci, h, w, ws)
        return x


def tca(f_evt, f_img, cfg: AttentionConfig = AttentionConfig(), module=None):
    """Functional TCA; builds a fresh module when none is given."""
    if module is None:
        module = TemporalCrossAttention(f_evt.shape[2], f_img.shape[1], cfg).to(f_evt.dtype)
    return module(f_evt, f_img)


def sca(f_evt, f_img, cfg: AttentionConfig = AttentionConfig(), module=None):
    """Functional SCA; builds a fresh module when none is given."""
    if module is None:
        module = SpatialCrossAttention(f_evt.shape[2], f_evt.shape[1], f_img.shape[1], cfg).to(f_evt.dtype)
    return module(f_evt, f_img)
