"""Event-frame hybrid autoencoder.

Encoder: an image branch and an event branch (event features keep their
temporal axis; convolutions are shared across bins) run through ``n_down``
downsampling blocks. Inside each block both branches get residual blocks,
then SCA writes event context into the image branch and TCA writes image
context into the event branch, then both are halved by strided convs.
The deepest image feature becomes a 3-channel latent.

Decoder: the (quantized) latent is upsampled back to full resolution; at
every level the decoded feature attends to the matching pyramid features of
the boundary pairs. The VFI head predicts per-pixel deformable 5x5 kernels
and a two-way blend mask; the deblur head is a small residual U-Net.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import nn

from .stca import (
    AttentionConfig,
    CrossAttention,
    SpatialCrossAttention,
    TemporalCrossAttention,
    group_norm,
)

FUSIONS = ("concat", "concat_L", "sca", "tca", "stca")
HEADS = ("kernel_synthesis", "simple_unet")


@dataclass(frozen=True)
class HAEConfig:
    in_channels: int = 1
    bins: int = 8
    n_down: int = 3
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2, 4, 4, 4)
    event_channels: int = 8
    res_blocks: int = 2
    codebook_size: int = 512
    beta_commit: float = 0.25
    embed_channels: int = 3
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    fusion: str = "stca"
    decoder_head: str = "kernel_synthesis"
    kernel_size: int = 5
    max_offset_frac: float = 0.25
    decoder_event_features: bool = False

    def __post_init__(self):
        if isinstance(self.attention, dict):
            object.__setattr__(self, "attention", AttentionConfig(**self.attention))
        object.__setattr__(self, "channel_mult", tuple(self.channel_mult))
        if self.embed_channels != 3:
            raise ValueError("the latent embedding has exactly 3 channels")
        if not 1 <= self.n_down <= 5:
            raise ValueError("n_down must be in 1..5")
        if len(self.channel_mult) < self.n_down + 1:
            raise ValueError("channel_mult needs n_down + 1 entries")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.decoder_head not in HEADS:
            raise ValueError(f"decoder_head must be one of {HEADS}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult[: self.n_down + 1]]

    @property
    def event_widths(self) -> list[int]:
        return [self.event_channels * m for m in self.channel_mult[: self.n_down + 1]]

    @property
    def has_event_branch(self) -> bool:
        return self.fusion not in ("concat", "concat_L")

    @property
    def n_pairs(self) -> int:
        return 2 if self.decoder_head == "kernel_synthesis" else 1

    @property
    def uses_event_pyramid(self) -> bool:
        # TCA alone never touches the image branch, so its output reaches the
        # decoder only through the event pyramid.
        return self.has_event_branch and (self.decoder_event_features or self.fusion == "tca")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HAEConfig":
        return cls(**d)

    def check_input(self, height: int, width: int):
        f = 2 ** self.n_down
        if height % f or width % f:
            raise ValueError(f"input {height}x{width} is not divisible by 2^{self.n_down}")


@dataclass
class FeaturePyramid:
    levels: list  # [(image_feature, event_feature or None)], level s at index s-1

    def __len__(self):
        return len(self.levels)

    def image(self, s: int):
        return self.levels[s - 1][0]

    def event(self, s: int):
        return self.levels[s - 1][1]


@dataclass
class QuantizeResult:
    z_q: torch.Tensor
    vq_loss: torch.Tensor
    indices: torch.Tensor


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int | None = None):
        super().__init__()
        out_ch = out_ch or in_ch
        self.norm1 = group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention2d(nn.Module):
    """Full spatial self-attention with a residual connection."""

    def __init__(self, ch: int, heads: int = 1):
        super().__init__()
        self.norm = group_norm(ch)
        self.attn = CrossAttention(ch, ch, ch, heads, tag="self")

    def forward(self, x):
        n, c, h, w = x.shape
        tok = self.norm(x).flatten(2).transpose(1, 2)
        return x + self.attn(tok, tok).transpose(1, 2).reshape(n, c, h, w)


def _fold(f_evt):
    n, t, c, h, w = f_evt.shape
    return f_evt.reshape(n * t, c, h, w), (n, t)


def _unfold(x, nt):
    n, t = nt
    return x.view(n, t, *x.shape[1:])


class DownsampleBlock(nn.Module):
    def __init__(self, cfg: HAEConfig, level: int):
        super().__init__()
        ci, co = cfg.widths[level - 1], cfg.widths[level]
        self.res_img = nn.Sequential(*[ResBlock(ci) for _ in range(cfg.res_blocks)])
        self.down_img = nn.Conv2d(ci, co, 3, stride=2, padding=1)
        self.sca = self.tca = None
        if cfg.has_event_branch:
            ei, eo = cfg.event_widths[level - 1], cfg.event_widths[level]
            self.res_evt = nn.Sequential(*[ResBlock(ei) for _ in range(cfg.res_blocks)])
            self.down_evt = nn.Conv2d(ei, eo, 3, stride=2, padding=1)
            if cfg.fusion in ("stca", "sca"):
                self.sca = SpatialCrossAttention(ei, cfg.bins, ci, cfg.attention)
            if cfg.fusion in ("stca", "tca"):
                self.tca = TemporalCrossAttention(ei, ci, cfg.attention)

    def forward(self, f_img, f_evt=None):
        o_img = self.res_img(f_img)
        if f_evt is None:
            return self.down_img(o_img), None
        if f_evt.shape[0] != f_img.shape[0] or f_evt.shape[-2:] != f_img.shape[-2:]:
            raise ValueError(f"branch shapes differ: {tuple(f_img.shape)} vs {tuple(f_evt.shape)}")
        folded, nt = _fold(f_evt)
        o_evt = _unfold(self.res_evt(folded), nt)
        new_img = self.sca(o_evt, o_img) if self.sca is not None else o_img
        new_evt = self.tca(o_evt, o_img) if self.tca is not None else o_evt
        folded, nt = _fold(new_evt)
        return self.down_img(new_img), _unfold(self.down_evt(folded), nt)


def downsample_block(f_img, f_evt, module: DownsampleBlock):
    return module(f_img, f_evt)


class HybridEncoder(nn.Module):
    def __init__(self, cfg: HAEConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        img_in = cfg.in_channels if cfg.has_event_branch else cfg.in_channels + 2 * cfg.bins
        self.stem_img = nn.Conv2d(img_in, w[0], 3, padding=1)
        if cfg.has_event_branch:
            self.stem_evt = nn.Conv2d(2, cfg.event_widths[0], 3, padding=1)
        self.blocks = nn.ModuleList(DownsampleBlock(cfg, l) for l in range(1, cfg.n_down + 1))
        self.head = nn.Sequential(
            ResBlock(w[-1]), SelfAttention2d(w[-1]), ResBlock(w[-1]),
            group_norm(w[-1]), nn.SiLU(), nn.Conv2d(w[-1], cfg.embed_channels, 3, padding=1),
        )

    def forward(self, image, voxel):
        cfg = self.cfg
        n, _, h, w = image.shape
        cfg.check_input(h, w)
        if voxel.shape != (n, cfg.bins, 2, h, w):
            raise ValueError(f"voxel shape {tuple(voxel.shape)} != {(n, cfg.bins, 2, h, w)}")
        if cfg.has_event_branch:
            f_img = self.stem_img(image)
            folded = voxel.reshape(n * cfg.bins, 2, h, w)
            f_evt = self.stem_evt(folded).view(n, cfg.bins, -1, h, w)
        else:
            f_img = self.stem_img(torch.cat([image, voxel.reshape(n, -1, h, w)], 1))
            f_evt = None
        levels = []
        for block in self.blocks:
            f_img, f_evt = block(f_img, f_evt)
            levels.append((f_img, f_evt))
        return FeaturePyramid(levels), self.head(f_img)


class VectorQuantizer(nn.Module):
    def __init__(self, size: int, dim: int = 3, beta: float = 0.25):
        super().__init__()
        self.beta = beta
        self.codebook = nn.Embedding(size, dim)
        nn.init.uniform_(self.codebook.weight, -1.0 / size, 1.0 / size)

    def forward(self, z) -> QuantizeResult:
        n, c, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, c)
        book = self.codebook.weight
        d = (flat.detach() ** 2).sum(1, keepdim=True) - 2 * flat.detach() @ book.t() + (book ** 2).sum(1)
        idx = d.argmin(1)
        zq = book[idx].view(n, h, w, c).permute(0, 3, 1, 2)
        loss = F.mse_loss(zq, z.detach()) + self.beta * F.mse_loss(z, zq.detach())
        zq_st = zq.detach() + (z - z.detach())  # exact codebook rows, identity gradient
        return QuantizeResult(zq_st, loss, idx.view(n, h, w))


def quantize(z, quantizer: VectorQuantizer) -> QuantizeResult:
    return quantizer(z)


class _UpPath(nn.Module):
    """Latent -> full-resolution feature, fusing pyramid features by SCA at each level."""

    def __init__(self, cfg: HAEConfig):
        super().__init__()
        self.cfg = cfg
        w, ew = cfg.widths, cfg.event_widths
        self.conv_in = nn.Conv2d(cfg.embed_channels, w[-1], 3, padding=1)
        self.mid = nn.Sequential(ResBlock(w[-1]), SelfAttention2d(w[-1]), ResBlock(w[-1]))
        self.fuse = nn.ModuleList()
        self.res = nn.ModuleList()
        self.up = nn.ModuleList()
        for s in range(cfg.n_down, 0, -1):
            kv = cfg.n_pairs * w[s]
            if cfg.uses_event_pyramid:
                kv += cfg.n_pairs * cfg.bins * ew[s]
            self.fuse.append(SpatialCrossAttention(kv, 1, w[s], cfg.attention))
            self.res.append(ResBlock(w[s], w[s - 1]))
            self.up.append(nn.Conv2d(w[s - 1], w[s - 1], 3, padding=1))

    def forward(self, z_q, pyramids):
        d = self.mid(self.conv_in(z_q))
        for i, s in enumerate(range(self.cfg.n_down, 0, -1)):
            feats = [p.image(s) for p in pyramids]
            if self.cfg.uses_event_pyramid:
                feats += [p.event(s).flatten(1, 2) for p in pyramids]
            if feats[0].shape[-2:] != d.shape[-2:]:
                raise ValueError(f"pyramid level {s} is {tuple(feats[0].shape[-2:])}, decoder at {tuple(d.shape[-2:])}")
            d = self.fuse[i](torch.cat(feats, 1).unsqueeze(1), d)
            d = self.res[i](d)
            d = self.up[i](F.interpolate(d, scale_factor=2, mode="nearest"))
        return d


def synthesize(frames, weights, offsets, masks, kernel_size: int = 5):
    """Blend deformably sampled frames.

    frames  : list of ``(N, C, H, W)`` boundary frames
    weights : list of ``(N, K*K, H, W)`` kernel weights per frame
    offsets : list of ``(N, 2*K*K, H, W)`` per-tap (dx, dy) offsets in pixels
    masks   : ``(N, len(frames), H, W)`` blend weights
    """
    k = kernel_size
    n, c, h, w = frames[0].shape
    dtype, dev = frames[0].dtype, frames[0].device
    r = k // 2
    tap_y, tap_x = torch.meshgrid(
        torch.arange(-r, r + 1, dtype=dtype, device=dev),
        torch.arange(-r, r + 1, dtype=dtype, device=dev), indexing="ij",
    )
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=dev), torch.arange(w, dtype=dtype, device=dev), indexing="ij"
    )
    out = 0
    for i, frame in enumerate(frames):
        off = offsets[i].view(n, k * k, 2, h, w)
        px = xs + tap_x.reshape(1, -1, 1, 1) + off[:, :, 0]
        py = ys + tap_y.reshape(1, -1, 1, 1) + off[:, :, 1]
        grid = torch.stack([2 * px / max(w - 1, 1) - 1, 2 * py / max(h - 1, 1) - 1], -1)
        src = frame.unsqueeze(1).expand(n, k * k, c, h, w).reshape(n * k * k, c, h, w)
        sampled = F.grid_sample(src, grid.view(n * k * k, h, w, 2), mode="bilinear",
                                padding_mode="border", align_corners=True).view(n, k * k, c, h, w)
        out = out + masks[:, i:i + 1] * (weights[i].unsqueeze(2) * sampled).sum(1)
    return out


class KernelSynthesisDecoder(nn.Module):
    def __init__(self, cfg: HAEConfig):
        super().__init__()
        self.cfg = cfg
        c0, k2 = cfg.widths[0], cfg.kernel_size ** 2
        self.path = _UpPath(cfg)
        self.hidden = nn.Conv2d(c0 + 2 * cfg.in_channels, c0, 3, padding=1)
        self.out = nn.Conv2d(c0, 2 * 3 * k2 + 2, 1)
        nn.init.zeros_(self.out.weight)
        with torch.no_grad():
            self.out.bias.zero_()
            for i in range(2):
                self.out.bias[i * k2 + k2 // 2] = 3.0  # start near a centred delta kernel

    def heads(self, z_q, pyr0, pyr1, I0, I1):
        k2 = self.cfg.kernel_size ** 2
        d = self.path(z_q, [pyr0, pyr1])
        raw = self.out(F.silu(self.hidden(torch.cat([d, I0, I1], 1))))
        h, w = I0.shape[-2:]
        max_off = self.cfg.max_offset_frac * min(h, w)
        weights = [raw[:, :k2].softmax(1), raw[:, k2:2 * k2].softmax(1)]
        o = raw[:, 2 * k2:6 * k2]
        offsets = [max_off * torch.tanh(o[:, :2 * k2]), max_off * torch.tanh(o[:, 2 * k2:])]
        masks = raw[:, 6 * k2:].softmax(1)
        return weights, offsets, masks

    def forward(self, z_q, pyr0, pyr1, I0, I1):
        weights, offsets, masks = self.heads(z_q, pyr0, pyr1, I0, I1)
        return synthesize([I0, I1], weights, offsets, masks, self.cfg.kernel_size).clamp(0, 1)


class SimpleUNet(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, width: int):
        super().__init__()
        self.inc = nn.Conv2d(in_ch, width, 3, padding=1)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * width)
        self.up = nn.Conv2d(2 * width, width, 3, padding=1)
        self.dec = ResBlock(2 * width, width)
        self.outc = nn.Conv2d(width, out_ch, 3, padding=1)
        nn.init.zeros_(self.outc.weight)
        nn.init.zeros_(self.outc.bias)

    def forward(self, x):
        a = F.silu(self.inc(x))
        b = self.mid(F.silu(self.down(a)))
        u = self.up(F.interpolate(b, scale_factor=2, mode="nearest"))
        return self.outc(F.silu(self.dec(torch.cat([a, u], 1))))


class DeblurDecoder(nn.Module):
    def __init__(self, cfg: HAEConfig):
        super().__init__()
        self.cfg = cfg
        self.path = _UpPath(cfg)
        self.unet = SimpleUNet(cfg.widths[0] + cfg.in_channels, cfg.in_channels, cfg.widths[0])

    def forward(self, z_q, pyr, I_blur):
        d = self.path(z_q, [pyr])
        return (I_blur + self.unet(torch.cat([d, I_blur], 1))).clamp(0, 1)


class HybridAutoEncoder(nn.Module):
    """Encoder, quantizer and task-specific decoder sharing one config."""

    def __init__(self, cfg: HAEConfig = HAEConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = HybridEncoder(cfg)
        self.quantizer = VectorQuantizer(cfg.codebook_size, cfg.embed_channels, cfg.beta_commit)
        if cfg.decoder_head == "kernel_synthesis":
            self.decoder = KernelSynthesisDecoder(cfg)
        else:
            self.decoder = DeblurDecoder(cfg)

    def encode(self, image, voxel):
        return self.encoder(image, voxel)

    def quantize(self, z) -> QuantizeResult:
        return self.quantizer(z)

    def decode(self, z_q, pyr0, pyr1, I0, I1):
        if self.cfg.decoder_head != "kernel_synthesis":
            raise ValueError("decode() needs the kernel_synthesis head; use decode_deblur()")
        return self.decoder(z_q, pyr0, pyr1, I0, I1)

    def decode_deblur(self, z_q, pyr, I_blur, *extra):
        if self.cfg.decoder_head != "simple_unet":
            raise ValueError("decode_deblur() needs the simple_unet head")
        if extra or isinstance(pyr, (list, tuple)):
            raise ValueError("deblurring takes a single image-event pair")
        return self.decoder(z_q, pyr, I_blur)

    def empty_voxel(self, image):
        n, _, h, w = image.shape
        return image.new_zeros(n, self.cfg.bins, 2, h, w)


def stage1_loss(I_out, I_gt, vq_loss):
    """Mean absolute reconstruction error plus the VQ regulariser."""
    if I_out.shape != I_gt.shape:
        raise ValueError(f"shape mismatch {tuple(I_out.shape)} vs {tuple(I_gt.shape)}")
    return (I_out - I_gt).abs().mean() + vq_loss


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def with_fusion(cfg: HAEConfig, fusion: str) -> HAEConfig:
    """Config for a fusion ablation; ``concat_L`` is widened to match the STCA parameter count."""
    if fusion != "concat_L":
        return replace(cfg, fusion=fusion)
    target = count_parameters(HybridAutoEncoder(replace(cfg, fusion="stca")))
    best = None
    for base in range(cfg.base_channels, 4 * cfg.base_channels + 1):
        cand = replace(cfg, fusion="concat_L", base_channels=base)
        n = count_parameters(HybridAutoEncoder(cand))
        gap = abs(n - target) / target
        if best is None or gap < best[0]:
            best = (gap, cand)
        if n > target:
            break
    return best[1]
