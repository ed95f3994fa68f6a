"""Two-stage training, inference and evaluation.

Stage 1 fits the whole autoencoder: both boundary image-event pairs give
feature pyramids, the target frame (with an empty event voxel) gives the
embedding, which is quantized and decoded against the target.

Stage 2 freezes a snapshot of the stage-1 encoder as the ground-truth
encoder, copies it into a condition encoder and trains the denoising U-Net
(plus, depending on the scheme variant, the condition encoder, decoder and
pyramid encoder) through the full reverse-chain unroll.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffusion import (
    ConditionalUNet,
    DenoiserConfig,
    NoiseSchedule,
    forward_diffuse,
    make_schedule,
    sample,
    stage2_loss,
    traditional_dm_loss,
    unroll,
)
from .events import EventStream, scer, split_events, voxelize
from .hae import HAEConfig, HybridAutoEncoder, HybridEncoder, stage1_loss, with_fusion
from .metrics import MetricReport, psnr
from .synth import DeblurSample, Manifest, TripletSample

log = logging.getLogger(__name__)

VARIANTS = ("V0", "V1", "V2", "V3", "V4", "V5", "V6")
TASKS = ("interpolate", "deblur")
CKPT_FORMAT = "eventdiff-checkpoint"
CKPT_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (mapped to exit code 2 by the CLI)."""


@dataclass(frozen=True)
class SchemeFlags:
    variant: str = "V5"
    fusion: str | None = None  # None: keep the model config's value
    n_down: int | None = None
    T_steps: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.n_down is not None and not 2 <= self.n_down <= 5:
            raise ConfigError("n_down must be in 2..5")
        if self.T_steps < 1:
            raise ConfigError("T_steps must be >= 1")

    @property
    def trains_unet(self) -> bool:
        return self.variant not in ("V0", "V1")

    @property
    def direct_loss(self) -> bool:
        return self.variant in ("V3", "V4", "V5", "V6")

    @property
    def train_condition_encoder(self) -> bool:
        return self.variant in ("V4", "V5", "V6")

    @property
    def train_decoder(self) -> bool:
        return self.variant in ("V5", "V6")

    @property
    def train_encoder(self) -> bool:
        return self.variant == "V6"

    def apply(self, hae_cfg: HAEConfig) -> HAEConfig:
        cfg = hae_cfg if self.n_down is None else replace(hae_cfg, n_down=self.n_down)
        return cfg if self.fusion is None else with_fusion(cfg, self.fusion)


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    manifest: str | None = None
    task: str = "interpolate"
    batch_size: int = 8
    crop_size: int | None = None
    steps: int = 2000
    lr_main: float = 1e-3
    lr_finetune: float = 1e-4
    lr_decay_epoch: int | None = None
    eval_every: int = 1  # epochs between validation passes; 0 = only at the end
    seed: int = 0
    start: str = "noised_gt"  # stage-2 unroll start: noised target or pure noise
    ablation: SchemeFlags = field(default_factory=SchemeFlags)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            object.__setattr__(self, "ablation", SchemeFlags(**self.ablation))
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.start not in ("noised_gt", "pure_noise"):
            raise ConfigError("start must be noised_gt or pure_noise")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    def check_crop(self, n_down: int):
        if self.crop_size is not None and self.crop_size % 2 ** n_down:
            raise ConfigError(f"crop size {self.crop_size} is not divisible by 2^{n_down}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- data ---------------------------------------------------------------------

def _as_tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, np.float32))


def interpolation_inputs(I0, I1, events: EventStream, t: float, bins: int):
    """Split the events at normalized time ``t`` and voxelize both halves."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"t={t} must lie strictly inside (0, 1)")
    I0, I1 = np.asarray(I0, np.float32), np.asarray(I1, np.float32)
    if I0.shape != I1.shape or I0.ndim != 3:
        raise ValueError(f"boundary frames must share a (C, H, W) shape, got {I0.shape} and {I1.shape}")
    h, w = I0.shape[-2:]
    t0, t1 = events.window
    e0, e1 = split_events(events, t0 + t * (t1 - t0))
    return [(I0, voxelize(e0, bins, h, w).data), (I1, voxelize(e1, bins, h, w).data)]


def deblur_inputs(blur, events: EventStream, bins: int):
    blur = np.asarray(blur, np.float32)
    if blur.ndim != 3:
        raise ValueError(f"blurry frame must be (C, H, W), got {blur.shape}")
    return [(blur, scer(events, bins, *blur.shape[-2:]).data)]


@dataclass
class PairData:
    """Stacked tensors: ``images[k]``/``voxels[k]`` for boundary pair ``k`` plus targets."""

    images: list[torch.Tensor]
    voxels: list[torch.Tensor]
    target: torch.Tensor
    names: list[str]

    def __len__(self):
        return self.target.shape[0]

    def subset(self, idx, crop=None) -> "PairData":
        idx = torch.as_tensor(idx)

        def cut(x):
            x = x[idx]
            if crop is not None:
                y0, x0, c = crop
                x = x[..., y0:y0 + c, x0:x0 + c]
            return x

        return PairData([cut(x) for x in self.images], [cut(v) for v in self.voxels],
                        cut(self.target), [self.names[i] for i in idx.tolist()])


def load_pairs(files, task: str, bins: int) -> PairData:
    images, voxels, targets, names = None, None, [], []
    for path in files:
        path = Path(path)
        try:
            if task == "interpolate":
                s = TripletSample.load(path)
                pairs = interpolation_inputs(s.I0, s.I1, s.events, s.t_gt, bins)
                tgt = s.Igt
            else:
                s = DeblurSample.load(path)
                pairs = deblur_inputs(s.blur, s.events, bins)
                tgt = s.sharp
            if tgt.shape != pairs[0][0].shape:
                raise ValueError(f"target shape {tgt.shape} != input shape {pairs[0][0].shape}")
        except (OSError, KeyError, ValueError) as e:
            raise ValueError(f"sample {path.name}: {e}") from e
        if images is None:
            images, voxels = [[] for _ in pairs], [[] for _ in pairs]
        elif targets[0].shape != tgt.shape:
            raise ValueError(f"sample {path.name}: shape {tgt.shape} differs from {targets[0].shape}")
        for k, (img, vox) in enumerate(pairs):
            images[k].append(img)
            voxels[k].append(vox)
        targets.append(np.asarray(tgt, np.float32))
        names.append(path.stem)
    if not targets:
        raise ValueError("no samples to load")
    stack = lambda xs: torch.from_numpy(np.stack(xs))  # noqa: E731
    return PairData([stack(x) for x in images], [stack(v) for v in voxels], stack(targets), names)


def load_manifest(path, task: str, bins: int) -> tuple[PairData, PairData]:
    """Train and validation data; validation falls back to the training set."""
    m = Manifest.read(path)
    train = load_pairs(m.files("train"), task, bins)
    val_files = m.files("val")
    val = load_pairs(val_files, task, bins) if val_files else train
    return train, val


def _batches(n: int, batch_size: int, gen: torch.Generator):
    while True:
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            yield perm[i:i + batch_size], i + batch_size >= n


def _crop(data: PairData, size, gen):
    if size is None:
        return None
    h, w = data.target.shape[-2:]
    if size > min(h, w):
        raise ConfigError(f"crop {size} larger than images {h}x{w}")
    y0 = int(torch.randint(0, h - size + 1, (1,), generator=gen))
    x0 = int(torch.randint(0, w - size + 1, (1,), generator=gen))
    return y0, x0, size


# -- model plumbing -----------------------------------------------------------

def _decode(model: HybridAutoEncoder, z_q, pyrs, images):
    if model.cfg.decoder_head == "kernel_synthesis":
        return model.decode(z_q, pyrs[0], pyrs[1], images[0], images[1])
    return model.decode_deblur(z_q, pyrs[0], images[0])


def _check_task(cfg: HAEConfig, task: str):
    want = "kernel_synthesis" if task == "interpolate" else "simple_unet"
    if cfg.decoder_head != want:
        raise ConfigError(f"task {task!r} needs decoder_head={want!r}, checkpoint has {cfg.decoder_head!r}")


def stage1_forward(model: HybridAutoEncoder, batch: PairData):
    """Reconstruction of the target through its own (quantized) embedding."""
    pyrs = [model.encode(img, vox)[0] for img, vox in zip(batch.images, batch.voxels)]
    _, z_gt = model.encode(batch.target, model.empty_voxel(batch.target))
    q = model.quantize(z_gt)
    return _decode(model, q.z_q, pyrs, batch.images), q.vq_loss


class EventDiffSystem(nn.Module):
    """Everything needed for inference after stage 2."""

    def __init__(self, hae: HybridAutoEncoder, unet: ConditionalUNet | None, sched: NoiseSchedule | None,
                 cond_encoder: HybridEncoder | None = None, gt_encoder: HybridEncoder | None = None):
        super().__init__()
        self.hae = hae
        self.unet = unet
        self.sched = sched
        self.cond_encoder = cond_encoder if cond_encoder is not None else copy.deepcopy(hae.encoder)
        self.gt_encoder = gt_encoder if gt_encoder is not None else copy.deepcopy(hae.encoder)
        self.gt_encoder.requires_grad_(False)

    def pyramids(self, batch: PairData):
        return [self.hae.encode(i, v)[0] for i, v in zip(batch.images, batch.voxels)]

    def conditions(self, batch: PairData):
        return [self.cond_encoder(i, v)[1] for i, v in zip(batch.images, batch.voxels)]

    def ground_truth_embedding(self, target):
        return self.gt_encoder(target, self.hae.empty_voxel(target))[1]

    def conds_for_unet(self, conds):
        return conds if len(conds) == 2 else [conds[0]]

    def predict(self, batch: PairData, sched: NoiseSchedule | None = None, rng=None):
        """Sample an embedding from the boundary pairs only and decode it."""
        sched = sched or self.sched
        conds = self.conditions(batch)
        z_hat = sample(conds[0], conds[1] if len(conds) > 1 else None, sched, self.unet, rng)
        return _decode(self.hae, self.hae.quantize(z_hat).z_q, self.pyramids(batch), batch.images)

    def predict_mean(self, batch: PairData):
        conds = self.conditions(batch)
        z = torch.stack(conds).mean(0)
        return _decode(self.hae, self.hae.quantize(z).z_q, self.pyramids(batch), batch.images)


def _val_psnr(predict, data: PairData, batch_size: int) -> float:
    vals = []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            b = data.subset(range(i, min(i + batch_size, len(data))))
            out = predict(b)
            vals += [psnr(o.numpy(), t.numpy()) for o, t in zip(out, b.target)]
    return float(np.mean(vals))


def _lr_factor(epoch: int, decay_epoch):
    return 0.1 if decay_epoch is not None and epoch >= decay_epoch else 1.0


def _loop(cfg: TrainConfig, train: PairData, val: PairData, params, step_fn, val_fn, state):
    """Shared optimisation loop; ``params`` is a list of Adam parameter groups."""
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    groups = [g for g in params if g["params"]]
    opt = torch.optim.Adam(groups) if groups else None
    base_lr = [g["lr"] for g in groups]
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    history = state.setdefault("history", [])
    losses = state.setdefault("losses", [])
    epoch, step = 0, 0
    batches = _batches(len(train), cfg.batch_size, gen)
    while step < cfg.steps and opt is not None:
        idx, last = next(batches)
        batch = train.subset(idx, _crop(train, cfg.crop_size, gen))
        for g, lr in zip(opt.param_groups, base_lr):
            g["lr"] = lr * _lr_factor(epoch, cfg.lr_decay_epoch)
        loss = step_fn(batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        step += 1
        if last:
            epoch += 1
            entry = {"epoch": epoch, "step": step, "loss": float(np.mean(losses[-steps_per_epoch:]))}
            if cfg.eval_every and epoch % cfg.eval_every == 0:
                entry["val_psnr"] = val_fn(val)
            history.append(entry)
            log.info("epoch %d step %d %s", epoch, step,
                     " ".join(f"{k}={v:.4f}" for k, v in entry.items() if isinstance(v, float)))
    state["step"] = step
    state["final_val_psnr"] = val_fn(val)
    log.info("finished at step %d, validation PSNR %.2f dB", step, state["final_val_psnr"])


# -- stage 1 ------------------------------------------------------------------

def train_stage1(cfg: TrainConfig, hae_cfg: HAEConfig = HAEConfig(), train: PairData | None = None,
                 val: PairData | None = None) -> dict:
    """Fit the autoencoder and return a checkpoint dict."""
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs stage = 1")
    hae_cfg = cfg.ablation.apply(hae_cfg)
    _check_task(hae_cfg, cfg.task)
    cfg.check_crop(hae_cfg.n_down)
    if train is None:
        if cfg.manifest is None:
            raise ConfigError("no dataset manifest given")
        train, val = load_manifest(cfg.manifest, cfg.task, hae_cfg.bins)
    val = val if val is not None else train
    hae_cfg.check_input(*train.target.shape[-2:])
    torch.manual_seed(cfg.seed)
    model = HybridAutoEncoder(hae_cfg)

    def step_fn(batch):
        out, vq = stage1_forward(model, batch)
        return stage1_loss(out, batch.target, vq)

    def val_fn(data):
        model.eval()
        v = _val_psnr(lambda b: stage1_forward(model, b)[0], data, cfg.batch_size)
        model.train()
        return v

    state: dict = {}
    _loop(cfg, train, val, [{"params": list(model.parameters()), "lr": cfg.lr_main}], step_fn, val_fn, state)
    return {
        "format": CKPT_FORMAT, "version": CKPT_VERSION, "stage": 1, "task": cfg.task,
        "hae_config": hae_cfg.to_dict(), "state_dict": model.state_dict(), "step": state["step"],
        "train_config": cfg.to_dict(), "history": state["history"], "losses": state["losses"],
        "final_val_psnr": state["final_val_psnr"],
    }


# -- stage 2 ------------------------------------------------------------------

def stage2_step(system: EventDiffSystem, flags: SchemeFlags, batch: PairData, start: str,
                gen: torch.Generator):
    """Loss of one stage-2 training step for the given scheme variant."""
    with torch.no_grad():
        z_gt = system.ground_truth_embedding(batch.target)
    with torch.set_grad_enabled(flags.train_condition_encoder):
        conds = system.conditions(batch)
    conds = system.conds_for_unet(conds)
    sched = system.sched
    eps = torch.randn(z_gt.shape, generator=gen, dtype=z_gt.dtype)
    if not flags.direct_loss:
        t = torch.randint(1, sched.T + 1, (z_gt.shape[0],), generator=gen)
        ab = torch.as_tensor([sched.alpha_bar_at(int(s)) for s in t], dtype=z_gt.dtype).view(-1, 1, 1, 1)
        z_t = ab.sqrt() * z_gt + (1 - ab).sqrt() * eps
        return traditional_dm_loss(eps, system.unet(z_t, t, conds))
    with torch.set_grad_enabled(flags.train_encoder):
        pyrs = system.pyramids(batch)
    z_T = forward_diffuse(z_gt, sched.T, eps, sched) if start == "noised_gt" else eps
    z_hat = unroll(system.unet, z_T, conds, sched)
    out = _decode(system.hae, system.hae.quantize(z_hat).z_q, pyrs, batch.images)
    return stage2_loss(out, batch.target, z_hat, z_gt)


def _system_from_stage1(ckpt: dict, denoiser: DenoiserConfig, sched: NoiseSchedule) -> EventDiffSystem:
    hae = HybridAutoEncoder(HAEConfig.from_dict(ckpt["hae_config"]))
    hae.load_state_dict(ckpt["state_dict"])
    unet = ConditionalUNet(denoiser)
    return EventDiffSystem(hae, unet, sched)


def train_stage2(cfg: TrainConfig, stage1_ckpt: dict, denoiser: DenoiserConfig | None = None,
                 beta_range: tuple[float, float] = (1e-5, 0.1), train: PairData | None = None,
                 val: PairData | None = None) -> dict:
    """Train the diffusion stage on top of a stage-1 checkpoint."""
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs stage = 2")
    if stage1_ckpt is None:
        raise ConfigError("stage 2 requires a stage-1 checkpoint")
    _check_format(stage1_ckpt)
    if stage1_ckpt["stage"] != 1:
        raise ConfigError("train_stage2 expects a stage-1 checkpoint")
    if stage1_ckpt["task"] != cfg.task:
        raise ConfigError(f"stage-1 checkpoint was trained for {stage1_ckpt['task']!r}, config asks {cfg.task!r}")
    flags = cfg.ablation
    hae_cfg = HAEConfig.from_dict(stage1_ckpt["hae_config"])
    if (flags.n_down not in (None, hae_cfg.n_down)) or (flags.fusion not in (None, hae_cfg.fusion)):
        raise ConfigError("scheme flags (fusion/n_down) disagree with the stage-1 checkpoint")
    n_cond = 2 if cfg.task == "interpolate" else 1
    denoiser = replace(denoiser or DenoiserConfig(), n_cond=n_cond)
    cfg.check_crop(hae_cfg.n_down)
    if train is None:
        if cfg.manifest is None:
            raise ConfigError("no dataset manifest given")
        train, val = load_manifest(cfg.manifest, cfg.task, hae_cfg.bins)
    val = val if val is not None else train
    sched = make_schedule(flags.T_steps, *beta_range)
    torch.manual_seed(cfg.seed)
    system = _system_from_stage1(stage1_ckpt, denoiser, sched)
    system.hae.requires_grad_(False)
    system.cond_encoder.requires_grad_(flags.train_condition_encoder)
    system.hae.decoder.requires_grad_(flags.train_decoder)
    system.hae.encoder.requires_grad_(flags.train_encoder)
    finetune = [p for p in system.parameters() if p.requires_grad and not _owned_by(p, system.unet)]
    groups = [{"params": list(system.unet.parameters()) if flags.trains_unet else [], "lr": cfg.lr_main},
              {"params": finetune if flags.trains_unet else [], "lr": cfg.lr_finetune}]
    log.info("stage 2 %s: %s loss, %d fine-tuned tensors", flags.variant,
             "direct embedding" if flags.direct_loss else "per-step noise", len(finetune))
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    val_variant = flags.variant

    def step_fn(batch):
        return stage2_step(system, flags, batch, cfg.start, gen)

    def val_fn(data):
        system.eval()
        v = _val_psnr(lambda b: _predict_variant(system, val_variant, b, rng=torch.Generator().manual_seed(cfg.seed)),
                      data, cfg.batch_size)
        system.train()
        return v

    state: dict = {}
    _loop(cfg, train, val, groups, step_fn, val_fn, state)
    return system_checkpoint(system, cfg, flags, beta_range, state)


def _owned_by(p, module: nn.Module) -> bool:
    return any(p is q for q in module.parameters())


def system_checkpoint(system: EventDiffSystem, cfg: TrainConfig, flags: SchemeFlags, beta_range, state) -> dict:
    return {
        "format": CKPT_FORMAT, "version": CKPT_VERSION, "stage": 2, "task": cfg.task,
        "variant": flags.variant, "hae_config": system.hae.cfg.to_dict(),
        "state_dict": system.hae.state_dict(), "step": state.get("step", 0),
        "denoiser_config": system.unet.cfg.to_dict(), "unet_state": system.unet.state_dict(),
        "cond_encoder_state": system.cond_encoder.state_dict(),
        "gt_encoder_state": system.gt_encoder.state_dict(),
        "schedule": {"T_steps": system.sched.T, "beta_start": float(beta_range[0]),
                     "beta_end": float(beta_range[1]), "beta": list(system.sched.beta)},
        "train_config": cfg.to_dict(), "history": state.get("history", []),
        "losses": state.get("losses", []), "final_val_psnr": state.get("final_val_psnr"),
    }


def variant_checkpoint(stage1_ckpt: dict, variant: str, denoiser: DenoiserConfig | None = None,
                       T_steps: int = 5, beta_range=(1e-5, 0.1)) -> dict:
    """Untrained stage-2 container for the V0/V1 rows (stage-1 weights, no diffusion training)."""
    if variant not in ("V0", "V1"):
        raise ConfigError("only V0 and V1 are defined without stage-2 training")
    n_cond = 2 if stage1_ckpt["task"] == "interpolate" else 1
    denoiser = replace(denoiser or DenoiserConfig(), n_cond=n_cond)
    sched = make_schedule(T_steps, *beta_range)
    torch.manual_seed(0)
    system = _system_from_stage1(stage1_ckpt, denoiser, sched)
    cfg = TrainConfig(stage=2, task=stage1_ckpt["task"], steps=0, ablation=SchemeFlags(variant=variant, T_steps=T_steps))
    return system_checkpoint(system, cfg, cfg.ablation, beta_range, {"step": 0})


# -- checkpoints --------------------------------------------------------------

def _check_format(ckpt: dict):
    if not isinstance(ckpt, dict) or ckpt.get("format") != CKPT_FORMAT:
        raise ConfigError("not an eventdiff checkpoint")
    if ckpt.get("version") != CKPT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {ckpt.get('version')}")


def save_checkpoint(ckpt: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    _check_format(ckpt)
    return ckpt


def build_stage1_model(ckpt: dict) -> HybridAutoEncoder:
    _check_format(ckpt)
    model = HybridAutoEncoder(HAEConfig.from_dict(ckpt["hae_config"]))
    model.load_state_dict(ckpt["state_dict"])
    return model.eval()


def build_system(ckpt: dict, steps: int | None = None) -> EventDiffSystem:
    """Rebuild a stage-2 system; ``steps`` rebuilds the linear schedule with a new length."""
    _check_format(ckpt)
    if ckpt["stage"] != 2:
        raise ConfigError("inference needs a stage-2 checkpoint")
    hae = build_stage1_model(ckpt)
    unet = ConditionalUNet(DenoiserConfig(**ckpt["denoiser_config"]))
    unet.load_state_dict(ckpt["unet_state"])
    s = ckpt["schedule"]
    sched = NoiseSchedule(tuple(s["beta"])) if steps is None else make_schedule(steps, s["beta_start"], s["beta_end"])
    cond = HybridEncoder(hae.cfg)
    cond.load_state_dict(ckpt["cond_encoder_state"])
    gt = HybridEncoder(hae.cfg)
    gt.load_state_dict(ckpt["gt_encoder_state"])
    return EventDiffSystem(hae, unet, sched, cond, gt).eval()


# -- inference ----------------------------------------------------------------

def _predict_variant(system: EventDiffSystem, variant: str, batch: PairData, sched=None, rng=None):
    if variant == "V0":
        z = system.ground_truth_embedding(batch.target)
        return _decode(system.hae, system.hae.quantize(z).z_q, system.pyramids(batch), batch.images)
    if variant == "V1":
        return system.predict_mean(batch)
    return system.predict(batch, sched, rng)


def _single(pairs) -> PairData:
    return PairData([_as_tensor(i)[None] for i, _ in pairs], [_as_tensor(v)[None] for _, v in pairs],
                    torch.zeros(1, *np.shape(pairs[0][0])), ["input"])


def interpolate(ckpt: dict, I0, I1, events: EventStream, t: float, steps: int | None = None,
                seed: int = 0) -> np.ndarray:
    """Synthesize the frame at normalized time ``t`` from the boundary frames and events."""
    system = build_system(ckpt, steps)
    _check_task(system.hae.cfg, "interpolate")
    batch = _single(interpolation_inputs(I0, I1, events, t, system.hae.cfg.bins))
    with torch.no_grad():
        out = _predict_variant(system, _inference_variant(ckpt), batch, rng=torch.Generator().manual_seed(seed))
    return out[0].numpy()


def deblur(ckpt: dict, blur, events: EventStream, steps: int | None = None, seed: int = 0) -> np.ndarray:
    """Restore a sharp frame from a blurry frame and the events of its exposure."""
    system = build_system(ckpt, steps)
    _check_task(system.hae.cfg, "deblur")
    batch = _single(deblur_inputs(blur, events, system.hae.cfg.bins))
    with torch.no_grad():
        out = _predict_variant(system, _inference_variant(ckpt), batch, rng=torch.Generator().manual_seed(seed))
    return out[0].numpy()


def _inference_variant(ckpt):
    # V0 reads the target frame, which inference never has; it falls back to sampling
    v = ckpt.get("variant", "V5")
    if v == "V0":
        raise ConfigError("a V0 checkpoint needs the ground-truth frame and cannot run inference")
    return v


def evaluate(ckpt: dict, data: PairData, steps: int | None = None, seed: int = 0,
             variant: str | None = None) -> MetricReport:
    """Per-sample PSNR/SSIM and wall-clock time per frame (one frame per call)."""
    system = build_system(ckpt, steps) if ckpt["stage"] == 2 else None
    if system is None:
        raise ConfigError("evaluation needs a stage-2 checkpoint (use variant_checkpoint for V0/V1)")
    variant = variant or ckpt.get("variant", "V5")
    report = MetricReport(step_count=system.sched.T if variant not in ("V0", "V1") else 0)
    elapsed = 0.0
    with torch.no_grad():
        for i in range(len(data)):
            b = data.subset([i])
            t0 = time.perf_counter()
            out = _predict_variant(system, variant, b, rng=torch.Generator().manual_seed(seed + i))
            elapsed += time.perf_counter() - t0
            report.add(out[0].numpy(), b.target[0].numpy())
    report.runtime_per_frame = elapsed / len(data)
    return report


def time_inference(ckpt: dict, data: PairData, steps: int, repeats: int = 3) -> float:
    """Best-of-``repeats`` mean seconds per frame for the sampling pipeline."""
    system = build_system(ckpt, steps)
    best = float("inf")
    with torch.no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            for i in range(len(data)):
                system.predict(data.subset([i]), rng=torch.Generator().manual_seed(i))
            best = min(best, (time.perf_counter() - t0) / len(data))
    return best
