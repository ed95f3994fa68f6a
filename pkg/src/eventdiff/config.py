"""Run configuration: INI text with dataset/model/schedule/training/ablation sections.

Every key is typed and unknown keys are rejected. The resolved config is
rendered back to INI with all defaults filled in; its hash names the run
directory, so identical settings always land in the same place.
"""

from __future__ import annotations

import configparser
import hashlib
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .diffusion import DenoiserConfig
from .hae import HAEConfig
from .stca import AttentionConfig
from .synth import SceneConfig, random_scenes
from .training import ConfigError, SchemeFlags, TrainConfig

RUN_DIR_ENV = "EVENTDIFF_RUN_DIR"


def _opt(parse):
    def p(s):
        return None if s.strip().lower() in ("none", "") else parse(s)
    return p


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(v for v in s.replace(",", " ").split())


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class DatasetSection:
    out_dir: str = "data"
    task: str = "interpolate"
    n_scenes: int = 4
    resolution: tuple[int, ...] = (64, 64)
    channels: int = 1
    duration: float = 0.625
    frame_rate: float = 8.0
    n_shapes: tuple[int, ...] = (1, 3)
    speed: tuple[float, ...] = (8.0, 32.0)
    size: tuple[float, ...] = (8.0, 20.0)
    skips: int = 1
    interior: str = "all"
    exposure: int = 2
    val_fraction: float = 0.0
    upsample: int = 8
    contrast_threshold: float = 0.2
    seed: int = 0

    def scenes(self) -> list[SceneConfig]:
        return random_scenes(self.n_scenes, tuple(self.resolution), self.seed, tuple(self.n_shapes),
                             tuple(self.speed), tuple(self.size), self.duration, self.frame_rate,
                             self.channels)


@dataclass(frozen=True)
class ModelSection:
    profile: str = "desk"
    bins: int = 8
    n_down: int = 3
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 2, 4, 4, 4)
    event_channels: int = 4
    res_blocks: int = 1
    codebook_size: int = 512
    beta_commit: float = 0.25
    fusion: str = "stca"
    decoder_head: str = "kernel_synthesis"
    kernel_size: int = 5
    max_offset_frac: float = 0.25
    decoder_event_features: bool = False
    pool: int = 2
    heads: int = 1
    window: int | None = 4
    mbconv_expansion: int = 2


@dataclass(frozen=True)
class ScheduleSection:
    T_steps: int = 5
    beta_start: float = 1e-5
    beta_end: float = 0.1
    unet_channels: tuple[int, ...] = (128, 256, 256)
    time_embed_dim: int = 128


@dataclass(frozen=True)
class TrainingSection:
    manifest: str | None = None
    batch_size: int = 4
    crop_size: int | None = None
    stage1_steps: int = 300
    stage2_steps: int = 300
    lr_main: float = 1e-3
    lr_finetune: float = 1e-4
    lr_decay_epoch: int | None = None
    eval_every: int = 0
    seed: int = 0
    start: str = "noised_gt"
    variant: str = "V5"


@dataclass(frozen=True)
class AblationSection:
    step_counts: tuple[int, ...] = (1, 2, 3, 4, 5, 10, 25, 100)
    n_down_values: tuple[int, ...] = (2, 3, 4, 5)
    fusions: tuple[str, ...] = ("concat", "concat_L", "sca", "tca", "stca")
    variants: tuple[str, ...] = ("V0", "V1", "V2", "V3", "V4", "V5", "V6")
    stage1_ckpt: str | None = None
    stage2_ckpt: str | None = None
    eval_split: str = "val"
    timing_repeats: int = 3


SECTIONS = {
    "dataset": DatasetSection, "model": ModelSection, "schedule": ScheduleSection,
    "training": TrainingSection, "ablation": AblationSection,
}

# Wider settings whose full model (autoencoder, condition encoder, U-Net)
# lands near 18.7M parameters at n_down = 3.
PAPER_PROFILE = {
    "model": {"base_channels": 64, "event_channels": 16, "res_blocks": 2},
    "training": {"batch_size": 8, "crop_size": 256, "lr_main": 1e-5, "lr_finetune": 1e-6,
                 "lr_decay_epoch": 90},
}


def _parser_for(default_type, default):
    t = str(default_type)
    if "tuple[int" in t:
        base = _ints
    elif "tuple[float" in t:
        base = _floats
    elif "tuple[str" in t:
        base = _strs
    elif "bool" in t:
        base = _bool
    elif t.startswith("int"):
        base = int
    elif t.startswith("float"):
        base = float
    else:
        base = str
    return _opt(base) if "None" in t else base


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    # -- parsing -----------------------------------------------------------
    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config: {e}") from e
        raw: dict[str, dict[str, str]] = {}
        for name in cp.sections():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]; valid: {', '.join(SECTIONS)}")
            raw[name] = dict(cp[name])
        profile = raw.get("model", {}).get("profile", "desk").strip()
        return cls.from_raw(raw, profile, overrides)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), overrides)

    @classmethod
    def from_raw(cls, raw: dict, profile: str = "desk", overrides: dict | None = None) -> "RunConfig":
        if profile not in ("desk", "paper"):
            raise ConfigError(f"unknown profile {profile!r}; valid: desk, paper")
        built = {}
        for name, sec_cls in SECTIONS.items():
            kw = {}
            if profile == "paper":
                kw.update(PAPER_PROFILE.get(name, {}))
            kw.update(_typed(name, sec_cls, raw.get(name, {})))
            kw.update((overrides or {}).get(name, {}))
            try:
                built[name] = sec_cls(**kw)
            except TypeError as e:
                raise ConfigError(f"[{name}]: {e}") from e
        cfg = cls(**built)
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.hae_config()
            self.denoiser_config()
            self.train_config(1)
            self.train_config(2)
            self.scene_configs()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.dataset.skips < 1:
            raise ConfigError("skips must be >= 1")
        if self.dataset.task not in ("interpolate", "deblur"):
            raise ConfigError("dataset task must be interpolate or deblur")
        if self.ablation.eval_split not in ("train", "val"):
            raise ConfigError("eval_split must be train or val")

    # -- resolution ----------------------------------------------------------
    def scene_configs(self) -> list[SceneConfig]:
        return self.dataset.scenes()

    def hae_config(self) -> HAEConfig:
        m = self.model
        head = m.decoder_head
        if self.dataset.task == "deblur" and head == "kernel_synthesis":
            head = "simple_unet"
        return HAEConfig(
            in_channels=self.dataset.channels, bins=m.bins, n_down=m.n_down,
            base_channels=m.base_channels, channel_mult=m.channel_mult, event_channels=m.event_channels,
            res_blocks=m.res_blocks, codebook_size=m.codebook_size, beta_commit=m.beta_commit,
            attention=AttentionConfig(m.pool, m.heads, m.window, m.mbconv_expansion),
            fusion=m.fusion, decoder_head=head, kernel_size=m.kernel_size,
            max_offset_frac=m.max_offset_frac, decoder_event_features=m.decoder_event_features,
        )

    def denoiser_config(self, n_down: int | None = None) -> DenoiserConfig:
        """Denoiser for the latent produced at ``n_down`` (default: the model's)."""
        s = self.schedule
        cfg = DenoiserConfig(channels=s.unet_channels, time_embed_dim=s.time_embed_dim,
                             n_cond=2 if self.dataset.task == "interpolate" else 1)
        side = self.training.crop_size or math.gcd(*self.dataset.resolution)
        return cfg.fit(side // 2 ** (n_down or self.model.n_down))

    @property
    def beta_range(self) -> tuple[float, float]:
        return self.schedule.beta_start, self.schedule.beta_end

    @property
    def manifest(self) -> str:
        return self.training.manifest or str(Path(self.dataset.out_dir) / "manifest.txt")

    def train_config(self, stage: int, **changes) -> TrainConfig:
        t = self.training
        cfg = TrainConfig(
            stage=stage, manifest=self.manifest, task=self.dataset.task, batch_size=t.batch_size,
            crop_size=t.crop_size, steps=t.stage1_steps if stage == 1 else t.stage2_steps,
            lr_main=t.lr_main, lr_finetune=t.lr_finetune, lr_decay_epoch=t.lr_decay_epoch,
            eval_every=t.eval_every, seed=t.seed, start=t.start,
            ablation=SchemeFlags(variant=t.variant, T_steps=self.schedule.T_steps),
        )
        return replace(cfg, **changes) if changes else cfg

    # -- echo ------------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            sec = getattr(self, name)
            lines.append(f"[{name}]")
            lines += [f"{f.name} = {_fmt(getattr(sec, f.name))}" for f in fields(sec)]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def run_dir(self, root=None, create: bool = True) -> Path:
        """``<root>/<config hash>``; root defaults to ``$EVENTDIFF_RUN_DIR`` or ``./runs``."""
        root = Path(root or os.environ.get(RUN_DIR_ENV, "runs"))
        path = root / self.digest()
        if create:
            path.mkdir(parents=True, exist_ok=True)
            (path / "config.ini").write_text(self.to_text())
        return path


def _typed(name: str, sec_cls, values: dict) -> dict:
    known = {f.name: f for f in fields(sec_cls)}
    out = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]; valid: {', '.join(known)}")
        f = known[key]
        try:
            out[key] = _parser_for(f.type, f.default)(text)
        except ValueError as e:
            raise ConfigError(f"[{name}] {key}: {e}") from e
    if name == "model":
        out.pop("profile", None)
        if "profile" in values:
            out["profile"] = values["profile"].strip()
    return out
