"""Toy moving-shape scenes and a contrast-threshold event simulator.

Frames are rendered analytically (anti-aliased signed-distance shapes on a
flat background), so any timestamp can be rendered exactly and the event
simulator can run on an 8x temporally upsampled sequence.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .events import EventStream, stream_from_arrays, stream_to_arrays, write_npz

LOG_EPS = 1e-3
SHAPE_KINDS = ("square", "disk", "bar")


@dataclass(frozen=True)
class Shape:
    kind: str
    size: float
    velocity: tuple[float, float]  # px/s, (vx, vy)
    intensity: float | tuple[float, ...] = 1.0


@dataclass(frozen=True)
class SceneConfig:
    resolution: tuple[int, int] = (64, 64)
    shapes: tuple[Shape, ...] = ()
    background: float = 0.5
    duration: float = 0.5
    frame_rate: float = 8.0
    seed: int = 0
    channels: int = 1

    def __post_init__(self):
        h, w = self.resolution
        if h % 32 or w % 32:
            raise ValueError(f"resolution {self.resolution} must be a multiple of 32")
        if self.frame_rate * self.duration < 3 - 1e-9:
            raise ValueError("frame_rate * duration must be >= 3")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError("background must lie in [0, 1]")
        shapes = tuple(s if isinstance(s, Shape) else Shape(**s) for s in self.shapes)
        for s in shapes:
            if s.kind not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {s.kind!r}")
        object.__setattr__(self, "shapes", shapes)

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration * self.frame_rate + 1e-9)) + 1

    def frame_time(self, k: int) -> float:
        return k / self.frame_rate

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TripletSample:
    I0: np.ndarray
    Igt: np.ndarray
    I1: np.ndarray
    events: EventStream
    t_gt: float
    name: str = ""

    def __post_init__(self):
        if not 0.0 < self.t_gt < 1.0:
            raise ValueError(f"t_gt={self.t_gt} must be strictly interior")

    @property
    def target_time(self) -> float:
        t0, t1 = self.events.window
        return t0 + self.t_gt * (t1 - t0)

    def save(self, path) -> None:
        arrays = {
            "I0": self.I0.astype(np.float32), "Igt": self.Igt.astype(np.float32),
            "I1": self.I1.astype(np.float32), "t_gt": np.array(self.t_gt, np.float64),
        }
        arrays.update(stream_to_arrays(self.events, prefix="events_"))
        write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> "TripletSample":
        with np.load(path, allow_pickle=False) as f:
            return cls(
                f["I0"], f["Igt"], f["I1"], stream_from_arrays(f, prefix="events_"),
                float(f["t_gt"]), name=Path(path).stem,
            )


@dataclass
class DeblurSample:
    blur: np.ndarray
    sharp: np.ndarray
    events: EventStream
    name: str = ""

    def save(self, path) -> None:
        arrays = {"blur": self.blur.astype(np.float32), "sharp": self.sharp.astype(np.float32)}
        arrays.update(stream_to_arrays(self.events, prefix="events_"))
        write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> "DeblurSample":
        with np.load(path, allow_pickle=False) as f:
            return cls(f["blur"], f["sharp"], stream_from_arrays(f, prefix="events_"), name=Path(path).stem)


@dataclass
class Manifest:
    path: Path
    entries: list[tuple[str, str]] = field(default_factory=list)  # (relative path, split)

    def __len__(self):
        return len(self.entries)

    def files(self, split: str | None = None) -> list[Path]:
        root = self.path.parent
        return [root / rel for rel, s in self.entries if split is None or s == split]

    def write(self) -> None:
        text = "".join(f"{rel}\t{split}\n" for rel, split in self.entries)
        self.path.write_text(text)

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("train", "val"):
                raise ValueError(f"{path}:{lineno}: malformed manifest line {line!r}")
            entries.append((parts[0], parts[1]))
        return cls(path, entries)


# -- rendering ----------------------------------------------------------------

def _reflect(u: float, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    r = (u - lo) % (2 * span)
    return lo + (r if r <= span else 2 * span - r)


def _start_positions(cfg: SceneConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.resolution
    return rng.uniform([0.2 * w, 0.2 * h], [0.8 * w, 0.8 * h], size=(len(cfg.shapes), 2))


def _intensity(value, channels: int) -> np.ndarray:
    v = np.atleast_1d(np.asarray(value, np.float64))
    if v.size == 1:
        v = np.repeat(v, channels)
    if v.size != channels:
        raise ValueError(f"intensity {value!r} does not match {channels} channels")
    return v


def _signed_distance(kind: str, size: float, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if kind == "disk":
        return np.hypot(dx, dy) - 0.5 * size
    hx, hy = (0.5 * size, 0.5 * size) if kind == "square" else (0.5 * size, size / 6.0)
    qx, qy = np.abs(dx) - hx, np.abs(dy) - hy
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
    return outside + np.minimum(np.maximum(qx, qy), 0)


def shape_centers(cfg: SceneConfig, time: float) -> np.ndarray:
    h, w = cfg.resolution
    out = _start_positions(cfg)
    for i, s in enumerate(cfg.shapes):
        m = 0.5 * s.size
        out[i, 0] = _reflect(out[i, 0] + s.velocity[0] * time, m, w - m)
        out[i, 1] = _reflect(out[i, 1] + s.velocity[1] * time, m, h - m)
    return out


def render_frame(cfg: SceneConfig, time: float) -> np.ndarray:
    """Render the scene at ``time`` seconds as a ``(C, H, W)`` float32 image in [0, 1]."""
    if not -1e-12 <= time <= cfg.duration + 1e-12:
        raise ValueError(f"time {time} outside [0, {cfg.duration}]")
    h, w = cfg.resolution
    img = np.full((cfg.channels, h, w), cfg.background, np.float64)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for s, (cx, cy) in zip(cfg.shapes, shape_centers(cfg, time)):
        cov = np.clip(0.5 - _signed_distance(s.kind, s.size, xs - cx, ys - cy), 0.0, 1.0)
        img = img * (1 - cov) + _intensity(s.intensity, cfg.channels)[:, None, None] * cov
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_sequence(cfg: SceneConfig, times) -> np.ndarray:
    return np.stack([render_frame(cfg, float(t)) for t in times])


# -- event simulation -----------------------------------------------------------

def log_intensity(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, np.float64)
    if f.ndim == 3:
        f = f[0] if f.shape[0] == 1 else np.tensordot([0.299, 0.587, 0.114], f, axes=1)
    return np.log(f + LOG_EPS)


def simulate_events(frames, contrast_threshold: float = 0.2, times=None) -> EventStream:
    """Emit events wherever per-pixel log intensity crosses a multiple of the threshold.

    Each pixel keeps a reference log level. Within every inter-frame
    interval the log intensity is interpolated linearly; each threshold
    crossing emits one event whose timestamp is the crossing time. The
    reference then moves by the whole number of thresholds crossed.
    """
    if contrast_threshold <= 0:
        raise ValueError("contrast threshold must be positive")
    frames = np.asarray(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    times = np.linspace(0.0, 1.0, len(frames)) if times is None else np.asarray(times, np.float64)
    if len(times) != len(frames) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing, one per frame")
    logs = [log_intensity(f) for f in frames]
    height, width = logs[0].shape
    ref = logs[0].copy()
    chunks = []
    for k in range(len(frames) - 1):
        lo, hi = logs[k], logs[k + 1]
        delta = hi - ref
        n = np.floor(np.abs(delta) / contrast_threshold + 1e-9).astype(np.int64)
        pix = np.flatnonzero(n)
        if pix.size == 0:
            continue
        counts = n.ravel()[pix]
        sign = np.sign(delta.ravel()[pix])
        rep_pix = np.repeat(pix, counts)
        rep_sign = np.repeat(sign, counts)
        # j = 1..count for each pixel
        j = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
        level = ref.ravel()[rep_pix] + rep_sign * j * contrast_threshold
        slope = hi.ravel()[rep_pix] - lo.ravel()[rep_pix]
        frac = np.clip((level - lo.ravel()[rep_pix]) / slope, 0.0, 1.0)
        ts = times[k] + frac * (times[k + 1] - times[k])
        chunks.append((rep_pix % width, rep_pix // width, rep_sign.astype(np.int8), ts))
        ref.ravel()[pix] += sign * counts * contrast_threshold
    window = (float(times[0]), float(times[-1]))
    if not chunks:
        return EventStream.empty(window, (width, height))
    x, y, p, t = (np.concatenate(c) for c in zip(*chunks))
    order = np.argsort(t, kind="stable")
    return EventStream(x[order], y[order], p[order], t[order], window, (width, height))


# -- datasets -------------------------------------------------------------------

def random_scenes(
    n: int,
    resolution=(64, 64),
    seed: int = 0,
    n_shapes=(1, 3),
    speed=(8.0, 32.0),
    size=(8.0, 20.0),
    duration: float = 0.5,
    frame_rate: float = 8.0,
    channels: int = 1,
) -> list[SceneConfig]:
    """Draw ``n`` scene configs with shapes of well-separated intensity from the background."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        bg = float(rng.uniform(0.25, 0.75))
        shapes = []
        for _ in range(int(rng.integers(n_shapes[0], n_shapes[1] + 1))):
            ang = rng.uniform(0, 2 * np.pi)
            spd = rng.uniform(*speed)
            level = float(np.clip(bg + rng.choice([-1, 1]) * rng.uniform(0.3, 0.5), 0.02, 0.98))
            inten = level if channels == 1 else tuple(
                float(np.clip(level + d, 0.02, 0.98)) for d in rng.uniform(-0.1, 0.1, 3)
            )
            shapes.append(Shape(
                kind=str(rng.choice(SHAPE_KINDS)), size=float(rng.uniform(*size)),
                velocity=(float(spd * np.cos(ang)), float(spd * np.sin(ang))), intensity=inten,
            ))
        out.append(SceneConfig(resolution, tuple(shapes), bg, duration, frame_rate,
                               seed=int(rng.integers(2**31)), channels=channels))
    return out


def _scene_stream(cfg: SceneConfig, upsample: int, contrast_threshold: float):
    n = cfg.n_frames
    hi_times = np.arange(upsample * (n - 1) + 1) / (upsample * cfg.frame_rate)
    hi_frames = render_sequence(cfg, hi_times)
    stream = simulate_events(hi_frames, contrast_threshold, hi_times)
    return hi_frames, hi_times, stream


def make_dataset(
    cfg_list,
    out_dir,
    skips: int = 1,
    interior: str = "all",
    val_fraction: float = 0.0,
    upsample: int = 8,
    contrast_threshold: float = 0.2,
    seed: int = 0,
) -> Manifest:
    """Write interpolation triplets for every sliding window of ``skips + 1`` frame gaps.

    ``interior="all"`` emits one triplet per interior frame of each window,
    ``"mid"`` only the middle one, ``"random"`` one seeded random choice.
    """
    if skips < 1:
        raise ValueError("skips must be >= 1")
    if interior not in ("all", "mid", "random"):
        raise ValueError(f"unknown interior mode {interior!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out_dir / "manifest.txt")
    rng = np.random.default_rng(seed)
    for ci, cfg in enumerate(cfg_list):
        gap = skips + 1
        if cfg.n_frames < gap + 1:
            raise ValueError(
                f"scene {ci}: {cfg.n_frames} frames cannot hold a window of {gap} frame gaps"
            )
        hi_frames, hi_times, stream = _scene_stream(cfg, upsample, contrast_threshold)
        for a in range(cfg.n_frames - gap):
            b = a + gap
            if interior == "all":
                mids = range(a + 1, b)
            elif interior == "mid":
                mids = [a + gap // 2]
            else:
                mids = [int(rng.integers(a + 1, b))]
            ev = stream.time_slice(cfg.frame_time(a), cfg.frame_time(b))
            for m in mids:
                sample = TripletSample(
                    hi_frames[a * upsample], hi_frames[m * upsample], hi_frames[b * upsample],
                    ev, (m - a) / gap,
                )
                rel = f"scene{ci:03d}_w{a:03d}_m{m:03d}.npz"
                sample.save(out_dir / rel)
                split = "val" if rng.random() < val_fraction else "train"
                manifest.entries.append((rel, split))
    manifest.write()
    return manifest


def make_deblur_dataset(
    cfg_list,
    out_dir,
    exposure: int = 2,
    val_fraction: float = 0.0,
    upsample: int = 8,
    contrast_threshold: float = 0.2,
    seed: int = 0,
) -> Manifest:
    """Blurry/sharp pairs: blur averages the high-rate frames over ``exposure`` frame gaps,
    the sharp target is the frame at the centre of the exposure."""
    if exposure < 2 or exposure % 2:
        raise ValueError("exposure must be an even number of frame gaps >= 2")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out_dir / "manifest.txt")
    rng = np.random.default_rng(seed)
    for ci, cfg in enumerate(cfg_list):
        if cfg.n_frames < exposure + 1:
            raise ValueError(f"scene {ci}: too few frames for exposure {exposure}")
        hi_frames, _, stream = _scene_stream(cfg, upsample, contrast_threshold)
        for a in range(cfg.n_frames - exposure):
            b = a + exposure
            lo, hi = a * upsample, b * upsample
            sample = DeblurSample(
                hi_frames[lo:hi + 1].mean(axis=0),
                hi_frames[(lo + hi) // 2],
                stream.time_slice(cfg.frame_time(a), cfg.frame_time(b)),
            )
            rel = f"blur{ci:03d}_w{a:03d}.npz"
            sample.save(out_dir / rel)
            manifest.entries.append((rel, "val" if rng.random() < val_fraction else "train"))
    manifest.write()
    return manifest
