"""Event streams and their dense representations.

An event stream is stored column-wise (x, y, polarity, timestamp) so that
splitting and rasterization stay vectorized for streams of 1e5+ events.
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EVENT_DTYPES = {"x": np.uint16, "y": np.uint16, "polarity": np.int8, "timestamp": np.float64}
META_DTYPE = np.dtype(
    [("width", "<u4"), ("height", "<u4"), ("t_start", "<f8"), ("t_end", "<f8")]
)


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    polarity: int
    timestamp: float


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-sorted events inside a window ``[t_start, t_end]`` on a ``(width, height)`` sensor."""

    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    timestamp: np.ndarray
    window: tuple[float, float]
    sensor: tuple[int, int]

    def __post_init__(self):
        cols = {}
        for name, dtype in EVENT_DTYPES.items():
            arr = np.ascontiguousarray(getattr(self, name))
            if arr.ndim != 1:
                raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
            cols[name] = arr
        n = len(cols["x"])
        if any(len(a) != n for a in cols.values()):
            raise ValueError("event columns have different lengths")
        t0, t1 = float(self.window[0]), float(self.window[1])
        if t1 < t0:
            raise ValueError(f"window end {t1} precedes start {t0}")
        width, height = int(self.sensor[0]), int(self.sensor[1])
        x = cols["x"].astype(np.int64)
        y = cols["y"].astype(np.int64)
        p = cols["polarity"]
        t = cols["timestamp"].astype(np.float64)
        if n:
            if x.min() < 0 or y.min() < 0 or x.max() >= width or y.max() >= height:
                raise ValueError("event coordinates fall outside the sensor")
            if not np.all(np.abs(p) == 1):
                raise ValueError("polarity must be -1 or +1")
            if t.min() < t0 or t.max() > t1:
                raise ValueError("timestamps fall outside the stream window")
            if np.any(np.diff(t) < 0):
                raise ValueError("events must be sorted by timestamp")
        object.__setattr__(self, "x", x.astype(np.uint16))
        object.__setattr__(self, "y", y.astype(np.uint16))
        object.__setattr__(self, "polarity", np.asarray(p, dtype=np.int8))
        object.__setattr__(self, "timestamp", t)
        object.__setattr__(self, "window", (t0, t1))
        object.__setattr__(self, "sensor", (width, height))
        for name in EVENT_DTYPES:
            getattr(self, name).setflags(write=False)

    def __len__(self) -> int:
        return len(self.timestamp)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.polarity[i]), float(self.timestamp[i]))

    @property
    def t_start(self) -> float:
        return self.window[0]

    @property
    def t_end(self) -> float:
        return self.window[1]

    @classmethod
    def empty(cls, window: tuple[float, float], sensor: tuple[int, int]) -> "EventStream":
        return cls(
            np.zeros(0, np.uint16), np.zeros(0, np.uint16), np.zeros(0, np.int8),
            np.zeros(0, np.float64), window, sensor,
        )

    @classmethod
    def from_events(cls, events, window, sensor, sort: bool = True) -> "EventStream":
        """Build a stream from an iterable of ``Event`` or ``(x, y, p, t)`` tuples."""
        rows = [tuple(e.__dict__.values()) if isinstance(e, Event) else tuple(e) for e in events]
        if not rows:
            return cls.empty(window, sensor)
        arr = np.array(rows, dtype=np.float64)
        order = np.argsort(arr[:, 3], kind="stable") if sort else np.arange(len(arr))
        arr = arr[order]
        return cls(arr[:, 0], arr[:, 1], arr[:, 2].astype(np.int8), arr[:, 3], window, sensor)

    def select(self, mask: np.ndarray, window=None, negate: bool = False) -> "EventStream":
        p = self.polarity[mask]
        if negate:
            p = -p
        return EventStream(
            self.x[mask], self.y[mask], p, self.timestamp[mask],
            self.window if window is None else window, self.sensor,
        )

    def time_slice(self, t0: float, t1: float) -> "EventStream":
        """Events with ``t0 <= t <= t1``, re-windowed to ``[t0, t1]``."""
        mask = (self.timestamp >= t0) & (self.timestamp <= t1)
        return self.select(mask, window=(t0, t1))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Dense ``(bins, 2, H, W)`` event tensor. Polarity axis index 0 is -1, index 1 is +1."""

    data: np.ndarray
    kind: str = "standard"
    meta: dict = field(default_factory=dict)

    @property
    def bins(self) -> int:
        return self.data.shape[0]

    def signed(self) -> np.ndarray:
        """Collapse the polarity axis. For SCER grids this is the signed cumulative count."""
        if self.kind == "scer":
            return self.data.sum(axis=1)
        return self.data[:, 1] - self.data[:, 0]


def split_events(stream: EventStream, t: float, tie: str = "drop") -> tuple[EventStream, EventStream]:
    """Split around the target time ``t``.

    Returns ``(E_0t, E_1t)``: events strictly before ``t`` with their native
    polarity and events strictly after ``t`` with polarity reversed, so both
    halves read as if played back from the boundary frame toward ``t``.
    ``tie="first"`` assigns events exactly at ``t`` to the first half instead
    of dropping them.
    """
    if not stream.t_start <= t <= stream.t_end:
        raise ValueError(f"split time {t} outside window {stream.window}")
    if tie not in ("drop", "first"):
        raise ValueError(f"unknown tie mode {tie!r}")
    ts = stream.timestamp
    before = ts <= t if tie == "first" else ts < t
    after = ts > t
    e0 = stream.select(before, window=(stream.t_start, t))
    e1 = stream.select(after, window=(t, stream.t_end), negate=True)
    return e0, e1


def temporal_bins(timestamp: np.ndarray, t_min: float, t_max: float, bins: int) -> np.ndarray:
    """Bin index ``floor(bins * (t - t_min) / (t_max - t_min))`` clamped to ``bins - 1``."""
    span = t_max - t_min
    if span <= 0:
        return np.zeros(len(timestamp), dtype=np.int64)
    idx = np.floor(bins * (np.asarray(timestamp, np.float64) - t_min) / span).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _check_grid_args(stream: EventStream, bins: int, height: int, width: int):
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(stream) and (int(stream.x.max()) >= width or int(stream.y.max()) >= height):
        raise ValueError(f"events fall outside the {height}x{width} grid")


def voxelize(stream: EventStream, bins: int, height: int, width: int, normalize: bool = False) -> VoxelGrid:
    """Count events into ``(bins, 2, height, width)`` cells.

    Every event adds exactly 1, so the grid sums to ``len(stream)`` unless
    ``normalize`` rescales it by its maximum.
    """
    _check_grid_args(stream, bins, height, width)
    size = bins * 2 * height * width
    if len(stream) == 0:
        return VoxelGrid(np.zeros((bins, 2, height, width), np.float32))
    b = temporal_bins(stream.timestamp, stream.t_start, stream.t_end, bins)
    pol = (stream.polarity > 0).astype(np.int64)
    flat = ((b * 2 + pol) * height + stream.y.astype(np.int64)) * width + stream.x.astype(np.int64)
    data = np.bincount(flat, minlength=size).astype(np.float32).reshape(bins, 2, height, width)
    if normalize:
        peak = data.max()
        if peak > 0:
            data /= peak
    return VoxelGrid(data)


def scer(stream: EventStream, bins: int, height: int, width: int) -> VoxelGrid:
    """Symmetric cumulative event representation.

    The window is cut into ``bins - 1`` equal sub-windows around its
    midpoint. Slice ``m + k`` accumulates native polarities of events in
    ``(mid, b_{m+k}]``; slice ``m - k`` accumulates negated polarities of
    events in ``[b_{m-k}, mid)``. The centre slice ``m`` is zero. The
    polarity axis keeps the contributions of negative and positive source
    events apart; ``VoxelGrid.signed()`` gives the signed sum.
    """
    if bins < 1 or bins % 2 == 0:
        raise ValueError(f"SCER needs an odd number of bins, got {bins}")
    _check_grid_args(stream, bins, height, width)
    data = np.zeros((bins, 2, height, width), np.float32)
    m = bins // 2
    if len(stream) == 0 or m == 0:
        return VoxelGrid(data, kind="scer")
    t0, t1 = stream.window
    mid = 0.5 * (t0 + t1)
    half = 0.5 * (t1 - t0)
    ts = stream.timestamp
    pol = (stream.polarity > 0).astype(np.int64)
    sign = stream.polarity.astype(np.float32)
    pix = stream.y.astype(np.int64) * width + stream.x.astype(np.int64)
    for k in range(1, m + 1):
        reach = half * k / m
        fwd = (ts > mid) & (ts <= mid + reach) if k < m else ts > mid
        bwd = (ts < mid) & (ts >= mid - reach) if k < m else ts < mid
        for sl, sel, s in ((m + k, fwd, 1.0), (m - k, bwd, -1.0)):
            flat = pol[sel] * height * width + pix[sel]
            acc = np.bincount(flat, weights=s * sign[sel], minlength=2 * height * width)
            data[sl] = acc.reshape(2, height, width)
    return VoxelGrid(data, kind="scer")


# -- columnar file container -------------------------------------------------

def write_npz(path, arrays: dict) -> None:
    """``np.savez`` with fixed zip timestamps so identical content gives identical bytes."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def stream_to_arrays(stream: EventStream, prefix: str = "") -> dict:
    meta = np.array(
        [(stream.sensor[0], stream.sensor[1], stream.t_start, stream.t_end)], dtype=META_DTYPE
    )
    out = {prefix + name: getattr(stream, name).astype(dt) for name, dt in EVENT_DTYPES.items()}
    out[prefix + "meta"] = meta
    return out


def stream_from_arrays(arrays, prefix: str = "") -> EventStream:
    meta = arrays[prefix + "meta"][0]
    cols = [np.asarray(arrays[prefix + name], dtype=dt) for name, dt in EVENT_DTYPES.items()]
    return EventStream(
        *cols,
        window=(float(meta["t_start"]), float(meta["t_end"])),
        sensor=(int(meta["width"]), int(meta["height"])),
    )


def save_events(path, stream: EventStream) -> None:
    write_npz(path, stream_to_arrays(stream))


def load_events(path) -> EventStream:
    with np.load(path, allow_pickle=False) as f:
        return stream_from_arrays(f)
