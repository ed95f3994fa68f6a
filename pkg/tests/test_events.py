import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventdiff.events import (
    Event,
    EventStream,
    load_events,
    save_events,
    scer,
    split_events,
    temporal_bins,
    voxelize,
)


def stream_of(rows, window=(0.0, 1.0), sensor=(4, 4)):
    return EventStream.from_events(rows, window, sensor)


def random_stream(rng, n, width=8, height=6, window=(0.0, 1.0)):
    t = np.sort(rng.uniform(*window, n))
    return EventStream(rng.integers(0, width, n), rng.integers(0, height, n),
                       rng.choice([-1, 1], n).astype(np.int8), t, window, (width, height))


@st.composite
def streams(draw, max_events=60):
    n = draw(st.integers(0, max_events))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    # coarse timestamps make ties and boundary hits likely
    t = np.sort(rng.integers(0, 21, n) / 20.0)
    return EventStream(rng.integers(0, 5, n), rng.integers(0, 4, n),
                       rng.choice([-1, 1], n).astype(np.int8), t, (0.0, 1.0), (5, 4))


# -- oracles -------------------------------------------------------------------

def voxel_oracle(stream, bins, h, w):
    g = np.zeros((bins, 2, h, w))
    t0, t1 = stream.window
    for e in stream:
        b = 0 if t1 == t0 else min(int(np.floor(bins * (e.timestamp - t0) / (t1 - t0))), bins - 1)
        g[b, 0 if e.polarity < 0 else 1, e.y, e.x] += 1
    return g


def scer_oracle(stream, bins, h, w):
    g = np.zeros((bins, h, w))
    m = bins // 2
    if m == 0:
        return g
    t0, t1 = stream.window
    mid = 0.5 * (t0 + t1)
    edges = [mid + (k - m) * (t1 - t0) / (2 * m) for k in range(bins)]
    for k in range(bins):
        for e in stream:
            if k > m and mid < e.timestamp <= edges[k]:
                g[k, e.y, e.x] += e.polarity
            if k < m and edges[k] <= e.timestamp < mid:
                g[k, e.y, e.x] -= e.polarity
    return g


# -- data model ----------------------------------------------------------------

def test_stream_validation():
    with pytest.raises(ValueError):
        stream_of([(0, 0, 0, 0.5)])
    with pytest.raises(ValueError):
        stream_of([(4, 0, 1, 0.5)])
    with pytest.raises(ValueError):
        stream_of([(0, 0, 1, 1.5)])
    with pytest.raises(ValueError):
        EventStream(np.array([0, 0]), np.array([0, 0]), np.array([1, 1]), np.array([0.6, 0.4]),
                    (0, 1), (2, 2))


def test_stream_is_immutable_and_indexable():
    s = stream_of([(1, 2, 1, 0.3), (0, 0, -1, 0.1)])
    assert s[0] == Event(0, 0, -1, 0.1)
    with pytest.raises(ValueError):
        s.x[0] = 3


def test_roundtrip_file_format(tmp_path):
    s = random_stream(np.random.default_rng(0), 50)
    save_events(tmp_path / "e.npz", s)
    with np.load(tmp_path / "e.npz") as f:
        assert [f[k].dtype for k in ("x", "y", "polarity", "timestamp")] == [
            np.uint16, np.uint16, np.int8, np.float64]
        assert f["meta"]["width"] == 8 and f["meta"]["height"] == 6
    r = load_events(tmp_path / "e.npz")
    assert r.window == s.window and r.sensor == s.sensor
    assert np.array_equal(r.timestamp, s.timestamp) and np.array_equal(r.polarity, s.polarity)


def test_file_bytes_are_deterministic(tmp_path):
    s = random_stream(np.random.default_rng(1), 20)
    save_events(tmp_path / "a.npz", s)
    save_events(tmp_path / "b.npz", s)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


# -- splitting -----------------------------------------------------------------

def test_split_example():
    s = stream_of([(1, 1, 1, 0.2), (2, 2, -1, 0.8)])
    e0, e1 = split_events(s, 0.5)
    assert list(e0) == [Event(1, 1, 1, 0.2)]
    assert list(e1) == [Event(2, 2, 1, 0.8)]
    assert e0.window == (0.0, 0.5) and e1.window == (0.5, 1.0)


def test_split_empty_and_tie():
    e0, e1 = split_events(EventStream.empty((0, 1), (2, 2)), 0.3)
    assert len(e0) == len(e1) == 0
    s = stream_of([(0, 0, 1, 0.5)])
    assert [len(x) for x in split_events(s, 0.5)] == [0, 0]
    assert [len(x) for x in split_events(s, 0.5, tie="first")] == [1, 0]


def test_split_outside_window():
    with pytest.raises(ValueError):
        split_events(stream_of([]), 1.5)


@settings(max_examples=200, deadline=None)
@given(streams(), st.integers(0, 20))
def test_split_partition_and_negation(s, k):
    t = k / 20.0
    e0, e1 = split_events(s, t)
    ts = s.timestamp
    assert len(e0) == np.sum(ts < t) and len(e1) == np.sum(ts > t)
    assert len(e0) + len(e1) + np.sum(ts == t) == len(s)
    assert np.array_equal(e0.polarity, s.polarity[ts < t])
    assert np.array_equal(e1.polarity, -s.polarity[ts > t])
    # re-splitting the reversed half at its own start flips polarities back
    _, back = split_events(e1, e1.t_start)
    inside = e1.timestamp > e1.t_start
    assert np.array_equal(back.polarity, s.polarity[ts > t][inside])


# -- voxel grid ----------------------------------------------------------------

def test_voxel_empty_and_clamp():
    g = voxelize(stream_of([], sensor=(2, 2)), 4, 2, 2)
    assert g.data.shape == (4, 2, 2, 2) and not g.data.any()
    g = voxelize(stream_of([(0, 0, 1, 0.0), (1, 1, -1, 1.0)], sensor=(2, 2)), 4, 2, 2)
    assert g.data[0, 1, 0, 0] == 1 and g.data[3, 0, 1, 1] == 1 and g.data.sum() == 2


def test_voxel_zero_duration_window():
    s = EventStream(np.array([0, 1]), np.array([0, 0]), np.array([1, -1]), np.array([0.5, 0.5]),
                    (0.5, 0.5), (2, 1))
    assert voxelize(s, 3, 1, 2).data[0].sum() == 2


def test_voxel_rejects_small_grid():
    with pytest.raises(ValueError):
        voxelize(stream_of([(3, 3, 1, 0.5)]), 2, 2, 2)


@settings(max_examples=100, deadline=None)
@given(streams(), st.integers(1, 9))
def test_voxel_matches_oracle(s, bins):
    g = voxelize(s, bins, 4, 5)
    assert np.array_equal(g.data, voxel_oracle(s, bins, 4, 5))
    assert g.data.sum() == len(s) and (g.data >= 0).all()


@given(st.lists(st.floats(0, 1), min_size=2, max_size=50), st.integers(1, 16))
def test_bin_index_monotone(ts, bins):
    ts = np.sort(ts)
    b = temporal_bins(ts, 0.0, 1.0, bins)
    assert np.all(np.diff(b) >= 0) and b.min() >= 0 and b.max() < bins


def test_voxel_normalize():
    s = stream_of([(0, 0, 1, 0.1), (0, 0, 1, 0.2)], sensor=(1, 1))
    assert voxelize(s, 1, 1, 1, normalize=True).data.max() == 1.0


# -- SCER ----------------------------------------------------------------------

def test_scer_examples():
    g = scer(stream_of([], sensor=(2, 2)), 3, 2, 2)
    assert g.kind == "scer" and not g.data.any()
    g = scer(stream_of([(1, 0, 1, 0.7)], sensor=(2, 2)), 3, 2, 2).signed()
    assert g[2, 0, 1] == 1 and not g[0].any() and not g[1].any()
    g = scer(stream_of([(1, 1, 1, 0.3), (1, 1, 1, 0.7)], sensor=(2, 2)), 3, 2, 2).signed()
    assert g[0, 1, 1] == -1 and g[2, 1, 1] == 1


def test_scer_needs_odd_bins():
    with pytest.raises(ValueError):
        scer(stream_of([]), 4, 4, 4)


@settings(max_examples=100, deadline=None)
@given(streams(), st.sampled_from([1, 3, 5, 7]))
def test_scer_matches_oracle(s, bins):
    g = scer(s, bins, 4, 5)
    assert np.allclose(g.signed(), scer_oracle(s, bins, 4, 5))
    assert not g.data[bins // 2].any()
