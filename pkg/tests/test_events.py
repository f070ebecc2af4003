import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evdetect.events import (
    ConfigError,
    Event,
    decode,
    encode,
    iou,
    make_default_grid,
    match_defaults,
    nms,
)


def ev(start, end, label=1):
    return Event.from_bounds(start, end, label)


def brute_iou(a, b, step):
    # sample-counting oracle on a fine lattice
    t = np.arange(min(a.start, b.start), max(a.end, b.end), step) + step / 2
    ina = (t >= a.start) & (t < a.end)
    inb = (t >= b.start) & (t < b.end)
    return (ina & inb).sum() / (ina | inb).sum()


# -- iou ---------------------------------------------------------------------


def test_iou_examples():
    assert iou(ev(0, 1), ev(0, 1)) == 1.0
    assert iou(ev(0, 1), ev(2, 3)) == 0.0
    assert iou(ev(0, 1), ev(0.5, 1.5)) == pytest.approx(1 / 3)


def test_iou_matches_lattice_oracle():
    a, b = ev(0.25, 1.75), ev(1.0, 2.5)
    assert iou(a, b) == pytest.approx(brute_iou(a, b, 1e-4), abs=1e-3)


events_st = st.builds(
    lambda s, d: Event(s + d / 2, d),
    st.floats(0, 100, allow_nan=False),
    st.floats(1e-3, 50, allow_nan=False),
)


@settings(max_examples=10_000, deadline=None)
@given(events_st, events_st)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == 1.0


def test_zero_duration_rejected():
    with pytest.raises(ValueError):
        Event(1.0, 0.0)


# -- default grid --------------------------------------------------------------


def test_grid_default_setting():
    g = make_default_grid(5120, 4, 256)
    assert g.n_defaults == 80
    np.testing.assert_array_equal(g.centers, 64 * np.arange(1, 81) - 32)
    assert g.centers[0] == 32 and g.centers[-1] == 5088
    assert np.all(g.durations == 256)


def test_grid_small_cases():
    g = make_default_grid(256, 1, 256)
    assert g.n_defaults == 1 and g.centers[0] == 128
    g = make_default_grid(512, 2, 256)
    np.testing.assert_array_equal(g.centers, [64, 192, 320, 448])


@pytest.mark.parametrize("window,rho", [(100, 1), (5000, 4), (128, 1)])
def test_grid_rejects_non_divisible(window, rho):
    with pytest.raises(ConfigError):
        make_default_grid(window, rho, 256)


@pytest.mark.parametrize("rho", [1, 2, 3, 4, 8, 16])
def test_grid_spacing(rho):
    window = 256 * 6
    g = make_default_grid(window, rho, 256)
    gaps = np.diff(g.centers)
    assert np.all(gaps > 0)
    np.testing.assert_allclose(gaps, 256 / rho)


# -- matching ------------------------------------------------------------------


def exhaustive_match(grid, trues, eta):
    out = []
    for i in range(grid.n_defaults):
        d = grid.event(i)
        best, best_j = -1.0, -1
        for j, t in enumerate(trues):
            v = iou(d, t)
            if v >= eta and v > best:
                best, best_j = v, j
        out.append(best_j)
    return np.array(out)


def test_match_empty():
    g = make_default_grid(5120, 4, 256)
    assert np.all(match_defaults(g, [], 0.5) == -1)


def test_match_example():
    g = make_default_grid(5120, 4, 256)  # default 0 spans [-96, 160); default 1 spans [-32, 224)
    t = ev(64, 320)
    d = ev(32, 288)
    assert iou(d, t) == pytest.approx(224 / 288)
    grid = make_default_grid(256, 1, 256)
    shifted = type(grid)(1, 256, 1, np.array([160.0]))  # [32, 288)
    assert match_defaults(shifted, [t], 0.5)[0] == 0
    assert match_defaults(g, [t], 0.5).max() == 0


def test_match_tie_picks_lower_index():
    grid = make_default_grid(256, 1, 256)  # [0, 256)
    a, b = ev(0, 200), ev(56, 256)  # equal IoU 200/256
    assert match_defaults(grid, [a, b], 0.5)[0] == 0
    assert match_defaults(grid, [b, a], 0.5)[0] == 0


def test_match_against_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        rho = int(rng.choice([1, 2, 4]))
        window = 256 * int(rng.integers(1, 50 // rho + 1)) if rho == 1 else 256 * int(rng.integers(1, 50 // rho + 1))
        grid = make_default_grid(window, rho, 256)
        n_true = int(rng.integers(0, 21))
        starts = rng.uniform(-50, window, n_true)
        durs = rng.uniform(20, 600, n_true)
        trues = [ev(s, s + d) for s, d in zip(starts, durs)]
        eta = float(rng.uniform(0.05, 1.0))
        np.testing.assert_array_equal(match_defaults(grid, trues, eta), exhaustive_match(grid, trues, eta))


# -- encoding ------------------------------------------------------------------


def test_encode_examples():
    d = Event(100, 50)
    assert encode(d, d) == (0.0, 0.0)
    dc, dd = encode(d, Event(125, 100))
    assert dc == pytest.approx(0.5) and dd == pytest.approx(math.log(2))
    dc, dd = encode(d, Event(75, 25))
    assert dc == pytest.approx(-0.5) and dd == pytest.approx(-math.log(2))


def test_decode_examples():
    d = Event(100, 50)
    assert decode(d, (0.0, 0.0)) == Event(100, 50, 1)
    e = decode(d, (0.5, math.log(2)))
    assert e.center == pytest.approx(125) and e.duration == pytest.approx(100)


def test_decode_overflow_rejected():
    assert decode(Event(100, 50), (0.0, 1e4)) is None


def test_roundtrip_double():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10_000):
        d = Event(rng.uniform(0, 5000), rng.uniform(10, 500))
        t = Event(rng.uniform(0, 5000), rng.uniform(10, 500))
        back = decode(d, encode(d, t))
        worst = max(worst, abs(back.center - t.center), abs(back.duration - t.duration))
    assert worst < 1e-9


def test_roundtrip_single_relative():
    rng = np.random.default_rng(2)
    dc_ = rng.uniform(0, 5000, 1000).astype(np.float32)
    dd_ = rng.uniform(10, 500, 1000).astype(np.float32)
    tc = rng.uniform(0, 5000, 1000).astype(np.float32)
    td = rng.uniform(10, 500, 1000).astype(np.float32)
    off_c = (tc - dc_) / dd_
    off_d = np.log(td / dd_)
    bc = dc_ + off_c * dd_
    bd = dd_ * np.exp(off_d)
    assert np.max(np.abs(bd - td) / td) < 1e-4
    assert np.max(np.abs(bc - tc) / np.maximum(tc, 1)) < 1e-4


# -- nms -----------------------------------------------------------------------


def test_nms_examples():
    assert nms([]) == []
    a = ev(0, 1)
    assert [e.center for e in nms([(a, 0.3)])] == [a.center]
    out = nms([(ev(0, 1), 0.8), (ev(0, 1), 0.9)], 0.5)
    assert len(out) == 1 and out[0].score == 0.9
    out = nms([(ev(5, 6), 0.1), (ev(0, 1), 0.05), (ev(2, 3), 0.9)], 0.5)
    assert [e.start for e in out] == [0, 2, 5]


def test_nms_label_agnostic():
    out = nms([(ev(0, 1, 1), 0.6), (ev(0, 1.1, 2), 0.7)], 0.5)
    assert len(out) == 1 and out[0].label == 2


def brute_nms(cands, thr):
    remaining = sorted(range(len(cands)), key=lambda i: (-cands[i][1], i))
    kept = []
    while remaining:
        i = remaining.pop(0)
        kept.append(i)
        remaining = [j for j in remaining if iou(cands[i][0], cands[j][0]) < thr]
    return sorted((cands[i][0].start, cands[i][1]) for i in kept)


def test_nms_oracle_and_idempotent():
    rng = np.random.default_rng(3)
    for _ in range(300):
        n = int(rng.integers(0, 30))
        s = rng.uniform(0, 20, n)
        cands = [(ev(x, x + rng.uniform(0.2, 3)), float(rng.uniform())) for x in s]
        thr = float(rng.uniform(0.1, 0.9))
        out = nms(cands, thr)
        assert sorted((e.start, e.score) for e in out) == brute_nms(cands, thr)
        again = nms([(e, e.score) for e in out], thr)
        assert again == out
        starts = [e.start for e in out]
        assert starts == sorted(starts)


def test_nms_pairwise_overlap_below_threshold():
    rng = np.random.default_rng(4)
    cands = [(ev(x, x + 1.0), float(rng.uniform())) for x in rng.uniform(0, 10, 50)]
    out = nms(cands, 0.5)
    for a, b in itertools.combinations(out, 2):
        assert iou(a, b) < 0.5
