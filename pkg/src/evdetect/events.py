"""Event geometry: intervals, default grids, matching, offsets and NMS.

Events are half-open intervals ``[center - duration/2, center + duration/2)``.
The unit (samples or seconds) is whatever the caller uses consistently;
nothing here depends on it.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels

POOL_FACTOR = 2**8  # total temporal downsampling of the eight pooling blocks


class ConfigError(ValueError):
    """Raised for inconsistent window/grid configurations."""


@dataclass(frozen=True)
class Event:
    center: float
    duration: float
    label: int = 1
    score: float | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"event duration must be > 0, got {self.duration}")

    @property
    def start(self):
        return self.center - self.duration / 2

    @property
    def end(self):
        return self.center + self.duration / 2

    @classmethod
    def from_bounds(cls, start, end, label=1, score=None):
        return cls((start + end) / 2, end - start, label, score)

    def shifted(self, dt):
        return replace(self, center=self.center + dt)

    def scaled(self, factor):
        """Same event with center and duration multiplied by ``factor``."""
        return replace(self, center=self.center * factor, duration=self.duration * factor)


def iou(a, b):
    """Jaccard index of two events' intervals."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    # overlapping intervals: the union is the hull
    return inter / (max(a.end, b.end) - min(a.start, b.start))


def bounds(events):
    """(starts, ends) float64 arrays for a list of events."""
    s = np.array([e.start for e in events], dtype=np.float64)
    e = np.array([e.end for e in events], dtype=np.float64)
    return s, e


def iou_matrix(a, b):
    """Pairwise IoU between two event lists, shape (len(a), len(b))."""
    return kernels.iou_matrix(*bounds(a), *bounds(b))


# --------------------------------------------------------------------------
# default events


@dataclass(frozen=True)
class DefaultGrid:
    rho: int
    default_duration: float
    n_defaults: int
    centers: np.ndarray

    @property
    def durations(self):
        return np.full(self.n_defaults, float(self.default_duration))

    @property
    def starts(self):
        return self.centers - self.default_duration / 2

    @property
    def ends(self):
        return self.centers + self.default_duration / 2

    def event(self, i, label=0):
        """Default ``i`` (0-based) as an :class:`Event`."""
        return Event(float(self.centers[i]), float(self.default_duration), label)


def make_default_grid(window, rho, default_duration):
    """Defaults centred at ``2**8 * (i - 0.5) / rho`` for i = 1..T*rho/2**8.

    ``window`` and ``default_duration`` are in samples.
    """
    if rho < 1 or window < 1 or default_duration <= 0:
        raise ConfigError("window, rho and default_duration must be positive")
    if (window * rho) % POOL_FACTOR:
        raise ConfigError(
            f"window*rho = {window * rho} is not divisible by {POOL_FACTOR}; "
            f"window must be a multiple of {POOL_FACTOR // math.gcd(rho, POOL_FACTOR)}"
        )
    n = window * rho // POOL_FACTOR
    centers = POOL_FACTOR * (np.arange(1, n + 1) - 0.5) / rho
    return DefaultGrid(rho, default_duration, n, centers)


def match_defaults(grid, trues, eta=0.5):
    """Index of the best-overlapping true event per default, or -1.

    A default matches a true event when their IoU is at least ``eta``;
    among several, the highest IoU wins and exact ties go to the lower
    true index.
    """
    if not 0 < eta <= 1:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    if not trues:
        return np.full(grid.n_defaults, -1, dtype=np.int64)
    ts, te = bounds(trues)
    ious = kernels.iou_matrix(grid.starts, grid.ends, ts, te)
    return kernels.argmax_match(ious, eta)


# --------------------------------------------------------------------------
# offset encoding


def encode(default, truth):
    """(relative center shift, log duration ratio) of ``truth`` w.r.t. ``default``."""
    return (
        (truth.center - default.center) / default.duration,
        math.log(truth.duration / default.duration),
    )


def decode(default, offset, label=1, score=None):
    """Inverse of :func:`encode`; None when the duration overflows."""
    dc, dd = offset
    try:
        duration = default.duration * math.exp(dd)
    except OverflowError:
        return None
    if not (math.isfinite(duration) and duration > 0 and math.isfinite(dc)):
        return None
    return Event(default.center + dc * default.duration, duration, label, score)


def encode_arrays(def_centers, def_durations, true_centers, true_durations):
    dc = (true_centers - def_centers) / def_durations
    dd = np.log(true_durations / def_durations)
    return np.stack([dc, dd], axis=-1)


def decode_arrays(def_centers, def_durations, offsets):
    """Vectorised :func:`decode`; overflowing rows come back as nan."""
    with np.errstate(over="ignore", invalid="ignore"):
        centers = def_centers + offsets[..., 0] * def_durations
        durations = def_durations * np.exp(offsets[..., 1])
    bad = ~np.isfinite(durations) | ~np.isfinite(centers) | (durations <= 0)
    centers = np.where(bad, np.nan, centers)
    durations = np.where(bad, np.nan, durations)
    return centers, durations


# --------------------------------------------------------------------------
# suppression


def nms(candidates, overlap_threshold=0.5):
    """Greedy non-maximum suppression across labels.

    Parameters
    ----------
    candidates : list of (Event, float)
        Events with their scores.
    overlap_threshold : float
        A candidate is discarded when its IoU with an already kept one is
        at least this value.

    Returns
    -------
    list of Event
        Survivors carrying their score, sorted by start time.
    """
    if not candidates:
        return []
    events = [e for e, _ in candidates]
    scores = np.array([s for _, s in candidates], dtype=np.float64)
    starts, ends = bounds(events)
    # stable on ties: earlier candidate first
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    keep = kernels.nms_order(starts, ends, scores, order, float(overlap_threshold))
    kept = [replace(events[i], score=float(scores[i])) for i in keep]
    kept.sort(key=lambda e: (e.start, e.end, e.label))
    return kept
