"""Loss, window sampling, the SGD loop and threshold selection."""

import copy
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndkernel as nd
from .detector import DetectorModel, events_from_outputs, record_outputs
from .events import Event, encode_arrays, match_defaults

log = logging.getLogger(__name__)

THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class TrainConfig:
    eta: float = 0.5
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    neg_pos_ratio: int = 3
    window_seconds: float = 20.0
    rng_seed: int = 0
    epoch_factor: int = 4  # sampled windows per epoch, per training annotation
    val_factor: int = 4  # fixed validation windows, per validation annotation
    nms_threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        for name in ("lr", "batch_size", "max_epochs", "patience", "neg_pos_ratio", "window_seconds"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# loss


def smooth_l1(x):
    """Huber-style penalty: x**2/2 inside (-1, 1), |x| - 1/2 outside."""
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * np.square(x), ax - 0.5)


def smooth_l1_grad(x):
    return np.clip(x, -1.0, 1.0)


@dataclass
class LossBreakdown:
    loc_pos: float  # normalised by n_pos
    clf_pos: float  # normalised by n_pos
    clf_neg: float  # normalised by n_neg_used
    n_pos: int
    n_neg_used: int
    neg_indices: np.ndarray = field(repr=False, default=None)

    @property
    def total(self):
        return self.loc_pos + self.clf_pos + self.clf_neg


def hard_negatives(neg_loss, candidates, k):
    """The ``k`` candidate defaults with the largest loss, lowest index first on ties."""
    order = np.argsort(-neg_loss[candidates], kind="stable")
    return np.sort(candidates[order[:k]])


def compute_loss(probs, offsets, grid, trues, cfg, neg_indices=None):
    """Loss of one window and its gradient w.r.t. the network outputs.

    Parameters
    ----------
    probs : ndarray (n_defaults, n_classes)
    offsets : ndarray (n_defaults, 2)
    grid : DefaultGrid
        Defaults in samples, window-relative.
    trues : list of Event
        True events, same coordinates as ``grid``.
    cfg : TrainConfig
    neg_indices : ndarray, optional
        Force this set of negatives instead of mining them (used to
        differentiate with the selection frozen).

    Returns
    -------
    LossBreakdown, grad_probs, grad_offsets
    """
    gamma = match_defaults(grid, trues, cfg.eta)
    pos = np.nonzero(gamma >= 0)[0]
    neg_all = np.nonzero(gamma < 0)[0]
    gp = np.zeros_like(probs)
    go = np.zeros_like(offsets)
    tiny = np.finfo(probs.dtype).tiny

    loc = clf_pos = 0.0
    if len(pos):
        tc = np.array([trues[j].center for j in gamma[pos]])
        td = np.array([trues[j].duration for j in gamma[pos]])
        target = encode_arrays(grid.centers[pos], grid.durations[pos], tc, td)
        diff = target - offsets[pos]
        n = len(pos)
        loc = smooth_l1(diff).sum() / n
        go[pos] = -smooth_l1_grad(diff) / n
        labels = np.array([trues[j].label for j in gamma[pos]])
        pl = probs[pos, labels]
        clf_pos = -np.log(np.maximum(pl, tiny)).sum() / n
        gp[pos, labels] = -1.0 / (np.maximum(pl, tiny) * n)

    if neg_indices is None:
        k = min(cfg.neg_pos_ratio * max(len(pos), 1), len(neg_all))
        neg_loss = -np.log(np.maximum(probs[:, 0], tiny))
        neg = hard_negatives(neg_loss, neg_all, k)
    else:
        neg = np.asarray(neg_indices, dtype=np.int64)
    clf_neg = 0.0
    if len(neg):
        p0 = np.maximum(probs[neg, 0], tiny)
        clf_neg = -np.log(p0).sum() / len(neg)
        gp[neg, 0] = -1.0 / (p0 * len(neg))
    br = LossBreakdown(float(loc), float(clf_pos), float(clf_neg), len(pos), len(neg), neg)
    return br, gp, go


def batch_loss(fp, grid, batch_events, cfg):
    """Mean window loss over a batch, with output gradients scaled to match."""
    n = fp.probs.shape[0]
    gp = np.zeros_like(fp.probs)
    go = np.zeros_like(fp.offsets)
    parts = np.zeros(3)
    for b in range(n):
        br, gp[b], go[b] = compute_loss(fp.probs[b], fp.offsets[b], grid, batch_events[b], cfg)
        parts += (br.loc_pos, br.clf_pos, br.clf_neg)
    return parts / n, gp / n, go / n


# --------------------------------------------------------------------------
# data preparation


def normalize_record(record):
    """Center each channel and divide by its full-record standard deviation."""
    x = np.asarray(record.signal, dtype=np.float64)
    std = x.std(axis=1)
    if np.any(std <= 0) or not np.all(np.isfinite(std)):
        bad = [record.channel_names[i] for i in np.nonzero(~(std > 0))[0]]
        raise ValueError(f"record {record.id}: constant channel(s) {bad} cannot be normalised")
    z = (x - x.mean(axis=1, keepdims=True)) / std[:, None]
    return record.with_signal(z.astype(np.float32))


def events_in_window(events_samples, w0, window):
    """Clip events to ``[w0, w0 + window)``; drop those less than half inside."""
    out = []
    w1 = w0 + window
    for e in events_samples:
        s, t = max(e.start, w0), min(e.end, w1)
        if t - s >= 0.5 * e.duration and t > s:
            out.append(Event.from_bounds(s - w0, t - w0, e.label))
    return out


def sample_window(record, rng, window, events_samples=None):
    """Random window containing at least half of a uniformly drawn event.

    Returns ``(x, events)`` where ``x`` has shape (C, window) and events are
    window-relative in samples.
    """
    fs = record.sample_rate
    evs = events_samples if events_samples is not None else [e.scaled(fs) for e in record.annotations]
    if not evs:
        raise ValueError(f"record {record.id} has no annotations to sample around")
    n = record.n_samples
    if n < window:
        pad = (window - n) // 2
        x = np.zeros((record.n_channels, window), np.float32)
        x[:, pad : pad + n] = record.signal
        return x, events_in_window([e.shifted(pad) for e in evs], 0, window)
    e = evs[rng.integers(len(evs))]
    # the window holds at least half of e iff it holds e's center
    lo = max(0, math.ceil(e.center - window))
    hi = min(n - window, math.floor(e.center))
    w0 = int(rng.integers(lo, hi + 1))
    return (
        np.ascontiguousarray(record.signal[:, w0 : w0 + window]),
        events_in_window(evs, w0, window),
    )


class WindowSampler:
    """Draws windows with every annotation in the record set equally likely."""

    def __init__(self, records, window):
        self.records = [r for r in records if r.annotations]
        if not self.records:
            raise ValueError("no annotated records to sample from")
        self.window = window
        self.events = [[e.scaled(r.sample_rate) for e in r.annotations] for r in self.records]
        counts = np.array([len(e) for e in self.events], dtype=np.float64)
        self.n_annotations = int(counts.sum())
        self.weights = counts / counts.sum()

    def draw(self, rng, n):
        xs = np.empty((n, 1, self.records[0].n_channels, self.window), np.float32)
        evs = []
        which = rng.choice(len(self.records), size=n, p=self.weights)
        for i, r in enumerate(which):
            x, e = sample_window(self.records[r], rng, self.window, self.events[r])
            xs[i, 0] = x
            evs.append(e)
        return xs, evs


# --------------------------------------------------------------------------
# training loop


def snapshot(model):
    return copy.deepcopy(model.params), copy.deepcopy(model.bn)


def restore(model, snap):
    model.params, model.bn = copy.deepcopy(snap[0]), copy.deepcopy(snap[1])


def evaluate_loss(model, grid, xs, evs, cfg, batch_size=32):
    """Mean window loss (eval mode) over a fixed window set."""
    total = 0.0
    for b in range(0, len(xs), batch_size):
        fp = model.forward(xs[b : b + batch_size], mode="eval")
        parts, _, _ = batch_loss(fp, grid, evs[b : b + batch_size], cfg)
        total += parts.sum() * fp.probs.shape[0]
    return total / len(xs)


def train(cfg, arch, train_records, val_records, log_sink=None):
    """Fit a detector with SGD and early stopping on validation loss.

    Records must already be normalised. ``log_sink`` receives one dict per
    epoch. Returns ``(model, history, optimizer)`` where the model carries
    the best-validation parameters and the optimizer its final state.
    """
    if not val_records:
        raise ValueError("at least one validation record is required")
    fs = train_records[0].sample_rate
    if round(cfg.window_seconds * fs) != arch.window:
        raise ValueError(f"window of {cfg.window_seconds} s at {fs} Hz is not {arch.window} samples")
    rng = np.random.default_rng(cfg.rng_seed)
    model = DetectorModel(arch, seed=int(rng.integers(2**31)))
    opt = nd.SGD(cfg.lr, cfg.momentum)
    grid = arch.grid()

    sampler = WindowSampler(train_records, arch.window)
    val_sampler = WindowSampler(val_records, arch.window)
    val_rng = np.random.default_rng([cfg.rng_seed, 1])
    val_x, val_e = val_sampler.draw(val_rng, cfg.val_factor * val_sampler.n_annotations)
    epoch_size = cfg.epoch_factor * sampler.n_annotations

    history = []
    best, best_loss, stale = snapshot(model), math.inf, 0
    for epoch in range(1, cfg.max_epochs + 1):
        parts_sum, seen = np.zeros(3), 0
        for b0 in range(0, epoch_size, cfg.batch_size):
            xs, evs = sampler.draw(rng, min(cfg.batch_size, epoch_size - b0))
            fp = model.forward(xs, mode="train")
            parts, gp, go = batch_loss(fp, grid, evs, cfg)
            if not np.all(np.isfinite(parts)):
                raise TrainingDiverged(f"epoch {epoch} batch {b0 // cfg.batch_size}: loss {parts.tolist()}")
            grads = model.backward(fp, gp, go)
            try:
                opt.step(model.params, grads)
            except nd.NonFiniteGradient as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            parts_sum += parts * len(xs)
            seen += len(xs)
        parts_sum /= seen
        val_loss = evaluate_loss(model, grid, val_x, val_e, cfg)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"epoch {epoch}: validation loss {val_loss}")
        improved = val_loss < best_loss
        if improved:
            best, best_loss, stale = snapshot(model), val_loss, 0
        else:
            stale += 1
        entry = {
            "epoch": epoch,
            "loc_pos": float(parts_sum[0]),
            "clf_pos": float(parts_sum[1]),
            "clf_neg": float(parts_sum[2]),
            "train_loss": float(parts_sum.sum()),
            "val_loss": float(val_loss),
            "best_val_loss": float(best_loss),
            "time": time.time(),
        }
        history.append(entry)
        log.info("epoch %d train %.4f val %.4f%s", epoch, entry["train_loss"], val_loss, " *" if improved else "")
        if log_sink is not None:
            log_sink(entry)
        if stale >= cfg.patience:
            break
    restore(model, best)
    return model, history, opt


def initial_classification_loss(model, windows, events, cfg):
    """Mean -log probability of each default's target label (no mining)."""
    fp = model.forward(windows, mode="eval")
    grid = model.arch.grid()
    vals = []
    for b in range(len(windows)):
        gamma = match_defaults(grid, events[b], cfg.eta)
        labels = np.array([events[b][j].label if j >= 0 else 0 for j in gamma])
        vals.append(-np.log(fp.probs[b, np.arange(len(gamma)), labels]))
    return float(np.mean(np.concatenate(vals)))


# --------------------------------------------------------------------------
# threshold selection


def select_thresholds(model, val_records, iou_delta=0.3, grid=THRESHOLD_GRID, nms_threshold=0.5):
    """Per-label grid search of the probability threshold on validation F1.

    Each label is tuned with the other labels switched off; the threshold
    with the highest mean per-record F1 wins, ties going to the larger one.
    """
    from .metrics import match_predictions, prf

    arch = model.arch
    outs = [record_outputs(model, r.signal, r.sample_rate) for r in val_records]
    chosen = []
    for lab in range(1, arch.n_classes):
        trues = [[e for e in r.annotations if e.label == lab] for r in val_records]
        if not any(trues):
            warnings.warn(f"no validation events for label {lab}; threshold set to 0.5")
            chosen.append(0.5)
            continue
        best_theta, best_f1 = None, -1.0
        for theta in grid:
            thr = [2.0] * arch.n_labels
            thr[lab - 1] = theta
            f1s = []
            for out, tr in zip(outs, trues):
                preds = events_from_outputs(arch, out, thr, nms_threshold)
                tp, fp, fn, _ = match_predictions(preds, tr, iou_delta)
                f1s.append(prf(tp, fp, fn)[2])
            f1 = float(np.mean(f1s))
            if f1 >= best_f1:
                best_theta, best_f1 = theta, f1
        chosen.append(best_theta)
    return chosen


def config_dict(cfg):
    return asdict(cfg)
