"""The convolutional event detector and its prediction procedure.

Network layout for an input of shape (N, 1, C, T):

* block 0 (only when C > 1): conv with C kernels of size (C, 1), linear,
  then the channel and space axes are swapped back to (N, 1, C, T);
* blocks 1..8: conv with 4*2**k kernels of size (1, 3), zero padded, then
  batch-norm, ReLU and max pooling (1, 2) / 2;
* head: two convs with kernels (C, 3) on the (1024, C, T/2**8) trunk
  output, one giving (n_labels + 1) * rho class logits (softmax per group),
  the other 2 * rho offsets.

Output cell (t, g) of the head, with t the pooled time index and g the
slot within the cell, is default event ``t * rho + g``.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndkernel as nd
from .events import POOL_FACTOR, ConfigError, Event, decode_arrays, make_default_grid, nms

N_BLOCKS = 8

CHECKPOINT_KIND = "evdetect.detector"


@dataclass(frozen=True)
class ArchConfig:
    channels: int = 1
    window: int = 5120
    n_labels: int = 1
    rho: int = 4
    default_duration: int = 256
    sample_rate: float = 256.0

    def __post_init__(self):
        if min(self.channels, self.window, self.n_labels, self.rho, self.default_duration) < 1:
            raise ConfigError(f"all architecture sizes must be positive: {self}")
        if self.window % POOL_FACTOR:
            raise ConfigError(f"window {self.window} is not divisible by {POOL_FACTOR}")

    @property
    def n_defaults(self):
        return self.window * self.rho // POOL_FACTOR

    @property
    def n_classes(self):
        return self.n_labels + 1

    def grid(self):
        return make_default_grid(self.window, self.rho, self.default_duration)


def block_channels(k):
    return 4 * 2**k


def _uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass
class ForwardPass:
    probs: np.ndarray  # (N, n_defaults, n_classes), float64
    offsets: np.ndarray  # (N, n_defaults, 2)
    trunk_shape: tuple
    caches: list = field(default_factory=list, repr=False)


class DetectorModel:
    """Parameters, batch-norm statistics and per-label thresholds."""

    def __init__(self, arch, seed=0, dtype=np.float32):
        self.arch = arch
        self.dtype = dtype
        self.params = {}
        self.bn = {}
        self.thresholds = None
        rng = np.random.default_rng(seed)
        c = arch.channels
        if c > 1:
            self.params["block0.w"] = _uniform(rng, (c, 1, c, 1))
            self.params["block0.b"] = np.zeros(c, np.float32)
        cin = 1
        for k in range(1, N_BLOCKS + 1):
            cout = block_channels(k)
            self.params[f"block{k}.w"] = _uniform(rng, (cout, cin, 1, 3))
            self.params[f"block{k}.gamma"] = np.ones(cout, np.float32)
            self.params[f"block{k}.beta"] = np.zeros(cout, np.float32)
            self.bn[k] = nd.BatchNormState.fresh(cout)
            cin = cout
        self.params["clf.w"] = _uniform(rng, (arch.n_classes * arch.rho, cin, c, 3))
        self.params["clf.b"] = np.zeros(arch.n_classes * arch.rho, np.float32)
        self.params["loc.w"] = _uniform(rng, (2 * arch.rho, cin, c, 3))
        self.params["loc.b"] = np.zeros(2 * arch.rho, np.float32)
        if dtype != np.float32:
            self.astype(dtype)

    def astype(self, dtype):
        """Cast parameters and statistics in place (float64 for grad checks)."""
        self.dtype = dtype
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        for st in self.bn.values():
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
        return self

    # ------------------------------------------------------------------
    def forward(self, x, mode="eval", keep_cache=None):
        """Run the network on ``x`` of shape (N, 1, C, T).

        Caches for :meth:`backward` are kept in train mode, or whenever
        ``keep_cache`` is true.
        """
        a, p = self.arch, self.params
        if x.ndim != 4 or x.shape[1:] != (1, a.channels, a.window):
            raise ConfigError(f"expected input (N, 1, {a.channels}, {a.window}), got {x.shape}")
        keep = mode == "train" if keep_cache is None else keep_cache
        caches = []
        h = np.ascontiguousarray(x, dtype=self.dtype)
        if a.channels > 1:
            h, c0 = nd.conv2d_forward(h, p["block0.w"], p["block0.b"])
            h = np.ascontiguousarray(h.transpose(0, 2, 1, 3))
            caches.append(c0)
        for k in range(1, N_BLOCKS + 1):
            h, cc = nd.conv2d_forward(h, p[f"block{k}.w"], None, pad=(0, 1))
            h, cb = nd.batchnorm2d_forward(h, p[f"block{k}.gamma"], p[f"block{k}.beta"], self.bn[k], mode)
            h, cr = nd.relu_forward(h)
            h, cp = nd.maxpool2d_forward(h)
            caches.append((cc, cb, cr, cp) if keep else None)
        trunk_shape = h.shape
        logits, cl = nd.conv2d_forward(h, p["clf.w"], p["clf.b"], pad=(0, 1))
        locs, cg = nd.conv2d_forward(h, p["loc.w"], p["loc.b"], pad=(0, 1))
        probs_nchw = nd.grouped_softmax(logits.astype(np.float64), a.n_classes)
        n, wt = x.shape[0], logits.shape[3]
        probs = probs_nchw.reshape(n, a.rho, a.n_classes, wt).transpose(0, 3, 1, 2)
        probs = probs.reshape(n, wt * a.rho, a.n_classes)
        offsets = locs.reshape(n, a.rho, 2, wt).transpose(0, 3, 1, 2).reshape(n, wt * a.rho, 2)
        if keep:
            caches.append((cl, cg, probs_nchw))
        else:
            caches = []
        return ForwardPass(probs, offsets.astype(np.float64), trunk_shape, caches)

    def backward(self, fp, grad_probs, grad_offsets):
        """Parameter gradients given loss gradients w.r.t. the outputs."""
        if not fp.caches:
            raise nd.ContractError("backward needs a forward pass run with caches")
        a, p = self.arch, self.params
        n, nd_, _ = grad_probs.shape
        wt = nd_ // a.rho
        cl, cg, probs_nchw = fp.caches[-1]
        gp = grad_probs.reshape(n, wt, a.rho, a.n_classes).transpose(0, 2, 3, 1)
        gp = gp.reshape(probs_nchw.shape)
        glogits = nd.grouped_softmax_backward(probs_nchw, gp, a.n_classes).astype(self.dtype)
        gloc = grad_offsets.reshape(n, wt, a.rho, 2).transpose(0, 2, 3, 1)
        gloc = np.ascontiguousarray(gloc.reshape(n, 2 * a.rho, 1, wt), dtype=self.dtype)
        grads = {}
        dh1, grads["clf.w"], grads["clf.b"] = nd.conv2d_backward(glogits, cl)
        dh2, grads["loc.w"], grads["loc.b"] = nd.conv2d_backward(gloc, cg)
        dh = dh1 + dh2
        offset = 1 if a.channels > 1 else 0
        for k in range(N_BLOCKS, 0, -1):
            cc, cb, cr, cp = fp.caches[offset + k - 1]
            dh = nd.maxpool2d_backward(dh, cp)
            dh = nd.relu_backward(dh, cr)
            dh, grads[f"block{k}.gamma"], grads[f"block{k}.beta"] = nd.batchnorm2d_backward(dh, cb)
            dh, grads[f"block{k}.w"], _ = nd.conv2d_backward(dh, cc)
        if a.channels > 1:
            dh = np.ascontiguousarray(dh.transpose(0, 2, 1, 3))
            _, grads["block0.w"], grads["block0.b"] = nd.conv2d_backward(dh, fp.caches[0])
        return grads

    # ------------------------------------------------------------------
    def state_tensors(self):
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        for k, st in self.bn.items():
            tensors[f"bn/block{k}.running_mean"] = st.running_mean
            tensors[f"bn/block{k}.running_var"] = st.running_var
        return tensors

    def save(self, path, optimizer=None, extra=None):
        """Write a checkpoint with architecture, thresholds and optimiser state."""
        tensors = self.state_tensors()
        meta = {
            "kind": CHECKPOINT_KIND,
            "arch": asdict(self.arch),
            "thresholds": None if self.thresholds is None else [float(t) for t in self.thresholds],
            "bn": {str(k): {"eps": st.eps, "momentum": st.momentum} for k, st in self.bn.items()},
        }
        if optimizer is not None:
            meta["optimizer"] = {"lr": optimizer.lr, "momentum": optimizer.momentum}
            for k, v in optimizer.velocity.items():
                tensors[f"velocity/{k}"] = v
        if extra:
            meta["extra"] = extra
        nd.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = nd.load_tensors(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise ValueError(f"{path}: not a detector checkpoint")
        model = cls(ArchConfig(**meta["arch"]))
        for name, arr in tensors.items():
            group, _, key = name.partition("/")
            if group == "param":
                if model.params[key].shape != arr.shape:
                    raise ValueError(f"{path}: {key} has shape {arr.shape}, expected {model.params[key].shape}")
                model.params[key] = arr
            elif group == "bn":
                blk, _, stat = key.partition(".")
                setattr(model.bn[int(blk[5:])], stat, arr)
        for k, cfg in meta["bn"].items():
            model.bn[int(k)].eps = cfg["eps"]
            model.bn[int(k)].momentum = cfg["momentum"]
        model.thresholds = meta["thresholds"]
        return model

    @staticmethod
    def load_optimizer(path):
        tensors, meta = nd.load_tensors(path)
        if "optimizer" not in meta:
            return None
        opt = nd.SGD(meta["optimizer"]["lr"], meta["optimizer"]["momentum"])
        opt.velocity = {k[9:]: v for k, v in tensors.items() if k.startswith("velocity/")}
        return opt


# --------------------------------------------------------------------------
# prediction


@dataclass
class Diagnostics:
    degenerate: int = 0
    padded: bool = False


def window_candidates(arch, probs, offsets, thresholds, diag=None):
    """Thresholded, decoded candidates of one window in sample units.

    Returns a list of ``(Event, score)``; events are clipped to the window
    and degenerate decodes (longer than the window, or one sample or
    shorter) are dropped.
    """
    grid = arch.grid()
    centers, durs = decode_arrays(grid.centers, grid.durations, offsets)
    out = []
    for lab in range(1, arch.n_classes):
        hits = np.nonzero(probs[:, lab] >= thresholds[lab - 1])[0]
        for i in hits:
            c, d = centers[i], durs[i]
            if not np.isfinite(d) or d > arch.window or d <= 1:
                if diag is not None:
                    diag.degenerate += 1
                continue
            s = max(c - d / 2, 0.0)
            e = min(c + d / 2, float(arch.window))
            if e - s <= 1:
                if diag is not None:
                    diag.degenerate += 1
                continue
            out.append((Event.from_bounds(s, e, lab), float(probs[i, lab])))
    return out


def predict_window(model, x, nms_threshold=0.5, thresholds=None):
    """Events (sample units) predicted on a single window ``x`` of shape (C, T)."""
    thr = model.thresholds if thresholds is None else thresholds
    if thr is None:
        raise ValueError("model thresholds are not set")
    fp = model.forward(np.asarray(x)[None, None], mode="eval")
    cands = window_candidates(model.arch, fp.probs[0], fp.offsets[0], thr)
    return nms(cands, nms_threshold)


@dataclass
class RecordOutputs:
    """Raw network outputs over a tiled record, reusable across thresholds."""

    starts: np.ndarray  # window start sample
    probs: np.ndarray
    offsets: np.ndarray
    n_samples: int
    pad: int  # zeros prepended when the record is shorter than a window
    sample_rate: float


def window_starts(n_samples, window):
    stride = window // 2
    starts = list(range(0, max(n_samples - window, 0) + 1, stride))
    if starts[-1] + window < n_samples:
        starts.append(n_samples - window)
    return np.array(starts, dtype=np.int64)


def record_outputs(model, signal, sample_rate, batch_size=32):
    """Tile ``signal`` (C, T') with stride T/2 windows and run the network."""
    a = model.arch
    signal = np.asarray(signal, dtype=np.float32)
    if signal.ndim != 2 or signal.shape[0] != a.channels:
        raise ConfigError(f"model expects {a.channels} channel(s), record has {signal.shape[0]}")
    pad = 0
    if signal.shape[1] < a.window:
        pad = a.window - signal.shape[1]
        signal = np.concatenate([np.zeros((a.channels, pad), np.float32), signal], axis=1)
    starts = window_starts(signal.shape[1], a.window)
    probs, offs = [], []
    for b in range(0, len(starts), batch_size):
        chunk = np.stack([signal[:, s : s + a.window] for s in starts[b : b + batch_size]])
        fp = model.forward(chunk[:, None], mode="eval")
        probs.append(fp.probs)
        offs.append(fp.offsets)
    return RecordOutputs(
        starts, np.concatenate(probs), np.concatenate(offs), signal.shape[1], pad, sample_rate
    )


def events_from_outputs(arch, out, thresholds, nms_threshold=0.5, diag=None):
    """Record-level events in seconds from cached :class:`RecordOutputs`.

    Each window only contributes events whose center is closer to its own
    center than to any other window's; a final NMS pass runs over the
    union.
    """
    mids = out.starts + arch.window / 2
    cands = []
    for w, s in enumerate(out.starts):
        lo = -np.inf if w == 0 else (mids[w - 1] + mids[w]) / 2
        hi = np.inf if w == len(out.starts) - 1 else (mids[w] + mids[w + 1]) / 2
        for ev, score in window_candidates(arch, out.probs[w], out.offsets[w], thresholds, diag):
            c = ev.center + s
            if lo <= c < hi:
                cands.append((ev.shifted(float(s)), score))
    kept = nms(cands, nms_threshold)
    fs = out.sample_rate
    events = []
    for ev in kept:
        s = max(ev.start - out.pad, 0.0)
        e = min(ev.end - out.pad, float(out.n_samples - out.pad))
        if e - s <= 1:
            continue
        events.append(Event.from_bounds(s / fs, e / fs, ev.label, ev.score))
    return events


def predict_record(model, signal, sample_rate, nms_threshold=0.5, thresholds=None, diag=None):
    """Events in seconds over a full multichannel record."""
    thr = model.thresholds if thresholds is None else thresholds
    if thr is None:
        raise ValueError("model thresholds are not set")
    out = record_outputs(model, signal, sample_rate)
    if diag is not None:
        diag.padded = out.pad > 0
    return events_from_outputs(model.arch, out, thr, nms_threshold, diag)
