"""Records, their on-disk formats, synthetic EEG-like data and CV splits.

On-disk record ``<stem>``:

``<stem>.f32``
    raw little-endian float32 samples, channel-major (all of channel 0,
    then channel 1, ...), no header.
``<stem>.json``
    ``{"format": "evdetect-record", "version": 1, "id", "sample_rate",
    "n_channels", "n_samples", "channels": [names], "labels": {code: name}}``
``<stem>.csv``
    UTF-8 CSV with header ``start_s,duration_s,label``; one event per row,
    ``.`` decimal separator, seconds from record start.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .events import Event

RECORD_FORMAT = "evdetect-record"
RECORD_VERSION = 1
ANNOTATION_HEADER = ["start_s", "duration_s", "label"]


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    id: str
    sample_rate: float
    signal: np.ndarray = field(repr=False)  # (C, T')
    annotations: tuple = ()
    channel_names: tuple = ()
    labels: dict = field(default_factory=dict)  # label code -> name

    def __post_init__(self):
        if self.signal.ndim != 2:
            raise IngestionError(f"record {self.id}: signal must be (channels, samples)")
        if not self.channel_names:
            object.__setattr__(self, "channel_names", tuple(f"ch{i}" for i in range(self.signal.shape[0])))
        object.__setattr__(self, "annotations", tuple(sorted(self.annotations, key=lambda e: (e.start, e.label))))

    @property
    def n_channels(self):
        return self.signal.shape[0]

    @property
    def n_samples(self):
        return self.signal.shape[1]

    @property
    def duration_s(self):
        return self.n_samples / self.sample_rate

    def with_signal(self, signal):
        return replace(self, signal=signal)

    def with_annotations(self, annotations):
        return replace(self, annotations=tuple(annotations))

    def select_labels(self, keep):
        """Keep only labels in ``keep`` (ordered) and renumber them 1..len(keep)."""
        remap = {lab: i + 1 for i, lab in enumerate(keep)}
        anns = [replace(e, label=remap[e.label]) for e in self.annotations if e.label in remap]
        names = {remap[k]: v for k, v in self.labels.items() if k in remap}
        return replace(self, annotations=tuple(anns), labels=names)


# --------------------------------------------------------------------------
# files


def record_paths(stem):
    stem = os.fspath(stem)
    for ext in (".json", ".f32", ".csv"):
        if stem.endswith(ext):
            stem = stem[: -len(ext)]
    return stem + ".f32", stem + ".json", stem + ".csv"


def write_annotations(path, events):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_HEADER)
        for e in events:
            w.writerow([repr(float(e.start)), repr(float(e.duration)), int(e.label)])


def read_annotations(path, duration_s=None, known_labels=None):
    """Parse an annotation CSV, validating every row against the record."""
    events = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ANNOTATION_HEADER:
            raise IngestionError(f"{path}: header must be {','.join(ANNOTATION_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                start, dur, label = float(row[0]), float(row[1]), int(row[2])
            except (ValueError, IndexError) as exc:
                raise IngestionError(f"{path}:{row_no}: malformed row {row!r}") from exc
            if not (math.isfinite(start) and math.isfinite(dur)) or dur <= 0:
                raise IngestionError(f"{path}:{row_no}: duration must be positive, got {dur}")
            if start < 0 or (duration_s is not None and start + dur > duration_s + 1e-9):
                raise IngestionError(
                    f"{path}:{row_no}: event [{start}, {start + dur}) outside record [0, {duration_s})"
                )
            if label < 1 or (known_labels is not None and label not in known_labels):
                raise IngestionError(f"{path}:{row_no}: unknown label {label}")
            events.append(Event(start + dur / 2, dur, label))
    return events


def save_record(record, stem):
    sig_path, meta_path, ann_path = record_paths(stem)
    os.makedirs(os.path.dirname(sig_path) or ".", exist_ok=True)
    np.ascontiguousarray(record.signal, dtype="<f4").tofile(sig_path)
    meta = {
        "format": RECORD_FORMAT,
        "version": RECORD_VERSION,
        "id": record.id,
        "sample_rate": record.sample_rate,
        "n_channels": record.n_channels,
        "n_samples": record.n_samples,
        "channels": list(record.channel_names),
        "labels": {str(k): v for k, v in sorted(record.labels.items())},
    }
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_annotations(ann_path, record.annotations)
    return sig_path, meta_path, ann_path


def load_record(signal_path, meta_path=None, annot_path=None, check_std=True):
    """Load and validate a record.

    ``signal_path`` may be any of the three files or their common stem, in
    which case the siblings are found by extension. ``annot_path`` may be a
    list, whose events are concatenated (e.g. the union of two scorers).
    """
    sp, mp, ap = record_paths(signal_path)
    signal_path = sp if not os.fspath(signal_path).endswith(".f32") else os.fspath(signal_path)
    meta_path = meta_path or mp
    annot_path = annot_path or ap
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != RECORD_FORMAT:
        raise IngestionError(f"{meta_path}: not an {RECORD_FORMAT} sidecar")
    c, n = int(meta["n_channels"]), int(meta["n_samples"])
    raw = np.fromfile(signal_path, dtype="<f4")
    if raw.size != c * n:
        raise IngestionError(f"{signal_path}: {raw.size} samples on disk, sidecar declares {c} x {n}")
    signal = raw.reshape(c, n).astype(np.float32)
    if len(meta.get("channels", [])) not in (0, c):
        raise IngestionError(f"{meta_path}: {len(meta['channels'])} channel names for {c} channels")
    if check_std:
        std = signal.std(axis=1)
        if np.any(~(std > 0)):
            raise IngestionError(f"{signal_path}: constant channel(s) {np.nonzero(~(std > 0))[0].tolist()}")
    labels = {int(k): v for k, v in meta.get("labels", {}).items()}
    fs = float(meta["sample_rate"])
    paths = [annot_path] if isinstance(annot_path, (str, os.PathLike)) else list(annot_path)
    events = []
    for p in paths:
        if os.path.exists(p):
            events += read_annotations(p, n / fs, set(labels) or None)
    return Record(str(meta["id"]), fs, signal, tuple(events), tuple(meta.get("channels", ())), labels)


def load_records(data_dir, ids=None):
    if ids is None:
        ids = sorted(f[:-5] for f in os.listdir(data_dir) if f.endswith(".json") and not f.startswith(("splits", "manifest")))
    return [load_record(os.path.join(data_dir, i)) for i in ids]


# --------------------------------------------------------------------------
# synthetic EEG-like records

KINDS = ("spindle", "kcomplex", "artifact")


@dataclass
class EventClass:
    name: str
    label: int
    kind: str = "spindle"
    rate_per_min: float = 2.0
    band: tuple = (11.0, 16.0)
    duration: tuple = (0.5, 2.0)
    amplitude: tuple = (1.0, 3.0)
    annotate: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.annotate and self.label < 1:
            raise ValueError(f"annotated class {self.name!r} needs a label >= 1")


def default_classes():
    return [
        EventClass("spindle", 1, "spindle", 3.0, (11.0, 16.0), (0.5, 2.0), (1.0, 3.0)),
        EventClass("kcomplex", 2, "kcomplex", 1.5, (0.5, 2.0), (0.5, 1.5), (2.0, 5.0)),
        # un-annotated broadband bursts (movement/muscle-like); these leak
        # into every band and are what envelope detectors are sensitive to
        EventClass("artifact", 0, "artifact", 2.0, (0.5, 100.0), (0.5, 1.5), (3.0, 6.0), annotate=False),
    ]


@dataclass
class SynthConfig:
    duration_s: float = 600.0
    sample_rate: float = 256.0
    n_channels: int = 1
    noise_exponent: float = 1.0
    classes: list = field(default_factory=default_classes)
    min_gap_s: float = 0.5
    rng_seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "classes" in d:
            d["classes"] = [c if isinstance(c, EventClass) else EventClass(**c) for c in d["classes"]]
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def colored_noise(n, exponent, rng):
    """Unit-variance noise with power spectrum ~ 1/f**exponent."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n)
    scale = np.zeros_like(f)
    scale[1:] = f[1:] ** (-exponent / 2)
    x = np.fft.irfft(spec * scale, n)
    return (x - x.mean()) / x.std()


_SUPPORT = math.sqrt(2 * math.log(10))  # gaussian envelope is 10% of peak at this many sigmas


def spindle_waveform(t, duration, freq, amp, phase):
    """Gaussian-windowed sinusoid whose 10%-envelope support is ``duration``."""
    sigma = duration / 2 / _SUPPORT
    return amp * np.exp(-0.5 * (t / sigma) ** 2) * np.sin(2 * np.pi * freq * t + phase)


def _kcomplex_unit(u):
    # sharp negative wave followed by a broad positive one
    return -np.exp(-0.5 * (u / 0.15) ** 2) + 0.6 * np.exp(-0.5 * ((u - 0.45) / 0.35) ** 2)


def _kcomplex_support():
    u = np.linspace(-2, 3, 50001)
    w = np.abs(_kcomplex_unit(u))
    idx = np.nonzero(w >= 0.1 * w.max())[0]
    return u[idx[0]], u[idx[-1]], w.max()


_KC_LO, _KC_HI, _KC_PEAK = _kcomplex_support()


def kcomplex_waveform(t, duration, amp):
    """Biphasic transient; ``t`` is relative to the annotation center."""
    scale = duration / (_KC_HI - _KC_LO)
    u = t / scale + (_KC_LO + _KC_HI) / 2
    return amp * _kcomplex_unit(u) / _KC_PEAK


def artifact_waveform(t, duration, amp, rng):
    """White-noise burst under a Hann window spanning ``duration``; std ~ ``amp``."""
    inside = np.abs(t) < duration / 2
    win = np.where(inside, np.cos(np.pi * t / duration) ** 2, 0.0)
    # Hann-squared has mean 3/8, so rescale for the requested burst std
    return amp * rng.standard_normal(t.shape) * win / math.sqrt(3 / 8)


def _place(rng, durations, total, gap):
    """Random non-overlapping starts for ``durations`` with ``gap`` spacing."""
    need = durations.sum() + gap * (len(durations) + 1)
    if need > total:
        raise ValueError(f"events need {need:.1f} s but the record lasts {total:.1f} s")
    # sample free space uniformly, then lay events in random order
    slack = total - need
    cuts = np.sort(rng.uniform(0, slack, len(durations)))
    gaps = np.diff(np.concatenate([[0.0], cuts]))
    order = rng.permutation(len(durations))
    starts = np.empty(len(durations))
    t = gap
    for k, i in enumerate(order):
        t += gaps[k]
        starts[i] = t
        t += durations[i] + gap
    return starts


def generate_synthetic(cfg, record_id="synth"):
    rng = np.random.default_rng(cfg.rng_seed)
    fs = cfg.sample_rate
    n = int(round(cfg.duration_s * fs))
    signal = np.stack([colored_noise(n, cfg.noise_exponent, rng) for _ in range(cfg.n_channels)])
    specs = []
    for cls in cfg.classes:
        count = int(round(cls.rate_per_min * cfg.duration_s / 60))
        for _ in range(count):
            specs.append((cls, rng.uniform(*cls.duration), rng.uniform(*cls.amplitude)))
    durations = np.array([s[1] for s in specs])
    starts = _place(rng, durations, cfg.duration_s, cfg.min_gap_s) if specs else []
    t = np.arange(n) / fs
    events = []
    for (cls, dur, amp), s0 in zip(specs, starts):
        c = s0 + dur / 2
        lo = max(0, int((c - 1.5 * dur) * fs))
        hi = min(n, int((c + 1.5 * dur) * fs) + 1)
        tt = t[lo:hi] - c
        if cls.kind == "spindle":
            w = spindle_waveform(tt, dur, rng.uniform(*cls.band), amp, rng.uniform(0, 2 * np.pi))
        elif cls.kind == "kcomplex":
            w = kcomplex_waveform(tt, dur, amp)
        else:
            w = artifact_waveform(tt, dur, amp, rng)
        # same event on every channel, with channel-specific gain
        gains = rng.uniform(0.5, 1.0, cfg.n_channels) if cfg.n_channels > 1 else np.ones(1)
        signal[:, lo:hi] += gains[:, None] * w[None, :]
        if cls.annotate:
            events.append(Event(float(c), float(dur), cls.label))
    labels = {cls.label: cls.name for cls in cfg.classes if cls.annotate}
    return Record(record_id, fs, signal.astype(np.float32), tuple(events), labels=labels)


def default_cohort(n_records=19, seed=0, **overrides):
    """Configs for a cohort of synthetic records with per-record seeds."""
    return [
        (f"rec{i:02d}", SynthConfig(**{**overrides, "rng_seed": int(np.random.SeedSequence([seed, i]).generate_state(1)[0])}))
        for i in range(n_records)
    ]


# --------------------------------------------------------------------------
# cross-validation splits


@dataclass
class SplitPlan:
    splits: list  # of {"train": [...], "val": [...], "test": [...]}
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_splits(self):
        return len(self.splits)

    def validate(self):
        tested = set()
        all_ids = set()
        for k, s in enumerate(self.splits):
            tr, va, te = set(s["train"]), set(s["val"]), set(s["test"])
            if tr & va or tr & te or va & te:
                raise ValueError(f"split {k}: train/val/test overlap")
            tested |= te
            all_ids |= tr | va | te
        if any(s["test"] for s in self.splits) and tested != all_ids:
            raise ValueError(f"records never tested: {sorted(all_ids - tested)}")

    def to_dict(self):
        return {"seed": self.seed, "splits": self.splits}

    @classmethod
    def from_dict(cls, d):
        return cls(d["splits"], d.get("seed", 0))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def split_counts(n, n_splits, fractions):
    """Record counts (train, val, test) from integer counts or fractions of n."""
    if all(isinstance(f, int) for f in fractions):
        counts = list(fractions)
    else:
        counts = [max(1, int(round(f * n))) if f > 0 else 0 for f in fractions]
        if counts[2]:
            counts[2] = max(counts[2], math.ceil(n / n_splits))
        counts[0] = min(counts[0], n - counts[1] - counts[2])
    return tuple(counts)


def make_splits(record_ids, n_splits=5, fractions=(10 / 19, 2 / 19, 4 / 19), rng_seed=0):
    """Seeded rotating-test-block cross-validation plan.

    Test blocks walk round a shuffled id list so that every record is
    tested at least once when ``n_splits * n_test >= n``; the remaining ids
    are reshuffled per split into validation then training.
    """
    ids = list(record_ids)
    n = len(ids)
    n_train, n_val, n_test = split_counts(n, n_splits, fractions)
    need = n_train + n_val + n_test
    if min(n_train, n_val) < 1 or need > n:
        raise ValueError(f"{n} records cannot supply {n_train} train + {n_val} val + {n_test} test; need at least {max(need, 2)}")
    if n_test and n_test * n_splits < n:
        raise ValueError(f"{n_splits} splits of {n_test} test records cannot cover {n} records")
    rng = np.random.default_rng(rng_seed)
    order = [ids[i] for i in rng.permutation(n)]
    splits = []
    for s in range(n_splits):
        test = [order[(s * n_test + i) % n] for i in range(n_test)]
        rest = [i for i in order if i not in test]
        rest = [rest[i] for i in rng.permutation(len(rest))]
        splits.append({"train": sorted(rest[n_val : n_val + n_train]), "val": sorted(rest[:n_val]), "test": sorted(test)})
    return SplitPlan(splits, rng_seed)
