"""Band-pass + moving-RMS thresholding spindle detector."""

from dataclasses import dataclass, replace

import numpy as np
from scipy import signal as sps

from .events import Event
from .metrics import HEADLINE_DELTA, match_predictions, prf

MERGE_GAP_S = 0.1


@dataclass(frozen=True)
class EnvelopeConfig:
    band: tuple = (11.0, 16.0)
    rms_window: float = 0.2
    k: float = 2.0
    min_duration: float = 0.4
    max_duration: float = 2.0
    label: int = 1

    def check(self, fs):
        lo, hi = self.band
        if not 0 < lo < hi < fs / 2:
            raise ValueError(f"band {self.band} must satisfy 0 < low < high < {fs / 2}")
        if not 0 < self.min_duration < self.max_duration:
            raise ValueError("need 0 < min_duration < max_duration")
        if self.rms_window <= 0:
            raise ValueError("rms_window must be positive")


def fir_taps(band, fs):
    """Hamming-windowed sinc band-pass with 3 s of taps (odd count)."""
    n = int(3 * fs) | 1
    return sps.firwin(n, band, pass_zero=False, window="hamming", fs=fs)


def bandpass_fir(x, band, fs):
    """Zero-phase band-pass: the FIR is applied forward and backward."""
    lo, hi = band
    if not 0 < lo < hi < fs / 2:
        raise ValueError(f"band {band} must lie inside (0, {fs / 2}) Hz")
    x = np.asarray(x, dtype=np.float64)
    return sps.filtfilt(fir_taps(band, fs), [1.0], x, axis=-1)


def moving_rms(x, window, fs):
    n = max(1, int(round(window * fs)))
    kernel = np.ones(n) / n
    return np.sqrt(np.maximum(np.convolve(np.square(x), kernel, mode="same"), 0.0))


def _runs(mask):
    """(start, stop) sample indices of True runs."""
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return np.nonzero(d == 1)[0], np.nonzero(d == -1)[0]


def events_from_envelope(rms, fs, cfg):
    thr = cfg.k * rms.std()
    starts, stops = _runs(rms > thr)
    merged = []
    gap = MERGE_GAP_S * fs
    for s, e in zip(starts, stops):
        if merged and s - merged[-1][1] < gap:
            merged[-1][1] = e
        else:
            merged.append([s, e])
    out = []
    for s, e in merged:
        dur = (e - s) / fs
        if cfg.min_duration <= dur <= cfg.max_duration:
            out.append(Event.from_bounds(s / fs, e / fs, cfg.label))
    return out


class EnvelopeDetector:
    """Detector with the common ``detect(record)`` interface, first channel only."""

    def __init__(self, cfg=EnvelopeConfig()):
        self.cfg = cfg
        self._cache = {}

    def envelope(self, record):
        key = (record.id, self.cfg.band, self.cfg.rms_window, id(record.signal))
        if key not in self._cache:
            self.cfg.check(record.sample_rate)
            x = bandpass_fir(record.signal[0], self.cfg.band, record.sample_rate)
            self._cache[key] = moving_rms(x, self.cfg.rms_window, record.sample_rate)
        return self._cache[key]

    def detect(self, record):
        return events_from_envelope(self.envelope(record), record.sample_rate, self.cfg)


def detect_envelope(record, cfg=EnvelopeConfig()):
    return EnvelopeDetector(cfg).detect(record)


def tune_baseline(cfg_grid, val_records, delta=HEADLINE_DELTA):
    """Config with the best mean validation F1; ties go to the smaller k."""
    cfg_grid = list(cfg_grid)
    if not cfg_grid:
        raise ValueError("empty baseline grid")
    if not val_records:
        raise ValueError("no validation records to tune on")
    envs = {}
    best = None
    for cfg in sorted(cfg_grid, key=lambda c: c.k):
        key = (cfg.band, cfg.rms_window)
        if key not in envs:
            det = EnvelopeDetector(cfg)
            envs[key] = [det.envelope(r) for r in val_records]
        f1s = []
        for r, env in zip(val_records, envs[key]):
            preds = events_from_envelope(env, r.sample_rate, cfg)
            trues = [e for e in r.annotations if e.label == cfg.label]
            f1s.append(prf(*match_predictions(preds, trues, delta)[:3])[2])
        score = float(np.mean(f1s))
        if best is None or score > best[0]:
            best = (score, cfg)
    return best[1]


def k_grid(base=EnvelopeConfig(), ks=np.round(np.arange(0.5, 4.01, 0.25), 2)):
    return [replace(base, k=float(k)) for k in ks]
