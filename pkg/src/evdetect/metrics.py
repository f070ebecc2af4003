"""By-event precision, recall and F1 with an IoU criterion.

Degenerate counts: precision is 1 when nothing was predicted and nothing
was there to find, 0 when nothing was predicted but events were missed;
recall is 1 when there were no true events. F1 is 0 whenever precision +
recall is 0.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .events import bounds

DELTA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
HEADLINE_DELTA = 0.3
REPORT_COLUMNS = ["record", "label", "delta", "tp", "fp", "fn", "precision", "recall", "f1"]


def match_predictions(preds, trues, delta):
    """Greedy one-to-one pairing by descending IoU.

    Returns ``(tp, fp, fn, pairs)`` with ``pairs`` a list of
    ``(pred_index, true_index)``.
    """
    if not preds or not trues:
        return 0, len(preds), len(trues), []
    iou = kernels.iou_matrix(*bounds(preds), *bounds(trues))
    pi, tj = kernels.greedy_pairs(iou, float(delta))
    tp = len(pi)
    return tp, len(preds) - tp, len(trues) - tp, list(zip(pi.tolist(), tj.tolist()))


def prf(tp, fp, fn):
    if tp + fp == 0:
        precision = 1.0 if fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    s = precision + recall
    f1 = 0.0 if s == 0 else 2 * precision * recall / s
    return precision, recall, f1


def f1_curve(preds, trues, delta_grid=DELTA_GRID):
    """List of ``{"delta", "precision", "recall", "f1"}`` rows, one per delta."""
    iou = None
    if preds and trues:
        iou = kernels.iou_matrix(*bounds(preds), *bounds(trues))
    rows = []
    for d in delta_grid:
        if iou is None:
            tp = 0
        else:
            tp = len(kernels.greedy_pairs(iou, float(d))[0])
        p, r, f = prf(tp, len(preds) - tp, len(trues) - tp)
        rows.append({"delta": d, "precision": p, "recall": r, "f1": f})
    return rows


def is_non_increasing(values, tol=1e-12):
    return all(b <= a + tol for a, b in zip(values, values[1:]))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts with REPORT_COLUMNS
    labels: tuple = ()
    deltas: tuple = ()
    records: tuple = ()

    def mean(self, label, delta, metric="f1"):
        vals = [r[metric] for r in self.rows if r["label"] == label and r["delta"] == delta]
        return float(np.mean(vals))

    def pooled(self, delta, metric="f1"):
        """Per-record metric with counts summed over labels, averaged over records."""
        vals = []
        for rec in self.records:
            rs = [r for r in self.rows if r["record"] == rec and r["delta"] == delta]
            p, r_, f = prf(sum(r["tp"] for r in rs), sum(r["fp"] for r in rs), sum(r["fn"] for r in rs))
            vals.append({"precision": p, "recall": r_, "f1": f}[metric])
        return float(np.mean(vals))

    def curve(self, label, record=None, metric="f1"):
        """(delta, metric) pairs for one record, or averaged over records."""
        if record is None:
            return [(d, self.mean(label, d, metric)) for d in self.deltas]
        return [(r["delta"], r[metric]) for r in self.rows if r["label"] == label and r["record"] == record]

    def summary(self):
        head = HEADLINE_DELTA if HEADLINE_DELTA in self.deltas else self.deltas[0]
        out = {"records": list(self.records), "deltas": list(self.deltas), "headline_delta": head, "labels": {}}
        for lab in self.labels:
            out["labels"][str(lab)] = {
                "precision": self.mean(lab, head, "precision"),
                "recall": self.mean(lab, head, "recall"),
                "f1": self.mean(lab, head, "f1"),
                "f1_curve": [{"delta": d, "f1": self.mean(lab, d)} for d in self.deltas],
            }
        out["pooled"] = {m: self.pooled(head, m) for m in ("precision", "recall", "f1")}
        return out

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=1)
            fh.write("\n")


def report_from_events(pred_by_record, true_by_record, delta_grid=DELTA_GRID, labels=None):
    """Build an :class:`EvalReport` from per-record event lists (dicts keyed by id)."""
    if not true_by_record:
        raise ValueError("cannot evaluate an empty test set")
    missing = set(true_by_record) ^ set(pred_by_record)
    if missing:
        raise ValueError(f"record ids differ between predictions and truth: {sorted(missing)}")
    if labels is None:
        labels = sorted({e.label for evs in list(true_by_record.values()) + list(pred_by_record.values()) for e in evs})
    rows = []
    for rec in true_by_record:
        for lab in labels:
            p = [e for e in pred_by_record[rec] if e.label == lab]
            t = [e for e in true_by_record[rec] if e.label == lab]
            for d in delta_grid:
                tp, fp, fn, _ = match_predictions(p, t, d)
                pr, rc, f1 = prf(tp, fp, fn)
                rows.append({"record": rec, "label": lab, "delta": d, "tp": tp, "fp": fp, "fn": fn,
                             "precision": pr, "recall": rc, "f1": f1})
    return EvalReport(rows, tuple(labels), tuple(delta_grid), tuple(true_by_record))


def evaluate(detector, records, delta_grid=DELTA_GRID, labels=None):
    """Run ``detector.detect(record)`` on every record and score it."""
    if not records:
        raise ValueError("cannot evaluate an empty test set")
    preds = {r.id: detector.detect(r) for r in records}
    trues = {r.id: list(r.annotations) for r in records}
    return report_from_events(preds, trues, delta_grid, labels)
