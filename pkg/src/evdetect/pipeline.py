"""Glue between training, detectors and evaluation; used by the CLI."""

import json
import logging
import math
import os
import time
from dataclasses import asdict, replace

import numpy as np

from . import baseline as bl
from .detector import ArchConfig, DetectorModel, predict_record
from .events import Event
from .metrics import DELTA_GRID, HEADLINE_DELTA, evaluate, report_from_events
from .training import TrainConfig, WindowSampler, normalize_record, select_thresholds, train

log = logging.getLogger(__name__)


class NeuralDetector:
    """``detect(record)`` wrapper around a trained model.

    ``label_map[i]`` is the record label reported for model label ``i + 1``;
    models trained on a label subset report in the original numbering.
    """

    def __init__(self, model, label_map=None, nms_threshold=0.5):
        self.model = model
        self.label_map = list(label_map or range(1, model.arch.n_labels + 1))
        self.nms_threshold = nms_threshold

    def detect(self, record):
        if record.n_channels != self.model.arch.channels:
            raise ValueError(
                f"model expects {self.model.arch.channels} channel(s), record {record.id} has {record.n_channels}"
            )
        if record.sample_rate != self.model.arch.sample_rate:
            raise ValueError(
                f"model trained at {self.model.arch.sample_rate} Hz, record {record.id} is {record.sample_rate} Hz"
            )
        rec = normalize_record(record)
        events = predict_record(self.model, rec.signal, rec.sample_rate, self.nms_threshold)
        return [replace(e, label=self.label_map[e.label - 1]) for e in events]


def arch_for(records, labels, arch_cfg=None, window_seconds=20.0):
    r = records[0]
    kw = dict(arch_cfg or {})
    kw.update(
        channels=r.n_channels,
        window=int(round(window_seconds * r.sample_rate)),
        n_labels=len(labels),
        sample_rate=r.sample_rate,
    )
    return ArchConfig(**kw)


def epochs_for_budget(train_cfg, n_annotations, step_budget):
    """Epoch cap giving about ``step_budget`` SGD steps, within ``max_epochs``.

    Epoch size grows with the annotation count, so a fixed epoch cap hands
    models trained on rarer labels fewer updates; a step budget does not.
    """
    per_epoch = math.ceil(train_cfg.epoch_factor * n_annotations / train_cfg.batch_size)
    return max(1, min(train_cfg.max_epochs, round(step_budget / per_epoch)))


def fit_neural(train_records, val_records, labels, train_cfg, arch_cfg=None, log_sink=None, step_budget=None):
    """Train on ``labels`` (record numbering), then tune thresholds on validation.

    Records are normalised here. With ``step_budget`` the epoch cap is set
    by :func:`epochs_for_budget`. Returns ``(model, history, optimizer)``.
    """
    tr = [normalize_record(r).select_labels(labels) for r in train_records]
    va = [normalize_record(r).select_labels(labels) for r in val_records]
    arch = arch_for(tr, labels, arch_cfg, train_cfg.window_seconds)
    if step_budget:
        n_ann = WindowSampler(tr, arch.window).n_annotations
        train_cfg = replace(train_cfg, max_epochs=epochs_for_budget(train_cfg, n_ann, step_budget))
    model, history, opt = train(train_cfg, arch, tr, va, log_sink=log_sink)
    model.thresholds = select_thresholds(model, va, nms_threshold=train_cfg.nms_threshold)
    return model, history, opt


def baseline_grid(cfg):
    base = bl.EnvelopeConfig(
        band=tuple(cfg.get("band", (11.0, 16.0))),
        rms_window=cfg.get("rms_window", 0.2),
        min_duration=cfg.get("min_duration", 0.4),
        max_duration=cfg.get("max_duration", 2.0),
        label=cfg.get("label", 1),
    )
    ks = cfg.get("k_grid", [round(0.5 + 0.25 * i, 2) for i in range(15)])
    return [replace(base, k=float(k)) for k in ks]


def fit_baseline(records, cfg):
    recs = [normalize_record(r) for r in records]
    return bl.EnvelopeDetector(bl.tune_baseline(baseline_grid(cfg), recs))


class _Normalizing:
    def __init__(self, det):
        self.det = det

    def detect(self, record):
        return self.det.detect(normalize_record(record))


def run_benchmark(records, plan, config, out_dir, splits=None, on_split=None):
    """Neural detectors vs the envelope baseline over the CV splits.

    For every split the neural detector is trained jointly on all
    ``benchmark.labels`` and, if ``separate`` is on, once per label; the
    baseline is tuned on train + validation records. All detectors are
    scored on the split's test records. Checkpoints and baseline
    predictions go to ``out_dir/split<k>/``. Returns the results dict that is
    also written to ``out_dir/benchmark.json``.
    """
    bcfg = config.get("benchmark", {})
    labels = list(bcfg.get("labels", [1, 2]))
    deltas = tuple(config.get("evaluate", {}).get("delta_grid", DELTA_GRID))
    tcfg_base = TrainConfig.from_dict({**config.get("train", {}), "rng_seed": config.get("seed", 0)})
    arch_cfg = config.get("arch", {})
    bas_cfg = config.get("baseline", {})
    by_id = {r.id: r for r in records}
    os.makedirs(out_dir, exist_ok=True)

    variants = []
    if bcfg.get("joint", True) and len(labels) > 1:
        variants.append(("joint", labels))
    if bcfg.get("separate", True) or len(labels) == 1:
        variants += [(f"label{lab}", [lab]) for lab in labels]

    results = {"labels": labels, "deltas": list(deltas), "headline_delta": HEADLINE_DELTA, "splits": []}
    todo = range(plan.n_splits) if splits is None else splits
    for k in todo:
        t0 = time.time()
        sp = plan.splits[k]
        tr = [by_id[i] for i in sp["train"]]
        va = [by_id[i] for i in sp["val"]]
        te = [by_id[i] for i in sp["test"]]
        entry = {"split": k, "test": sp["test"], "detectors": {}, "artifacts": []}
        split_dir = os.path.join(out_dir, f"split{k}")
        os.makedirs(os.path.join(split_dir, "baseline"), exist_ok=True)
        for name, labs in variants:
            cfg = replace(tcfg_base, rng_seed=int(np.random.SeedSequence([tcfg_base.rng_seed, k]).generate_state(1)[0]))
            model, hist, _ = fit_neural(tr, va, labs, cfg, arch_cfg, step_budget=bcfg.get("step_budget"))
            rep = evaluate(NeuralDetector(model, labs, cfg.nms_threshold), te, deltas, labs)
            entry["detectors"][f"neural_{name}"] = _scores(rep, labs, deltas) | {
                "epochs": len(hist),
                "thresholds": model.thresholds,
            }
            ckpt = os.path.join(split_dir, f"neural_{name}.evdt")
            model.save(ckpt, extra={"labels": labs, "seed": cfg.rng_seed, "split": k})
            entry["artifacts"].append(ckpt)
            log.info("split %d %s: %s", k, name, {l: entry["detectors"][f"neural_{name}"]["f1"][str(l)] for l in labs})
        det = fit_baseline(tr + va, bas_cfg)
        preds = {r.id: _Normalizing(det).detect(r) for r in te}
        for rid, evs in preds.items():
            path = os.path.join(split_dir, "baseline", f"{rid}.events.csv")
            events_to_csv(path, evs)
            entry["artifacts"].append(path)
        rep = report_from_events(preds, {r.id: list(r.annotations) for r in te}, deltas, [det.cfg.label])
        entry["detectors"]["baseline"] = _scores(rep, [det.cfg.label], deltas) | {"k": det.cfg.k}
        entry["seconds"] = time.time() - t0
        results["splits"].append(entry)
        if on_split is not None:
            on_split(entry)
        with open(os.path.join(out_dir, "benchmark.json"), "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=1)
    results["mean"] = _aggregate(results["splits"])
    with open(os.path.join(out_dir, "benchmark.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=1)
    return results


def _scores(rep, labels, deltas):
    out = {"f1": {}, "precision": {}, "recall": {}, "f1_curve": {}, "per_record_curves": {}}
    for lab in labels:
        out["f1"][str(lab)] = rep.mean(lab, HEADLINE_DELTA)
        out["precision"][str(lab)] = rep.mean(lab, HEADLINE_DELTA, "precision")
        out["recall"][str(lab)] = rep.mean(lab, HEADLINE_DELTA, "recall")
        out["f1_curve"][str(lab)] = [rep.mean(lab, d) for d in deltas]
        out["per_record_curves"][str(lab)] = {rec: [f for _, f in rep.curve(lab, rec)] for rec in rep.records}
    return out


def _aggregate(split_entries):
    mean = {}
    names = split_entries[0]["detectors"].keys()
    for name in names:
        labs = split_entries[0]["detectors"][name]["f1"].keys()
        mean[name] = {
            metric: {lab: float(np.mean([s["detectors"][name][metric][lab] for s in split_entries])) for lab in labs}
            for metric in ("f1", "precision", "recall")
        }
    return mean


def format_table(results):
    """Plain-text side-by-side F1 table at the headline IoU."""
    rows = []
    splits = results["splits"]
    cols = []
    for name, d in splits[0]["detectors"].items():
        for lab in d["f1"]:
            cols.append((name, lab))
    head = ["split"] + [f"{n}[{l}]" for n, l in cols]
    rows.append(head)
    for s in splits:
        rows.append([str(s["split"])] + [f"{s['detectors'][n]['f1'][l]:.3f}" for n, l in cols])
    mean = results.get("mean") or _aggregate(splits)
    rows.append(["mean"] + [f"{mean[n]['f1'][l]:.3f}" for n, l in cols])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def events_to_csv(path, events):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("start_s,duration_s,label,score\n")
        for e in sorted(events, key=lambda e: (e.start, e.label)):
            score = "" if e.score is None else repr(float(e.score))
            fh.write(f"{float(e.start)!r},{float(e.duration)!r},{int(e.label)},{score}\n")


def events_from_csv(path):
    import csv

    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            s, d = float(row["start_s"]), float(row["duration_s"])
            score = row.get("score") or None
            out.append(Event(s + d / 2, d, int(row["label"]), None if score is None else float(score)))
    return out


def train_config_dict(cfg):
    return asdict(cfg)
