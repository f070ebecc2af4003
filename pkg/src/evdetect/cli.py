"""Command-line entry point: ``evdetect {synth,train,detect,evaluate,benchmark}``.

Configuration
-------------
``--config`` takes a JSON object. Top-level scalar keys (``seed``) apply to
every command; the sections ``synth``, ``splits``, ``arch``, ``train``,
``baseline``, ``evaluate`` and ``benchmark`` hold per-stage settings.
Precedence, lowest first: built-in defaults, the config file, then
command-line flags (``--seed`` overrides ``seed``). The top-level ``seed``
is the only source of randomness; per-record and per-split seeds are
derived from it, and ``rng_seed`` keys inside sections are ignored.

Every command writes ``manifest.json`` next to its outputs with the command
line, resolved config, seed, input and output paths, SHA-256 of each output
and wall-clock time. The exit code is 0 only when all outputs were written.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time

from . import __version__, _accel
from .data import (
    IngestionError,
    SplitPlan,
    SynthConfig,
    default_cohort,
    generate_synthetic,
    load_record,
    load_records,
    make_splits,
    save_record,
)
from .detector import DetectorModel
from .metrics import DELTA_GRID, HEADLINE_DELTA, report_from_events
from .pipeline import (
    NeuralDetector,
    events_from_csv,
    events_to_csv,
    fit_neural,
    format_table,
    run_benchmark,
)
from .training import TrainConfig, TrainingDiverged

log = logging.getLogger("evdetect")

DEFAULT_CONFIG = {
    "seed": 0,
    "synth": {"n_records": 19},
    "splits": {"n_splits": 5, "fractions": [10 / 19, 2 / 19, 4 / 19]},
    "arch": {"rho": 4, "default_duration": 256},
    "train": {},
    "baseline": {},
    "evaluate": {"delta_grid": list(DELTA_GRID)},
    "benchmark": {"labels": [1, 2], "joint": True, "separate": True},
}

# the label subset a model is trained on; record numbering
DEFAULT_TRAIN_LABELS = [1]


class CLIError(RuntimeError):
    pass


def load_config(path):
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise CLIError(f"{path}: config must be a JSON object")
        for key, val in user.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    return cfg


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects what a command read and wrote; emits the manifest."""

    def __init__(self, args, config):
        self.args = args
        self.config = config
        self.inputs = []
        self.outputs = []
        self.t0 = time.time()

    def output(self, path):
        self.outputs.append(os.fspath(path))
        return path

    def finish(self, out_dir, extra=None):
        missing = [p for p in self.outputs if not os.path.exists(p)]
        if missing:
            raise CLIError(f"outputs not written: {missing}")
        manifest = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "config_path": self.args.config,
            "config": self.config,
            "seed": self.config["seed"],
            "reproducible": bool(self.args.reproducible),
            "threads": self.args.threads,
            "numba": _accel.enabled(),
            "inputs": self.inputs,
            "outputs": {p: sha256(p) for p in self.outputs},
            "wall_clock_s": time.time() - self.t0,
            "version": __version__,
            "python": platform.python_version(),
        }
        if extra:
            manifest.update(extra)
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def _train_cfg(config):
    return TrainConfig.from_dict({**config["train"], "rng_seed": config["seed"]})


def _split_plan(args, data_dir):
    path = os.path.join(data_dir, "splits.json")
    if not os.path.exists(path):
        raise CLIError(f"no split plan at {path}; run `evdetect synth` or provide one")
    return SplitPlan.load(path), path


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, config, run):
    out = args.out
    os.makedirs(out, exist_ok=True)
    scfg = dict(config["synth"])
    n_records = int(scfg.pop("n_records", 19))
    # validates keys and turns class dicts into EventClass objects
    base = SynthConfig.from_dict(scfg)
    overrides = {k: getattr(base, k) for k in scfg if k in SynthConfig.__dataclass_fields__ and k != "rng_seed"}
    ids = []
    for rid, c in default_cohort(n_records, seed=config["seed"], **overrides):
        rec = generate_synthetic(c, rid)
        for p in save_record(rec, os.path.join(out, rid)):
            run.output(p)
        ids.append(rid)
        log.info("wrote %s (%d events)", rid, len(rec.annotations))
    sp = config["splits"]
    plan = make_splits(ids, int(sp.get("n_splits", 5)), tuple(sp.get("fractions")), config["seed"])
    plan.save(run.output(os.path.join(out, "splits.json")))
    return out


def cmd_train(args, config, run):
    data_dir = args.data_dir
    plan, plan_path = _split_plan(args, data_dir)
    run.inputs.append(plan_path)
    if not 0 <= args.split < plan.n_splits:
        raise CLIError(f"split {args.split} out of range (plan has {plan.n_splits})")
    sp = plan.splits[args.split]
    train_recs = load_records(data_dir, sp["train"])
    val_recs = load_records(data_dir, sp["val"])
    run.inputs += [os.path.join(data_dir, i) for i in sp["train"] + sp["val"]]
    labels = list(config["train"].get("labels", DEFAULT_TRAIN_LABELS))
    tcfg = _train_cfg(config)
    os.makedirs(args.out, exist_ok=True)
    log_path = run.output(os.path.join(args.out, "train_log.ndjson"))
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"seed": config["seed"], "split": args.split, "labels": labels, "train": tcfg.__dict__}) + "\n")

        def sink(entry):
            fh.write(json.dumps(entry) + "\n")
            fh.flush()

        model, history, opt = fit_neural(train_recs, val_recs, labels, tcfg, config["arch"], log_sink=sink)
    ckpt = run.output(os.path.join(args.out, "model.evdt"))
    model.save(ckpt, optimizer=opt, extra={"labels": labels, "seed": config["seed"], "split": args.split})
    log.info("saved %s after %d epochs, thresholds %s", ckpt, len(history), model.thresholds)
    return args.out


def _load_detector(path, nms_threshold=0.5):
    model = DetectorModel.load(path)
    from .ndkernel import load_tensors

    _, meta = load_tensors(path)
    labels = meta.get("extra", {}).get("labels") or list(range(1, model.arch.n_labels + 1))
    return NeuralDetector(model, labels, nms_threshold)


def cmd_detect(args, config, run):
    det = _load_detector(args.model, config["train"].get("nms_threshold", 0.5))
    run.inputs += [args.model]
    os.makedirs(args.out, exist_ok=True)
    for rp in args.records:
        rec = load_record(rp, check_std=False)
        run.inputs.append(rp)
        events = det.detect(rec)
        path = run.output(os.path.join(args.out, f"{rec.id}.events.csv"))
        events_to_csv(path, events)
        log.info("%s: %d events", rec.id, len(events))
    return args.out


def cmd_evaluate(args, config, run):
    deltas = tuple(float(d) for d in config["evaluate"].get("delta_grid", DELTA_GRID))
    records = [load_record(p, check_std=False) for p in args.records]
    run.inputs += list(args.records)
    truth = {r.id: list(r.annotations) for r in records}
    if args.model:
        det = _load_detector(args.model, config["train"].get("nms_threshold", 0.5))
        run.inputs.append(args.model)
        preds = {r.id: det.detect(r) for r in records}
        labels = det.label_map
    elif args.pred_dir:
        preds = {}
        for r in records:
            p = os.path.join(args.pred_dir, f"{r.id}.events.csv")
            if not os.path.exists(p):
                raise CLIError(f"no predictions for record {r.id} at {p}")
            preds[r.id] = events_from_csv(p)
            run.inputs.append(p)
        labels = config["evaluate"].get("labels")
    else:
        raise CLIError("evaluate needs --model or --pred-dir")
    rep = report_from_events(preds, truth, deltas, labels)
    os.makedirs(args.out, exist_ok=True)
    rep.write_csv(run.output(os.path.join(args.out, "report.csv")))
    rep.write_json(run.output(os.path.join(args.out, "report.json")))
    for lab in rep.labels:
        print(f"label {lab}: F1@{HEADLINE_DELTA} = {rep.mean(lab, HEADLINE_DELTA):.3f}")
    return args.out


def cmd_benchmark(args, config, run):
    data_dir = args.data_dir
    plan, plan_path = _split_plan(args, data_dir)
    run.inputs.append(plan_path)
    records = load_records(data_dir, sorted({i for s in plan.splits for k in s for i in s[k]}))
    splits = None if args.split is None else [args.split]
    os.makedirs(args.out, exist_ok=True)

    def on_split(entry):
        path = os.path.join(args.out, f"split{entry['split']}", "result.json")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(entry, fh, indent=1)
        run.output(path)
        for a in entry["artifacts"]:
            run.output(a)

    try:
        res = run_benchmark(records, plan, config, args.out, splits=splits, on_split=on_split)
    except Exception:
        log.error("benchmark aborted; partial results are in %s", os.path.join(args.out, "benchmark.json"))
        raise
    run.output(os.path.join(args.out, "benchmark.json"))
    table = format_table(res)
    tpath = run.output(os.path.join(args.out, "table.txt"))
    with open(tpath, "w", encoding="utf-8") as fh:
        fh.write(f"F1 at IoU {HEADLINE_DELTA}\n{table}\n")
    print(table)
    return args.out


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, help="cap BLAS and numba threads")
    common.add_argument(
        "--reproducible", action="store_true", help="single-threaded; reruns give byte-identical checkpoints"
    )
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="evdetect", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="write a synthetic cohort and split plan")

    t = sub.add_parser("train", parents=[common], help="train on one split and tune thresholds")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--split", type=int, default=0)

    d = sub.add_parser("detect", parents=[common], help="write detected events per record")
    d.add_argument("--model", required=True)
    d.add_argument("records", nargs="+", help="record stems or files")

    e = sub.add_parser("evaluate", parents=[common], help="by-event metrics against annotations")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--pred-dir", help="directory of <id>.events.csv files")
    e.add_argument("records", nargs="+", help="annotated record stems or files")

    b = sub.add_parser("benchmark", parents=[common], help="neural detector vs envelope baseline over CV splits")
    b.add_argument("--data-dir", required=True)
    b.add_argument("--split", type=int, help="run one split only")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config["seed"] = args.seed
        threads = 1 if args.reproducible else args.threads
        if threads is not None:
            _accel.set_threads(threads)
        run = Run(args, config)
        out_dir = COMMANDS[args.command](args, config, run)
        run.finish(out_dir)
    except TrainingDiverged as exc:
        print(f"evdetect {args.command}: training diverged: {exc}", file=sys.stderr)
        return 3
    except (CLIError, IngestionError, ValueError, KeyError, OSError) as exc:
        print(f"evdetect {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
