"""Compare the numba and numpy kernel paths.

Each kernel runs on inputs shaped like the ones a default detector sees
(batch 32, 20 s windows at 256 Hz), under both paths. Outputs are checked
for agreement before timing. The last rows time a full forward and backward
pass and a whole-record prediction.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import time

import numpy as np

from evdetect import _accel, kernels
from evdetect.detector import ArchConfig, DetectorModel, predict_record


def _cases(rng):
    x = rng.standard_normal((32, 8, 1, 5122)).astype(np.float32)
    h = rng.standard_normal((32, 8, 1, 5120)).astype(np.float32)
    cols = kernels.im2col.np(x, 1, 3)
    _, arg = kernels.maxpool_time.np(h)
    pooled_grad = rng.standard_normal(arg.shape).astype(np.float32)
    s = np.sort(rng.uniform(0, 600, 400))
    e = s + rng.uniform(0.3, 2.0, 400)
    iou = kernels.iou_matrix.np(s, e, s[::2], e[::2])
    order = np.argsort(-rng.uniform(size=400), kind="stable")
    return [
        ("im2col", kernels.im2col, (x, 1, 3)),
        ("col2im", kernels.col2im, (cols, 32, 8, 1, 5122, 1, 3)),
        ("maxpool_time", kernels.maxpool_time, (h,)),
        ("maxpool_time_backward", kernels.maxpool_time_backward, (pooled_grad, arg)),
        ("channel_moments", kernels.channel_moments, (h,)),
        ("bn_backward_sums", kernels.bn_backward_sums, (h, h[::-1].copy())),
        ("iou_matrix", kernels.iou_matrix, (s, e, s[::2], e[::2])),
        ("argmax_match", kernels.argmax_match, (iou, 0.5)),
        ("nms_order", kernels.nms_order, (s, e, np.ones(400), order, 0.5)),
        ("greedy_pairs", kernels.greedy_pairs, (iou, 0.3)),
    ]


def _flatten(out):
    return out if isinstance(out, tuple) else (out,)


def _agree(a, b):
    for u, v in zip(_flatten(a), _flatten(b)):
        if not np.allclose(np.asarray(u, np.float64), np.asarray(v, np.float64), rtol=1e-4, atol=1e-4):
            return False
    return True


def _best_time(fn, args, repeat):
    fn(*args)  # warm-up, includes compilation for the numba path
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _train_step(model, x):
    fp = model.forward(x, mode="train")
    model.backward(fp, np.ones_like(fp.probs) * 1e-3, np.ones_like(fp.offsets) * 1e-3)


def _model_cases(rng):
    model = DetectorModel(ArchConfig(n_labels=2), seed=0)
    x = rng.standard_normal((32, 1, 1, 5120)).astype(np.float32)
    sig = rng.standard_normal((1, 600 * 256)).astype(np.float32)
    return [
        ("forward+backward (batch 32)", lambda: _train_step(model, x)),
        ("predict_record (600 s)", lambda: predict_record(model, sig, 256.0, thresholds=[0.5, 0.5])),
    ]


def run(repeat=5):
    rng = np.random.default_rng(0)
    rows = []
    for name, fn, args in _cases(rng):
        ok = _agree(fn.nb(*args), fn.np(*args))
        rows.append({
            "case": name,
            "numba_s": _best_time(fn.nb, args, repeat),
            "numpy_s": _best_time(fn.np, args, repeat),
            "agree": ok,
        })
    for name, fn in _model_cases(rng):
        times = {}
        for path, flag in (("numba_s", True), ("numpy_s", False)):
            _accel.set_enabled(flag)
            times[path] = _best_time(fn, (), max(1, repeat // 2))
        _accel.set_enabled(True)
        rows.append({"case": name, **times, "agree": None})
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    _accel.set_threads(args.threads)
    rows = run(args.repeat)
    print(f"{'case':30s} {'numba ms':>10s} {'numpy ms':>10s} {'speed-up':>9s}  agree")
    for r in rows:
        agree = "-" if r["agree"] is None else ("yes" if r["agree"] else "NO")
        print(f"{r['case']:30s} {1e3 * r['numba_s']:10.2f} {1e3 * r['numpy_s']:10.2f} "
              f"{r['numpy_s'] / r['numba_s']:8.2f}x  {agree}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["agree"] is not False for r in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
