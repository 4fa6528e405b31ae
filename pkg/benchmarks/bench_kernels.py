"""Time each kernel under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat N] [--train-steps N]

Per-kernel numbers call both implementation tables directly. With
``--train-steps`` the script also times full training steps in two
subprocesses, one per ``KPTRACK_BACKEND`` value.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from kptrack import kernels


def cases(rng):
    x = rng.normal(size=(16, 32, 32, 16)).astype(np.float32)
    cols = kernels.NUMPY["im2col"](x, 1)
    feats = rng.normal(size=(8 * 64, 64)).astype(np.float32)
    idx = rng.integers(0, 8 * 64, size=(8 * 64, 4))
    wts = rng.uniform(size=(8 * 64, 4)).astype(np.float32)
    grad = rng.normal(size=(8 * 64, 64)).astype(np.float32)
    score = rng.uniform(size=(256, 256))
    order = np.argsort(-score.ravel(), kind="stable").astype(np.int64)
    poly = np.array([[10.0, 12.0], [200.0, 40.0], [150.0, 230.0], [30.0, 180.0]])
    img = rng.uniform(size=(256, 256))
    xs = rng.uniform(-5, 260, 256 * 256)
    ys = rng.uniform(-5, 260, 256 * 256)
    return {
        "im2col": (x, 1),
        "col2im": (cols, x.shape, 1),
        "gather_rows": (feats, idx, wts),
        "scatter_rows": (grad, idx, wts, len(feats)),
        "greedy_nms": (order, 256, 256, 4, 512),
        "fill_polygon": (poly, 256, 256),
        "sample_image": (img, xs, ys, 0.0),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, args in cases(rng).items():
        row = [name]
        for table in (kernels.NUMPY, kernels.NUMBA):
            fn = table.get(name)
            if fn is None:
                row.append(float("nan"))
                continue
            fn(*args)  # compile / warm up
            t = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
            row.append(t * 1e3)
        rows.append(row)
    print(f"{'kernel':<14}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, a, b in rows:
        print(f"{name:<14}{a:>12.3f}{b:>12.3f}{a / b:>10.1f}")


TRAIN_SNIPPET = """
import time
import numpy as np
from kptrack.datagen import SynthConfig, gen_synthetic_pair, PairRecord
from kptrack.trainer import StageId, TrainConfig, run_stage
recs = []
for s in range(16):
    p = gen_synthetic_pair(SynthConfig(), s)
    recs.append(PairRecord(p.img1, p.img2, p.keypoints1, p.gt_positions2, p.occluded))
cfg = TrainConfig(steps_synth1=2, out="/dev/null")
run_stage(StageId.SYNTH_NO_OCC, cfg, records=recs)  # warm up
cfg = TrainConfig(steps_synth1={steps}, out="/dev/null")
t = time.perf_counter()
run_stage(StageId.SYNTH_NO_OCC, cfg, records=recs)
print((time.perf_counter() - t) / {steps} * 1e3)
"""


def bench_training(steps):
    print(f"\ntraining step, batch 8, 64x64 ({steps} steps)")
    for backend in ("numpy", "numba"):
        env = dict(os.environ, KPTRACK_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True)
        if out.returncode:
            print(f"{backend:<8} failed: {out.stderr.strip().splitlines()[-1]}")
        else:
            print(f"{backend:<8}{float(out.stdout.strip()):>10.1f} ms/step")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--train-steps", type=int, default=0)
    args = ap.parse_args()
    if not kernels.NUMBA:
        print("numba is not installed; only the numpy column is meaningful")
    bench_kernels(args.repeat)
    if args.train_steps:
        bench_training(args.train_steps)


if __name__ == "__main__":
    main()
