"""Time the numba kernels against their pure-numpy fallbacks.

Each kernel runs on a training-sized batch (4 stacks of 64x64). Both
paths are warmed up first, so compile time is excluded. An end-to-end
line times one training epoch per backend in a subprocess, because the
backend is fixed at import time by NOISYSEG_BACKEND.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from noisyseg import _accel
from noisyseg.losses import LossConfig, apl
from noisyseg.segmodel import kernels

EPOCH_SNIPPET = """
import time, numpy as np
from noisyseg.losses import LossConfig
from noisyseg.segmodel.training import TrainConfig, train
rng = np.random.default_rng(0)
x = rng.uniform(size=(48, 3, 64, 64)).astype(np.float32)
y = (rng.uniform(size=(48, 64, 64)) < 0.1).astype(np.float64)
cfg = TrainConfig(loss=LossConfig(1, 1, 1), epochs=1)
train(x[:4], y[:4], cfg)
t = time.perf_counter()
train(x, y, cfg)
print(time.perf_counter() - t)
"""


def best_of(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def apl_with(backend, cfg, p, t):
    saved = _accel.BACKEND
    _accel.BACKEND = backend
    try:
        return apl(cfg, p, t)
    finally:
        _accel.BACKEND = saved


def epoch_seconds(backend):
    env = {**os.environ, "NOISYSEG_BACKEND": backend}
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-epoch", action="store_true", help="skip the end-to-end epoch timing")
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    xp = kernels.pad1(rng.normal(size=(4, 8, 64, 64)).astype(np.float32))
    w = rng.normal(size=(8, 8, 3, 3)).astype(np.float32)
    b = np.zeros(8, np.float32)
    g = rng.normal(size=(4, 8, 64, 64)).astype(np.float32)
    mask = rng.uniform(size=(64, 64)) < 0.3
    p = rng.uniform(0.01, 0.99, size=(4, 64, 64))
    t = rng.uniform(size=(4, 64, 64))
    cfg = LossConfig(1, 1, 1)

    cases = [
        ("conv3x3 forward", lambda: kernels.conv_forward_numba(xp, w, b), lambda: kernels.conv_forward_numpy(xp, w, b)),
        ("conv3x3 weight grad", lambda: kernels.conv_grad_weight_numba(xp, g),
         lambda: kernels.conv_grad_weight_numpy(xp, g)),
        ("label8 64x64", lambda: kernels.label8_numba(mask), lambda: kernels.label8_numpy(mask)),
        ("apl (1,1,1) value+grad", lambda: apl_with("numba", cfg, p, t), lambda: apl_with("numpy", cfg, p, t)),
    ]
    print(f"{'kernel':<24s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fast, slow in cases:
        a, b_ = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<24s} {1e3 * a:10.3f} {1e3 * b_:10.3f} {b_ / a:7.1f}x")
    if not args.skip_epoch:
        a, b_ = epoch_seconds("numba"), epoch_seconds("numpy")
        print(f"{'train epoch (48 x 64^2)':<24s} {1e3 * a:10.1f} {1e3 * b_:10.1f} {b_ / a:7.1f}x")


if __name__ == "__main__":
    main()
