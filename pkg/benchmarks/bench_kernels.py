"""Compare the compiled and numpy kernel backends.

Per-kernel timings use shapes from a c=8 model on a batch of four 64x64
crops. The end-to-end row times one forward+backward training step in a
subprocess with ``TEDNET_BACKEND`` set, so the layer code picks up each
backend exactly as a user would.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from tednet.kernels import get_backend

STEP_SNIPPET = """
import time, numpy as np
from tednet import kernels
from tednet.losses import distributed_loss
from tednet.model import TEDNet, TrellisConfig
net = TEDNet(TrellisConfig(base_channels=8), seed=0)
x = np.random.default_rng(0).uniform(size=(4, 3, 64, 64)).astype(np.float32)
y = np.random.default_rng(1).uniform(size=(4, 1, 64, 64))
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter()
    out = net.forward(x)
    _, g = distributed_loss(out, y)
    net.backward(out, g)
    best = min(best, time.perf_counter() - t)
print(kernels.BACKEND, best)
"""


def kernel_cases(rng):
    x = rng.standard_normal((4, 8, 64, 64)).astype(np.float32)
    small = rng.standard_normal((4, 16, 16, 16)).astype(np.float32)
    cols7 = rng.standard_normal((4, 8 * 49, 64 * 64)).astype(np.float32)
    g32 = rng.standard_normal((4, 8, 32, 32)).astype(np.float32)
    idx = get_backend("python").maxpool2_forward(x)[1]
    return [
        ("im2col 7x7 pad3", "im2col", (x, 7, 7, 1, 1, 3, 3, 1, 1, 64, 64)),
        ("im2col 3x3 dil4", "im2col", (small, 3, 3, 1, 1, 4, 4, 4, 4, 16, 16)),
        ("col2im 7x7 pad3", "col2im", (cols7, 8, 64, 64, 7, 7, 1, 1, 3, 3, 1, 1, 64, 64)),
        ("maxpool2 fwd", "maxpool2_forward", (x,)),
        ("maxpool2 bwd", "maxpool2_backward", (g32, idx)),
        ("avgpool4 fwd", "avgpool_forward", (x, 4)),
        ("upsample2 fwd", "upsample_forward", (small, 2)),
        ("upsample2 bwd", "upsample_backward", (x, 2)),
    ]


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, fn, args in kernel_cases(rng):
        times = {}
        for backend in ("python", "cython"):
            f = getattr(get_backend(backend), fn)
            number = 5
            times[backend] = min(timeit.repeat(lambda: f(*args), number=number,
                                               repeat=repeat)) / number
        rows.append((label, times["python"], times["cython"]))
    return rows


def bench_step(repeat):
    out = {}
    for backend in ("python", "cython"):
        env = dict(os.environ, TEDNET_BACKEND=backend, OPENBLAS_NUM_THREADS="1")
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)],
                             env=env, capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args()
    rows = bench_kernels(args.repeat)
    step = bench_step(max(2, args.repeat // 2))
    print(f"{'kernel':<20}{'numpy ms':>11}{'cython ms':>11}{'speedup':>9}")
    for label, py, cy in rows:
        print(f"{label:<20}{py * 1e3:>11.3f}{cy * 1e3:>11.3f}{py / cy:>8.1f}x")
    print(f"{'train step (c=8)':<20}{step['python'] * 1e3:>11.1f}{step['cython'] * 1e3:>11.1f}"
          f"{step['python'] / step['cython']:>8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "step": step}, fh, indent=1)


if __name__ == "__main__":
    main()
