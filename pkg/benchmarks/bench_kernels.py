"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 50] [--step]

``--step`` also times one training batch of the default model end to end,
once per backend, in subprocesses with LIMSSR_KERNELS set.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from limssr.numerics import kernels

STEP = """
import time
import numpy as np
from limssr.config import RunConfig
from limssr.data import generate
from limssr.losses import total_loss
from limssr.model import LIMSSR
from limssr.numerics.rng import make_rng

rc = RunConfig()
ds = generate(rc.synthetic())
model = LIMSSR(rc.model())
y = ds.normalized_scores()
rng = make_rng(0, "dropout")

def step(idx):
    out = model(ds, idx, train=True, rng=rng)
    loss, _ = total_loss(out["y_hat"], out["y_main"], out["y_aux"], y[idx], out["H_fusion"], rc.train().loss)
    for p in model.trainable_parameters():
        p.grad = None
    loss.backward()

step(np.arange(8))  # warm up / compile
t0 = time.perf_counter()
for b in range(20):
    step(np.arange(8 * b, 8 * b + 8))
print((time.perf_counter() - t0) / 20)
"""


def cases(rng):
    x = rng.normal(size=(8 * 60, 64))
    g = rng.normal(size=x.shape)
    gam, bet = rng.normal(size=64), rng.normal(size=64)
    s = rng.normal(size=(32, 60, 60))
    gs = rng.normal(size=s.shape)
    h = rng.normal(size=(8 * 60, 256))
    idx = rng.integers(0, 100, size=2000)
    src = rng.normal(size=(2000, 64))

    def prep(table):
        _, xhat, rstd = table["layer_norm_fwd"](x, gam, bet, 1e-5)
        _, bxhat, brstd, _, _ = table["batch_norm_fwd"](x, gam, bet, 1e-5)
        y = table["softmax_fwd"](s.reshape(-1, 60))
        ys = table["causal_softmax_fwd"](s)
        return {
            "layer_norm_fwd": lambda: table["layer_norm_fwd"](x, gam, bet, 1e-5),
            "layer_norm_bwd": lambda: table["layer_norm_bwd"](g, xhat, rstd, gam),
            "softmax_fwd": lambda: table["softmax_fwd"](s.reshape(-1, 60)),
            "softmax_bwd": lambda: table["softmax_bwd"](gs.reshape(-1, 60), y),
            "causal_softmax_fwd": lambda: table["causal_softmax_fwd"](s),
            "causal_softmax_bwd": lambda: table["causal_softmax_bwd"](gs, ys),
            "gelu_fwd": lambda: table["gelu_fwd"](h),
            "gelu_bwd": lambda: table["gelu_bwd"](h, h),
            "batch_norm_fwd": lambda: table["batch_norm_fwd"](x, gam, bet, 1e-5),
            "batch_norm_bwd": lambda: table["batch_norm_bwd"](g, bxhat, brstd, gam),
            "scatter_add_rows": lambda: table["scatter_add_rows"](np.zeros((100, 64)), idx, src),
        }

    return prep


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--step", action="store_true", help="also time a full training step per backend")
    args = ap.parse_args()

    if not kernels.HAS_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return 1
    prep = cases(np.random.default_rng(0))
    fns = {b: prep(kernels.kernel_table(b)) for b in ("numpy", "numba")}
    for f in fns["numba"].values():
        f()  # compile outside the timed region
    print(f"{'kernel':<22}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name in kernels.KERNEL_NAMES:
        t = {b: min(timeit.repeat(fns[b][name], number=1, repeat=args.repeat)) * 1e6 for b in fns}
        print(f"{name:<22}{t['numpy']:>12.1f}{t['numba']:>12.1f}{t['numpy'] / t['numba']:>9.2f}x")

    if args.step:
        for backend in ("numpy", "numba"):
            env = dict(os.environ, LIMSSR_KERNELS=backend)
            out = subprocess.run([sys.executable, "-c", STEP], env=env, capture_output=True, text=True, check=True)
            print(f"train step (batch 8, default model) with {backend}: {float(out.stdout) * 1e3:.1f} ms")
    return 0


if __name__ == "__main__":
    sys.exit(main())
