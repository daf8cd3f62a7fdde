"""Compare the numba row kernels with their numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py [--repeats N]

Shapes match the acceptance model: attention scores are (batch*heads*seq, seq),
LayerNorm rows are (batch*seq, model_dim), logits are (batch, classes). The last
section times one full training step under each backend in a subprocess, since
the backend is fixed at import time by ``GSLORA_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gslora import _kernels as k

STEP = """
import time, numpy as np
from gslora import autodiff as ad
from gslora.model import ModelConfig, init_model, forward
m = init_model(ModelConfig(dropout=0.0), 0)
m.set_trainable(True)
x = np.random.default_rng(0).standard_normal((32, 4, 16)); y = np.arange(32) % 10
def step():
    ad.backward(ad.softmax_cross_entropy(forward(m, x), y))
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print((time.perf_counter() - t) / {n})
"""


def bench(fn, args, repeats):
    fn(*args)  # compile / warm up
    return min(timeit.repeat(lambda: fn(*args), number=repeats, repeat=5)) / repeats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--steps", type=int, default=10)
    args = ap.parse_args()
    if k.numba is None:
        sys.exit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    scores = rng.standard_normal((32 * 4 * 4, 4))
    rows = rng.standard_normal((32 * 4, 256))
    gain, bias = rng.standard_normal(256), rng.standard_normal(256)
    logits = rng.standard_normal((32, 10))
    labels = np.arange(32) % 10
    y = k.softmax_rows_np(scores)
    _, xhat, rstd = k.layer_norm_rows_np(rows, gain, bias, 1e-5)
    _, probs = k.cross_entropy_np(logits, labels)

    cases = [
        ("softmax_rows", "softmax_rows", (scores,)),
        ("softmax_rows_backward", "softmax_rows_backward", (y, scores)),
        ("layer_norm_rows", "layer_norm_rows", (rows, gain, bias, 1e-5)),
        ("layer_norm_rows_backward", "layer_norm_rows_backward", (rows, xhat, rstd, gain)),
        ("cross_entropy", "cross_entropy", (logits, labels)),
        ("cross_entropy_backward", "cross_entropy_backward", (probs, labels, 1.0)),
    ]
    print(f"{'kernel':28s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, name, a in cases:
        t_np = bench(getattr(k, name + "_np"), a, args.repeats)
        t_nb = bench(getattr(k, name + "_nb"), a, args.repeats)
        print(f"{label:28s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:7.2f}x")

    print("\nfull forward+backward step, batch 32, 1.33M-parameter model")
    for flag in ("0", "1"):
        env = {**os.environ, "GSLORA_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", STEP.format(n=args.steps)], env=env,
                             capture_output=True, text=True, check=True).stdout
        print(f"  {'numba' if flag == '1' else 'numpy':6s} {float(out) * 1e3:8.2f} ms/step")


if __name__ == "__main__":
    main()
