"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--pipeline]

Kernel timings call both implementations directly. ``--pipeline`` also times
one short end-to-end run per backend in a subprocess, selecting the fallback
with VIRTDOMAIN_PURE_PYTHON=1.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from virtdomain import _kernels_py

try:
    from virtdomain import _kernels as _compiled
except ImportError:
    _compiled = None

PIPELINE_SNIPPET = """
import time
from virtdomain.harness import ExperimentConfig
from virtdomain.harness import run_pipeline
from virtdomain.models import NetworkSpec
cfg = ExperimentConfig(network=NetworkSpec(16, 16, 4, discriminator_widths=(64, 64)), pretrain_epochs=20, adapt_epochs=5)
t = time.perf_counter()
run_pipeline(cfg)
print(time.perf_counter() - t)
"""


def cases(rng):
    x32 = rng.normal(size=(32, 16))
    w = rng.normal(size=(16, 64))
    b = rng.normal(size=64)
    out = np.maximum(x32 @ w + b, 0)
    g = rng.normal(size=(32, 64))
    logits = rng.normal(size=(2000, 4)) * 5
    probs = _kernels_py.softmax(logits)
    return {
        "dense_forward 32x16->64 relu": lambda m: m.dense_forward(x32, w, b, True),
        "dense_backward 32x16->64 relu": lambda m: m.dense_backward(x32, w, out, g, True, True),
        "log_softmax 2000x4": lambda m: m.log_softmax(logits),
        "softmax 2000x4": lambda m: m.softmax(logits),
        "row_entropy 2000x4": lambda m: m.row_entropy(probs),
        "logsumexp_rows 2000x4": lambda m: m.logsumexp_rows(logits),
    }


def bench(fn, repeat):
    number = 200
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e6


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--pipeline", action="store_true")
    args = ap.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
    print(f"{'kernel':34s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, call in cases(np.random.default_rng(0)).items():
        t_py = bench(lambda: call(_kernels_py), args.repeat)
        if _compiled is None:
            print(f"{name:34s} {t_py:10.2f} {'-':>10s} {'-':>8s}")
            continue
        t_c = bench(lambda: call(_compiled), args.repeat)
        print(f"{name:34s} {t_py:10.2f} {t_c:10.2f} {t_py / t_c:7.2f}x")
    if args.pipeline:
        for label, env in (("cython", {}), ("python", {"VIRTDOMAIN_PURE_PYTHON": "1"})):
            out = subprocess.run(
                [sys.executable, "-c", PIPELINE_SNIPPET], env={**os.environ, **env}, capture_output=True, text=True, check=True
            )
            print(f"pipeline (20 pretrain + 5 adapt epochs), {label:6s} backend: {float(out.stdout):.2f}s")


if __name__ == "__main__":
    main()
