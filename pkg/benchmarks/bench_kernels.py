"""Compiled vs numpy kernel timings, plus a whole DP pass on each backend.

    python3 benchmarks/bench_kernels.py [--reps N]
"""

import argparse
import timeit

import numpy as np

from knapspec import kernels
from knapspec.latency import WeightPair
from knapspec.model import ModelConfig, ToyModel
from knapspec.optimizer import ReferenceStates, dp_forward


def bench(fn, reps):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=reps)) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    A = rng.standard_normal((129, 16, 64)).astype(np.float32)
    B = rng.standard_normal((16, 64)).astype(np.float32)
    logits = rng.standard_normal((256, 512)).astype(np.float32)
    ex = rng.random(257)
    sk = rng.random(257)
    ex[rng.random(257) < 0.3] = np.nan

    model = ToyModel.random(ModelConfig(L=8, d=32, n_heads=2, d_ff=64, V=64, max_seq=64), 0)
    refs = ReferenceStates.from_forward(model, rng.integers(0, 64, 24).tolist(), 16)
    weights = WeightPair(3, 1, 1.0, 0.0)

    cases = {
        "cos_rows_batch (129x16x64)": lambda impl: kernels.cos_rows_batch(A, B, impl),
        "argmax_rows (256x512)": lambda impl: kernels.argmax_rows(logits, impl),
        "relax_row (K=256)": lambda impl: kernels.relax_row(ex, sk, 3, 0.5, 128, impl),
        "dp_forward (2L=16, K=32, r=16)": lambda impl: dp_forward(model, refs, weights, impl=impl,
                                                                  check_refs=False),
    }
    backends = kernels.available_backends()
    print(f"{'kernel':<34}" + "".join(f"{b + ' ms':>14}" for b in backends))
    for name, fn in cases.items():
        times = [bench(lambda: fn(kernels.load_backend(b)), args.reps) for b in backends]
        print(f"{name:<34}" + "".join(f"{t:>14.4f}" for t in times))


if __name__ == "__main__":
    main()
