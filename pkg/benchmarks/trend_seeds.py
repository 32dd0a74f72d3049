"""How often each qualitative trend holds across model seeds.

The acceptance suite checks every trend on the preset model (seed 1).  This
script re-runs the four presets for seeds 0..N-1 so the seed sensitivity is
visible.  Needs scipy (test extras).

    python3 benchmarks/trend_seeds.py [--seeds N]
"""

import argparse

import numpy as np
from scipy.stats import spearmanr

from knapspec.harness.config import preset
from knapspec.harness.experiments import run_context, run_correlation, run_interval, run_threshold
from knapspec.theory import correlation_stats


def correlation_ok(seed):
    pts = run_correlation(preset("correlation", model_seed=seed, seed=seed))
    thr = [p.throughput for p in pts]
    r_tpt = correlation_stats([p.tpt_est for p in pts], thr)[0]
    r_alpha = correlation_stats([p.alpha_hat for p in pts], thr)[0]
    return r_tpt > r_alpha


def context_ok(seed):
    pts = run_context(preset("context", model_seed=seed, seed=seed))
    share = [p.attn_share for p in pts]
    if not np.all(np.isfinite(share)) or len(set(share)) < 2:
        return False
    monotone = all(b >= a for a, b in zip(share, share[1:]))
    return monotone and spearmanr([p.n for p in pts], share)[0] >= 0.8


def threshold_ok(seed):
    pruned, full = run_threshold(preset("threshold", model_seed=seed, seed=seed))
    rel = abs(pruned.throughput - full.throughput) / full.throughput
    return rel <= 0.02 and pruned.peak_dp_cells < full.peak_dp_cells


def interval_ok(seed):
    thr = [p.throughput for p in run_interval(preset("interval", model_seed=seed, seed=seed))]
    return 0 < int(np.argmax(thr)) < len(thr) - 1


CHECKS = {"correlation": correlation_ok, "context": context_ok,
          "threshold": threshold_ok, "interval": interval_ok}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args(argv)
    print("seed  " + "  ".join(f"{k:>11}" for k in CHECKS))
    totals = dict.fromkeys(CHECKS, 0)
    for seed in range(args.seeds):
        marks = []
        for name, check in CHECKS.items():
            ok = check(seed)
            totals[name] += ok
            marks.append("pass" if ok else "FAIL")
        print(f"{seed:>4}  " + "  ".join(f"{m:>11}" for m in marks))
    print("rate  " + "  ".join(f"{totals[k]:>8}/{args.seeds:<2}" for k in CHECKS))


if __name__ == "__main__":
    main()
