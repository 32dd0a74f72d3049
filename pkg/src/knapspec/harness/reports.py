"""Plot-ready CSV tables built from step logs and sweep outputs.

Tables and their columns:

skip_ratio.csv
    n_lo, n_hi          context-length bucket [n_lo, n_hi), powers of two
    steps               step records in the bucket
    skipped_attn        attention sub-layers skipped, summed over steps
    skipped_mlp         MLP sub-layers skipped, summed over steps
    skipped_attn_frac   skipped_attn / (steps * L)
    skipped_mlp_frac    skipped_mlp / (steps * L)
    attn_share          skipped_attn / (skipped_attn + skipped_mlp), NA if nothing skipped

correlation.csv
    metric              tpt_estimate or alpha_hat
    points              configurations used
    pearson_r, r_squared   against realised throughput, NA when undefined
    status              ok, or zero-variance

threshold.csv
    tau                 pruning threshold, negative = pruning off
    throughput_tok_per_ms, rel_throughput (vs the unpruned row, NA without one)
    peak_dp_cells, peak_cells_reduction (fraction vs the unpruned row)
    populated_dp_cells, optimizer_ms

interval.csv
    interval_tokens, throughput_tok_per_ms, optimizer_ms, elapsed_ms,
    optimizer_overhead_pct, optimizations

Numbers are written with ``repr`` so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import ReportError, StatError
from ..theory import correlation_stats

NA = "NA"
SKIP_COLUMNS = ("n_lo", "n_hi", "steps", "skipped_attn", "skipped_mlp",
                "skipped_attn_frac", "skipped_mlp_frac", "attn_share")
CORRELATION_COLUMNS = ("metric", "points", "pearson_r", "r_squared", "status")
THRESHOLD_COLUMNS = ("tau", "throughput_tok_per_ms", "rel_throughput", "peak_dp_cells",
                     "peak_cells_reduction", "populated_dp_cells", "optimizer_ms")
INTERVAL_COLUMNS = ("interval_tokens", "throughput_tok_per_ms", "optimizer_ms", "elapsed_ms",
                    "optimizer_overhead_pct", "optimizations")
CONFIG_COLUMNS = ("mask", "n_exec", "gamma", "alpha_hat", "tpt_est", "throughput", "acceptance")
RUN_COLUMNS = ("label", "value", "throughput", "speedup", "acceptance", "optimizer_ms", "elapsed_ms",
               "optimizations", "peak_dp_cells", "populated_dp_cells")


def fmt(x) -> str:
    if x is None:
        return NA
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return NA if not math.isfinite(x) else repr(x)
    return str(x)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_step_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _num(s: str) -> float:
    return float("nan") if s in (NA, None) else float(s)


# -- (a) skip ratio ---------------------------------------------------------------


def _bucket(n: int) -> tuple[int, int]:
    lo = 1 << max(int(n), 1).bit_length() - 1
    return lo, 2 * lo


def skip_ratio_table(records: Sequence[dict]) -> list[dict]:
    """Per-bucket skip counts from step records holding ``n``, ``L`` and ``mask``.

    Records without a mask (plain autoregressive steps) carry no draft and
    are left out.
    """
    if not records:
        raise ReportError("step log is empty")
    acc: dict[tuple[int, int], list[int]] = {}
    for rec in records:
        if rec.get("mask") is None:
            continue
        L, mask = int(rec["L"]), int(rec["mask"])
        attn = sum(1 for b in range(L) if not mask >> (2 * b) & 1)
        mlp = sum(1 for b in range(L) if not mask >> (2 * b + 1) & 1)
        cell = acc.setdefault(_bucket(rec["n"]), [0, 0, 0, 0])
        cell[0] += 1
        cell[1] += attn
        cell[2] += mlp
        cell[3] += L
    if not acc:
        raise ReportError("step log has no drafted steps")
    rows = []
    for (lo, hi), (steps, attn, mlp, slots) in sorted(acc.items()):
        skipped = attn + mlp
        rows.append(dict(n_lo=lo, n_hi=hi, steps=steps, skipped_attn=attn, skipped_mlp=mlp,
                         skipped_attn_frac=attn / slots, skipped_mlp_frac=mlp / slots,
                         attn_share=attn / skipped if skipped else None))
    return rows


# -- (b) correlation ----------------------------------------------------------------


def correlation_table(points: Sequence[dict]) -> list[dict]:
    if not points:
        raise ReportError("no configuration points")
    thr = [_num(p["throughput"]) for p in points]
    rows = []
    for metric, key in (("tpt_estimate", "tpt_est"), ("alpha_hat", "alpha_hat")):
        xs = [_num(p[key]) for p in points]
        row = dict(metric=metric, points=len(points), pearson_r=None, r_squared=None, status="ok")
        if len(set(xs)) < 2 or len(set(thr)) < 2:
            row["status"] = "zero-variance"
        else:
            try:
                row["pearson_r"], row["r_squared"] = correlation_stats(xs, thr)
            except StatError:
                row["status"] = "too-few-points"
        rows.append(row)
    return rows


# -- (c) threshold, (d) interval --------------------------------------------------------


def threshold_table(runs: Sequence[dict]) -> list[dict]:
    if not runs:
        raise ReportError("no threshold sweep points")
    base = next((r for r in runs if _num(r["value"]) < 0), None)
    rows = []
    for r in runs:
        thr, cells = _num(r["throughput"]), int(r["peak_dp_cells"])
        rel = red = None
        if base is not None:
            rel = thr / _num(base["throughput"])
            bc = int(base["peak_dp_cells"])
            red = 1.0 - cells / bc if bc else None
        rows.append(dict(tau=_num(r["value"]), throughput_tok_per_ms=thr, rel_throughput=rel,
                         peak_dp_cells=cells, peak_cells_reduction=red,
                         populated_dp_cells=int(r["populated_dp_cells"]), optimizer_ms=_num(r["optimizer_ms"])))
    return rows


def interval_table(runs: Sequence[dict]) -> list[dict]:
    if not runs:
        raise ReportError("no interval sweep points")
    rows = []
    for r in runs:
        opt, el = _num(r["optimizer_ms"]), _num(r["elapsed_ms"])
        rows.append(dict(interval_tokens=int(_num(r["value"])), throughput_tok_per_ms=_num(r["throughput"]),
                         optimizer_ms=opt, elapsed_ms=el,
                         optimizer_overhead_pct=100.0 * opt / el if el > 0 else None,
                         optimizations=int(r["optimizations"])))
    return rows


# -- sweep output files ---------------------------------------------------------------------


def record_dict(point) -> dict:
    return {f.name: getattr(point, f.name) for f in fields(point)}


def write_sweep(out_dir, kind: str, points) -> Path:
    """Persist raw sweep points; the context sweep is written as step records."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "context":
        path = out / "sweep_context.jsonl"
        with open(path, "w") as fh:
            for p in points:
                rec = asdict(p)
                rec["L"] = (rec["skipped_attn"] + rec["skipped_mlp"] + bin(p.mask).count("1")) // 2
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path
    path = out / f"sweep_{kind}.csv"
    columns = CONFIG_COLUMNS if kind == "correlation" else RUN_COLUMNS
    write_csv(path, columns, (record_dict(p) for p in points))
    return path


def build_reports(step_logs: Sequence = (), sweep_dir=None, out_dir=".") -> dict[str, Path]:
    """Write every table the inputs support: (a) from step logs, (b)-(d) from sweep files."""
    dst = Path(out_dir)
    dst.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    if step_logs:
        records = []
        for p in step_logs:
            if not Path(p).exists():
                raise ReportError(f"step log not found: {p}")
            records.extend(read_step_log(p))
        written["skip_ratio"] = dst / "skip_ratio.csv"
        write_csv(written["skip_ratio"], SKIP_COLUMNS, skip_ratio_table(records))
    if sweep_dir is not None:
        src = Path(sweep_dir)
        makers = (("correlation", correlation_table, CORRELATION_COLUMNS),
                  ("threshold", threshold_table, THRESHOLD_COLUMNS),
                  ("interval", interval_table, INTERVAL_COLUMNS))
        for kind, make, columns in makers:
            path = src / f"sweep_{kind}.csv"
            if path.exists():
                written[kind] = dst / f"{kind}.csv"
                write_csv(written[kind], columns, make(read_csv(path)))
    if not written:
        raise ReportError("no step logs or sweep outputs to report on")
    return written
