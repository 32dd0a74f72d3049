import json
from pathlib import Path

import pytest

from knapspec.errors import ReportError
from knapspec.harness import reports
from knapspec.harness.experiments import ConfigPoint, RunPoint, SkipPoint

GOLDEN = Path(__file__).parent / "golden"


def header(path) -> str:
    return Path(path).read_text().splitlines()[0]


def golden(name) -> str:
    return (GOLDEN / f"{name}.header").read_text().strip()


def rec(n, mask, L=2):
    return {"n": n, "L": L, "mask": mask}


def run(value, thr, cells, opt=1.0, el=10.0):
    return RunPoint("x", value, thr, 1.0, 0.5, opt, el, 2, cells, cells + 5)


@pytest.fixture
def sweep_dir(tmp_path):
    d = tmp_path / "sweeps"
    pts = [ConfigPoint(m, 3, 2, a, t, thr, 0.5) for m, a, t, thr in
           ((1, 0.2, 0.10, 0.11), (3, 0.5, 0.20, 0.19), (7, 0.4, 0.30, 0.33))]
    reports.write_sweep(d, "correlation", pts)
    reports.write_sweep(d, "threshold", [run(0.5, 0.099, 20), run(-1.0, 0.1, 40)])
    reports.write_sweep(d, "interval", [run(T, 0.1, 3, opt=T / 8) for T in (4, 16)])
    return d


class TestSkipRatio:
    def test_no_skips_gives_zeros(self):
        rows = reports.skip_ratio_table([rec(5, 0b1111), rec(9, 0b1111)])
        for r in rows:
            assert r["skipped_attn"] == r["skipped_mlp"] == 0
            assert r["skipped_attn_frac"] == r["skipped_mlp_frac"] == 0.0
            assert r["attn_share"] is None

    def test_hand_counted_buckets(self):
        records = [
            rec(5, 0b0101),   # both MLPs skipped
            rec(7, 0b1110),   # first attention skipped
            rec(9, 0b0000),   # everything skipped
            rec(12, 0b1111),
            {"n": 13, "L": 2, "mask": None},  # autoregressive step, ignored
        ]
        rows = reports.skip_ratio_table(records)
        assert [(r["n_lo"], r["n_hi"]) for r in rows] == [(4, 8), (8, 16)]
        a, b = rows
        assert (a["steps"], a["skipped_attn"], a["skipped_mlp"]) == (2, 1, 2)
        assert a["skipped_attn_frac"] == 1 / 4 and a["skipped_mlp_frac"] == 2 / 4
        assert a["attn_share"] == 1 / 3
        assert (b["steps"], b["skipped_attn"], b["skipped_mlp"]) == (2, 2, 2)
        assert b["attn_share"] == 0.5

    def test_empty_log(self):
        with pytest.raises(ReportError):
            reports.skip_ratio_table([])
        with pytest.raises(ReportError):
            reports.skip_ratio_table([{"n": 3, "L": 2, "mask": None}])


class TestCorrelationTable:
    def test_zero_variance_marker(self):
        pts = [{"tpt_est": "0.1", "alpha_hat": "0.5", "throughput": "0.2"}] * 2
        rows = reports.correlation_table(pts)
        assert [r["status"] for r in rows] == ["zero-variance", "zero-variance"]
        assert all(r["pearson_r"] is None for r in rows)

    def test_too_few_points(self):
        pts = [{"tpt_est": str(v), "alpha_hat": str(v), "throughput": str(2 * v)} for v in (0.1, 0.2)]
        assert reports.correlation_table(pts)[0]["status"] == "too-few-points"


class TestFiles:
    def test_golden_headers(self, tmp_path, sweep_dir):
        log = tmp_path / "steps.jsonl"
        log.write_text("".join(json.dumps(rec(n, 0b0110)) + "\n" for n in (3, 4, 9)))
        out = reports.build_reports([log], sweep_dir, tmp_path / "out")
        assert set(out) == {"skip_ratio", "correlation", "threshold", "interval"}
        for name, path in out.items():
            assert header(path) == golden(name)
        assert header(sweep_dir / "sweep_correlation.csv") == golden("sweep_correlation")
        assert header(sweep_dir / "sweep_threshold.csv") == golden("sweep_runs")

    def test_threshold_and_interval_values(self, tmp_path, sweep_dir):
        out = reports.build_reports((), sweep_dir, tmp_path)
        thr = reports.read_csv(out["threshold"])
        assert thr[0]["rel_throughput"] == repr(0.099 / 0.1)
        assert thr[0]["peak_cells_reduction"] == "0.5"
        assert thr[1]["rel_throughput"] == "1.0"
        iv = reports.read_csv(out["interval"])
        assert [r["optimizer_overhead_pct"] for r in iv] == ["5.0", "20.0"]
        corr = reports.read_csv(out["correlation"])
        assert [r["status"] for r in corr] == ["ok", "ok"]

    def test_byte_identical(self, tmp_path, sweep_dir):
        a = reports.build_reports((), sweep_dir, tmp_path / "a")
        b = reports.build_reports((), sweep_dir, tmp_path / "b")
        for k in a:
            assert a[k].read_bytes() == b[k].read_bytes()

    def test_context_sweep_feeds_skip_table(self, tmp_path):
        pts = [SkipPoint(1024, 2, 1, 0b0110, 1, 1, 3, 0.1), SkipPoint(4096, 5, 1, 0b1010, 2, 0, 3, 0.1)]
        path = reports.write_sweep(tmp_path, "context", pts)
        rows = reports.skip_ratio_table(reports.read_step_log(path))
        assert [r["attn_share"] for r in rows] == [0.5, 1.0]

    def test_nothing_to_report(self, tmp_path):
        with pytest.raises(ReportError):
            reports.build_reports((), tmp_path, tmp_path)
        with pytest.raises(ReportError):
            reports.build_reports([tmp_path / "missing.jsonl"], None, tmp_path)

    def test_fmt(self):
        assert [reports.fmt(v) for v in (None, float("nan"), 0.1, 3, True)] == ["NA", "NA", "0.1", "3", "1"]
