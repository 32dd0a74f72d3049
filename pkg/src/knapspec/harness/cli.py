"""``knapspec`` command line.

Settings come from (lowest to highest precedence) a named preset, a
``--config`` file and per-field flags such as ``--num-blocks 8``.  Failures
print one line ``error: <ErrorClass>: <message>`` to stderr and exit 2.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import fields
from pathlib import Path

from ..engine import SpeculativeDecoder
from ..errors import ConfigError, ConsistencyError, HypothesisError, KnapSpecError
from ..latency import normalize_weights, save_profile
from ..optimizer import ReferenceStates, dp_forward, select_config
from ..theory import lemma_trials
from . import experiments, reports
from .config import PRESETS, ExperimentConfig, read_config_file
from .profiling import profile_model

GENERATE_METHODS = ("knapspec", "del", "autoregressive")
SUMMARY_COLUMNS = ("method", "tokens", "steps", "tpt_tok_per_ms", "speedup", "acceptance_rate",
                   "elapsed_ms", "optimizer_ms")
LEMMA_COLUMNS = ("V", "d", "trials", "condition_holds", "argmax_equal", "violations", "min_cos_margin")


def _clean(obj):
    """Replace non-finite floats by None so JSON output stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, sort_keys=True, indent=1)
        fh.write("\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: UsageError: {message}\n")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _common_parser() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--config", help="experiment config file ([experiment] section)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named experiment preset")
    g = p.add_argument_group("experiment fields")
    for f in fields(ExperimentConfig):
        g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar="V", default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = _Parser(prog="knapspec", description="Layer-skipping self-speculative decoding on toy models.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="decode with KnapSpec, the early-exit baseline and plain greedy")
    g.add_argument("--trace-out", help="also save the final KnapSpec history as a reference trace")

    p = sub.add_parser("profile", parents=[common], help="micro-benchmark sub-layers and fit a latency profile")
    p.add_argument("--lengths", default="128 512 2048", help="context lengths in tokens")
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out", help="profile file (default: <output_dir>/profile.ini)")

    o = sub.add_parser("optimize", parents=[common], help="select a draft configuration from a saved trace")
    o.add_argument("--trace", required=True, help="reference trace file")
    o.add_argument("--context", type=int, default=None, help="context length in tokens for the latency model")
    o.add_argument("--out", help="write the selected configuration as JSON")

    s = sub.add_parser("sweep", parents=[common], help="run one of the ablation sweeps")
    s.add_argument("--kind", choices=(*experiments.SWEEPS, "all"), default="all")

    r = sub.add_parser("reports", help="build CSV tables from step logs and sweep outputs")
    r.add_argument("--logs", nargs="*", default=[], help="step log files (.jsonl)")
    r.add_argument("--sweep-dir", help="directory holding sweep_*.csv files")
    r.add_argument("--out", default=".", help="output directory")

    lc = sub.add_parser("lemma-check", parents=[common], help="randomised check of the cosine margin lemma")
    lc.add_argument("--shapes", default="5x4 64x32 256x64", help="VxD head shapes")
    lc.add_argument("--trials", type=int, default=10_000)
    return parser


def load_config(args) -> ExperimentConfig:
    values: dict[str, object] = {}
    if args.preset:
        values.update(PRESETS[args.preset])
    if args.config:
        values.update(read_config_file(args.config))
    for f in fields(ExperimentConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    return ExperimentConfig.from_mapping(values)


# -- commands -------------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, trace_out=None, out=None) -> dict[str, dict]:
    out = out or sys.stdout
    model = cfg.build_model()
    profile = cfg.build_profile()
    prompt = cfg.prompt_tokens()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for method in GENERATE_METHODS:
        dec = SpeculativeDecoder(model, cfg.engine(method), profile)
        tokens, stats = dec.generate(prompt, cfg.max_new_tokens)
        new = tokens[len(prompt):]
        _dump_json(out_dir / f"{method}.tokens.json", {"prompt": prompt, "generated": new})
        _dump_json(out_dir / f"{method}.stats.json", stats.as_dict())
        dec.write_step_log(out_dir / f"{method}.steps.jsonl")
        results[method] = dict(tokens=new, stats=stats)
        if method == "knapspec" and trace_out and dec.history is not None and len(dec.history):
            dec.history.references(dec.cache).save(trace_out)
    ref = results["autoregressive"]["tokens"]
    for method, res in results.items():
        if res["tokens"] != ref:
            raise ConsistencyError(f"{method} output diverged from greedy decoding")
    rows = []
    for method, res in results.items():
        st = res["stats"]
        rows.append(dict(method=method, tokens=st.tokens_generated, steps=st.speculation_steps,
                         tpt_tok_per_ms=st.tpt, speedup=st.speedup, acceptance_rate=st.acceptance_rate,
                         elapsed_ms=st.elapsed_ms, optimizer_ms=st.optimizer_ms))
    reports.write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, rows)
    print(f"{'method':<15}{'tokens':>8}{'TPT tok/ms':>12}{'speedup':>9}{'accept':>8}", file=out)
    for row in rows:
        print(f"{row['method']:<15}{row['tokens']:>8}{_cell(row['tpt_tok_per_ms'], 4):>12}"
              f"{_cell(row['speedup'], 3):>9}{_cell(row['acceptance_rate'], 3):>8}", file=out)
    return results


def _cell(x: float, digits: int) -> str:
    return f"{x:.{digits}f}" if math.isfinite(x) else "-"


def cmd_profile(cfg: ExperimentConfig, lengths, out_path=None, timer=None, reps=30, warmup=5, out=None):
    out = out or sys.stdout
    model = cfg.build_model()
    prof = profile_model(model, lengths, timer, reps=reps, warmup=warmup, seed=cfg.seed)
    path = Path(out_path) if out_path else Path(cfg.output_dir) / "profile.ini"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_profile(path, prof)
    print(f"attn_slope_ms_per_token={prof.attn_slope!r} attn_intercept_ms={prof.attn_intercept!r} "
          f"mlp_const_ms={prof.mlp_const!r} -> {path}", file=out)
    for w in prof.warnings:
        print(f"warning: {w}", file=out)
    return prof


def cmd_optimize(cfg: ExperimentConfig, trace_path, context=None, out_path=None, out=None) -> dict:
    out = out or sys.stdout
    if not Path(trace_path).exists():
        raise ConfigError(f"trace file not found: {trace_path}")
    model = cfg.build_model()
    profile = cfg.build_profile()
    refs = ReferenceStates.load(trace_path)
    refs.check(model)
    n = context if context is not None else int(refs.context.positions.max()) + 1 + cfg.context_offset_tokens
    weights = normalize_weights(profile, n)
    table = dp_forward(model, refs, weights, cfg.tau, cfg.prune)
    dc = select_config(model, table, refs, profile, n, cfg.max_draft_tokens)
    result = dict(mask=dc.S.mask, members=list(dc.S.members), gamma=dc.gamma, alpha_hat=dc.alpha_hat,
                  tpt_est=dc.tpt_score, context_tokens=n, t_draft_ms=dc.t_draft, t_target_ms=dc.t_target,
                  budget=dc.budget, w_attn=weights.w_attn, w_mlp=weights.w_mlp,
                  peak_dp_cells=table.stats.peak_live_cells)
    text = json.dumps(_clean(result), sort_keys=True)
    if out_path:
        Path(out_path).write_text(text + "\n")
    print(text, file=out)
    return result


def cmd_sweep(cfg: ExperimentConfig, kind: str = "all", out=None) -> dict[str, Path]:
    out = out or sys.stdout
    kinds = list(experiments.SWEEPS) if kind == "all" else [kind]
    written = {}
    for k in kinds:
        points = experiments.SWEEPS[k](cfg)
        written[k] = reports.write_sweep(cfg.output_dir, k, points)
        print(f"{k}: {len(points)} points -> {written[k]}", file=out)
    return written


def cmd_reports(logs, sweep_dir, out_dir, out=None) -> dict[str, Path]:
    out = out or sys.stdout
    written = reports.build_reports(logs, sweep_dir, out_dir)
    for name, path in written.items():
        print(f"{name}: {path}", file=out)
    return written


def cmd_lemma_check(cfg: ExperimentConfig, shapes: str, trials: int, out=None) -> list[dict]:
    out = out or sys.stdout
    rows = []
    for k, shape in enumerate(shapes.replace(",", " ").split()):
        try:
            V, d = (int(v) for v in shape.lower().split("x"))
        except ValueError:
            raise ConfigError(f"bad shape {shape!r}; expected VxD") from None
        verdicts = lemma_trials(V, d, trials, cfg.seed + k)
        rows.append(dict(V=V, d=d, trials=trials,
                         condition_holds=sum(v.condition_holds for v in verdicts),
                         argmax_equal=sum(v.argmax_equal for v in verdicts),
                         violations=sum(not v.consistent for v in verdicts),
                         min_cos_margin=min(v.cosine - v.cos_threshold for v in verdicts)))
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports.write_csv(out_dir / "lemma.csv", LEMMA_COLUMNS, rows)
    for r in rows:
        print(f"V={r['V']} d={r['d']}: {r['argmax_equal']}/{r['trials']} agree, {r['violations']} violations", file=out)
    bad = sum(r["violations"] for r in rows)
    if bad:
        raise HypothesisError(f"{bad} trials met the cosine condition but changed the argmax")
    return rows


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "reports":
            cmd_reports(args.logs, args.sweep_dir, args.out)
            return 0
        cfg = load_config(args)
        if args.command == "generate":
            cmd_generate(cfg, args.trace_out)
        elif args.command == "profile":
            lengths = [int(v) for v in args.lengths.replace(",", " ").split()]
            cmd_profile(cfg, lengths, args.out, reps=args.reps, warmup=args.warmup)
        elif args.command == "optimize":
            cmd_optimize(cfg, args.trace, args.context, args.out)
        elif args.command == "sweep":
            if args.preset or args.config:
                cmd_sweep(cfg, args.kind)
            else:
                # Without a base config each sweep starts from its own preset;
                # field flags still override it.
                kinds = list(experiments.SWEEPS) if args.kind == "all" else [args.kind]
                for k in kinds:
                    cmd_sweep(load_config(argparse.Namespace(**{**vars(args), "preset": k})), k)
        elif args.command == "lemma-check":
            cmd_lemma_check(cfg, args.shapes, args.trials)
    except KnapSpecError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
