"""``specdeck`` command line."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .bias import bias_report
from .harness import (CSV_HEADER, SEED_ENV, load_config, prune_cmd, run_experiment,
                      schema_text, sweep)
from .latency import breakdown_csv
from .preserve import KeepSet
from .synthetic import SCENARIOS, make_synthetic_grid
from .tensorio import write_grid, write_xattn
from .trace import ScheduleTrace, TraceError, render_timeline


class CliError(Exception):
    pass


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV}: expected a non-negative integer, got {raw!r}") from None
    if seed < 0:
        raise CliError(f"{SEED_ENV}: expected a non-negative integer, got {raw!r}")
    return seed


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set: expected key=value, got {item!r}")
        out[key.strip()] = value
    return out


def _config(args):
    over = _overrides(args.set)
    for key in ("method", "gamma", "seeds", "mode", "max_new"):
        value = getattr(args, key, None)
        if value is not None:
            over[key] = str(value)
    return load_config(args.config, over, env_seed())


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def cmd_simulate(args) -> None:
    cfg = _config(args)
    result = run_experiment(cfg)
    _write(args.json, result.to_json())
    if args.csv:
        _write(args.csv, result.to_csv())
    first = result.runs[0]
    if args.trace:
        Path(args.trace).write_text(first.trace.to_jsonl(), encoding="utf-8")
    if args.breakdown:
        _write(args.breakdown, breakdown_csv(first.metrics))
    if args.timeline:
        sys.stderr.write(render_timeline(first.trace, args.width))


def cmd_sweep(args) -> None:
    cfg = _config(args)
    values = [v for chunk in args.values for v in chunk.split(",") if v.strip()]
    _write(args.out, sweep(cfg, args.axis, values, args.workers).to_csv())


def cmd_prune(args) -> None:
    criteria = tuple(c.strip() for c in args.criteria.split(",") if c.strip())
    out = prune_cmd(args.grid, args.xattn, args.keep_ratio, args.crop_side, args.out_dir,
                    args.band, criteria, args.four_sided)
    print(f"kept {len(out.keep)} of {out.scores.fused.size} tokens; boundary share "
          f"{out.report.overall_share:.4f} (attention only {out.attention_only.overall_share:.4f})")
    for name, path in sorted(out.files.items()):
        print(f"  {name}: {path}")


def cmd_bias_report(args) -> None:
    try:
        keep = KeepSet.from_json(Path(args.keep).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"{args.keep}: cannot read ({exc.strerror or exc})") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"{args.keep}: {exc}") from exc
    report = bias_report(keep, args.band, args.four_sided)
    _write(args.json, report.to_json() + "\n")
    if args.csv:
        _write(args.csv, CSV_HEADER + "\n" + report.to_csv())


def cmd_trace_render(args) -> None:
    try:
        trace = ScheduleTrace.from_jsonl(Path(args.trace).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"{args.trace}: cannot read ({exc.strerror or exc})") from exc
    except (TraceError, TypeError, KeyError, ValueError) as exc:
        raise CliError(f"{args.trace}: {exc}") from exc
    try:
        trace.validate()
    except TraceError as exc:
        raise CliError(f"{args.trace}: {exc}") from exc
    sys.stdout.write(render_timeline(trace, args.width))
    print(f"method={trace.method} gamma={trace.gamma} rounds={len(trace.rounds)} "
          f"tokens={trace.tokens_emitted} end={trace.end_time():g} "
          f"target_idle={trace.target_idle_after_prefill():g}")


def cmd_gen_grid(args) -> None:
    seed = args.seed if args.seed is not None else (env_seed() or 0)
    grid, xattn = make_synthetic_grid(args.frames, args.rows, args.cols, args.dim, args.scenario, seed)
    write_grid(args.grid, grid)
    write_xattn(args.xattn, xattn)


def cmd_schema(args) -> None:
    sys.stdout.write(schema_text())


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--method", choices=("ar", "serial_sd", "vpsd"))
    p.add_argument("--gamma", type=int)
    p.add_argument("--seeds", help=f"comma-separated seeds (default: ${SEED_ENV} or 0)")
    p.add_argument("--mode", choices=("greedy", "stochastic"))
    p.add_argument("--max-new", dest="max_new", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="specdeck", description="Speculative decoding simulator for video LLMs.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one experiment over its seeds")
    _experiment_args(p)
    p.add_argument("--json", help="summary JSON path (default stdout)")
    p.add_argument("--csv", help="per-seed CSV path")
    p.add_argument("--trace", help="write the first seed's schedule trace (JSONL)")
    p.add_argument("--breakdown", help="write the first seed's latency breakdown CSV")
    p.add_argument("--timeline", action="store_true", help="print the first seed's timeline to stderr")
    p.add_argument("--width", type=int, default=100)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run one experiment per value of a numeric key")
    _experiment_args(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, nargs="+", help="values, space or comma separated")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("prune", help="select video tokens from VTG1/XAT1 files")
    p.add_argument("--grid", required=True)
    p.add_argument("--xattn", required=True)
    p.add_argument("--keep-ratio", type=float, default=0.1)
    p.add_argument("--crop-side", type=int, default=5)
    p.add_argument("--band", type=float, default=0.1)
    p.add_argument("--criteria", default="attn,temp,spa")
    p.add_argument("--four-sided", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("bias-report", help="edge statistics of a saved keep set")
    p.add_argument("keep", help="keep.json written by 'prune'")
    p.add_argument("--band", type=float, default=0.1)
    p.add_argument("--four-sided", action="store_true")
    p.add_argument("--json", help="report JSON path (default stdout)")
    p.add_argument("--csv", help="per-frame CSV path")
    p.set_defaults(func=cmd_bias_report)

    p = sub.add_parser("trace-render", help="draw a saved schedule trace")
    p.add_argument("trace")
    p.add_argument("--width", type=int, default=100)
    p.set_defaults(func=cmd_trace_render)

    p = sub.add_parser("gen-grid", help="write a synthetic grid and attention inputs")
    p.add_argument("--scenario", choices=SCENARIOS, default="boundary_bias")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--rows", type=int, default=10)
    p.add_argument("--cols", type=int, default=10)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--grid", required=True)
    p.add_argument("--xattn", required=True)
    p.set_defaults(func=cmd_gen_grid)

    p = sub.add_parser("schema", help="print every config key with its default")
    p.set_defaults(func=cmd_schema)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, ValueError) as exc:  # config, format and trace errors are ValueErrors
        print(f"specdeck: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
