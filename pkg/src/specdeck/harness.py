"""Experiment orchestration: config files, seeded runs, sweeps and the prune command.

Config files are flat ``key = value`` text; ``#`` starts a comment, blank
lines are ignored and unknown keys are rejected.  :data:`SCHEMA` lists every
key with its type, default and meaning.

Per seed an experiment prunes the video grid (skipped for ``ar``), derives
the effective latency profile from the number of kept tokens, builds the
model oracles, decodes with the chosen method and times the result.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .bias import BiasReport, bias_report
from .latency import LatencyProfile, RunMetrics, format_float, serial_trace, simulate
from .models import make_pair, random_oracle
from .preserve import CRITERIA, CrossAttentionInputs, KeepSet, ScoreMap, VisualTokenGrid, preserve_tokens
from .speculative import Mode, run_autoregressive, run_serial_sd
from .synthetic import SCENARIOS, GridParams, make_synthetic_grid
from .tensorio import read_grid, read_xattn, write_grid
from .trace import ScheduleTrace
from .vpsd import run_vpsd

CSV_HEADER = "# specdeck-csv v1"
SUMMARY_FORMAT = "specdeck-summary v1"
METHODS = ("ar", "serial_sd", "vpsd")
SEED_ENV = "SPECDECK_SEED"


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# key -> (kind, description); defaults live on ExperimentConfig
SCHEMA: dict[str, tuple[str, str]] = {
    "method": ("choice:" + "|".join(METHODS), "decoding method"),
    "mode": ("choice:greedy|stochastic", "token selection"),
    "gamma": ("int>=1", "draft tokens per verification"),
    "max_new": ("int>=1", "tokens to generate"),
    "prompt_len": ("int>=1", "length of the random prompt"),
    "seeds": ("int list", "comma-separated seeds; one run each"),
    "conservative": ("choice:auto|single|batch", "vpsd conservative-mode shape"),
    "vocab": ("int>=2", "oracle vocabulary size"),
    "depth": ("int>=1", "oracle context depth"),
    "alpha": ("float in [0,1]", "draft/target greedy agreement"),
    "keep_ratio": ("float in (0,1]", "fraction of video tokens kept"),
    "crop_side": ("int>=1", "side of the spatial crop"),
    "band": ("float in (0,0.5)", "edge band for the bias report"),
    "criteria": ("subset of attn,temp,spa", "scores entering the fusion"),
    "grid_file": ("path", "VTG1 token grid; empty means synthetic"),
    "xattn_file": ("path", "XAT1 attention inputs; required with grid_file"),
    "scenario": ("choice:" + "|".join(SCENARIOS), "synthetic grid scenario"),
    "frames": ("int>=1", "synthetic grid frames"),
    "rows": ("int>=1", "synthetic grid rows"),
    "cols": ("int>=1", "synthetic grid columns"),
    "dim": ("int>=1", "synthetic embedding width"),
    "patch": ("int>=1", "synthetic moving block side"),
    "boundary_scale": ("float>0", "edge key multiplier in boundary_bias"),
    "t_draft_prefill": ("float>=0", "draft prefill, fixed part"),
    "t_draft_prefill_per_token": ("float>=0", "draft prefill per kept video token"),
    "t_target_prefill": ("float>=0", "target prefill"),
    "t_draft_decode": ("float>0", "one draft forward pass"),
    "t_target_verify": ("float>0", "one target verification pass"),
    "t_prune": ("float>=0", "pruning, fixed part"),
    "t_prune_per_token": ("float>=0", "pruning per removed video token"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "vpsd"
    mode: str = "greedy"
    gamma: int = 5
    max_new: int = 256
    prompt_len: int = 4
    seeds: tuple[int, ...] = (0,)
    conservative: str = "auto"
    vocab: int = 16
    depth: int = 3
    alpha: float = 0.8
    keep_ratio: float = 0.1
    crop_side: int = 5
    band: float = 0.1
    criteria: tuple[str, ...] = CRITERIA
    grid_file: str = ""
    xattn_file: str = ""
    scenario: str = "boundary_bias"
    frames: int = 8
    rows: int = 10
    cols: int = 10
    dim: int = 16
    patch: int = 2
    boundary_scale: float = 3.0
    t_draft_prefill: float = 0.2
    t_draft_prefill_per_token: float = 0.0
    t_target_prefill: float = 0.8
    t_draft_decode: float = 0.05
    t_target_verify: float = 0.15
    t_prune: float = 0.0
    t_prune_per_token: float = 0.0

    def __post_init__(self):
        for name, (kind, _) in SCHEMA.items():
            _check(name, kind, getattr(self, name))
        if bool(self.grid_file) != bool(self.xattn_file):
            raise ConfigError("xattn_file" if self.grid_file else "grid_file",
                              "grid_file and xattn_file must be given together")

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        out["criteria"] = list(self.criteria)
        return out

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def with_overrides(self, values: Mapping[str, str]) -> ExperimentConfig:
        """Apply ``key -> text`` overrides, parsing each value by its schema kind."""
        return self.replace(**{k: parse_value(k, v) for k, v in values.items()})


NUMERIC_FIELDS = tuple(k for k, (kind, _) in SCHEMA.items() if kind.startswith(("int>", "float")))


def _check(name: str, kind: str, value) -> None:
    if kind.startswith("choice:"):
        if value not in kind[7:].split("|"):
            raise ConfigError(name, f"must be one of {kind[7:].replace('|', ', ')}, got {value!r}")
    elif kind == "int list":
        if not value:
            raise ConfigError(name, "at least one seed is required")
        if any(not isinstance(s, int) or s < 0 for s in value):
            raise ConfigError(name, f"seeds must be non-negative integers, got {list(value)}")
    elif kind.startswith("subset"):
        if not value or set(value) - set(CRITERIA) or len(set(value)) != len(value):
            raise ConfigError(name, f"must be a non-empty subset of {','.join(CRITERIA)}, got {value!r}")
    elif kind.startswith("int"):
        low = int(kind[5:])
        if isinstance(value, bool) or not isinstance(value, int) or value < low:
            raise ConfigError(name, f"must be an integer >= {low}, got {value!r}")
    elif kind.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(name, f"must be a finite number, got {value!r}")
        ok = {
            "float>=0": value >= 0,
            "float>0": value > 0,
            "float in [0,1]": 0 <= value <= 1,
            "float in (0,1]": 0 < value <= 1,
            "float in (0,0.5)": 0 < value < 0.5,
        }[kind]
        if not ok:
            raise ConfigError(name, f"must be {kind[6:]}, got {value!r}")


def parse_value(name: str, text: str):
    if name not in SCHEMA:
        raise ConfigError(name, "unknown key")
    kind = SCHEMA[name][0]
    text = str(text).strip()
    try:
        if kind == "int list":
            return tuple(int(s) for s in text.split(",") if s.strip())
        if kind.startswith("subset"):
            return tuple(s.strip() for s in text.split(",") if s.strip())
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(name, f"cannot parse {text!r} as {kind}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings from a config file; keys are validated, values are not."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(key or f"line {n}", f"{source}:{n}: expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(key, f"{source}:{n}: unknown key")
        if key in out:
            raise ConfigError(key, f"{source}:{n}: duplicate key")
        out[key] = value.strip()
    return out


def load_config(path: Path | str | None = None, overrides: Mapping[str, str] | None = None,
                default_seed: int | None = None) -> ExperimentConfig:
    """File keys, then ``overrides``; ``default_seed`` applies only when no seeds were given."""
    raw: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("config", f"{path}: cannot read ({exc.strerror or exc})") from exc
        raw.update(parse_config_text(text, str(path)))
    raw.update(overrides or {})
    if "seeds" not in raw and default_seed is not None:
        raw["seeds"] = str(default_seed)
    return ExperimentConfig().with_overrides(raw)


def schema_text() -> str:
    defaults = ExperimentConfig().to_dict()
    lines = []
    for name, (kind, desc) in SCHEMA.items():
        d = defaults[name]
        d = ",".join(map(str, d)) if isinstance(d, list) else d
        lines.append(f"{name} = {d}    # {kind}; {desc}")
    return "\n".join(lines) + "\n"


# running ------------------------------------------------------------------

@dataclass
class SeedRun:
    seed: int
    tokens: list[int]
    metrics: RunMetrics
    profile: LatencyProfile
    trace: ScheduleTrace
    keep: KeepSet | None = None
    bias: BiasReport | None = None

    @property
    def boundary_share(self) -> float | None:
        return None if self.bias is None else self.bias.overall_share

    def summary(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "tokens_sha256": hashlib.sha256(json.dumps(self.tokens).encode()).hexdigest(),
            "kept_tokens": None if self.keep is None else len(self.keep),
            "boundary_share": self.boundary_share,
            "prune_time": self.profile.t_prune,
            "draft_prefill_time": self.profile.t_draft_prefill,
            "metrics": self.metrics.to_dict(),
        }


AGGREGATED = ("total_time", "ar_baseline_time", "speedup", "decode_time", "ar_decode_time",
              "decode_speedup", "mat", "mat_per_round", "tokens_emitted", "rounds",
              "boundary_share", "prune_time")


def _flat(run: SeedRun) -> dict[str, float | None]:
    m = run.metrics.to_dict()
    m["boundary_share"] = run.boundary_share
    m["prune_time"] = run.profile.t_prune
    return {k: m[k] for k in AGGREGATED}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[SeedRun] = field(default_factory=list)

    def _column(self, key: str) -> list[float] | None:
        vals = [_flat(r)[key] for r in self.runs]
        return None if any(v is None for v in vals) else [float(v) for v in vals]

    @property
    def mean(self) -> dict[str, float | None]:
        out = {}
        for k in AGGREGATED:
            col = self._column(k)
            out[k] = None if col is None else float(np.mean(col))
        return out

    @property
    def std(self) -> dict[str, float | None] | None:
        """Population standard deviation; ``None`` for a single seed."""
        if len(self.runs) < 2:
            return None
        out = {}
        for k in AGGREGATED:
            col = self._column(k)
            out[k] = None if col is None else float(np.std(col))
        return out

    def to_json(self) -> str:
        doc = {
            "format": SUMMARY_FORMAT,
            "config": self.config.to_dict(),
            "runs": [r.summary() for r in self.runs],
            "mean": self.mean,
        }
        if self.std is not None:
            doc["std"] = self.std
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        buf.write(CSV_HEADER + "\n")
        w.writerow(["row", "method", "gamma", *AGGREGATED])
        for r in self.runs:
            w.writerow([r.seed, self.config.method, self.config.gamma,
                        *(_cell(v) for v in _flat(r).values())])
        w.writerow(["mean", self.config.method, self.config.gamma, *(_cell(v) for v in self.mean.values())])
        if self.std is not None:
            w.writerow(["std", self.config.method, self.config.gamma, *(_cell(v) for v in self.std.values())])
        return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return format_float(float(v))


def load_inputs(cfg: ExperimentConfig) -> tuple[VisualTokenGrid, CrossAttentionInputs] | None:
    """Tensor files named by the config, or ``None`` when the grid is synthetic."""
    if not cfg.grid_file:
        return None
    grid, xattn = read_grid(cfg.grid_file), read_xattn(cfg.xattn_file)
    if grid.n_tokens != xattn.n_visual:
        raise ConfigError("xattn_file", f"{cfg.xattn_file}: {xattn.n_visual} visual keys "
                                        f"but {cfg.grid_file} holds {grid.n_tokens} tokens")
    return grid, xattn


def synthetic_inputs(cfg: ExperimentConfig, seed: int) -> tuple[VisualTokenGrid, CrossAttentionInputs]:
    params = GridParams(patch=cfg.patch, boundary_scale=cfg.boundary_scale)
    return make_synthetic_grid(cfg.frames, cfg.rows, cfg.cols, cfg.dim, cfg.scenario, seed, params)


def effective_profile(cfg: ExperimentConfig, kept: int, total: int) -> LatencyProfile:
    """Draft prefill grows with the kept tokens, pruning with the removed ones."""
    return LatencyProfile(
        t_draft_prefill=cfg.t_draft_prefill + cfg.t_draft_prefill_per_token * kept,
        t_target_prefill=cfg.t_target_prefill,
        t_draft_decode=cfg.t_draft_decode,
        t_target_verify=cfg.t_target_verify,
        t_prune=cfg.t_prune + cfg.t_prune_per_token * (total - kept),
    )


def make_prompt(cfg: ExperimentConfig, seed: int) -> list[int]:
    return [int(t) for t in np.random.default_rng([seed, 1]).integers(cfg.vocab, size=cfg.prompt_len)]


def run_seed(cfg: ExperimentConfig, seed: int,
             inputs: tuple[VisualTokenGrid, CrossAttentionInputs] | None = None) -> SeedRun:
    mode = Mode(cfg.mode)
    prompt = make_prompt(cfg, seed)
    if cfg.method == "ar":
        # the target alone: no pruning, no draft model
        profile = LatencyProfile(0.0, cfg.t_target_prefill, cfg.t_draft_decode, cfg.t_target_verify, 0.0)
        tokens, log = run_autoregressive(random_oracle(cfg.vocab, cfg.depth, seed), prompt,
                                         cfg.max_new, mode, seed)
        trace = serial_trace(log, profile)
        return SeedRun(seed, tokens, simulate(log, profile), profile, trace)

    grid, xattn = inputs if inputs is not None else synthetic_inputs(cfg, seed)
    _, keep = preserve_tokens(grid, xattn, cfg.keep_ratio, cfg.crop_side, cfg.criteria)
    report = bias_report(keep, cfg.band)
    profile = effective_profile(cfg, len(keep), grid.n_tokens)
    pair = make_pair(cfg.vocab, cfg.depth, cfg.alpha, seed)
    if cfg.method == "serial_sd":
        tokens, log = run_serial_sd(pair.draft, pair.target, prompt, cfg.gamma, cfg.max_new, mode, seed)
        metrics = simulate(log, profile)
        trace = serial_trace(log, profile)
    else:
        tokens, trace = run_vpsd(pair.draft, pair.target, prompt, cfg.gamma, cfg.max_new, profile,
                                 seed, mode, conservative=cfg.conservative)
        metrics = simulate(trace, profile)
    return SeedRun(seed, tokens, metrics, profile, trace, keep, report)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    inputs = load_inputs(cfg)
    return ExperimentResult(cfg, [run_seed(cfg, s, inputs) for s in cfg.seeds])


# sweeps -------------------------------------------------------------------

SWEEP_COLUMNS = ("value", "mat", "mat_per_round", "speedup", "decode_speedup",
                 "boundary_share", "prune_time", "total_time")


@dataclass
class SweepResult:
    axis: str
    values: list
    results: list[ExperimentResult]

    def rows(self) -> list[dict[str, float | None]]:
        out = []
        for v, res in zip(self.values, self.results):
            m = res.mean
            out.append({"value": v, **{k: m[k] for k in SWEEP_COLUMNS[1:]}})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        buf.write(f"{CSV_HEADER}\n# axis={self.axis}\n")
        w.writerow(SWEEP_COLUMNS)
        for row in self.rows():
            w.writerow([_cell(row[k]) for k in SWEEP_COLUMNS])
        return buf.getvalue()


def parse_sweep_values(axis: str, values: Iterable) -> list:
    if axis not in NUMERIC_FIELDS:
        raise ConfigError("axis", f"{axis!r} is not a numeric config key; choose from {', '.join(NUMERIC_FIELDS)}")
    out = [parse_value(axis, v) if isinstance(v, str) else v for v in values]
    if not out:
        raise ConfigError("values", "at least one sweep value is required")
    return out


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, workers: int = 1) -> SweepResult:
    """One experiment per value of ``axis``; rows keep the order of ``values``."""
    vals = parse_sweep_values(axis, values)
    configs = [cfg.replace(**{axis: v}) for v in vals]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_experiment, configs))
    else:
        results = [run_experiment(c) for c in configs]
    return SweepResult(axis, vals, results)


# prune command ------------------------------------------------------------

@dataclass
class PruneOutput:
    keep: KeepSet
    scores: ScoreMap
    report: BiasReport
    attention_only: BiasReport
    files: dict[str, Path]


def prune_cmd(grid_file: Path | str, xattn_file: Path | str, keep_ratio: float, crop_side: int,
              out_dir: Path | str, band: float = 0.1, criteria: tuple[str, ...] = CRITERIA,
              four_sided: bool = False) -> PruneOutput:
    """Select tokens from tensor files and write the selection, scores and bias report.

    Outputs in ``out_dir``: ``keep.json``, ``scores_<name>.vtg`` for each raw
    score plus ``scores_fused.vtg`` (all VTG1 with ``d = 1``), ``bias.json``
    (the selection next to an attention-only selection of the same size) and
    ``bias.csv``.
    """
    grid, xattn = read_grid(grid_file), read_xattn(xattn_file)
    if grid.n_tokens != xattn.n_visual:
        raise ConfigError("xattn_file", f"{xattn_file}: {xattn.n_visual} visual keys "
                                        f"but {grid_file} holds {grid.n_tokens} tokens")
    scores, keep = preserve_tokens(grid, xattn, keep_ratio, crop_side, criteria)
    _, keep_attn = preserve_tokens(grid, xattn, keep_ratio, crop_side, ("attn",))
    report = bias_report(keep, band, four_sided)
    attn_report = bias_report(keep_attn, band, four_sided)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"keep": out / "keep.json", "bias_json": out / "bias.json", "bias_csv": out / "bias.csv"}
    files["keep"].write_text(keep.to_json() + "\n", encoding="utf-8")
    for name, arr in (("attn", scores.raw_attn), ("temp", scores.raw_temp),
                      ("spa", scores.raw_spa), ("fused", scores.fused)):
        files[f"scores_{name}"] = out / f"scores_{name}.vtg"
        write_grid(files[f"scores_{name}"], arr)
    doc = {"criteria": list(scores.criteria),
           "selection": dataclasses.asdict(report),
           "attention_only": dataclasses.asdict(attn_report)}
    files["bias_json"].write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    files["bias_csv"].write_text(CSV_HEADER + "\n" + report.to_csv(), encoding="utf-8")
    return PruneOutput(keep, scores, report, attn_report, files)
