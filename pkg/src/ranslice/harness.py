"""Experiment runner: config loading, multi-seed studies, aggregation, artifacts.

Three studies are provided on top of :func:`run_single`:

* :func:`sweep_gamma`: discounted SAC over a list of discount factors.
* :func:`sweep_horizon`: discounted SAC over a list of episode lengths.
* :func:`compare`: average-reward SAC against SAC(gamma) and SAC(1) on the
  same seeds and UE-count combinations.

Every run is a pure function of (resolved config, seed).  Runs are written
as CSV logs; aggregates use a Student-t 95% interval across seeds.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import re
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from . import rl
from .env import EnvConfig, SlicingEnv
from .rl import AgentConfig
from .sim import ConfigError, SimConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

KINDS = ("single", "gamma_sweep", "horizon_sweep", "compare")
FINAL_WINDOW_FRAC = 0.1
_SECTIONS = {"sim": SimConfig, "env": EnvConfig, "agent": AgentConfig}


class ConfigParseError(ValueError):
    """Config file problem, reported with file and line context."""


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = SimConfig()
    env: EnvConfig = EnvConfig()
    agent: AgentConfig = AgentConfig()
    kind: str = "single"
    seeds: tuple[int, ...] = (0,)
    gammas: tuple[float, ...] = (0.9, 0.95, 0.99)
    horizons: tuple[int, ...] = (200,)
    ue_combos: tuple[tuple[int, ...], ...] = ()
    total_steps: int = 20_000
    out_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        object.__setattr__(self, "horizons", tuple(int(t) for t in self.horizons))
        object.__setattr__(self, "ue_combos", tuple(tuple(int(u) for u in c) for c in self.ue_combos))

    def validate(self) -> "ExperimentConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"kind: must be one of {KINDS}, got {self.kind!r}")
        if not self.seeds:
            raise ConfigError("seeds: list is empty")
        if any(not 0.0 < g <= 1.0 for g in self.gammas):
            raise ConfigError("gammas: values must lie in (0, 1]")
        if any(t < 1 for t in self.horizons):
            raise ConfigError("horizons: values must be >= 1")
        if self.env.horizon < 1:
            raise ConfigError("env horizon must be >= 1")
        if self.total_steps < 0 or self.workers < 1:
            raise ConfigError("total_steps must be >= 0 and workers >= 1")
        for combo in self.ue_combos:
            self.sim.replace(ues_per_slice=combo).validate()
        self.sim.validate()
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ---- config files -----------------------------------------------------------


def _key_line(text: str, section: str, key: str | None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the header itself)."""
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[\s*([A-Za-z0-9_]+)\s*\]", stripped)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None and re.match(rf"{re.escape(key)}\s*=", stripped):
            return i
    return None


def _located(source: str, text: str, section: str, key: str | None, msg: str) -> ConfigParseError:
    line = _key_line(text, section, key)
    if line is None:
        return ConfigParseError(f"{source}: [{section}] {msg}")
    return ConfigParseError(f"{source}:{line}: {msg}\n    {text.splitlines()[line - 1].strip()}")


def _coerce(value, default):
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise TypeError(f"expected a list, got {type(value).__name__}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            # whole-number floats such as 1e5 are accepted for integer fields
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise TypeError(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise TypeError(f"expected a string, got {value!r}")
    return value


def _build_section(cls, table: dict, source: str, text: str, section: str):
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in defaults:
            raise _located(source, text, section, key, f"unknown key {key!r} in [{section}]")
        try:
            kwargs[key] = _coerce(value, defaults[key])
        except TypeError as exc:
            raise _located(source, text, section, key, f"{key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise _located(source, text, section, None, str(exc)) from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        if m:
            n = int(m.group(1))
            lines = text.splitlines()
            ctx = lines[n - 1].strip() if 0 < n <= len(lines) else ""
            raise ConfigParseError(f"{source}:{n}: {exc}\n    {ctx}") from None
        raise ConfigParseError(f"{source}: {exc}") from None
    unknown = set(data) - set(_SECTIONS) - {"experiment"}
    if unknown:
        name = sorted(unknown)[0]
        raise _located(source, text, name, None, f"unknown section [{name}]")
    parts = {name: _build_section(cls, data.get(name, {}), source, text, name) for name, cls in _SECTIONS.items()}
    exp = data.get("experiment", {})
    for key in exp:
        if key not in {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS):
            raise _located(source, text, "experiment", key, f"unknown key {key!r} in [experiment]")
    try:
        return ExperimentConfig(**parts, **exp).validate()
    except (TypeError, ValueError) as exc:
        bad = next((k for k in exp if k in str(exc)), None)
        raise _located(source, text, "experiment", bad, str(exc)) from None


def load_config(path=None) -> ExperimentConfig:
    """Read a TOML experiment config; ``None`` loads the packaged default."""
    if path is None:
        text = resources.files("ranslice").joinpath("configs/default.toml").read_text()
        return parse_config(text, "default.toml")
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def load_sim_config(path) -> SimConfig:
    return load_config(path).sim


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


_NOT_HASHED = ("out_dir", "workers")  # do not affect results


def config_hash(obj) -> str:
    d = config_to_dict(obj) if dataclasses.is_dataclass(obj) else dict(obj)
    blob = json.dumps({k: v for k, v in d.items() if k not in _NOT_HASHED}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---- runs -------------------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    """Fully resolved settings of one training run."""

    label: str
    sim: SimConfig
    env: EnvConfig
    agent: AgentConfig
    total_steps: int


@dataclass
class RunRecord:
    label: str
    config_hash: str
    seed: int
    curve: list[dict]
    final_cumulative: float | None
    final_per_step: float | None
    final_rho: float | None
    final_rho_emp: float | None
    csv_path: str | None = None

    @property
    def mode(self) -> str:
        return "average" if any(r["rho"] is not None for r in self.curve) else "discounted"


def final_window(rows: list, frac: float = FINAL_WINDOW_FRAC) -> list:
    """Last ``ceil(frac * len(rows))`` entries (at least one when nonempty)."""
    if not rows:
        return []
    return rows[-max(1, math.ceil(frac * len(rows))):]


def _window_mean(rows, key):
    vals = [r[key] for r in final_window(rows) if r[key] is not None]
    return float(np.mean(vals)) if vals else None


def summarize(label: str, chash: str, seed: int, curve: list[dict], csv_path=None) -> RunRecord:
    return RunRecord(
        label=label,
        config_hash=chash,
        seed=seed,
        curve=curve,
        final_cumulative=_window_mean(curve, "cumulative_reward"),
        final_per_step=_window_mean(curve, "avg_reward_per_step"),
        final_rho=_window_mean(curve, "rho"),
        final_rho_emp=_window_mean(curve, "rho_emp"),
        csv_path=None if csv_path is None else str(csv_path),
    )


def run_path(out_dir, label: str, seed: int) -> Path:
    return Path(out_dir) / "runs" / f"{label}__seed{seed}.csv"


def execute(spec: RunSpec, seed: int, out_dir=None) -> RunRecord:
    """Train one agent and (optionally) write its CSV log under ``out_dir/runs``."""
    env = SlicingEnv(spec.sim, spec.env, seed=seed)
    agent = rl.make_agent(spec.agent, env.obs_dim, env.action_dim, seed)
    t0 = time.perf_counter()
    result = rl.train(env, agent, spec.total_steps, seed=seed)
    log.info("run %s seed %d: %d episodes in %.1fs", spec.label, seed, len(result.curve), time.perf_counter() - t0)
    path = None
    if out_dir is not None:
        path = run_path(out_dir, spec.label, seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        rl.write_log(result.curve, path)
    return summarize(spec.label, config_hash(spec), seed, result.curve, path)


def _execute_job(job):
    return execute(*job)


def run_jobs(jobs: list[tuple[RunSpec, int]], out_dir=None, workers: int = 1) -> list[RunRecord]:
    """Execute ``(spec, seed)`` jobs, serially or on a process pool; results keep job order."""
    args = [(spec, seed, out_dir) for spec, seed in jobs]
    if workers <= 1 or len(args) <= 1:
        return [_execute_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_execute_job, args))


def single_spec(config: ExperimentConfig, label: str | None = None) -> RunSpec:
    label = label or ("aro-sac" if config.agent.mode == "average" else f"sac_g{config.agent.gamma:g}")
    return RunSpec(label, config.sim, config.env, config.agent, config.total_steps)


def run_single(config: ExperimentConfig, seed: int, out_dir=None) -> RunRecord:
    config.validate()
    return execute(single_spec(config), seed, out_dir)


# ---- aggregation ------------------------------------------------------------


@dataclass
class AggregateResult:
    label: str
    metric: str
    mean: float
    half_width: float | None  # None when fewer than two runs
    n: int
    values: list[float] = field(default_factory=list)

    def row(self) -> list:
        hw = "" if self.half_width is None else repr(self.half_width)
        return [self.label, self.metric, self.n, repr(self.mean), hw, " ".join(repr(v) for v in self.values)]


AGGREGATE_HEADER = ["setting", "metric", "n", "mean", "ci95_half_width", "values"]


def t_interval(values) -> tuple[float, float | None]:
    """Mean and Student-t 95% half-width; half-width is None for a single value."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    mean = float(v.mean())
    if v.size < 2:
        return mean, None
    return mean, float(stats.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))


def aggregate(label: str, records: list[RunRecord], metric: str) -> AggregateResult:
    values = [getattr(r, metric) for r in records if getattr(r, metric) is not None]
    if not values:
        return AggregateResult(label, metric, float("nan"), None, 0, [])
    mean, hw = t_interval(values)
    return AggregateResult(label, metric, mean, hw, len(values), values)


def write_aggregates(aggs: list[AggregateResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_HEADER)
        for a in aggs:
            w.writerow(a.row())
    return path


CURVE_HEADER = ["setting", "seed", "env_step", "episode", "cumulative_reward", "avg_reward_per_step", "rho"]


def write_curves(records: list[RunRecord], path) -> Path:
    """Long-format learning curves of many runs in one CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for rec in records:
            for row in rec.curve:
                w.writerow([rec.label, rec.seed] + [rl._fmt(row[k]) for k in CURVE_HEADER[2:]])
    return path


def write_manifest(config: ExperimentConfig, out_dir, extra: dict | None = None) -> Path:
    import matplotlib
    import numba
    import scipy

    manifest = {
        "config_hash": config_hash(config),
        "config": config_to_dict(config),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest.update(extra or {})
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---- studies ----------------------------------------------------------------


def _out(config: ExperimentConfig, out_dir):
    return Path(out_dir if out_dir is not None else config.out_dir)


def _sac(config: ExperimentConfig, gamma: float, **env_changes) -> RunSpec:
    agent = dataclasses.replace(config.agent, mode="discounted", gamma=gamma)
    env = dataclasses.replace(config.env, **env_changes)
    label = f"sac_g{gamma:g}" + "".join(f"_T{v}" for v in env_changes.values())
    return RunSpec(label, config.sim, env, agent, config.total_steps)


def _grouped(records: list[RunRecord], labels: list[str]) -> dict[str, list[RunRecord]]:
    return {lab: [r for r in records if r.label == lab] for lab in labels}


def _finish(config, out, records, aggs, name, extra=None):
    write_aggregates(aggs, out / f"{name}_aggregate.csv")
    write_curves(records, out / f"{name}_curves.csv")
    write_manifest(config, out, extra)
    emit_plots([r.csv_path for r in records if r.csv_path], out)


def sweep_gamma(config: ExperimentConfig, out_dir=None, workers=None) -> list[AggregateResult]:
    """Discounted SAC per discount factor; aggregates final-window cumulative episode reward."""
    config.validate()
    out = _out(config, out_dir)
    specs = [_sac(config, g) for g in config.gammas]
    records = run_jobs([(s, seed) for s in specs for seed in config.seeds], out, workers or config.workers)
    groups = _grouped(records, [s.label for s in specs])
    aggs = [aggregate(lab, recs, "final_cumulative") for lab, recs in groups.items()]
    _finish(config, out, records, aggs, "gamma_sweep")
    return aggs


def sweep_horizon(config: ExperimentConfig, out_dir=None, workers=None) -> list[AggregateResult]:
    """Discounted SAC with ``agent.gamma`` per episode length; aggregates final-window per-step reward."""
    config.validate()
    out = _out(config, out_dir)
    specs = [_sac(config, config.agent.gamma, horizon=t) for t in config.horizons]
    records = run_jobs([(s, seed) for s in specs for seed in config.seeds], out, workers or config.workers)
    groups = _grouped(records, [s.label for s in specs])
    aggs = [aggregate(lab, recs, "final_per_step") for lab, recs in groups.items()]
    _finish(config, out, records, aggs, "horizon_sweep")
    return aggs


@dataclass
class CompareResult:
    aggregates: dict[str, AggregateResult]
    improvement_pct: float
    late_variance: dict[str, float]
    instability_flag: bool
    records: list[RunRecord]


def improvement_pct(ours: float, baseline: float) -> float:
    return 100.0 * (ours - baseline) / abs(baseline) if baseline != 0 else float("nan")


def compare_specs(config: ExperimentConfig, combo: tuple[int, ...] | None = None) -> list[RunSpec]:
    sim = config.sim if combo is None else config.sim.replace(ues_per_slice=combo)
    base = config.replace(sim=sim)
    aro = RunSpec("aro-sac", sim, config.env, dataclasses.replace(config.agent, mode="average"), config.total_steps)
    return [aro, _sac(base, config.agent.gamma), _sac(base, 1.0)]


def compare(config: ExperimentConfig, out_dir=None, workers=None) -> CompareResult:
    """ARO-SAC vs SAC(agent.gamma) vs SAC(1) on shared seeds and UE combinations.

    Seed ``s`` runs every arm with ``ue_combos[s % len(ue_combos)]`` (or the
    ``[sim]`` UE counts when no combos are configured), so the arms see the
    same arrival and mobility streams.
    """
    config.validate()
    out = _out(config, out_dir)
    jobs = []
    for seed in config.seeds:
        combo = config.ue_combos[seed % len(config.ue_combos)] if config.ue_combos else None
        jobs += [(spec, seed) for spec in compare_specs(config, combo)]
    records = run_jobs(jobs, out, workers or config.workers)
    labels = [s.label for s in compare_specs(config)]
    groups = _grouped(records, labels)
    aggs = {lab: aggregate(lab, recs, "final_per_step") for lab, recs in groups.items()}
    aro, sac, sac1 = labels
    late_var = {
        lab: float(np.var(aggs[lab].values, ddof=1)) if aggs[lab].n >= 2 else float("nan") for lab in (sac, sac1)
    }
    result = CompareResult(
        aggregates=aggs,
        improvement_pct=improvement_pct(aggs[aro].mean, aggs[sac].mean),
        late_variance=late_var,
        instability_flag=bool(late_var[sac1] >= late_var[sac]),
        records=records,
    )
    with open(out / "compare_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        w.writerow([f"improvement_pct_{aro}_over_{sac}", repr(result.improvement_pct)])
        w.writerow([f"late_variance_{sac}", repr(late_var[sac])])
        w.writerow([f"late_variance_{sac1}", repr(late_var[sac1])])
        w.writerow(["gamma1_instability_flag", int(result.instability_flag)])
    _finish(config, out, records, list(aggs.values()), "compare")
    return result


# ---- plots ------------------------------------------------------------------


def _label_of(path: Path) -> str:
    return path.stem.split("__seed")[0]


def curve_band(curves: list[list[dict]], key: str = "avg_reward_per_step"):
    """Per-episode mean and t half-width over runs, truncated to the shortest run."""
    n = min(len(c) for c in curves)
    steps = np.array([curves[0][i]["env_step"] for i in range(n)])
    vals = np.array([[c[i][key] for i in range(n)] for c in curves], dtype=float)
    mean = vals.mean(axis=0)
    if len(curves) < 2:
        return steps, mean, None
    hw = stats.t.ppf(0.975, len(curves) - 1) * vals.std(axis=0, ddof=1) / math.sqrt(len(curves))
    return steps, mean, hw


def emit_plots(run_csvs, output_dir, name: str = "learning_curves") -> list[Path]:
    """Learning-curve SVG: mean line and 95% band per setting (band only with >= 2 runs)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = sorted(Path(p) for p in run_csvs)
    if not paths:
        raise ValueError("emit_plots needs at least one run CSV")
    groups: dict[str, list[list[dict]]] = {}
    for p in paths:
        rows = rl.read_log(p)
        if not rows:
            warnings.warn(f"{p}: no episodes logged, skipped in plot")
            continue
        groups.setdefault(_label_of(p), []).append(rows)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not groups:
        return []
    with matplotlib.rc_context({"svg.hashsalt": "ranslice", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for label, curves in groups.items():
            steps, mean, hw = curve_band(curves)
            line, = ax.plot(steps, mean, label=f"{label} (n={len(curves)})")
            if hw is not None:
                ax.fill_between(steps, mean - hw, mean + hw, color=line.get_color(), alpha=0.25, linewidth=0)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("average reward per step")
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = out / f"{name}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return [path]
