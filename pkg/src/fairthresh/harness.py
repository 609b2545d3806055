"""Experiment configuration, presets and orchestration.

A run directory produced by :func:`run_experiment` looks like::

    <root>/<output_dir>/<name>/
        config.json          resolved configuration (re-runnable as-is)
        provenance.json      RNG identity, library versions, env pack hash
        logs/<algo>_seed<k>.csv
        snapshots/<algo>_seed<k>.json
        cells.json           per-cell tail metrics
        summary.json / summary.csv

Every path written into these files is relative to the run directory.

Seeding: each (algorithm, seed) cell draws its environment stream from
``SeedSequence(seed, spawn_key=(0,))`` and its learner stream from
``SeedSequence(seed, spawn_key=(1, ALGO_STREAM[algo]))``. All algorithms
therefore face the same batch randomness for a given seed, and adding or
removing an algorithm never changes another algorithm's trajectory.
"""

from __future__ import annotations

import copy
import dataclasses
import functools
import itertools
import json
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .analysis import (
    AlgoSummary,
    CellSummary,
    RunLog,
    SettingResult,
    SUMMARY_FIELDS,
    TradeoffCurve,
    TuningResult,
    aggregate_cells,
    cumulative_violation,
    oracle_sweep,
    pd_tuning_select,
    stress_winner,
    stress_winrate,
    summarize_log,
    write_csv,
    write_json,
)
from .data import load_env_pack, pools_from_pack
from .envs import MVESConfig, MVESEnv, SemiSynConfig, SemiSynEnv
from .learners import (
    OFSConfig,
    OFSLearner,
    PDConfig,
    PrimalDualLearner,
    ZeroOrderLearner,
    ZOConfig,
)
from .policy import ConfigurationError, ConstraintSpec, RewardFeedback, ThresholdGrid, make_grid

TASKS = ("mves", "german", "compas")
MODES = ("main", "strict", "stress", "oracle", "pd-tuning")
ALGORITHMS = ("ofs", "unconstrained", "primal_dual")
ALGO_STREAM = {"ofs": 0, "unconstrained": 1, "primal_dual": 2}
RNG_IDENTITY = f"numpy.random.PCG64 via SeedSequence (numpy {np.__version__})"

REPO_ROOT = Path(__file__).resolve().parents[2]


class CalibrationError(RuntimeError):
    def __init__(self, message: str, diagnostics: list[dict]):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------- configuration


@dataclass
class GridSpec:
    k_theta: int = 41
    theta_min: float | None = None  # None on dataset tasks: pack logit range minus margin
    theta_max: float | None = None
    margin: float = 0.1


@dataclass
class OracleSpec:
    horizon: int = 3000
    burn_in: int = 1000
    seeds: list[int] = field(default_factory=lambda: list(range(5)))


@dataclass
class StressSpec:
    """Cross-product of absolute values; an empty list keeps the base value."""

    c_fp: list[float] = field(default_factory=list)
    epsilon: list[float] = field(default_factory=list)
    kappa: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: list(range(5)))


@dataclass
class TuningSpec:
    eta: list[float] = field(default_factory=lambda: [0.01, 0.03, 0.1])
    mu: list[float] = field(default_factory=lambda: [0.1, 0.4, 1.0])
    seeds: list[int] = field(default_factory=lambda: list(range(5)))


@dataclass
class ExperimentConfig:
    name: str
    task: str
    mode: str = "main"
    constraints: dict = field(default_factory=lambda: {"epsilon": 0.06})
    env: dict = field(default_factory=dict)
    grid: GridSpec = field(default_factory=GridSpec)
    algorithms: list[str] = field(default_factory=lambda: list(ALGORITHMS))
    ofs: dict = field(default_factory=dict)
    zo: dict = field(default_factory=dict)
    pd: dict = field(default_factory=dict)
    T: int = 2000
    n: int = 256
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    k_tail: int = 200
    pack: str | None = None
    output_dir: str = "runs"
    oracle: OracleSpec = field(default_factory=OracleSpec)
    stress: StressSpec = field(default_factory=StressSpec)
    tuning: TuningSpec = field(default_factory=TuningSpec)
    workers: int = 1
    snapshot_every: int = 0  # 0: final snapshot only

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {sorted(unknown)}")
        nested = {"grid": GridSpec, "oracle": OracleSpec, "stress": StressSpec, "tuning": TuningSpec}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub_known = {f.name for f in dataclasses.fields(typ)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise ConfigurationError(f"unknown key(s) in {key}: {sorted(bad)}")
                d[key] = typ(**d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)

    # -- derived objects ------------------------------------------------

    @property
    def spec(self) -> ConstraintSpec:
        return ConstraintSpec(**self.constraints)

    def env_config(self) -> MVESConfig | SemiSynConfig:
        env = dict(self.env)
        try:
            if self.task == "mves":
                if "base_means" in env:
                    env["base_means"] = tuple(env["base_means"])
                return MVESConfig(**env, n=self.n, constraints=self.spec)
            return SemiSynConfig(**env, n=self.n, constraints=self.spec)
        except TypeError as exc:
            raise ConfigurationError(f"bad env parameters for {self.task}: {exc}") from None

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigurationError(f"unknown or empty algorithm list: {self.algorithms}")
        if self.T < 1 or self.n < 1:
            raise ConfigurationError("T and n must be >= 1")
        if not self.seeds:
            raise ConfigurationError("need at least one seed")
        if not 1 <= self.k_tail:
            raise ConfigurationError("k_tail must be >= 1")
        if Path(self.output_dir).is_absolute():
            raise ConfigurationError("output_dir must be relative")
        _ = self.spec
        OFSConfig(**self.ofs)
        ZOConfig(**self.zo)
        PDConfig(**self.pd)
        self.env_config().validate()
        if self.task != "mves":
            resolve_pack_path(self.pack)


def apply_override(cfg: ExperimentConfig, assignment: str) -> ExperimentConfig:
    """Apply ``dotted.key=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigurationError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    d = cfg.to_dict()
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigurationError(f"override path {key!r} does not name a section")
        node = node[p]
    leaf = parts[-1]
    free_sections = ("env", "constraints", "ofs", "zo", "pd")
    if leaf not in node and not (len(parts) == 2 and parts[0] in free_sections):
        raise ConfigurationError(f"unknown config key {key!r}")
    node[leaf] = value
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------- presets


# Env constants chosen with `fairthresh calibrate` plus learner-level checks;
# unlisted constants keep their module defaults.
MVES_ENV = {"kappa": 0.05}
GERMAN_ENV = {"c_fp": 3.0, "acc_ref": 0.9}
COMPAS_ENV = {"c_fp": 0.8, "acc_ref": 0.9, "rho": 0.93}

_PRESETS: dict[str, Callable[[], ExperimentConfig]] = {}


def _preset(fn):
    _PRESETS[fn.__name__.replace("_", "-")] = fn
    return fn


@_preset
def mves_main() -> ExperimentConfig:
    return ExperimentConfig(
        name="mves-main",
        task="mves",
        constraints={"epsilon": 0.06},
        env=dict(MVES_ENV),
        grid=GridSpec(41, -4.0, 4.0),
        pd={"eta": 0.03, "mu": 0.1},
        stress=StressSpec(epsilon=[0.04, 0.06, 0.08], kappa=[0.03, 0.05, 0.07]),
    )


@_preset
def german_main() -> ExperimentConfig:
    return ExperimentConfig(
        name="german-main",
        task="german",
        constraints={"epsilon": 0.02, "service_enabled": True, "alpha_min": 0.30, "alpha_max": 0.99},
        env=dict(GERMAN_ENV),
        pack="data/packs/german.json",
        pd={"eta": 0.03, "mu": 0.1},
        stress=StressSpec(epsilon=[0.01, 0.02, 0.03], kappa=[0.2, 0.3, 0.4]),
    )


@_preset
def compas_main() -> ExperimentConfig:
    return ExperimentConfig(
        name="compas-main",
        task="compas",
        constraints={"epsilon": 0.03, "service_enabled": True, "alpha_min": 0.30, "alpha_max": 0.99},
        env=dict(COMPAS_ENV),
        pack="data/packs/compas.json",
        pd={"eta": 0.03, "mu": 0.4},
        stress=StressSpec(epsilon=[0.02, 0.03, 0.04], kappa=[0.2, 0.3, 0.4]),
    )


STRICT_CONSTRAINTS = {"epsilon": 0.01, "service_enabled": True, "alpha_min": 0.35, "alpha_max": 0.85}


@_preset
def german_strict() -> ExperimentConfig:
    return german_main().replace(name="german-strict", mode="strict", constraints=dict(STRICT_CONSTRAINTS))


@_preset
def compas_strict() -> ExperimentConfig:
    return compas_main().replace(name="compas-strict", mode="strict", constraints=dict(STRICT_CONSTRAINTS))


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def preset(name: str) -> ExperimentConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; known: {preset_names()}") from None


# ---------------------------------------------------------------- building blocks


def resolve_pack_path(pack: str | None) -> Path:
    if pack is None:
        raise ConfigurationError("dataset tasks need an env pack path (config key 'pack')")
    p = Path(pack)
    for cand in ([p] if p.is_absolute() else [Path.cwd() / p, REPO_ROOT / p]):
        if cand.is_file():
            return cand
    raise ConfigurationError(f"env pack not found: {pack} (build it with `fairthresh pack`)")


@functools.lru_cache(maxsize=8)
def _load_pack(path: str) -> dict:
    return load_env_pack(path)


def load_pack_for(cfg: ExperimentConfig) -> dict:
    return _load_pack(str(resolve_pack_path(cfg.pack)))


class EnvFactory:
    """Picklable constructor of fresh environments for one configuration."""

    def __init__(self, cfg: ExperimentConfig):
        self.task = cfg.task
        self.env_cfg = cfg.env_config()
        self.pools = pools_from_pack(load_pack_for(cfg)) if cfg.task != "mves" else None

    def __call__(self):
        env_cfg = copy.deepcopy(self.env_cfg)
        if self.task == "mves":
            return MVESEnv(env_cfg)
        return SemiSynEnv(self.pools, env_cfg)


def build_grid(cfg: ExperimentConfig) -> ThresholdGrid:
    g = cfg.grid
    lo, hi = g.theta_min, g.theta_max
    if lo is None or hi is None:
        if cfg.task == "mves":
            raise ConfigurationError("MVE-S needs explicit grid bounds")
        s_lo, s_hi = load_pack_for(cfg)["logit_range"]
        width = s_hi - s_lo
        lo = s_lo - g.margin * width if lo is None else lo
        hi = s_hi + g.margin * width if hi is None else hi
    return make_grid(lo, hi, g.k_theta)


def resolved_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Copy with grid bounds filled in, so the written config pins them."""
    grid = build_grid(cfg)
    out = cfg.replace(grid=GridSpec(grid.k_theta, grid.theta_min, grid.theta_max, cfg.grid.margin))
    return out


def cell_streams(seed: int, algo: str) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    env_ss = np.random.SeedSequence(seed, spawn_key=(0,))
    learner_ss = np.random.SeedSequence(seed, spawn_key=(1, ALGO_STREAM[algo]))
    return env_ss, learner_ss


def make_learner(cfg: ExperimentConfig, algo: str, grid: ThresholdGrid, rng: np.random.Generator):
    j = cfg.spec.n_residuals
    if algo == "ofs":
        return OFSLearner(grid, j, OFSConfig(**cfg.ofs), rng)
    if algo == "unconstrained":
        return ZeroOrderLearner(grid.theta_min, grid.theta_max, ZOConfig(**cfg.zo), rng)
    if algo == "primal_dual":
        return PrimalDualLearner(grid.theta_min, grid.theta_max, j, PDConfig(**cfg.pd), rng)
    raise ConfigurationError(f"unknown algorithm {algo!r}")


@dataclass
class CellResult:
    algo: str
    seed: int
    log: RunLog
    summary: CellSummary
    snapshots: list[dict]


def run_cell(cfg: ExperimentConfig, algo: str, seed: int, factory: EnvFactory | None = None,
             grid: ThresholdGrid | None = None) -> CellResult:
    factory = factory or EnvFactory(cfg)
    grid = grid or build_grid(cfg)
    env_ss, learner_ss = cell_streams(seed, algo)
    env = factory()
    env.reset(env_ss)
    learner = make_learner(cfg, algo, grid, np.random.Generator(np.random.PCG64(learner_ss)))
    log = RunLog(algo, seed, cfg.spec.n_residuals)
    snaps = []
    for t in range(1, cfg.T + 1):
        theta = learner.propose(t)
        obs = env.step(theta)
        learner.update(theta, obs if learner.reads_residuals else RewardFeedback(obs.reward))
        log.append(t, theta, obs)
        if cfg.snapshot_every and t % cfg.snapshot_every == 0 and t != cfg.T:
            snaps.append({"t": t, "learner": learner.snapshot(), "env": env.snapshot()})
    snaps.append({"t": cfg.T, "learner": learner.snapshot(), "env": env.snapshot()})
    k_tail = min(cfg.k_tail, cfg.T)
    summary = summarize_log(log, k_tail, learner.greedy_theta(cfg.T))
    return CellResult(algo, seed, log, summary, snaps)


class _CellJob:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.factory = EnvFactory(cfg)
        self.grid = build_grid(cfg)

    def __call__(self, key: tuple[str, int]):
        algo, seed = key
        try:
            return run_cell(self.cfg, algo, seed, self.factory, self.grid)
        except Exception as exc:  # reported per cell, run continues
            return (algo, seed, f"{type(exc).__name__}: {exc}")


def _map(fn, items, workers: int):
    if workers <= 1:
        return list(map(fn, items))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- main runs


@dataclass
class RunResult:
    directory: Path
    config: ExperimentConfig
    cells: dict[tuple[str, int], CellSummary]
    summaries: dict[str, AlgoSummary]
    failures: list[tuple[str, int, str]]

    @property
    def ok(self) -> bool:
        return not self.failures

    def values(self, algo: str, metric: str) -> list[float]:
        """Per-seed metric in seed order, e.g. ``values('ofs', 'violation')``."""
        return [getattr(self.cells[(algo, s)], metric) for s in self.config.seeds if (algo, s) in self.cells]


def run_directory(cfg: ExperimentConfig, root) -> Path:
    return Path(root) / cfg.output_dir / cfg.name


def provenance(cfg: ExperimentConfig) -> dict:
    out = {
        "package": "fairthresh",
        "version": __version__,
        "rng": RNG_IDENTITY,
        "seeding": "env SeedSequence(seed, spawn_key=(0,)); learner SeedSequence(seed, spawn_key=(1, algo_id))",
        "algo_ids": ALGO_STREAM,
        "python": platform.python_version(),
    }
    if cfg.task != "mves":
        pack = load_pack_for(cfg)
        out["env_pack"] = {"dataset": pack["dataset"], **pack["provenance"]}
    return out


def run_experiment(cfg: ExperimentConfig, root=".", curve: TradeoffCurve | None = None,
                   write_logs: bool = True) -> RunResult:
    """Run every (algorithm, seed) cell and write the run directory.

    Configuration problems raise before any cell starts. A cell that fails
    at run time is recorded in ``failures`` and the rest still run.
    """
    cfg.validate()
    cfg = resolved_config(cfg)
    out = run_directory(cfg, root)
    keys = [(a, s) for a in cfg.algorithms for s in cfg.seeds]
    results = _map(_CellJob(cfg), keys, cfg.workers)

    cells: dict[tuple[str, int], CellSummary] = {}
    failures = []
    for res in results:
        if isinstance(res, tuple):
            failures.append(res)
            continue
        cells[(res.algo, res.seed)] = res.summary
        if write_logs:
            (out / "logs").mkdir(parents=True, exist_ok=True)
            (out / "snapshots").mkdir(parents=True, exist_ok=True)
            (out / "logs" / f"{res.algo}_seed{res.seed}.csv").write_text(res.log.to_csv())
            write_json(out / "snapshots" / f"{res.algo}_seed{res.seed}.json", res.snapshots)

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    write_json(out / "provenance.json", provenance(cfg))
    write_json(out / "cells.json", [dataclasses.asdict(c) for c in cells.values()])
    if curve is not None:
        write_json(out / "oracle_curve.json", curve.to_dict())
    summaries = _summaries(cfg, cells, curve)
    _write_summary(out, cfg, summaries, failures)
    return RunResult(out, cfg, cells, summaries, failures)


def _summaries(cfg: ExperimentConfig, cells: dict, curve: TradeoffCurve | None) -> dict[str, AlgoSummary]:
    out = {}
    for algo in cfg.algorithms:
        group = [c for (a, _), c in sorted(cells.items()) if a == algo]
        if group:
            out[algo] = aggregate_cells(group, cfg.spec, curve)
    return out


def _write_summary(out: Path, cfg: ExperimentConfig, summaries: dict[str, AlgoSummary], failures) -> None:
    rows = [s.row(cfg.task) for s in summaries.values()]
    write_csv(out / "summary.csv", rows, SUMMARY_FIELDS)
    write_json(out / "summary.json", {
        "name": cfg.name,
        "task": cfg.task,
        "mode": cfg.mode,
        "rows": rows,
        "failures": [list(f) for f in failures],
        "logs": sorted(f"logs/{a}_seed{s}.csv" for a in cfg.algorithms for s in cfg.seeds),
    })


def summarize(run_dirs: Sequence) -> list[dict]:
    """Rebuild summary rows from the files inside each run directory."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        cfg = ExperimentConfig.from_json((d / "config.json").read_text())
        cells = {}
        for c in json.loads((d / "cells.json").read_text()):
            cs = CellSummary(**c)
            cells[(cs.learner, cs.seed)] = cs
        curve = None
        if (d / "oracle_curve.json").is_file():
            curve = TradeoffCurve.from_dict(json.loads((d / "oracle_curve.json").read_text()))
        sums = _summaries(cfg, cells, curve)
        _write_summary(d, cfg, sums, [])
        rows.extend(s.row(cfg.task) for s in sums.values())
    return rows


def plot_data(run_dirs: Sequence) -> list[Path]:
    """Write seed-averaged cumulative-violation and reward curves per run."""
    written = []
    for d in run_dirs:
        d = Path(d)
        cfg = ExperimentConfig.from_json((d / "config.json").read_text())
        cols: dict[str, np.ndarray] = {}
        for algo in cfg.algorithms:
            curves, rewards = [], []
            for s in cfg.seeds:
                p = d / "logs" / f"{algo}_seed{s}.csv"
                if not p.is_file():
                    continue
                log = RunLog.from_csv(p.read_text(), algo, s)
                curves.append(cumulative_violation(log.residual_matrix)[1])
                rewards.append(np.asarray(log.reward))
            if curves:
                cols[f"{algo}_violation"] = np.mean(curves, axis=0)
                cols[f"{algo}_reward"] = np.mean(rewards, axis=0)
        if not cols:
            continue
        length = min(len(v) for v in cols.values())
        rows = [{"t": t + 1, **{k: float(v[t]) for k, v in cols.items()}} for t in range(length)]
        path = d / "curves.csv"
        write_csv(path, rows)
        written.append(path)
        if (d / "oracle_curve.json").is_file():
            curve = TradeoffCurve.from_dict(json.loads((d / "oracle_curve.json").read_text()))
            write_csv(d / "tradeoff_curve.csv", curve.rows())
            written.append(d / "tradeoff_curve.csv")
    return written


# ---------------------------------------------------------------- oracle, tuning, stress


def run_oracle(cfg: ExperimentConfig, root=None) -> TradeoffCurve:
    cfg.validate()
    cfg = resolved_config(cfg)
    grid = build_grid(cfg)
    o = cfg.oracle

    def map_fn(fn, items):
        return _map(fn, list(items), cfg.workers)

    curve = oracle_sweep(EnvFactory(cfg), grid, cfg.spec, o.horizon, o.burn_in, o.seeds, map_fn=map_fn)
    if root is not None:
        out = Path(root) / cfg.output_dir / f"{cfg.name}-oracle"
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.replace(mode="oracle").to_json())
        write_json(out / "oracle_curve.json", curve.to_dict())
        write_csv(out / "tradeoff_curve.csv", curve.rows())
    return curve


def _seed_mean(cells: list[CellSummary]) -> tuple[float, float, float, float]:
    return (
        float(np.mean([c.tail_reward for c in cells])),
        float(np.mean([c.tail_dp_gap for c in cells])),
        float(np.mean([c.tail_accept_rate for c in cells])),
        float(np.mean([c.violation for c in cells])),
    )


def _run_cells(cfg: ExperimentConfig, algos: Sequence[str], seeds: Sequence[int]) -> dict[str, list[CellSummary]]:
    job = _CellJob(cfg)
    keys = [(a, s) for a in algos for s in seeds]
    res = _map(job, keys, cfg.workers)
    out: dict[str, list[CellSummary]] = {a: [] for a in algos}
    for r in res:
        if isinstance(r, tuple):
            raise RuntimeError(f"cell {r[0]} seed {r[1]} failed: {r[2]}")
        out[r.algo].append(r.summary)
    return out


@dataclass
class TuningOutcome:
    eta: float
    mu: float
    rule: str
    results: list[TuningResult]


def tune_pd(cfg: ExperimentConfig, root=None) -> TuningOutcome:
    cfg.validate()
    cfg = resolved_config(cfg)
    spec = cfg.spec
    results = []
    for eta, mu in itertools.product(cfg.tuning.eta, cfg.tuning.mu):
        c = cfg.replace(pd={**cfg.pd, "eta": eta, "mu": mu})
        cells = _run_cells(c, ["primal_dual"], cfg.tuning.seeds)["primal_dual"]
        r, dp, acc, v = _seed_mean(cells)
        results.append(TuningResult(eta, mu, r, dp, acc, v))
    eta, mu = pd_tuning_select(results, spec)
    any_feasible = any(spec.is_feasible(r.tail_dp_gap, r.tail_accept_rate) for r in results)
    rule = "feasible-max-reward" if any_feasible else "infeasible-min-violation"
    outcome = TuningOutcome(eta, mu, rule, results)
    if root is not None:
        out = Path(root) / cfg.output_dir / f"{cfg.name}-pd-tuning"
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.replace(mode="pd-tuning").to_json())
        write_csv(out / "pd_tuning.csv", [dataclasses.asdict(r) for r in results])
        write_json(out / "pd_tuning.json", {"selected": {"eta": eta, "mu": mu}, "rule": rule,
                                            "results": [dataclasses.asdict(r) for r in results]})
    return outcome


def stress_settings(cfg: ExperimentConfig) -> list[dict]:
    s = cfg.stress
    axes = {k: v for k, v in (("c_fp", s.c_fp), ("epsilon", s.epsilon), ("kappa", s.kappa)) if v}
    if not axes:
        raise ConfigurationError("stress sweep needs at least one non-empty value list")
    return [dict(zip(axes, vals)) for vals in itertools.product(*axes.values())]


def setting_config(cfg: ExperimentConfig, setting: dict) -> ExperimentConfig:
    env = dict(cfg.env)
    constraints = dict(cfg.constraints)
    for k, v in setting.items():
        if k == "epsilon":
            constraints["epsilon"] = v
        else:
            env[k] = v
    tag = ",".join(f"{k}={v}" for k, v in setting.items())
    return cfg.replace(env=env, constraints=constraints, mode="stress", name=f"{cfg.name}[{tag}]")


@dataclass
class StressOutcome:
    task: str
    winrate: dict[str, float]
    settings: list[dict]

    def to_dict(self) -> dict:
        return {"task": self.task, "winrate": self.winrate, "settings": self.settings}


def stress_sweep(cfg: ExperimentConfig, root=None) -> StressOutcome:
    cfg.validate()
    settings = stress_settings(cfg)
    scored = []
    detail = []
    for setting in settings:
        c = setting_config(cfg, setting)
        c.validate()
        cells = _run_cells(c, c.algorithms, cfg.stress.seeds)
        results = [SettingResult(a, *_seed_mean(cells[a])) for a in c.algorithms]
        spec = c.spec
        scored.append((spec, results))
        detail.append({
            "setting": setting,
            "winner": stress_winner(results, spec),
            "results": [{**dataclasses.asdict(r), "tail_feasible": spec.is_feasible(r.tail_dp_gap, r.tail_accept_rate)}
                        for r in results],
        })
    outcome = StressOutcome(cfg.task, stress_winrate(scored), detail)
    if root is not None:
        out = Path(root) / cfg.output_dir / f"{cfg.name}-stress"
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.replace(mode="stress").to_json())
        write_json(out / f"stress_winrate_{cfg.task}.json", outcome.to_dict())
    return outcome


# ---------------------------------------------------------------- calibration


@dataclass
class CalibrationResult:
    params: dict
    curve: TradeoffCurve
    diagnostics: list[dict]


def calibrate_env(cfg: ExperimentConfig, search: dict[str, Sequence], min_feasible: int = 1) -> CalibrationResult:
    """Grid-search env constants until the oracle sweep shows binding constraints.

    Accepts the first candidate (in product order) whose sweep has at least
    ``min_feasible`` feasible thresholds and whose reward-maximizing threshold
    is infeasible.
    """
    if not search or any(len(v) == 0 for v in search.values()):
        raise CalibrationError("empty search range", [])
    cfg.validate()
    diagnostics = []
    for vals in itertools.product(*search.values()):
        params = dict(zip(search, vals))
        cand = cfg.replace(env={**cfg.env, **params})
        try:
            cand.validate()
        except ConfigurationError as exc:
            diagnostics.append({"params": params, "rejected": f"invalid: {exc}"})
            continue
        curve = run_oracle(cand)
        n_feasible = int(curve.feasible.sum())
        best = curve.unconstrained_best_index()
        binding = not bool(curve.feasible[best])
        diag = {"params": params, "n_feasible": n_feasible, "unconstrained_best_theta": float(curve.theta[best]),
                "unconstrained_best_feasible": not binding, "oracle": curve.oracle()}
        if n_feasible >= min_feasible and binding:
            diagnostics.append({**diag, "accepted": True})
            return CalibrationResult(params, curve, diagnostics)
        reasons = []
        if n_feasible < min_feasible:
            reasons.append(f"feasible region has {n_feasible} < {min_feasible} points")
        if not binding:
            reasons.append("unconstrained optimum is feasible, constraints do not bind")
        diagnostics.append({**diag, "rejected": "; ".join(reasons)})
    raise CalibrationError("no candidate satisfied both calibration criteria", diagnostics)
