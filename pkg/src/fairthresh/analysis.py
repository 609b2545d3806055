"""Evaluation statistics over completed run logs.

Tail metrics, cumulative violation, seed aggregation, paired bootstrap
intervals, fixed-threshold oracle sweeps, PD tuning selection and stress
win rates. Everything except :func:`oracle_sweep` is a pure function of
already-collected numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .policy import ConstraintSpec, Observation, ThresholdGrid

LOG_COLUMNS = ("t", "theta", "reward", "g_dp", "g_srv_lo", "g_srv_hi", "dp_gap", "acc", "acc0", "acc1")
BOOTSTRAP_SEED = 20_240_917  # dedicated stream, never shared with experiment seeds


# ---------------------------------------------------------------- run logs


@dataclass
class RunLog:
    """Per-round record of one (algorithm, seed) cell."""

    learner: str
    seed: int
    n_residuals: int
    t: list[int] = field(default_factory=list)
    theta: list[float] = field(default_factory=list)
    reward: list[float] = field(default_factory=list)
    residuals: list[np.ndarray] = field(default_factory=list)
    dp_gap: list[float] = field(default_factory=list)
    acc: list[float] = field(default_factory=list)
    acc0: list[float | None] = field(default_factory=list)
    acc1: list[float | None] = field(default_factory=list)

    def append(self, t: int, theta: float, obs: Observation) -> None:
        if self.t and t <= self.t[-1]:
            raise ValueError("round index must be strictly increasing")
        self.t.append(t)
        self.theta.append(float(theta))
        self.reward.append(obs.reward)
        self.residuals.append(np.asarray(obs.residuals, dtype=float))
        self.dp_gap.append(obs.dp_gap)
        self.acc.append(obs.accept_rate)
        self.acc0.append(obs.accept_rate_by_group[0])
        self.acc1.append(obs.accept_rate_by_group[1])

    def __len__(self) -> int:
        return len(self.t)

    @property
    def residual_matrix(self) -> np.ndarray:
        if not self.residuals:
            return np.zeros((0, self.n_residuals))
        return np.vstack(self.residuals)

    @property
    def absent_group_rounds(self) -> int:
        return sum(a is None or b is None for a, b in zip(self.acc0, self.acc1))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for k in range(len(self.t)):
            g = self.residuals[k]
            g_cells = [_fmt(x) for x in g] + [""] * (3 - len(g))
            w.writerow(
                [self.t[k], _fmt(self.theta[k]), _fmt(self.reward[k]), *g_cells,
                 _fmt(self.dp_gap[k]), _fmt(self.acc[k]), _fmt(self.acc0[k]), _fmt(self.acc1[k])]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, learner: str = "", seed: int = -1) -> "RunLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != LOG_COLUMNS:
            raise ValueError(f"unexpected log header {rows[0] if rows else None}")
        body = rows[1:]
        n_res = 3 if body and body[0][4] != "" else 1
        log = cls(learner, seed, n_res)
        for r in body:
            log.t.append(int(r[0]))
            log.theta.append(float(r[1]))
            log.reward.append(float(r[2]))
            log.residuals.append(np.array([float(x) for x in r[3 : 3 + n_res]]))
            log.dp_gap.append(float(r[6]))
            log.acc.append(float(r[7]))
            log.acc0.append(None if r[8] == "" else float(r[8]))
            log.acc1.append(None if r[9] == "" else float(r[9]))
        return log


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# ---------------------------------------------------------------- basic statistics


def tail_mean(series: Sequence[float], k_tail: int) -> float:
    x = np.asarray(series, dtype=float)
    if k_tail < 1:
        raise ValueError("k_tail must be >= 1")
    if len(x) < k_tail:
        raise ValueError(f"series of length {len(x)} is shorter than k_tail={k_tail}")
    return float(x[-k_tail:].mean())


def cumulative_violation(residuals) -> tuple[float, np.ndarray]:
    """Total positive-part violation and its running curve.

    ``residuals`` is a (T, J) array-like; a flat sequence is read as J = 1.
    """
    g = np.asarray(residuals, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if g.size == 0:
        return 0.0, np.zeros(0)
    curve = np.cumsum(np.maximum(g, 0.0).sum(axis=1))
    return float(curve[-1]), curve


@dataclass(frozen=True)
class SeedStats:
    mean: float
    std: float | None  # None with a single seed
    n: int


def aggregate_seeds(values: Sequence[float]) -> SeedStats:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("no values to aggregate")
    std = float(x.std(ddof=1)) if x.size >= 2 else None
    return SeedStats(float(x.mean()), std, int(x.size))


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lo: float
    hi: float
    level: float

    def excludes_zero(self) -> bool:
        return self.lo > 0.0 or self.hi < 0.0


def paired_bootstrap_ci(
    a: Sequence[float],
    b: Sequence[float],
    level: float = 0.95,
    resamples: int = 10_000,
    seed: int = BOOTSTRAP_SEED,
) -> BootstrapCI:
    """Percentile interval for mean(a - b), resampling seed indices."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least 2 paired values")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    d = a - b
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.integers(0, d.size, size=(resamples, d.size))
    means = d[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    point = float(d.mean())
    # quantile interpolation can land a hair outside when all draws coincide
    return BootstrapCI(point, float(min(lo, point)), float(max(hi, point)), level)


# ---------------------------------------------------------------- oracle sweep


@dataclass
class TradeoffCurve:
    theta: np.ndarray
    reward: np.ndarray
    reward_se: np.ndarray
    dp_gap: np.ndarray
    dp_gap_se: np.ndarray
    accept_rate: np.ndarray
    accept_rate_se: np.ndarray
    feasible: np.ndarray
    spec: ConstraintSpec

    @property
    def oracle_index(self) -> int | None:
        if not self.feasible.any():
            return None
        return int(np.argmax(np.where(self.feasible, self.reward, -np.inf)))

    @property
    def has_oracle(self) -> bool:
        return self.oracle_index is not None

    def oracle(self) -> dict | None:
        i = self.oracle_index
        if i is None:
            return None
        return {
            "index": i,
            "theta": float(self.theta[i]),
            "reward": float(self.reward[i]),
            "dp_gap": float(self.dp_gap[i]),
            "accept_rate": float(self.accept_rate[i]),
        }

    def unconstrained_best_index(self) -> int:
        return int(np.argmax(self.reward))

    def steady_reward(self, theta) -> np.ndarray:
        """Steady-state reward at arbitrary thresholds, linear between grid points."""
        return np.interp(np.asarray(theta, dtype=float), self.theta, self.reward)

    def rows(self) -> list[dict]:
        return [
            {
                "theta": float(self.theta[i]),
                "reward": float(self.reward[i]),
                "reward_se": float(self.reward_se[i]),
                "dp_gap": float(self.dp_gap[i]),
                "dp_gap_se": float(self.dp_gap_se[i]),
                "accept_rate": float(self.accept_rate[i]),
                "accept_rate_se": float(self.accept_rate_se[i]),
                "feasible": bool(self.feasible[i]),
            }
            for i in range(len(self.theta))
        ]

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "oracle": self.oracle(), "points": self.rows()}

    @classmethod
    def from_dict(cls, d: dict) -> "TradeoffCurve":
        pts = d["points"]
        col = lambda k: np.array([p[k] for p in pts], dtype=float)  # noqa: E731
        return cls(
            col("theta"), col("reward"), col("reward_se"), col("dp_gap"), col("dp_gap_se"),
            col("accept_rate"), col("accept_rate_se"),
            np.array([p["feasible"] for p in pts], dtype=bool), ConstraintSpec(**d["spec"]),
        )


def _fixed_theta_means(env_factory: Callable, theta: float, horizon: int, burn_in: int, seed) -> np.ndarray:
    env = env_factory()
    env.reset(seed)
    acc = np.zeros(3)
    for t in range(horizon):
        obs = env.step(theta)
        if t >= burn_in:
            acc += (obs.reward, obs.dp_gap, obs.accept_rate)
    return acc / (horizon - burn_in)


def oracle_sweep(
    env_factory: Callable,
    grid: ThresholdGrid | Sequence[float],
    spec: ConstraintSpec,
    horizon: int = 3000,
    burn_in: int = 1000,
    seeds: Iterable = range(5),
    map_fn: Callable = map,
) -> TradeoffCurve:
    """Steady-state evaluation of every fixed threshold.

    ``env_factory()`` must return a fresh environment; ``seeds`` are passed
    to ``env.reset``. ``map_fn`` lets callers plug in a process pool.
    """
    if horizon <= burn_in:
        raise ValueError("horizon must exceed burn_in")
    thetas = np.asarray(grid.points if isinstance(grid, ThresholdGrid) else grid, dtype=float)
    seeds = list(seeds)
    cells = [(float(th), s) for th in thetas for s in seeds]
    means = list(map_fn(_SweepCell(env_factory, horizon, burn_in), cells))
    arr = np.asarray(means).reshape(len(thetas), len(seeds), 3)
    mean = arr.mean(axis=1)
    if len(seeds) > 1:
        se = arr.std(axis=1, ddof=1) / math.sqrt(len(seeds))
    else:
        se = np.full_like(mean, np.nan)
    feasible = np.array([spec.is_feasible(dp, a) for dp, a in zip(mean[:, 1], mean[:, 2])])
    return TradeoffCurve(
        thetas, mean[:, 0], se[:, 0], mean[:, 1], se[:, 1], mean[:, 2], se[:, 2], feasible, spec
    )


class _SweepCell:
    # picklable callable so oracle_sweep works with process pools
    def __init__(self, env_factory, horizon, burn_in):
        self.env_factory, self.horizon, self.burn_in = env_factory, horizon, burn_in

    def __call__(self, cell):
        theta, seed = cell
        return _fixed_theta_means(self.env_factory, theta, self.horizon, self.burn_in, seed)


def steady_state_gap(curve: TradeoffCurve, final_thetas: Sequence[float]) -> float | None:
    """Oracle reward minus the mean steady-state reward of each seed's final policy.

    The final policy is the learner's greedy threshold after the last round
    (OFS: the arm chosen without exploration; ZO/PD: the base point).
    """
    orc = curve.oracle()
    if orc is None:
        return None
    return float(orc["reward"] - np.mean(curve.steady_reward(final_thetas)))


# ---------------------------------------------------------------- per-cell summaries


@dataclass(frozen=True)
class CellSummary:
    """Tail metrics and violation of one (algorithm, seed) run."""

    learner: str
    seed: int
    tail_reward: float
    tail_dp_gap: float
    tail_accept_rate: float
    violation: float
    final_theta: float
    absent_group_rounds: int = 0

    def tail_feasible(self, spec: ConstraintSpec) -> bool:
        return spec.is_feasible(self.tail_dp_gap, self.tail_accept_rate)


def summarize_log(log: RunLog, k_tail: int, final_theta: float) -> CellSummary:
    v, _ = cumulative_violation(log.residual_matrix)
    return CellSummary(
        learner=log.learner,
        seed=log.seed,
        tail_reward=tail_mean(log.reward, k_tail),
        tail_dp_gap=tail_mean(log.dp_gap, k_tail),
        tail_accept_rate=tail_mean(log.acc, k_tail),
        violation=v,
        final_theta=float(final_theta),
        absent_group_rounds=log.absent_group_rounds,
    )


@dataclass(frozen=True)
class AlgoSummary:
    """Seed-aggregated tail metrics of one algorithm (one summary row)."""

    learner: str
    reward: SeedStats
    dp_gap: SeedStats
    accept_rate: SeedStats
    violation: SeedStats
    tail_feasible: bool
    steady_gap: float | None = None

    def row(self, task: str) -> dict:
        return {
            "task": task,
            "algorithm": self.learner,
            "reward_mean": self.reward.mean,
            "reward_std": self.reward.std,
            "dp_mean": self.dp_gap.mean,
            "dp_std": self.dp_gap.std,
            "viol_mean": self.violation.mean,
            "viol_std": self.violation.std,
            "acc_mean": self.accept_rate.mean,
            "tail_feasible": self.tail_feasible,
            "steady_gap": self.steady_gap,
        }


def aggregate_cells(cells: Sequence[CellSummary], spec: ConstraintSpec, curve: TradeoffCurve | None = None) -> AlgoSummary:
    names = {c.learner for c in cells}
    if len(names) != 1:
        raise ValueError(f"cells mix learners {sorted(names)}")
    reward = aggregate_seeds([c.tail_reward for c in cells])
    dp = aggregate_seeds([c.tail_dp_gap for c in cells])
    acc = aggregate_seeds([c.tail_accept_rate for c in cells])
    gap = steady_state_gap(curve, [c.final_theta for c in cells]) if curve is not None else None
    return AlgoSummary(
        learner=cells[0].learner,
        reward=reward,
        dp_gap=dp,
        accept_rate=acc,
        violation=aggregate_seeds([c.violation for c in cells]),
        tail_feasible=spec.is_feasible(dp.mean, acc.mean),
        steady_gap=gap,
    )


# ---------------------------------------------------------------- selection rules


@dataclass(frozen=True)
class TuningResult:
    eta: float
    mu: float
    tail_reward: float
    tail_dp_gap: float
    tail_accept_rate: float
    violation: float


def pd_tuning_select(results: Sequence[TuningResult], spec: ConstraintSpec) -> tuple[float, float]:
    """Feasible max tail reward, else min cumulative violation."""
    if not results:
        raise ValueError("no tuning results")
    feasible = [r for r in results if spec.is_feasible(r.tail_dp_gap, r.tail_accept_rate)]
    if feasible:
        best = max(feasible, key=lambda r: r.tail_reward)
    else:
        best = min(results, key=lambda r: r.violation)
    return best.eta, best.mu


@dataclass(frozen=True)
class SettingResult:
    """Seed-averaged outcome of one algorithm in one stress setting."""

    learner: str
    tail_reward: float
    tail_dp_gap: float
    tail_accept_rate: float
    violation: float


def stress_winner(results: Sequence[SettingResult], spec: ConstraintSpec) -> str:
    feasible = [r for r in results if spec.is_feasible(r.tail_dp_gap, r.tail_accept_rate)]
    if feasible:
        return max(feasible, key=lambda r: r.tail_reward).learner
    return min(results, key=lambda r: r.violation).learner


def stress_winrate(settings: Sequence[tuple[ConstraintSpec, Sequence[SettingResult]]]) -> dict[str, float]:
    """Percentage of settings won by each algorithm.

    Every algorithm appearing in any setting is reported, with 0.0 when it
    never wins.
    """
    if not settings:
        raise ValueError("no stress settings")
    names = sorted({r.learner for _, rs in settings for r in rs})
    wins = dict.fromkeys(names, 0)
    for spec, rs in settings:
        wins[stress_winner(rs, spec)] += 1
    return {k: 100.0 * v / len(settings) for k, v in wins.items()}


# ---------------------------------------------------------------- writers


SUMMARY_FIELDS = (
    "task", "algorithm", "reward_mean", "reward_std", "dp_mean", "dp_std",
    "viol_mean", "viol_std", "acc_mean", "tail_feasible", "steady_gap",
)


def write_csv(path: Path, rows: Sequence[dict], fields: Sequence[str] | None = None) -> None:
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in fields})


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def ci_row(task: str, metric: str, ci: BootstrapCI) -> dict:
    return {"task": task, "metric": metric, "point": ci.point, "lo": ci.lo, "hi": ci.hi,
            "level": ci.level, "excludes_zero": ci.excludes_zero()}
