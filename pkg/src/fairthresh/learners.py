"""Online threshold learners.

All learners share one loop contract::

    theta = learner.propose(t)
    obs = env.step(theta)
    learner.update(theta, obs)

``propose`` and ``update`` must alternate. The unconstrained learner only
reads ``obs.reward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .policy import ConfigurationError, Observation, ThresholdGrid


@dataclass(frozen=True)
class OFSConfig:
    c: float = 0.5
    delta: float = 0.05
    eps_exp: float = 0.02

    def __post_init__(self):
        if self.c < 0:
            raise ConfigurationError("c must be >= 0")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError("delta must lie in (0, 1)")
        if not 0.0 <= self.eps_exp < 1.0:
            raise ConfigurationError("eps_exp must lie in [0, 1)")


def ofs_radius(n_i, t: int, k_theta: int, cfg: OFSConfig):
    """Confidence radius sqrt(c log((t+1) K / delta) / max(1, n_i)).

    Works elementwise when ``n_i`` is an array of visit counts.
    """
    log_term = math.log((t + 1) * k_theta / cfg.delta)
    return np.sqrt(cfg.c * log_term / np.maximum(1, n_i))


class ArmStats:
    """Visit counts and running means of reward and residuals per arm."""

    def __init__(self, k_theta: int, n_residuals: int):
        self.counts = np.zeros(k_theta, dtype=np.int64)
        self.reward_mean = np.zeros(k_theta)
        self.residual_mean = np.zeros((k_theta, n_residuals))

    def update(self, arm: int, reward: float, residuals) -> None:
        self.counts[arm] += 1
        n = self.counts[arm]
        self.reward_mean[arm] += (reward - self.reward_mean[arm]) / n
        self.residual_mean[arm] += (np.asarray(residuals, dtype=float) - self.residual_mean[arm]) / n

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "reward_mean": self.reward_mean.tolist(),
            "residual_mean": self.residual_mean.tolist(),
        }


def ofs_select(stats: ArmStats, t: int, cfg: OFSConfig) -> int:
    """Deterministic part of the OFS rule (no exploration coin).

    Feasible-set argmax of optimistic reward if any arm passes the screen,
    otherwise argmin of summed optimistic violation. ``np.argmax``/``argmin``
    return the lowest index on ties.
    """
    k = len(stats.counts)
    b = ofs_radius(stats.counts, t, k, cfg)
    upper = stats.residual_mean + b[:, None]
    feasible = np.all(upper <= 0.0, axis=1)
    if feasible.any():
        score = np.where(feasible, stats.reward_mean + b, -np.inf)
        return int(np.argmax(score))
    return int(np.argmin(np.maximum(upper, 0.0).sum(axis=1)))


def ofs_propose(stats: ArmStats, t: int, cfg: OFSConfig, rng: np.random.Generator) -> int:
    # exploration coin first, matching the listing order
    if cfg.eps_exp > 0.0 and rng.random() < cfg.eps_exp:
        return int(rng.integers(len(stats.counts)))
    return ofs_select(stats, t, cfg)


class OFSLearner:
    """Optimistic feasible search over a fixed threshold grid."""

    name = "ofs"
    reads_residuals = True

    def __init__(self, grid: ThresholdGrid, n_residuals: int, cfg: OFSConfig, rng: np.random.Generator):
        self.grid = grid
        self.cfg = cfg
        self.rng = rng
        self.stats = ArmStats(grid.k_theta, n_residuals)
        self._pending: int | None = None

    def propose(self, t: int) -> float:
        if self._pending is not None:
            raise RuntimeError("propose() called twice without update()")
        self._pending = ofs_propose(self.stats, t, self.cfg, self.rng)
        return self.grid[self._pending]

    def update(self, theta: float, obs: Observation) -> None:
        if self._pending is None:
            raise RuntimeError("update() without a pending propose()")
        self.stats.update(self._pending, obs.reward, obs.residuals)
        self._pending = None

    def greedy_theta(self, t: int) -> float:
        """Threshold the rule would play at round ``t`` without exploring."""
        return self.grid[ofs_select(self.stats, t, self.cfg)]

    def snapshot(self) -> dict:
        return {"learner": self.name, **self.stats.to_dict()}


@dataclass(frozen=True)
class ZOConfig:
    """One-point zeroth-order settings.

    ``perturb_frac`` and ``step_frac`` scale with the threshold range.
    """

    perturb_frac: float = 0.1
    step_frac: float = 0.02
    theta0: float | None = None  # None: midpoint of the range


class ZeroOrderLearner:
    """Unconstrained bandit gradient descent on the loss -reward.

    Plays theta_bar + sigma_p * u with a Rademacher u, then moves theta_bar
    against the one-point estimate (loss / sigma_p) * u. Residuals are never read.
    """

    name = "unconstrained"
    reads_residuals = False

    def __init__(self, theta_min: float, theta_max: float, cfg: ZOConfig, rng: np.random.Generator):
        width = theta_max - theta_min
        self.lo, self.hi = theta_min, theta_max
        self.sigma_p = cfg.perturb_frac * width
        self.eta = cfg.step_frac * width
        self.theta_bar = 0.5 * (theta_min + theta_max) if cfg.theta0 is None else cfg.theta0
        self.rng = rng
        self._u: float | None = None

    def propose(self, t: int) -> float:
        if self._u is not None:
            raise RuntimeError("propose() called twice without update()")
        self._u = 1.0 if self.rng.random() < 0.5 else -1.0
        return self.theta_bar + self.sigma_p * self._u

    def loss(self, obs) -> float:
        return -obs.reward

    def update(self, theta: float, obs: Observation) -> None:
        if self._u is None:
            raise RuntimeError("update() without a pending propose()")
        grad = self.loss(obs) / self.sigma_p * self._u
        self.theta_bar = float(np.clip(self.theta_bar - self.eta * grad, self.lo, self.hi))
        self._u = None

    def greedy_theta(self, t: int) -> float:
        return self.theta_bar

    def snapshot(self) -> dict:
        return {"learner": self.name, "theta_bar": self.theta_bar}


@dataclass(frozen=True)
class PDConfig:
    eta: float = 0.03
    mu: float = 0.1
    perturb_frac: float = 0.1
    theta0: float | None = None

    def __post_init__(self):
        if self.eta <= 0 or self.mu <= 0:
            raise ConfigurationError("primal and dual steps must be > 0")


class PrimalDualLearner(ZeroOrderLearner):
    """Zeroth-order descent on the Lagrangian -r + sum_j lambda_j g_j with
    projected dual ascent on the observed residuals."""

    name = "primal_dual"
    reads_residuals = True

    def __init__(
        self,
        theta_min: float,
        theta_max: float,
        n_residuals: int,
        cfg: PDConfig,
        rng: np.random.Generator,
    ):
        super().__init__(theta_min, theta_max, ZOConfig(cfg.perturb_frac, 0.0, cfg.theta0), rng)
        self.eta = cfg.eta
        self.mu = cfg.mu
        self.lambdas = np.zeros(n_residuals)

    def loss(self, obs: Observation) -> float:
        return -obs.reward + float(self.lambdas @ obs.residuals)

    def update(self, theta: float, obs: Observation) -> None:
        # primal step uses the multipliers in force when theta was played
        super().update(theta, obs)
        self.lambdas = pd_dual_step(self.lambdas, obs.residuals, self.mu)

    def snapshot(self) -> dict:
        return {"learner": self.name, "theta_bar": self.theta_bar, "lambdas": self.lambdas.tolist()}


def pd_dual_step(lambdas: np.ndarray, residuals, mu: float) -> np.ndarray:
    return np.maximum(0.0, np.asarray(lambdas) + mu * np.asarray(residuals, dtype=float))
