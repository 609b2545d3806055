"""Closed-loop environments.

Both families follow the same round structure: sample a batch from the
current state, score the played threshold, then move the state using only
the group-wise acceptance rates of that batch. The state update is an affine
contraction toward a base point, forced by ``acc_g - acc_ref`` (0.5 for
MVE-S, configurable for the semi-synthetic family).

* :class:`MVESEnv` - synthetic. Group score means drift with acceptance.
* :class:`SemiSynEnv` - dataset-backed. Per-group mixture weight between a
  high-score and a low-score pool drifts with acceptance.

A group missing from a batch has no acceptance rate; its state then relaxes
toward the base point without forcing.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .policy import ConfigurationError, ConstraintSpec, IndividualBatch, Observation, compute_observation


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


@dataclass
class MVESConfig:
    base_means: tuple[float, float] = (-0.5, 0.5)
    rho: float = 0.9
    kappa: float = 0.4
    sigma: float = 1.0
    p_group1: float = 0.5
    label_w: float = 2.0
    label_b: float = 0.0
    n: int = 256
    c_fp: float = 0.5
    constraints: ConstraintSpec = field(default_factory=lambda: ConstraintSpec(epsilon=0.06))

    def validate(self):
        if not 0.0 < self.rho < 1.0:
            raise ConfigurationError(f"rho must lie in (0, 1) for a contraction, got {self.rho}")
        if self.sigma <= 0:
            raise ConfigurationError("sigma must be > 0")
        if self.n < 1:
            raise ConfigurationError("batch size n must be >= 1")
        if not 0.0 <= self.p_group1 <= 1.0:
            raise ConfigurationError("p_group1 must be a probability")
        if self.kappa < 0:
            raise ConfigurationError("kappa must be >= 0")

    @property
    def box_halfwidth(self) -> float:
        return self.kappa / (1.0 - self.rho)


@dataclass
class SemiSynConfig:
    rho: float = 0.9
    kappa: float = 0.3
    w_init: float = 0.5
    w_lo: float = 0.05
    w_hi: float = 0.95
    acc_ref: float = 0.5
    p_group1: float | None = None  # None: use the group share stored in the pools
    n: int = 256
    c_fp: float = 0.5
    constraints: ConstraintSpec = field(
        default_factory=lambda: ConstraintSpec(0.02, True, 0.30, 0.99)
    )

    def validate(self):
        if not 0.0 < self.rho < 1.0:
            raise ConfigurationError(f"rho must lie in (0, 1) for a contraction, got {self.rho}")
        if not self.w_lo <= self.w_init <= self.w_hi:
            raise ConfigurationError("need w_lo <= w_init <= w_hi")
        if not 0.0 <= self.w_lo <= self.w_hi <= 1.0:
            raise ConfigurationError("mixture clip bounds must lie in [0, 1]")
        if self.n < 1:
            raise ConfigurationError("batch size n must be >= 1")
        if self.kappa < 0:
            raise ConfigurationError("kappa must be >= 0")


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    d["constraints"] = cfg.constraints.to_dict()
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


class MVESEnv:
    """Synthetic closed loop: Gaussian scores whose group means follow acceptance."""

    name = "mves"

    def __init__(self, config: MVESConfig | None = None):
        self.config = config or MVESConfig()
        self.config.validate()
        self.base = np.asarray(self.config.base_means, dtype=float)
        self.mu = self.base.copy()
        self.frozen = False
        self.rng: np.random.Generator | None = None

    def descriptor(self) -> tuple[float, ConstraintSpec, int]:
        return self.config.c_fp, self.config.constraints, self.config.n

    def reset(self, seed) -> None:
        self.config.validate()
        if not self.frozen:
            self.mu = self.base.copy()
        self.rng = make_rng(seed)

    def sample_batch(self) -> IndividualBatch:
        cfg, rng = self.config, self.rng
        n = cfg.n
        groups = (rng.random(n) < cfg.p_group1).astype(np.int8)
        scores = self.mu[groups] + cfg.sigma * rng.standard_normal(n)
        labels = (rng.random(n) < expit(cfg.label_w * scores + cfg.label_b)).astype(np.int8)
        return IndividualBatch(scores, labels, groups)

    def mean_update(self, mu: np.ndarray, acc) -> np.ndarray:
        """Deterministic state map for given group acceptance rates."""
        cfg = self.config
        forcing = np.array([0.0 if a is None else a - 0.5 for a in acc])
        new = (1.0 - cfg.rho) * self.base + cfg.rho * np.asarray(mu) + cfg.kappa * forcing
        h = cfg.box_halfwidth
        return np.clip(new, self.base - h, self.base + h)

    def step(self, theta: float) -> Observation:
        if self.rng is None:
            raise RuntimeError("call reset(seed) before step()")
        c_fp, spec, _ = self.descriptor()
        obs = compute_observation(self.sample_batch(), theta, c_fp, spec)
        if not self.frozen:
            self.mu = self.mean_update(self.mu, obs.accept_rate_by_group)
        return obs

    def snapshot(self) -> dict:
        return {"mu": self.mu.tolist()}

    def restore(self, state: dict) -> None:
        self.mu = np.asarray(state["mu"], dtype=float)


@dataclass(frozen=True)
class GroupPools:
    """Per-group high/low score pools of (score, label) pairs."""

    high_scores: tuple[np.ndarray, np.ndarray]
    high_labels: tuple[np.ndarray, np.ndarray]
    low_scores: tuple[np.ndarray, np.ndarray]
    low_labels: tuple[np.ndarray, np.ndarray]
    quantile: float = 0.5
    group_share: float = 0.5  # fraction of rows in group 1

    def sizes(self) -> dict:
        return {
            g: {"high": len(self.high_scores[g]), "low": len(self.low_scores[g])} for g in (0, 1)
        }


class SemiSynEnv:
    """Dataset-backed closed loop with composition shift between score pools."""

    name = "semisyn"

    def __init__(self, pools: GroupPools, config: SemiSynConfig | None = None):
        self.config = config or SemiSynConfig()
        self.config.validate()
        for g in (0, 1):
            if len(pools.high_scores[g]) == 0 or len(pools.low_scores[g]) == 0:
                raise ConfigurationError(f"group {g} has an empty score pool")
        self.pools = pools
        self.w = np.full(2, self.config.w_init)
        self.frozen = False
        self.rng: np.random.Generator | None = None

    @property
    def p_group1(self) -> float:
        p = self.config.p_group1
        return self.pools.group_share if p is None else p

    def descriptor(self) -> tuple[float, ConstraintSpec, int]:
        return self.config.c_fp, self.config.constraints, self.config.n

    def reset(self, seed) -> None:
        self.config.validate()
        if not self.frozen:
            self.w = np.full(2, self.config.w_init)
        self.rng = make_rng(seed)

    def sample_batch(self) -> IndividualBatch:
        n, rng, pools = self.config.n, self.rng, self.pools
        u = rng.random((3, n))
        groups = (u[0] < self.p_group1).astype(np.int8)
        high = u[1] < self.w[groups]
        scores = np.empty(n)
        labels = np.empty(n, dtype=np.int8)
        for g in (0, 1):
            for is_high, s_pool, y_pool in (
                (True, pools.high_scores[g], pools.high_labels[g]),
                (False, pools.low_scores[g], pools.low_labels[g]),
            ):
                sel = (groups == g) & (high == is_high)
                idx = (u[2, sel] * len(s_pool)).astype(np.int64)
                scores[sel] = s_pool[idx]
                labels[sel] = y_pool[idx]
        return IndividualBatch(scores, labels, groups)

    def mean_update(self, w: np.ndarray, acc) -> np.ndarray:
        cfg = self.config
        forcing = np.array([0.0 if a is None else a - cfg.acc_ref for a in acc])
        new = (1.0 - cfg.rho) * cfg.w_init + cfg.rho * np.asarray(w) + cfg.kappa * forcing
        return np.clip(new, cfg.w_lo, cfg.w_hi)

    def step(self, theta: float) -> Observation:
        if self.rng is None:
            raise RuntimeError("call reset(seed) before step()")
        c_fp, spec, _ = self.descriptor()
        obs = compute_observation(self.sample_batch(), theta, c_fp, spec)
        if not self.frozen:
            self.w = self.mean_update(self.w, obs.accept_rate_by_group)
        return obs

    def snapshot(self) -> dict:
        return {"w": self.w.tolist()}

    def restore(self, state: dict) -> None:
        self.w = np.asarray(state["w"], dtype=float)


def frozen_env(env, state_snapshot: dict | None = None):
    """Copy of ``env`` whose state never moves; batches are i.i.d. from it.

    ``reset`` on the copy only reseeds the sampler.
    """
    out = copy.deepcopy(env)
    if state_snapshot is not None:
        out.restore(state_snapshot)
    out.frozen = True
    return out
