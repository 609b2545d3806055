"""Threshold policy, acceptance utility and constraint residuals.

Everything here is a pure function of its inputs. Environments build an
:class:`Observation` per round with :func:`compute_observation`; learners and
the analysis code only ever see observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RESIDUAL_NAMES = ("dp", "srv_low", "srv_high")


class ConfigurationError(ValueError):
    """Raised for invalid grids, constraint specs or environment settings."""


@dataclass(frozen=True)
class ThresholdGrid:
    theta_min: float
    theta_max: float
    k_theta: int
    points: np.ndarray = field(repr=False, compare=False)

    def __len__(self) -> int:
        return self.k_theta

    def __getitem__(self, i: int) -> float:
        return float(self.points[i])

    @property
    def width(self) -> float:
        return self.theta_max - self.theta_min


def make_grid(theta_min: float, theta_max: float, k_theta: int) -> ThresholdGrid:
    if k_theta < 2:
        raise ConfigurationError(f"grid needs at least 2 points, got k_theta={k_theta}")
    if not theta_min < theta_max:
        raise ConfigurationError(f"theta_min={theta_min} must be < theta_max={theta_max}")
    points = np.linspace(theta_min, theta_max, k_theta)
    points[0], points[-1] = theta_min, theta_max
    points.setflags(write=False)
    return ThresholdGrid(float(theta_min), float(theta_max), int(k_theta), points)


@dataclass(frozen=True)
class IndividualBatch:
    scores: np.ndarray
    labels: np.ndarray
    groups: np.ndarray

    def __post_init__(self):
        n = len(self.scores)
        if n < 1 or len(self.labels) != n or len(self.groups) != n:
            raise ValueError("scores, labels and groups must share a length >= 1")
        for name in ("labels", "groups"):
            arr = getattr(self, name)
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError(f"{name} must contain only 0/1")

    @property
    def n(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class ConstraintSpec:
    """DP tolerance plus an optional overall acceptance-rate window.

    Residuals are always ordered ``(dp, srv_low, srv_high)``; with the window
    disabled only the first one exists.
    """

    epsilon: float
    service_enabled: bool = False
    alpha_min: float = 0.0
    alpha_max: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if self.service_enabled:
            if not (0.0 <= self.alpha_min <= self.alpha_max <= 1.0):
                raise ConfigurationError(
                    f"need 0 <= alpha_min <= alpha_max <= 1, got [{self.alpha_min}, {self.alpha_max}]"
                )

    @property
    def n_residuals(self) -> int:
        return 3 if self.service_enabled else 1

    def residuals(self, dp_gap: float, accept_rate: float) -> np.ndarray:
        if not self.service_enabled:
            return np.array([dp_gap - self.epsilon])
        return np.array(
            [dp_gap - self.epsilon, self.alpha_min - accept_rate, accept_rate - self.alpha_max]
        )

    def is_feasible(self, dp_gap: float, accept_rate: float) -> bool:
        return bool(np.all(self.residuals(dp_gap, accept_rate) <= 0.0))

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "service_enabled": self.service_enabled,
            "alpha_min": self.alpha_min,
            "alpha_max": self.alpha_max,
        }


@dataclass(frozen=True)
class Observation:
    """Bandit feedback for the threshold played in one round.

    ``accept_rate_by_group`` holds ``None`` for a group absent from the batch;
    in that case ``dp_gap`` is 0 and ``group_absent`` is set.
    """

    reward: float
    residuals: np.ndarray
    dp_gap: float
    accept_rate: float
    accept_rate_by_group: tuple[float | None, float | None]

    @property
    def group_absent(self) -> bool:
        return None in self.accept_rate_by_group


@dataclass(frozen=True)
class RewardFeedback:
    """Reward-only view of an observation, for learners that must not see residuals."""

    reward: float


def apply_policy(batch: IndividualBatch, theta: float) -> np.ndarray:
    # ties accept
    return (batch.scores >= theta).astype(np.int8)


def batch_reward(batch: IndividualBatch, decisions: np.ndarray, c_fp: float) -> float:
    y = batch.labels
    return float(np.mean(decisions * (y - c_fp * (1 - y))))


def positive_part_sum(residuals) -> float:
    return float(np.sum(np.maximum(np.asarray(residuals, dtype=float), 0.0)))


def compute_observation(
    batch: IndividualBatch, theta: float, c_fp: float, spec: ConstraintSpec
) -> Observation:
    decisions = apply_policy(batch, theta)
    rates: list[float | None] = []
    for g in (0, 1):
        mask = batch.groups == g
        count = int(mask.sum())
        rates.append(float(decisions[mask].sum() / count) if count else None)
    accept_rate = float(decisions.mean())
    if rates[0] is None or rates[1] is None:
        dp_gap = 0.0
    else:
        dp_gap = abs(rates[0] - rates[1])
    return Observation(
        reward=batch_reward(batch, decisions, c_fp),
        residuals=spec.residuals(dp_gap, accept_rate),
        dp_gap=dp_gap,
        accept_rate=accept_rate,
        accept_rate_by_group=(rates[0], rates[1]),
    )
