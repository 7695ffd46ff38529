"""Online moment accumulators and the return-based scale formulas.

All accumulators use population variance (``m2 / count``) and float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class EmptyStatisticsError(ValueError):
    """Raised when a statistic is requested from an accumulator with no data."""


@dataclass
class RunningMoments:
    """Mergeable count / mean / sum-of-squared-deviations accumulator."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, x: float) -> "RunningMoments":
        """Welford update with a single observation (in place)."""
        x = float(x)
        if not math.isfinite(x):
            raise ValueError(f"non-finite observation: {x!r}")
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)
        return self

    def update_many(self, xs: Iterable[float]) -> "RunningMoments":
        """Fold a batch in via its exact two-pass moments and the merge rule."""
        xs = np.asarray(xs, dtype=np.float64).ravel()
        if xs.size == 0:
            return self
        if not np.all(np.isfinite(xs)):
            raise ValueError("non-finite observation in batch")
        lo, hi = xs.min(), xs.max()
        # a constant batch must give m2 == 0 exactly; xs.mean() may round
        mean = float(lo) if lo == hi else float(xs.mean())
        batch = RunningMoments(int(xs.size), mean, float(np.sum((xs - mean) ** 2)))
        merged = moments_merge(self, batch)
        self.count, self.mean, self.m2 = merged.count, merged.mean, merged.m2
        return self

    def variance(self) -> float:
        if self.count == 0:
            raise EmptyStatisticsError("variance of an empty accumulator")
        return max(self.m2, 0.0) / self.count

    def std(self) -> float:
        return math.sqrt(self.variance())

    def second_moment(self) -> float:
        return self.variance() + self.mean * self.mean  # pow(x, 2) is not always correctly rounded

    def copy(self) -> "RunningMoments":
        return RunningMoments(self.count, self.mean, self.m2)

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    @classmethod
    def from_values(cls, xs: Iterable[float]) -> "RunningMoments":
        return cls().update_many(xs)


def moments_update(m: RunningMoments, x: float) -> RunningMoments:
    """Pure variant of :meth:`RunningMoments.update`."""
    return m.copy().update(x)


def moments_merge(a: RunningMoments, b: RunningMoments) -> RunningMoments:
    """Combine two accumulators (Chan et al. parallel formula)."""
    if a.count == 0:
        return b.copy()
    if b.count == 0:
        return a.copy()
    n = a.count + b.count
    delta = b.mean - a.mean
    # weighted form keeps the result symmetric in (a, b); equal means stay exact
    mean = a.mean if delta == 0 else (a.count * a.mean + b.count * b.mean) / n
    m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / n)
    return RunningMoments(n, mean, m2)


@dataclass
class EpisodeTrace:
    """Rewards and per-transition discounts of one episode.

    ``discounts[t]`` belongs to the transition leaving step ``t``; a true
    termination has a final discount of 0. ``truncated`` marks a time-out.
    """

    rewards: np.ndarray
    discounts: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64).ravel()
        self.discounts = np.asarray(self.discounts, dtype=np.float64).ravel()
        if self.rewards.size == 0:
            raise ValueError("episode trace must be non-empty")
        if self.rewards.shape != self.discounts.shape:
            raise ValueError(
                f"rewards ({self.rewards.size}) and discounts ({self.discounts.size}) differ in length"
            )
        if np.any(self.discounts < 0) or np.any(self.discounts > 1):
            raise ValueError("discounts must lie in [0, 1]")
        if not self.truncated and self.discounts[-1] != 0:
            raise ValueError("a terminated (non-truncated) trace must end with discount 0")

    def __len__(self) -> int:
        return self.rewards.size

    @classmethod
    def constant_discount(cls, rewards: Sequence[float], gamma: float, truncated: bool = False):
        """Trace with discount ``gamma`` everywhere and 0 on the terminal step."""
        rewards = np.asarray(rewards, dtype=np.float64)
        discounts = np.full(rewards.size, float(gamma))
        if not truncated:
            discounts[-1] = 0.0
        return cls(rewards, discounts, truncated)


def compute_returns(trace: EpisodeTrace) -> np.ndarray:
    """Backward recursion ``G_t = R_t + gamma_t * G_{t+1}``.

    For a truncated trace the value after the cut is taken as 0, so returns
    there are lower bounds only; see :func:`exact_return_mask`.
    """
    r, d = trace.rewards, trace.discounts
    g = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + d[t] * acc
        g[t] = acc
    return g


def exact_return_mask(trace: EpisodeTrace) -> np.ndarray:
    """Boolean mask of the returns that do not depend on the missing tail."""
    if not trace.truncated:
        return np.ones(len(trace), dtype=bool)
    zeros = np.flatnonzero(trace.discounts == 0)
    mask = np.zeros(len(trace), dtype=bool)
    if zeros.size:
        mask[: zeros[-1] + 1] = True
    return mask


@dataclass
class ReturnStats:
    """Reward, discount and return moments for one objective."""

    r: RunningMoments = field(default_factory=RunningMoments)
    g: RunningMoments = field(default_factory=RunningMoments)
    gamma: RunningMoments = field(default_factory=RunningMoments)
    episodes: int = 0

    def observe_transitions(self, rewards, discounts) -> "ReturnStats":
        """Ingest rewards and discounts as soon as they are generated."""
        rewards = np.atleast_1d(np.asarray(rewards, dtype=np.float64))
        discounts = np.atleast_1d(np.asarray(discounts, dtype=np.float64))
        if rewards.shape != discounts.shape:
            raise ValueError("rewards and discounts must align")
        self.r.update_many(rewards)
        self.gamma.update_many(discounts)
        return self

    def observe_returns(self, trace: EpisodeTrace) -> "ReturnStats":
        """Ingest the exact returns of a finished episode (no reward/discount)."""
        g = compute_returns(trace)
        self.g.update_many(g[exact_return_mask(trace)])
        self.episodes += 1
        return self

    def accumulate_episode(self, trace: EpisodeTrace) -> "ReturnStats":
        self.observe_transitions(trace.rewards, trace.discounts)
        return self.observe_returns(trace)

    def merge(self, other: "ReturnStats") -> "ReturnStats":
        return ReturnStats(
            moments_merge(self.r, other.r),
            moments_merge(self.g, other.g),
            moments_merge(self.gamma, other.gamma),
            self.episodes + other.episodes,
        )

    def copy(self) -> "ReturnStats":
        return ReturnStats(self.r.copy(), self.g.copy(), self.gamma.copy(), self.episodes)

    def to_dict(self) -> dict:
        """Flat record, e.g. ``{"r.count": ..., "r.mean": ..., "r.m2": ...}``."""
        out = {}
        for name in ("r", "g", "gamma"):
            for key, value in getattr(self, name).to_dict().items():
                out[f"{name}.{key}"] = value
        out["episodes"] = self.episodes
        return out

    @classmethod
    def from_dict(cls, record: dict) -> "ReturnStats":
        parts = {
            name: RunningMoments(
                int(record[f"{name}.count"]), float(record[f"{name}.mean"]), float(record[f"{name}.m2"])
            )
            for name in ("r", "g", "gamma")
        }
        return cls(episodes=int(record["episodes"]), **parts)


def accumulate_episode(stats: ReturnStats, trace: EpisodeTrace) -> ReturnStats:
    """Pure variant of :meth:`ReturnStats.accumulate_episode`."""
    return stats.copy().accumulate_episode(trace)


@dataclass(frozen=True)
class ScaleEstimate:
    sigma: float
    var_r: float
    var_gamma: float
    e_g2: float

    @property
    def sigma2(self) -> float:
        return self.var_r + self.var_gamma * self.e_g2


def sigma_squared(stats: ReturnStats) -> ScaleEstimate:
    """``sigma^2 = V[R] + V[gamma] * E[G^2]`` from all-time statistics.

    Before any complete return is available ``E[G^2]`` is taken as 0.
    """
    if stats.r.count == 0:
        raise EmptyStatisticsError("no rewards observed yet")
    var_r = stats.r.variance()
    var_gamma = stats.gamma.variance()
    e_g2 = stats.g.second_moment() if stats.g.count else 0.0
    return ScaleEstimate(math.sqrt(var_r + var_gamma * e_g2), var_r, var_gamma, e_g2)


def sigma_effective(estimate, sigma_v: float, sigma_batch: float = 0.0) -> float:
    """``max(sigma, sigma_V, sigma_batch)``; ``estimate`` may be a float."""
    if sigma_v <= 0:
        raise ValueError("sigma_v must be positive")
    sigma = estimate.sigma if isinstance(estimate, ScaleEstimate) else float(estimate)
    return max(sigma, sigma_v, sigma_batch)


def sigma_batch(transitions) -> float:
    """Scale formula applied to the transitions of one batch only.

    ``transitions`` is an ``(N, 3)`` array-like of ``(reward, discount,
    partial_return)`` rows. Partial returns of replayed segments are cut
    short, so this underestimates the true scale in general.
    """
    arr = np.asarray(transitions, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
        raise ValueError("expected a non-empty (N, 3) array of (reward, discount, return)")
    r, d, g = arr.T
    return math.sqrt(float(np.var(r) + np.var(d) * np.mean(g * g)))


def sigma_with_target_gap(stats: ReturnStats, delta_v2: float) -> float:
    """Scale including the online/target value gap ``E[(V' - V)^2]``."""
    if delta_v2 < 0:
        raise ValueError("delta_v2 must be non-negative")
    est = sigma_squared(stats)
    return math.sqrt(est.var_r + est.var_gamma * (est.e_g2 + delta_v2))


def var_gamma_closed_form(gamma_cst: float, T: int) -> float:
    """Discount variance for length-``T`` episodes with constant in-episode discount."""
    if T < 1:
        raise ValueError("T must be >= 1")
    # multiply first so Fraction inputs stay exact
    return gamma_cst**2 * (T - 1) / T**2


def brownian_var_g(var_r: float, gamma_bar: float) -> float:
    """Return variance under the Brownian-motion approximation ``V[R] / (1 - gamma_bar)``."""
    if gamma_bar >= 1:
        raise ValueError("gamma_bar must be < 1 (the horizon diverges at 1)")
    return var_r / (1.0 - gamma_bar)
