"""Error and target scaling strategies behind one interface.

Error scalers divide TD errors by a scale factor. Pop-Art and the signed
hyperbolic transform act on bootstrap targets instead, and reward clipping
acts on rewards, so :func:`scale_error` passes errors through unchanged for
those three kinds.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .stats import ReturnStats, RunningMoments, sigma_effective, sigma_squared


class ScalerKind(enum.Enum):
    RETURN_BASED = "return_based"
    REWARD_STD = "reward_std"
    RETURN_STD = "return_std"
    HORIZON = "horizon"
    REWARD_CLIP = "reward_clip"
    POPART = "popart"
    SIGNED_HYPERBOLIC = "signed_hyperbolic"
    ERROR_BASED = "error_based"
    NONE = "none"

    @classmethod
    def parse(cls, value) -> "ScalerKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown scaler {value!r}; expected one of {names}") from None


@dataclass
class ScaleContext:
    """Problem-side quantities a scaler may consult."""

    stats: Optional[ReturnStats] = None
    gamma: float = 1.0
    sigma_v: float = 1e-2
    sigma_batch: float = 0.0
    # overrides sigma from stats, e.g. the target-gap variant
    sigma_override: Optional[float] = None


@dataclass
class PopArtState:
    mu: float = 0.0
    nu: float = 1.0
    sigma: float = 1.0
    step_size: float = 1e-3
    lower: float = 1e-3
    upper: float = 1e3

    def __post_init__(self):
        if self.step_size <= 0 or self.step_size > 1:
            raise ValueError("popart step_size must lie in (0, 1]")
        if not 0 < self.lower <= self.upper:
            raise ValueError("popart bounds must satisfy 0 < lower <= upper")


@dataclass(frozen=True)
class PopArtCorrection:
    sigma_old: float
    sigma_new: float
    mu_old: float
    mu_new: float

    @property
    def scale_ratio(self) -> float:
        return self.sigma_old / self.sigma_new

    @property
    def shift(self) -> float:
        return (self.mu_old - self.mu_new) / self.sigma_new


def popart_observe(state: PopArtState, target) -> tuple[PopArtState, PopArtCorrection]:
    """Exponential moving averages of target and squared target (no debiasing).

    A batch of targets is folded in one sample at a time.
    """
    beta = state.step_size
    mu, nu = state.mu, state.nu
    for y in np.atleast_1d(np.asarray(target, dtype=np.float64)):
        mu = (1 - beta) * mu + beta * y
        nu = (1 - beta) * nu + beta * y * y
    sigma = min(max(math.sqrt(max(nu - mu * mu, 0.0)), state.lower), state.upper)
    new = replace(state, mu=mu, nu=nu, sigma=sigma)
    return new, PopArtCorrection(state.sigma, sigma, state.mu, mu)


def popart_preserve(correction: PopArtCorrection, w, b):
    """Rescale last-layer weights so unnormalized outputs stay identical.

    The head predicts ``sigma * (w . phi + b) + mu``. ``w`` may be None for
    heads that are a bias table only.
    """
    w_new = None if w is None else np.asarray(w, dtype=np.float64) * correction.scale_ratio
    b_new = np.asarray(b, dtype=np.float64) * correction.scale_ratio + correction.shift
    return w_new, b_new


class ErrorScalerState:
    """Moments of the most recent ``window`` TD errors.

    Until ``min_count`` errors have been seen the scale factor is 1: the
    standard deviation of a handful of samples is not a usable divisor.
    """

    # exact recomputation cadence; bounds drift from add/remove updates
    REFRESH = 1000

    def __init__(self, window: int = 10_000, min_count: int = 100):
        if window < 1:
            raise ValueError("window must be positive")
        if not 1 <= min_count <= window:
            raise ValueError("min_count must lie in [1, window]")
        self.window = int(window)
        self.min_count = int(min_count)
        self.buffer: deque = deque()
        self.moments = RunningMoments()
        self._since_refresh = 0

    def observe(self, delta) -> "ErrorScalerState":
        for x in np.atleast_1d(np.asarray(delta, dtype=np.float64)):
            x = float(x)
            m = self.moments  # _refresh swaps the accumulator
            self.buffer.append(x)
            m.update(x)
            if len(self.buffer) > self.window:
                old = self.buffer.popleft()
                n = m.count - 1
                mean_new = (m.count * m.mean - old) / n
                m.m2 = max(m.m2 - (old - m.mean) * (old - mean_new), 0.0)
                m.mean, m.count = mean_new, n
            self._since_refresh += 1
            if self._since_refresh >= self.REFRESH:
                self._refresh()
        return self

    def _refresh(self) -> None:
        self.moments = RunningMoments.from_values(np.fromiter(self.buffer, dtype=np.float64))
        self._since_refresh = 0

    def std(self) -> float:
        return self.moments.std() if self.moments.count else 0.0


def error_observe(state: ErrorScalerState, delta) -> ErrorScalerState:
    return state.observe(delta)


def clip_reward(r):
    """Clamp rewards to [-1, 1]."""
    return np.clip(r, -1.0, 1.0) if isinstance(r, np.ndarray) else min(max(float(r), -1.0), 1.0)


def signed_hyperbolic(x):
    """``sign(x) (sqrt(|x| + 1) - 1)``, written without cancellation."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    out = np.sign(x) * a / (np.sqrt(a + 1.0) + 1.0)
    return out if out.ndim else float(out)


def signed_hyperbolic_inv(y):
    y = np.asarray(y, dtype=np.float64)
    a = np.abs(y)
    out = np.sign(y) * a * (a + 2.0)
    return out if out.ndim else float(out)


_STATE_TYPES = {
    ScalerKind.POPART: PopArtState,
    ScalerKind.ERROR_BASED: ErrorScalerState,
}


def make_state(kind, **kwargs):
    """Fresh scaler state for ``kind`` (``None`` for stateless kinds)."""
    kind = ScalerKind.parse(kind)
    if kind is ScalerKind.POPART:
        return PopArtState(**kwargs)
    if kind is ScalerKind.ERROR_BASED:
        return ErrorScalerState(**kwargs)
    return None


def scale_factor(kind, state, context: ScaleContext) -> float:
    """The divisor applied to TD errors for ``kind``."""
    kind = ScalerKind.parse(kind)
    expected = _STATE_TYPES.get(kind)
    if expected is None:
        if state is not None:
            raise TypeError(f"{kind.value} scaler takes no state, got {type(state).__name__}")
    elif not isinstance(state, expected):
        raise TypeError(f"{kind.value} scaler needs {expected.__name__}, got {type(state).__name__}")

    floor = context.sigma_v
    if kind in (ScalerKind.NONE, ScalerKind.REWARD_CLIP, ScalerKind.POPART, ScalerKind.SIGNED_HYPERBOLIC):
        return 1.0
    if kind is ScalerKind.HORIZON:
        horizon = math.inf if context.gamma >= 1 else 1.0 / (1.0 - context.gamma)
        return max(horizon, floor)
    if kind is ScalerKind.ERROR_BASED:
        if state.moments.count < state.min_count:
            return 1.0
        return max(state.std(), floor)
    stats = context.stats
    if stats is None or stats.r.count == 0:
        return sigma_effective(0.0, floor, context.sigma_batch) if kind is ScalerKind.RETURN_BASED else floor
    if kind is ScalerKind.RETURN_BASED:
        sigma = context.sigma_override if context.sigma_override is not None else sigma_squared(stats)
        return sigma_effective(sigma, floor, context.sigma_batch)
    if kind is ScalerKind.REWARD_STD:
        return max(stats.r.std(), floor)
    if kind is ScalerKind.RETURN_STD:
        return max(stats.g.std() if stats.g.count else 0.0, floor)
    raise ValueError(kind)  # pragma: no cover


def scale_error(kind, state, delta, context: ScaleContext):
    """Scaled TD error(s) ``delta / scale_factor``."""
    factor = scale_factor(kind, state, context)
    if math.isinf(factor):
        return delta * 0.0
    return delta / factor
