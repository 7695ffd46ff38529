"""Brute-force reference computations.

Everything here is deliberately computed the slow, direct way (two-pass
moments over whole corpora, dynamic programming over explicit models,
Monte Carlo over fresh rollouts) so it can check the streaming code in
:mod:`tdscale.stats` and the approximations behind the scale formula.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .env import MDP, RegressionSpec, Scenario, regression_sample, rollout_episode
from .scaling import ErrorScalerState, ScaleContext, ScalerKind, scale_factor
from .stats import EpisodeTrace, ReturnStats, compute_returns, sigma_squared

MIN_SAMPLES = 1000


@dataclass(frozen=True)
class OracleReport:
    quantity: str
    oracle: float
    artifact: float
    samples: int = 0

    @property
    def rel_error(self) -> float:
        return abs(self.artifact - self.oracle) / max(abs(self.oracle), 1e-12)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rel_error"] = self.rel_error
        return d


@dataclass(frozen=True)
class SequenceMoments:
    var_r: float
    var_gamma: float
    e_g2: float
    e_g: float
    var_g: float
    gamma_bar: float

    @property
    def sigma2(self) -> float:
        return self.var_r + self.var_gamma * self.e_g2

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


def exact_sequence_moments(traces: Sequence[EpisodeTrace]) -> SequenceMoments:
    """Pooled moments over complete episodes, two passes over concatenated arrays."""
    traces = [traces] if isinstance(traces, EpisodeTrace) else list(traces)
    if not traces:
        raise ValueError("empty corpus")
    for tr in traces:
        if tr.truncated:
            raise ValueError("truncated episode in corpus; returns are not exact")
    r = np.concatenate([tr.rewards for tr in traces])
    d = np.concatenate([tr.discounts for tr in traces])
    g = np.concatenate([_returns_by_sum(tr) for tr in traces])

    def var(x):
        m = x.sum() / x.size
        return float(((x - m) ** 2).sum() / x.size)

    return SequenceMoments(var(r), var(d), float((g * g).sum() / g.size), float(g.sum() / g.size),
                           var(g), float(d.sum() / d.size))


def _returns_by_sum(trace: EpisodeTrace) -> np.ndarray:
    # forward sums with explicit discount products; independent of compute_returns
    r, d = trace.rewards, trace.discounts
    T = r.size
    out = np.empty(T)
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            acc += w * r[k]
            w *= d[k]
            if w == 0.0:
                break
        out[t] = acc
    return out


def dominance_check(var_r: float, var_g: float, gamma_bar: float) -> dict:
    """Compare the reward-variance term against ``(1 - gamma_bar)^2 V[G]``.

    Only meaningful for long horizons; reported, never asserted.
    """
    rhs = (1.0 - gamma_bar) ** 2 * var_g
    return {"gamma_bar": gamma_bar, "var_r": var_r, "horizon_term": rhs,
            "applies": gamma_bar >= 0.9, "holds": var_r >= rhs}


# -- TD-error variance -------------------------------------------------------------


def trace_td_errors(trace: EpisodeTrace, values: np.ndarray) -> np.ndarray:
    """``R_t + gamma_t V_{t+1} - V_t`` with the value after the last step taken as 0."""
    v_next = np.append(values[1:], 0.0)
    return trace.rewards + trace.discounts * v_next - values


def empirical_delta_variance(source, value_fn, policy=None, samples: int = MIN_SAMPLES,
                             gamma: float = 1.0, rng=None) -> float:
    """Variance of one-step TD errors under ``value_fn``.

    ``source`` is either a list of traces (``value_fn`` then gives one value
    array per trace, or ``None`` for all-zero values) or an MDP (``value_fn``
    is a state-value vector, ``policy(state, rng) -> action``, and
    transitions are sampled from fresh episodes until ``samples`` are in).
    """
    if samples < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {samples}")
    if isinstance(source, MDP):
        if policy is None:
            raise ValueError("an MDP source needs a policy")
        rng = np.random.default_rng(rng)
        v = np.asarray(value_fn, dtype=np.float64)
        deltas = []
        n = 0
        while n < samples:
            s, _, r, c, s2, _ = rollout_episode(source, policy, rng)
            deltas.append(r + gamma * c * v[s2] - v[s])
            n += s.size
        return float(np.var(np.concatenate(deltas)[:samples]))
    traces = list(source)
    if value_fn is None:
        value_fn = [np.zeros(len(tr)) for tr in traces]
    deltas = np.concatenate([trace_td_errors(tr, np.asarray(v)) for tr, v in zip(traces, value_fn)])
    if deltas.size < samples:
        raise ValueError(f"corpus has {deltas.size} transitions, fewer than {samples}")
    return float(np.var(deltas))


def rotated_return_delta_variance(trace: EpisodeTrace) -> float:
    """Pooled TD-error variance over value functions made of the trace's own returns.

    For every cyclic shift ``k = 1..T-1`` the value sequence is the return
    sequence rotated by ``k``: values of the right scale, offset and
    temporal structure, but not yet attached to the right time steps.
    """
    g = compute_returns(trace)
    T = g.size
    if T < 2:
        raise ValueError("need at least two steps")
    deltas = [trace_td_errors(trace, np.roll(g, -k)) for k in range(1, T)]
    return float(np.var(np.concatenate(deltas)))


def scenario_scale_ratio(scenario: Scenario) -> float:
    """sigma(variant) / sigma(reference) from exact moments."""
    ref = exact_sequence_moments([scenario.reference]).sigma
    var = exact_sequence_moments([scenario.variant]).sigma
    return var / ref


def _stats_of(trace: EpisodeTrace) -> ReturnStats:
    st = ReturnStats()
    st.observe_transitions(trace.rewards, trace.discounts)
    st.observe_returns(trace)
    return st


def scenario_report(scenario: Scenario) -> dict:
    """Scale ratios of every scaler on one scenario, plus the TD-error oracle."""
    ref, var = _stats_of(scenario.reference), _stats_of(scenario.variant)
    floor = 1e-12

    def ratio(kind, gamma_ref=scenario.gamma_ref, gamma_var=scenario.gamma_var):
        a = scale_factor(kind, None, ScaleContext(ref, gamma_ref, floor))
        b = scale_factor(kind, None, ScaleContext(var, gamma_var, floor))
        return b / a

    td_ref = rotated_return_delta_variance(scenario.reference)
    td_var = rotated_return_delta_variance(scenario.variant)
    sigma_ratio = scenario_scale_ratio(scenario)
    td_std_ratio = math.sqrt(td_var / td_ref)
    return {
        "kind": scenario.kind.value,
        "check": scenario.check(),
        "sigma_ratio": sigma_ratio,
        "td_var_ratio": td_var / td_ref,
        "td_std_ratio": td_std_ratio,
        "oracle_over_sigma": td_std_ratio / sigma_ratio,
        "reward_std_ratio": ratio(ScalerKind.REWARD_STD),
        "return_std_ratio": ratio(ScalerKind.RETURN_STD),
        "horizon_ratio": ratio(ScalerKind.HORIZON),
        "return_based_ratio": ratio(ScalerKind.RETURN_BASED),
        "horizon_factor_var": scale_factor(ScalerKind.HORIZON, None,
                                           ScaleContext(var, scenario.gamma_var, floor)),
        "return_based_factor_var": scale_factor(ScalerKind.RETURN_BASED, None,
                                                ScaleContext(var, scenario.gamma_var, floor)),
    }


# -- dynamic programming -------------------------------------------------------------


def policy_evaluation(env: MDP, gamma: float, policy_probs: Optional[np.ndarray] = None,
                      rewards: Optional[np.ndarray] = None) -> np.ndarray:
    """State values of a stochastic policy by a direct linear solve.

    ``policy_probs`` defaults to uniform; ``rewards`` overrides the model's
    expected reward table.
    """
    P, R, _ = env.model()
    if rewards is not None:
        R = np.asarray(rewards, dtype=np.float64)
    S, A = R.shape
    pi = np.full((S, A), 1.0 / A) if policy_probs is None else np.asarray(policy_probs)
    P_pi = np.einsum("sa,sat->st", pi, P)
    r_pi = np.sum(pi * R, axis=1)
    return np.linalg.solve(np.eye(S) - gamma * P_pi, r_pi)


def value_iteration(env: MDP, gamma: float, clip: bool = False, tol: float = 1e-10,
                    max_iter: int = 100_000) -> np.ndarray:
    """Optimal action values on ``env.model()`` (expected rewards, clipped if asked)."""
    P, R, _ = env.model()
    if clip:
        R = np.clip(R, -1.0, 1.0)
    q = np.zeros_like(R)
    for _ in range(max_iter):
        q_new = R + gamma * P @ q.max(axis=1)
        if np.max(np.abs(q_new - q)) < tol * max(1.0, float(np.max(np.abs(q_new)))):
            return q_new
        q = q_new
    return q


def uniform_policy(n_actions: int):
    def act(state, rng):
        return int(rng.integers(n_actions))
    return act


def collect_stats(env: MDP, gamma: float, samples: int, rng) -> ReturnStats:
    """Return statistics of the uniform random policy over at least ``samples`` steps."""
    stats = ReturnStats()
    policy = uniform_policy(env.n_actions)
    n = 0
    while n < samples:
        *_, trace = rollout_episode(env, policy, rng, gamma=gamma)
        stats.observe_transitions(trace.rewards, trace.discounts)
        stats.observe_returns(trace)
        n += len(trace)
    return stats


def transient_ratio(env, samples: int = 20_000, draws: int = 8, seed: int = 0) -> dict:
    """``V[delta] / sigma^2`` for value functions that are right in scale only.

    Each value function is the exact uniform-policy value of an independent
    reward table drawn from the task's own reward distribution, so it has
    return-scale magnitudes and the task's offset but is uncorrelated with
    the true values. The TD-error variance is averaged over ``draws`` such
    functions.
    """
    rng = np.random.default_rng(seed)
    stats = collect_stats(env, env.gamma, samples, rng)
    est = sigma_squared(stats)
    policy = uniform_policy(env.n_actions)
    vds = []
    for _ in range(draws):
        v = policy_evaluation(env, env.gamma, rewards=env.draw_reward_table(rng))
        vds.append(empirical_delta_variance(env, v, policy, samples, env.gamma, rng))
    vd = float(np.mean(vds))
    return {"var_delta": vd, "sigma2": est.sigma2, "ratio": vd / est.sigma2,
            "var_r": est.var_r, "var_gamma": est.var_gamma, "e_g2": est.e_g2}


# -- noise amplification ----------------------------------------------------------------


def noise_amplification_run(spec: RegressionSpec, scaler, steps: int, seed: int = 0,
                            sigma_v: float = 1.0, error_floor: float = 1e-8,
                            error_window: int = 10_000) -> dict:
    """SGD on a linear regression whose target is identically zero.

    The error-based scaler divides by the std of its recent errors, floored
    at ``error_floor``; the return-based scaler sees all-zero rewards, so
    its factor is the floor ``sigma_v``. Returns per-step loss and factor.
    """
    if steps < 10_000:
        raise ValueError("steps must be >= 1e4")
    kind = ScalerKind.parse(scaler)
    rng = np.random.default_rng(seed)
    d = spec.input_dim
    w = rng.normal(0.0, 1.0 / math.sqrt(d), d)
    stats = ReturnStats()
    err = ErrorScalerState(error_window) if kind is ScalerKind.ERROR_BASED else None
    ctx = ScaleContext(stats, 1.0, error_floor if err is not None else sigma_v)
    losses = np.empty(steps)
    factors = np.empty(steps)
    lr = spec.step_size
    for t in range(steps):
        x, y = regression_sample(spec, rng)
        delta = y - float(w @ x)
        if kind is ScalerKind.RETURN_BASED:
            stats.observe_transitions([y], [0.0])
        if err is not None:
            err.observe(delta)
        f = scale_factor(kind, err, ctx)
        w += lr * (delta / f) * x
        losses[t] = delta * delta
        factors[t] = f
    return {"loss": losses, "factor": factors}


def block_means(x: np.ndarray, block: int = 1000) -> np.ndarray:
    n = x.size // block
    return x[: n * block].reshape(n, block).mean(axis=1)


# -- Adam ------------------------------------------------------------------------------


def adam_fixed_point(g, lr: float = 2e-4, eps: float = 1e-6):
    """Steady-state Adam step for a constant gradient: ``lr |g| / (|g| + eps)``."""
    g = np.abs(np.asarray(g, dtype=np.float64))
    return lr * g / (g + eps)


def adam_steady_update(g: float, lr: float = 2e-4, eps: float = 1e-6, steps: int = 5000,
                       beta1: float = 0.9, beta2: float = 0.999) -> float:
    """Run the Adam recurrences (no bias correction shortcut) and return the last step size."""
    m = v = 0.0
    step = 0.0
    for t in range(1, steps + 1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = lr * (m / (1 - beta1**t)) / (math.sqrt(v / (1 - beta2**t)) + eps)
    return abs(step)
