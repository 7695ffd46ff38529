"""Synthetic reward sequences and small episodic MDPs.

Scenario generators build a reference reward sequence and a modified
variant of it (scaled, offset, shuffled, sparsified, re-discounted or
re-sampled in time). The MDPs are desk-scale stand-ins for the reward
structures that make scale hard: multi-scale tiles, rare huge spikes and
large constant penalties.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .stats import EpisodeTrace, compute_returns

REFERENCE_LENGTH = 100
REFERENCE_GAMMA = 0.97


def reference_rewards(length: int = REFERENCE_LENGTH) -> np.ndarray:
    """Smooth sinusoid-plus-trend sequence in [0, 1].

    ``r_t = 0.45 + 0.35 sin(2 pi t / 40) + 0.15 t / (length - 1)``
    """
    t = np.arange(length, dtype=np.float64)
    return 0.45 + 0.35 * np.sin(2 * np.pi * t / 40.0) + 0.15 * t / max(length - 1, 1)


class ScenarioKind(enum.Enum):
    SCALE = "scale"
    OFFSET = "offset"
    SHUFFLE = "shuffle"
    SPARSIFY = "sparsify"
    DISCOUNT = "discount"
    RESOLUTION = "resolution"


DEFAULT_SCENARIO_PARAMS = {
    ScenarioKind.SCALE: {"c": 100.0},
    ScenarioKind.OFFSET: {"b": 2.0},
    ScenarioKind.SHUFFLE: {},
    ScenarioKind.SPARSIFY: {"k": 10},
    ScenarioKind.DISCOUNT: {"gamma_var": 0.999},
    ScenarioKind.RESOLUTION: {"k": 4},
}


@dataclass
class Scenario:
    kind: ScenarioKind
    reference: EpisodeTrace
    variant: EpisodeTrace
    gamma_ref: float
    gamma_var: float
    params: dict = field(default_factory=dict)

    def check(self, tol: float = 1e-9) -> bool:
        """Machine check of the defining relation between reference and variant."""
        ref, var = self.reference, self.variant
        if self.kind is ScenarioKind.SCALE:
            return np.allclose(var.rewards, self.params["c"] * ref.rewards, rtol=tol, atol=0)
        if self.kind is ScenarioKind.OFFSET:
            return np.allclose(var.rewards, ref.rewards + self.params["b"], rtol=0, atol=tol)
        if self.kind is ScenarioKind.SHUFFLE:
            a = np.sort(compute_returns(ref))
            b = np.sort(compute_returns(var))
            return np.allclose(a, b, rtol=tol, atol=tol)
        if self.kind is ScenarioKind.SPARSIFY:
            k = self.params["k"]
            dense = np.count_nonzero(ref.rewards)
            sparse = np.count_nonzero(var.rewards)
            return (
                len(var) == len(ref)
                and math.isclose(var.rewards.max(), ref.rewards.max())
                and sparse == dense // k
            )
        if self.kind is ScenarioKind.DISCOUNT:
            return np.array_equal(var.rewards, ref.rewards) and self.gamma_var != self.gamma_ref
        if self.kind is ScenarioKind.RESOLUTION:
            k = self.params["k"]
            return len(var) == k * len(ref) and math.isclose(
                var.rewards.sum(), ref.rewards.sum(), rel_tol=tol
            )
        raise ValueError(self.kind)


def gen_scenario(kind, params: Optional[dict] = None, seed: int = 0) -> Scenario:
    """Build one of the six reference/variant pairs; deterministic in ``seed``."""
    kind = ScenarioKind(kind)
    p = dict(DEFAULT_SCENARIO_PARAMS[kind])
    p.update(params or {})
    gamma = float(p.pop("gamma_ref", REFERENCE_GAMMA))
    length = int(p.pop("length", REFERENCE_LENGTH))
    if not 0 <= gamma <= 1:
        raise ValueError("gamma_ref must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    base = reference_rewards(length)
    ref = EpisodeTrace.constant_discount(base, gamma)
    gamma_var = gamma

    if kind is ScenarioKind.SCALE:
        if p["c"] <= 0:
            raise ValueError("scale factor c must be positive")
        var = EpisodeTrace.constant_discount(p["c"] * base, gamma)
    elif kind is ScenarioKind.OFFSET:
        var = EpisodeTrace.constant_discount(base + p["b"], gamma)
    elif kind is ScenarioKind.SHUFFLE:
        g = compute_returns(ref)[rng.permutation(length)]
        g_next = np.append(g[1:], 0.0)
        var = EpisodeTrace(g - ref.discounts * g_next, ref.discounts.copy())
    elif kind is ScenarioKind.SPARSIFY:
        k = int(p["k"])
        if k < 1:
            raise ValueError("sparsity factor k must be >= 1")
        rewards = np.zeros(length)
        idx = np.sort(rng.choice(length, size=length // k, replace=False))
        rewards[idx] = base.max()
        var = EpisodeTrace.constant_discount(rewards, gamma)
    elif kind is ScenarioKind.DISCOUNT:
        gamma_var = float(p["gamma_var"])
        if not 0 <= gamma_var <= 1:
            raise ValueError("gamma_var must lie in [0, 1]")
        var = EpisodeTrace.constant_discount(base, gamma_var)
    elif kind is ScenarioKind.RESOLUTION:
        k = int(p["k"])
        if k < 1:
            raise ValueError("resolution factor k must be >= 1")
        var = EpisodeTrace.constant_discount(np.repeat(base / k, k), gamma)
    else:  # pragma: no cover
        raise ValueError(kind)
    return Scenario(kind, ref, var, gamma, gamma_var, {k: v for k, v in p.items()})


def write_trace_csv(path, trace: EpisodeTrace) -> None:
    """Export ``t,reward,discount,return`` rows."""
    g = compute_returns(trace)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "reward", "discount", "return"])
        for t, (r, d, gt) in enumerate(zip(trace.rewards, trace.discounts, g)):
            w.writerow([t, repr(float(r)), repr(float(d)), repr(float(gt))])


class MDP:
    """Finite episodic MDP.

    ``step`` returns ``(next_state, reward, discount)`` where the discount is
    the continuation signal (0 on termination, else 1). Learners multiply in
    their own discount. ``model`` exposes expected rewards and continuation
    transition probabilities for dynamic-programming oracles.
    """

    n_states: int
    n_actions: int
    timeout: int

    def reset(self, rng: np.random.Generator) -> int:
        raise NotImplementedError

    def step(self, state: int, action: int, rng: np.random.Generator):
        raise NotImplementedError

    def model(self):
        """``(P, R, start)``: ``P[s, a, s']`` continuation probabilities (rows sum
        to 1 minus the termination probability), ``R[s, a]`` expected reward and
        the start-state distribution."""
        raise NotImplementedError

    def coords(self, state: int) -> np.ndarray:
        """Normalized coordinate features of ``state``."""
        return np.array([state / max(self.n_states - 1, 1)])

    def _check_action(self, action):
        if not 0 <= int(action) < self.n_actions:
            raise ValueError(f"invalid action {action!r} for {self.n_actions} actions")


class ScaledRewardMDP(MDP):
    """``env`` with every reward multiplied by ``c``; dynamics untouched."""

    def __init__(self, env: MDP, c: float):
        if c <= 0:
            raise ValueError("reward scale c must be positive")
        self.env, self.c = env, float(c)
        self.n_states, self.n_actions, self.timeout = env.n_states, env.n_actions, env.timeout

    def reset(self, rng):
        return self.env.reset(rng)

    def step(self, state, action, rng):
        s2, r, cont = self.env.step(state, action, rng)
        return s2, self.c * r, cont

    def model(self):
        P, R, start = self.env.model()
        return P, self.c * R, start

    def coords(self, state):
        return self.env.coords(state)


class ChainMDP(MDP):
    """Left/right chain; stepping right off the last state terminates with a reward."""

    def __init__(self, length: int = 5, terminal_reward: float = 1.0, step_reward: float = 0.0,
                 timeout: int = 100):
        if length < 1:
            raise ValueError("chain length must be >= 1")
        self.length = length
        self.terminal_reward = terminal_reward
        self.step_reward = step_reward
        self.n_states = length
        self.n_actions = 2
        self.timeout = timeout

    def reset(self, rng):
        return 0

    def step(self, state, action, rng=None):
        self._check_action(action)
        if action == 1:
            if state == self.length - 1:
                return state, self.terminal_reward, 0.0
            return state + 1, self.step_reward, 1.0
        return max(state - 1, 0), self.step_reward, 1.0

    def model(self):
        S = self.n_states
        P = np.zeros((S, 2, S))
        R = np.full((S, 2), self.step_reward)
        for s in range(S):
            P[s, 0, max(s - 1, 0)] = 1.0
            if s < S - 1:
                P[s, 1, s + 1] = 1.0
        R[S - 1, 1] = self.terminal_reward
        start = np.zeros(S)
        start[0] = 1.0
        return P, R, start


class GridMDP(MDP):
    """4-connected grid whose reward tiles are terminal.

    Tiles map ``(x, y)`` to a reward magnitude, so a single layout can mix
    objectives at very different scales (e.g. 0.01, 1 and 1000). With
    probability ``slip`` the move is replaced by a uniformly random one.
    Episodes start on a uniformly random non-tile cell.
    """

    MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))

    def __init__(self, width: int = 5, height: int = 5, tiles: Optional[dict] = None,
                 slip: float = 0.1, step_reward: float = 0.0, timeout: int = 200):
        self.width, self.height = width, height
        self.tiles = dict(tiles if tiles is not None else {(0, 0): 0.01, (width - 1, 0): 1.0,
                                                          (width - 1, height - 1): 1000.0})
        for (x, y) in self.tiles:
            if not (0 <= x < width and 0 <= y < height):
                raise ValueError(f"tile {(x, y)} outside the grid")
        self.slip = slip
        self.step_reward = step_reward
        self.n_states = width * height
        self.n_actions = 4
        self.timeout = timeout
        self._starts = np.array([s for s in range(self.n_states) if self._xy(s) not in self.tiles])

    def _xy(self, s):
        return (s % self.width, s // self.width)

    def _move(self, s, a):
        x, y = self._xy(s)
        dx, dy = self.MOVES[a]
        x = min(max(x + dx, 0), self.width - 1)
        y = min(max(y + dy, 0), self.height - 1)
        return y * self.width + x

    def reset(self, rng):
        return int(rng.choice(self._starts))

    def step(self, state, action, rng):
        self._check_action(action)
        if self.slip > 0 and rng.random() < self.slip:
            action = int(rng.integers(4))
        nxt = self._move(state, action)
        tile = self.tiles.get(self._xy(nxt))
        if tile is not None:
            return nxt, self.step_reward + tile, 0.0
        return nxt, self.step_reward, 1.0

    def model(self):
        S = self.n_states
        P = np.zeros((S, 4, S))
        R = np.zeros((S, 4))
        for s in range(S):
            for a in range(4):
                probs = np.full(4, self.slip / 4)
                probs[a] += 1 - self.slip
                for b, pb in enumerate(probs):
                    nxt = self._move(s, b)
                    tile = self.tiles.get(self._xy(nxt))
                    R[s, a] += pb * (self.step_reward + (tile or 0.0))
                    if tile is None:
                        P[s, a, nxt] += pb
        start = np.zeros(S)
        start[self._starts] = 1.0 / self._starts.size
        return P, R, start

    def coords(self, state):
        x, y = self._xy(state)
        return np.array([x / max(self.width - 1, 1), y / max(self.height - 1, 1)])


class SpikeMDP(MDP):
    """Chain paying +1 per step with a rare spike state paying ``spike_reward``.

    From position ``spike_position - 1`` the chain enters the spike state
    with probability ``spike_prob`` (or with certainty in episodes listed in
    ``spike_episodes``), and continues at ``spike_position`` afterwards.
    """

    def __init__(self, length: int = 50, spike_position: Optional[int] = None,
                 spike_reward: float = -1e6, spike_prob: float = 1e-4,
                 spike_episodes=(), timeout: int = 1000):
        self.length = length
        self.spike_position = length // 2 if spike_position is None else spike_position
        if not 1 <= self.spike_position < length:
            raise ValueError("spike_position must lie in [1, length)")
        self.spike_reward = spike_reward
        self.spike_prob = spike_prob
        self.spike_episodes = frozenset(spike_episodes)
        self.n_states = length + 1
        self.n_actions = 1
        self.timeout = timeout
        self.spike_state = length
        # value accuracy is judged on the chain positions only
        self.eval_states = np.arange(length)
        self.episode = -1
        self._forced = False

    def reset(self, rng):
        self.episode += 1
        self._forced = self.episode in self.spike_episodes
        return 0

    def step(self, state, action, rng):
        self._check_action(action)
        if state == self.spike_state:
            return self.spike_position, self.spike_reward, 1.0
        if state == self.length - 1:
            return state, 1.0, 0.0
        if state == self.spike_position - 1:
            # one uniform draw per visit keeps replays aligned across spike settings
            u = rng.random()
            if self._forced or u < self.spike_prob:
                self._forced = False
                return self.spike_state, 1.0, 1.0
        return state + 1, 1.0, 1.0

    def model(self, spike_prob: Optional[float] = None):
        p = self.spike_prob if spike_prob is None else spike_prob
        S = self.n_states
        P = np.zeros((S, 1, S))
        R = np.ones((S, 1))
        for s in range(self.length - 1):
            P[s, 0, s + 1] = 1.0
        P[self.spike_position - 1, 0, self.spike_position] = 1 - p
        P[self.spike_position - 1, 0, self.spike_state] = p
        P[self.spike_state, 0, self.spike_position] = 1.0
        R[self.spike_state, 0] = self.spike_reward
        start = np.zeros(S)
        start[0] = 1.0
        return P, R, start

    def coords(self, state):
        pos = self.spike_position - 0.5 if state == self.spike_state else state
        return np.array([pos / (self.length - 1), float(state == self.spike_state)])


class ConstantNegativeMDP(MDP):
    """Fixed-length episodes paying ``-theta`` every step, whatever the action."""

    def __init__(self, theta: float = 3.0, T: int = 100, n_actions: int = 2):
        self.theta = theta
        self.T = T
        self.n_states = T
        self.n_actions = n_actions
        self.timeout = T

    def reset(self, rng):
        return 0

    def step(self, state, action, rng=None):
        self._check_action(action)
        if state == self.T - 1:
            return state, -self.theta, 0.0
        return state + 1, -self.theta, 1.0

    def model(self):
        S, A = self.n_states, self.n_actions
        P = np.zeros((S, A, S))
        for s in range(S - 1):
            P[s, :, s + 1] = 1.0
        R = np.full((S, A), -self.theta)
        start = np.zeros(S)
        start[0] = 1.0
        return P, R, start


class RandomMDP(MDP):
    """Random dynamics with Gaussian rewards and geometric episode lengths.

    Each step terminates with probability ``1 / mean_length``. Expected
    rewards are ``reward_scale * (offset + N(0, 1))`` per ``(s, a)``; observed
    rewards add ``reward_scale * noise * N(0, 1)``. ``gamma`` is the discount
    of the task built on top of this MDP.
    """

    def __init__(self, n_states: int = 16, n_actions: int = 2, reward_scale: float = 1.0,
                 mean_length: float = 50.0, gamma: float = 0.99, offset: Optional[float] = None,
                 noise: float = 0.3, seed: int = 0, timeout: Optional[int] = None):
        rng = np.random.default_rng(seed)
        self.n_states, self.n_actions = n_states, n_actions
        self.reward_scale = float(reward_scale)
        self.mean_length = float(mean_length)
        self.gamma = float(gamma)
        self.offset = float(rng.uniform(-1, 1)) if offset is None else float(offset)
        self.noise = noise
        self.seed = seed
        self.transitions = rng.dirichlet(np.full(n_states, 0.3), size=(n_states, n_actions))
        self.mean_reward = self.reward_scale * (self.offset + rng.normal(size=(n_states, n_actions)))
        self.timeout = int(timeout if timeout is not None else 20 * mean_length)
        self._cum = np.cumsum(self.transitions, axis=-1)

    def draw_reward_table(self, rng) -> np.ndarray:
        """Independent reward table from the same distribution as the task's."""
        return self.reward_scale * (self.offset + rng.normal(size=(self.n_states, self.n_actions)))

    def reset(self, rng):
        return int(rng.integers(self.n_states))

    def step(self, state, action, rng):
        self._check_action(action)
        reward = self.mean_reward[state, action] + self.reward_scale * self.noise * rng.normal()
        nxt = int(np.searchsorted(self._cum[state, action], rng.random() * self._cum[state, action, -1]))
        nxt = min(nxt, self.n_states - 1)
        done = rng.random() < 1.0 / self.mean_length
        return nxt, float(reward), 0.0 if done else 1.0

    def model(self):
        P = self.transitions * (1.0 - 1.0 / self.mean_length)
        start = np.full(self.n_states, 1.0 / self.n_states)
        return P, self.mean_reward.copy(), start


RANDOM_SUITE_GAMMAS = (0.0, 0.9, 0.99, 0.999, 1.0)


def random_mdp_suite(seed: int = 0, n_tasks: int = 10) -> list:
    """Frozen suite of random tasks.

    Reward scales and mean episode lengths are log-uniform over [1e-2, 1e3]
    and [10, 500], drawn stratified (one draw per equal-width log bin) so the
    suite always covers both ranges; discounts cycle through
    ``RANDOM_SUITE_GAMMAS``.
    """
    rng = np.random.default_rng(seed)
    edges = np.linspace(0.0, 1.0, n_tasks + 1)
    u_scale = rng.uniform(edges[:-1], edges[1:])
    u_len = rng.permutation(rng.uniform(edges[:-1], edges[1:]))
    scales = 10 ** (-2 + 5 * u_scale)
    lengths = 10 ** (1 + np.log10(50) * u_len)
    return [
        RandomMDP(reward_scale=float(scales[i]), mean_length=float(lengths[i]),
                  gamma=RANDOM_SUITE_GAMMAS[i % len(RANDOM_SUITE_GAMMAS)],
                  seed=int(rng.integers(2**31)))
        for i in range(n_tasks)
    ]


@dataclass
class RegressionSpec:
    """Linear regression onto a constant zero target from Gaussian inputs."""

    input_dim: int = 100
    step_size: float = 1e-3


def regression_sample(spec: RegressionSpec, rng: np.random.Generator):
    return rng.standard_normal(spec.input_dim), 0.0


def rollout_episode(env: MDP, policy, rng, gamma: float = 1.0):
    """Run one episode under ``policy(state, rng) -> action``.

    Returns ``(states, actions, rewards, continuations, next_states, trace)``;
    the trace uses discounts ``gamma * cont`` and is marked truncated when
    the episode hits ``env.timeout``.
    """
    s = env.reset(rng)
    states, actions, rewards, conts, nexts = [], [], [], [], []
    for _ in range(env.timeout):
        a = policy(s, rng)
        s2, r, c = env.step(s, a, rng)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        conts.append(c)
        nexts.append(s2)
        s = s2
        if c == 0.0:
            break
    conts = np.asarray(conts, dtype=np.float64)
    trace = EpisodeTrace(np.asarray(rewards), gamma * conts, truncated=bool(conts[-1] != 0.0))
    return np.asarray(states), np.asarray(actions), np.asarray(rewards), conts, np.asarray(nexts), trace
