"""n-step Q-learning with target networks, per-head scaling and a head bandit."""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import MDP
from .oracle import value_iteration
from .scaling import (
    ErrorScalerState,
    PopArtState,
    ScaleContext,
    ScalerKind,
    clip_reward,
    popart_observe,
    popart_preserve,
    scale_factor,
    signed_hyperbolic,
    signed_hyperbolic_inv,
)
from .seeding import component_rng
from .stats import EpisodeTrace, sigma_batch, sigma_squared, sigma_with_target_gap
from .values import (
    Coords,
    HeadSpec,
    LinearQ,
    MultiHeadValue,
    OneHot,
    SmallNetQ,
    TabularQ,
    init_value_bias,
)


def n_step_target(rewards, discounts, bootstrap):
    """``sum_k (prod_{j<k} d_j) R_k + (prod_{j<n} d_j) * bootstrap``.

    Works on a single segment (1-D inputs) or a batch (``(B, n)`` arrays with
    a length-``B`` bootstrap).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    discounts = np.asarray(discounts, dtype=np.float64)
    if rewards.shape != discounts.shape:
        raise ValueError(f"rewards {rewards.shape} and discounts {discounts.shape} differ")
    # exclusive cumulative product: weight of R_k is prod_{j<k} d_j
    weights = np.cumprod(discounts, axis=-1)
    lead = np.ones(rewards.shape[:-1] + (1,))
    weights_excl = np.concatenate([lead, weights[..., :-1]], axis=-1)
    out = np.sum(weights_excl * rewards, axis=-1) + weights[..., -1] * np.asarray(bootstrap, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def td_error(target, prediction):
    return target - prediction


def segment_returns(rewards, discounts):
    """Within-segment partial returns (no bootstrap), row by row."""
    g = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[0])
    for k in range(rewards.shape[1] - 1, -1, -1):
        acc = rewards[:, k] + discounts[:, k] * acc
        g[:, k] = acc
    return g


# -- optimizers ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def optimizer_step(kind: str, state, params, gradient, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-6):
    """Pure optimizer step returning ``(new_params, new_state)``.

    ``kind`` is ``"sgd"`` (state ignored) or ``"adam"`` (bias-corrected, with
    ``eps`` added to the square root of the second moment).
    """
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape:
        raise ValueError(f"gradient shape {gradient.shape} does not match params {params.shape}")
    if kind == "sgd":
        return params - lr * gradient, state
    if kind != "adam":
        raise ValueError(f"unknown optimizer {kind!r}")
    if state is None:
        state = AdamState(np.zeros_like(params), np.zeros_like(params))
    if state.m.shape != params.shape:
        raise ValueError("Adam state shape does not match params")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * gradient
    v = beta2 * state.v + (1 - beta2) * gradient * gradient
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


class Optimizer:
    """In-place wrapper over :func:`optimizer_step`."""

    def __init__(self, kind: str = "adam", lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-6):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.kind, self.lr, self.beta1, self.beta2, self.eps = kind, lr, beta1, beta2, eps
        self.state: Optional[AdamState] = None

    def step(self, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        new, self.state = optimizer_step(self.kind, self.state, params, gradient, self.lr,
                                         self.beta1, self.beta2, self.eps)
        update = new - params
        params[:] = new
        return update


# -- head-selection bandit -----------------------------------------------------


class BanditState:
    """Sliding-window mean of undiscounted, unclipped episode returns per head."""

    def __init__(self, n_heads: int, window: int = 50, epsilon: float = 0.1):
        if n_heads < 1:
            raise ValueError("bandit needs at least one head")
        self.window = window
        self.epsilon = epsilon
        self.returns = [deque(maxlen=window) for _ in range(n_heads)]
        self.pulls = np.zeros(n_heads, dtype=np.int64)

    @property
    def n_heads(self) -> int:
        return len(self.returns)

    def means(self) -> np.ndarray:
        return np.array([np.mean(r) if r else np.inf for r in self.returns])


def select_head(bandit: BanditState, rng) -> int:
    """epsilon-greedy over window means; untried heads count as +inf, ties go to the lowest index."""
    if bandit.n_heads == 1:
        return 0
    if rng.random() < bandit.epsilon:
        return int(rng.integers(bandit.n_heads))
    return int(np.argmax(bandit.means()))


def bandit_update(bandit: BanditState, head: int, episode_return: float) -> BanditState:
    bandit.returns[head].append(float(episode_return))
    bandit.pulls[head] += 1
    return bandit


# -- replay ---------------------------------------------------------------------


class SegmentReplay:
    """Uniform FIFO buffer of n-step segments (raw env rewards and continuations)."""

    def __init__(self, capacity: int, n_step: int):
        self.capacity, self.n = capacity, n_step
        self.states = np.zeros(capacity, dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros((capacity, n_step))
        self.conts = np.ones((capacity, n_step))
        self.lengths = np.zeros(capacity, dtype=np.int64)
        self.boot = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self._next = 0

    def add(self, state, action, rewards, conts, boot_state):
        i = self._next
        k = len(rewards)
        self.states[i], self.actions[i], self.boot[i], self.lengths[i] = state, action, boot_state, k
        self.rewards[i] = 0.0
        self.conts[i] = 1.0
        self.rewards[i, :k] = rewards
        self.conts[i, :k] = conts
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng) -> dict:
        idx = rng.integers(self.size, size=batch_size)
        mask = np.arange(self.n)[None, :] < self.lengths[idx, None]
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "conts": self.conts[idx],
            "mask": mask,
            "boot": self.boot[idx],
        }


# -- configuration --------------------------------------------------------------


@dataclass
class LearnerConfig:
    n_step: int = 5
    heads: list = field(default_factory=lambda: [HeadSpec(False, 0.99)])
    target_update_interval: int = 400
    optimizer: str = "adam"
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    scaler: str = "return_based"
    epsilon_greedy: float = 0.1
    batch_size: int = 32
    replay_capacity: int = 10_000
    learning_starts: int = 32
    steps_per_update: int = 1
    sigma_v: float = 1e-2
    value_fn: str = "tabular"
    features: str = "onehot"
    hidden: int = 64
    bandit_window: int = 50
    bandit_epsilon: float = 0.1
    use_target_gap: bool = False
    popart_step_size: float = 1e-3
    popart_lower: float = 1e-3
    popart_upper: float = 1e3
    error_window: int = 10_000
    log_interval: int = 100
    bias_init: bool = False
    trace_scales: bool = False

    def __post_init__(self):
        for name in ("n_step", "target_update_interval", "batch_size", "replay_capacity",
                     "steps_per_update", "log_interval", "error_window", "bandit_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.sigma_v <= 0:
            raise ValueError("sigma_v must be positive")
        self.heads = [h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in self.heads]
        ScalerKind.parse(self.scaler)


def build_value_fn(env: MDP, config: LearnerConfig, rng) -> MultiHeadValue:
    n_heads = len(config.heads)
    if config.features == "onehot":
        feats = OneHot(env.n_states)
        feats.table = np.eye(env.n_states)
    elif config.features == "coords":
        feats = Coords(env)
    elif config.features == "coords+onehot":
        feats = Coords(env, with_onehot=True)
    else:
        raise ValueError(f"unknown feature map {config.features!r}")
    n_feat = feats.n
    if config.value_fn == "tabular":
        vf = TabularQ(env.n_states, env.n_actions, n_heads)
    elif config.value_fn == "linear":
        vf = LinearQ(feats, n_feat, env.n_actions, n_heads)
    elif config.value_fn == "smallnet":
        vf = SmallNetQ(feats, n_feat, env.n_actions, n_heads, hidden=config.hidden,
                       sigma_v=config.sigma_v, rng=rng)
    else:
        raise ValueError(f"unknown value function {config.value_fn!r}")
    popart = {"step_size": config.popart_step_size, "lower": config.popart_lower,
              "upper": config.popart_upper}
    return MultiHeadValue(vf, config.heads, config.scaler, popart=popart,
                          error_window=config.error_window)


# -- the update -----------------------------------------------------------------


def train_step(mh: MultiHeadValue, batch: dict, config: LearnerConfig, optimizer: Optimizer) -> dict:
    """One optimizer step on all heads from a batch of raw n-step segments.

    Per head: transform rewards, build the n-step Q-learning target from the
    target network, compute TD errors, scale them (the batch-local scale
    guards rewards the all-time statistics have not absorbed yet) and
    accumulate ``mean(scaled_error * grad Q)``. Returns per-head metrics.
    """
    states, actions = batch["states"], batch["actions"]
    mask = batch["mask"]
    B = states.size
    rows = np.arange(B)
    vf = mh.vf
    q_boot = mh.unnormalized_q(batch["boot"], target=True).max(axis=2)
    q_online = vf.head_q_values(states)
    coeffs = np.zeros((mh.n_heads, B))
    metrics = []

    for h, head in enumerate(mh.heads):
        kind = head.scaler
        spec = head.spec
        r = clip_reward(batch["rewards"]) if spec.clip else batch["rewards"].copy()
        r[~mask] = 0.0
        d = spec.discount * batch["conts"]
        d[~mask] = 1.0
        boot = q_boot[h]
        if kind is ScalerKind.SIGNED_HYPERBOLIC:
            boot = signed_hyperbolic_inv(boot)
        target = n_step_target(r, d, boot)
        if kind is ScalerKind.SIGNED_HYPERBOLIC:
            target = signed_hyperbolic(target)

        g_seg = segment_returns(r, np.where(mask, d, 0.0))
        s_batch = sigma_batch(np.column_stack([r[mask], d[mask], g_seg[mask]]))

        q_sa = q_online[h, rows, actions]
        if kind is ScalerKind.POPART:
            ps: PopArtState = head.scaler_state
            q_unnorm = ps.sigma * q_sa + ps.mu
            delta = td_error(target, q_unnorm)
            head.scaler_state, corr = popart_observe(ps, target)
            for net in (vf, mh.target):
                w, b = net.output_layer(h)
                w_new, b_new = popart_preserve(corr, w, b)
                if w is not None:
                    w[...] = w_new
                b[...] = b_new
            ps = head.scaler_state
            q_sa = vf.head_q_values(states)[h, rows, actions]
            scaled = (target - ps.mu) / ps.sigma - q_sa
            factor = ps.sigma
            sigma = ps.sigma
        else:
            delta = td_error(target, q_sa)
            if kind is ScalerKind.ERROR_BASED:
                head.scaler_state.observe(delta)
            override = None
            if config.use_target_gap and head.stats.r.count:
                dv2 = float(mh.delta_v2(states)[h])
                override = sigma_with_target_gap(head.stats, dv2)
            ctx = ScaleContext(head.stats, spec.discount, config.sigma_v, s_batch, override)
            factor = scale_factor(kind, head.scaler_state, ctx)
            if kind is ScalerKind.RETURN_BASED and factor < s_batch:
                raise AssertionError("update would use a scale below its own batch scale")
            scaled = delta * 0.0 if math.isinf(factor) else delta / factor
            sigma = sigma_squared(head.stats).sigma if head.stats.r.count else 0.0

        coeffs[h] = scaled / B
        metrics.append({
            "loss_unscaled": float(np.mean(delta**2)),
            "loss_scaled": float(np.mean(scaled**2)),
            "sigma": sigma,
            "sigma_eff": float(factor),
            "sigma_batch": s_batch,
        })

    grad = -vf.head_grad(states, actions, coeffs)
    optimizer.step(vf.params, grad)
    return {"heads": metrics}


def sync_target(mh: MultiHeadValue) -> MultiHeadValue:
    return mh.sync_target()


# -- metrics --------------------------------------------------------------------


METRIC_COLUMNS = (
    "update", "env_steps", "episodes", "head", "discount", "clip", "selected_head",
    "loss_unscaled", "loss_scaled", "sigma", "sigma_eff", "var_r", "var_gamma", "e_g2",
    "value_rmse", "episode_return",
)


class MetricsLog:
    """Rows of per-head interval metrics with a fixed column order."""

    columns = METRIC_COLUMNS

    def __init__(self):
        self.rows: list = []
        self.traces: dict = {}

    def append(self, row: dict) -> None:
        self.rows.append({c: row.get(c, float("nan")) for c in self.columns})

    def column(self, name: str, head: Optional[int] = None) -> np.ndarray:
        return np.array([r[name] for r in self.rows if head is None or r["head"] == head], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    return repr(float(x))


# -- driver -----------------------------------------------------------------------


class Learner:
    """Acting loop, replay, statistics ingestion and updates for one run."""

    def __init__(self, env: MDP, config: LearnerConfig, seed: int, oracle_q=None, eval_states=None):
        self.env, self.config, self.seed = env, config, seed
        self.act_rng = component_rng(seed, "acting")
        self.replay_rng = component_rng(seed, "replay")
        self.bandit_rng = component_rng(seed, "bandit")
        self.mh = build_value_fn(env, config, component_rng(seed, "init"))
        self.optimizer = Optimizer(config.optimizer, config.learning_rate, config.adam_beta1,
                                   config.adam_beta2, config.adam_eps)
        self.replay = SegmentReplay(config.replay_capacity, config.n_step)
        self.bandit = BanditState(self.mh.n_heads, config.bandit_window, config.bandit_epsilon)
        self.oracle_q = oracle_q
        self.eval_states = (np.arange(env.n_states) if eval_states is None
                            else np.asarray(eval_states))
        self.updates = 0
        self.env_steps = 0
        self.episodes = 0
        self.episode_starts: list = []
        self._pending = []  # (reward, cont) not yet in the statistics
        self._episode = []  # (state, action, reward, cont, next_state)
        self._state = None
        self._head = 0
        self._recent_returns: list = []
        self._last_return = float("nan")
        self._bias_done = not config.bias_init

    # acting -----------------------------------------------------------------------

    def _start_episode(self):
        self.episode_starts.append(self.env_steps)
        self._state = self.env.reset(self.act_rng)
        self._episode = []
        self._head = select_head(self.bandit, self.bandit_rng)

    def _act(self):
        q = self.mh.unnormalized_q([self._state])[self._head, 0]
        if self.act_rng.random() < self.config.epsilon_greedy:
            return int(self.act_rng.integers(self.env.n_actions))
        return int(np.argmax(q))

    def env_step(self):
        if self._state is None:
            self._start_episode()
        s = self._state
        a = self._act()
        s2, r, c = self.env.step(s, a, self.act_rng)
        self.env_steps += 1
        self._episode.append((s, a, r, c, s2))
        self._pending.append((r, c))
        n = self.config.n_step
        if len(self._episode) >= n:
            self._emit(len(self._episode) - n, n)
        self._state = s2
        timeout = len(self._episode) >= self.env.timeout
        if c == 0.0 or timeout:
            for start in range(max(len(self._episode) - n + 1, 0), len(self._episode)):
                self._emit(start, len(self._episode) - start)
            self._finish_episode(truncated=c != 0.0)

    def _emit(self, start, length):
        seg = self._episode[start:start + length]
        self.replay.add(seg[0][0], seg[0][1], [t[2] for t in seg], [t[3] for t in seg], seg[-1][4])

    def _flush_pending(self):
        if not self._pending:
            return
        r, c = np.array(self._pending).T
        for head in self.mh.heads:
            hr = clip_reward(r) if head.spec.clip else r
            head.stats.observe_transitions(hr, head.spec.discount * c)
        self._pending = []

    def _finish_episode(self, truncated: bool):
        self._flush_pending()
        rewards = np.array([t[2] for t in self._episode])
        conts = np.array([t[3] for t in self._episode])
        for head in self.mh.heads:
            hr = clip_reward(rewards) if head.spec.clip else rewards
            head.stats.observe_returns(EpisodeTrace(hr, head.spec.discount * conts, truncated=truncated))
        total = float(rewards.sum())
        bandit_update(self.bandit, self._head, total)
        self._recent_returns.append(total)
        self._last_return = total
        self.episodes += 1
        self._state = None
        # wait for an episode that produced exact returns (time-outs do not)
        if not self._bias_done and all(head.stats.g.count for head in self.mh.heads):
            for h, head in enumerate(self.mh.heads):
                init_value_bias(self.mh.vf, head.stats, head=h)
            self.mh.sync_target()
            self._bias_done = True

    # learning ---------------------------------------------------------------------

    def value_rmse(self, head: int = 0) -> float:
        if self.oracle_q is None:
            return float("nan")
        q = self.mh.unnormalized_q(self.eval_states)[head]
        ref = self.oracle_q[head][self.eval_states]
        return float(np.sqrt(np.mean((q - ref) ** 2)))

    def update(self) -> dict:
        self._flush_pending()
        batch = self.replay.sample(self.config.batch_size, self.replay_rng)
        out = train_step(self.mh, batch, self.config, self.optimizer)
        self.updates += 1
        if self.updates % self.config.target_update_interval == 0:
            self.mh.sync_target()
        return out

    def ready(self) -> bool:
        return (self.replay.size >= self.config.batch_size
                and self.env_steps >= self.config.learning_starts and self._bias_done)

    def run(self, budget: int, log: Optional[MetricsLog] = None) -> MetricsLog:
        """Act and learn until ``budget`` updates have been applied."""
        if budget < 1:
            raise ValueError("budget must be >= 1 update")
        cfg = self.config
        log = log if log is not None else MetricsLog()
        H = self.mh.n_heads
        acc = np.zeros((H, 2))
        n_acc = 0
        trace = None
        if cfg.trace_scales:
            trace = {"sigma": [], "sigma_eff": [], "loss_unscaled": [], "loss_scaled": []}
            steps = log.traces.setdefault("env_steps", [])
        target = self.updates + budget
        while self.updates < target:
            for _ in range(cfg.steps_per_update):
                self.env_step()
            if not self.ready():
                continue
            out = self.update()
            hm = out["heads"]
            acc += [[m["loss_unscaled"], m["loss_scaled"]] for m in hm]
            n_acc += 1
            if trace is not None:
                for key in trace:
                    trace[key].append([m[key] for m in hm])
                steps.append(self.env_steps)
            if self.updates % cfg.log_interval == 0 or self.updates == target:
                self._log_rows(log, acc / n_acc, hm)
                acc[:] = 0.0
                n_acc = 0
        if trace is not None:
            for key, values in trace.items():
                prev = log.traces.get(key)
                arr = np.array(values).T
                log.traces[key] = arr if prev is None else np.hstack([prev, arr])
        return log

    def _log_rows(self, log, losses, head_metrics):
        ret = float(np.mean(self._recent_returns)) if self._recent_returns else self._last_return
        self._recent_returns = []
        for h, head in enumerate(self.mh.heads):
            est = sigma_squared(head.stats) if head.stats.r.count else None
            log.append({
                "update": self.updates, "env_steps": self.env_steps, "episodes": self.episodes,
                "head": h, "discount": head.spec.discount, "clip": head.spec.clip,
                "selected_head": self._head,
                "loss_unscaled": losses[h, 0], "loss_scaled": losses[h, 1],
                "sigma": head_metrics[h]["sigma"], "sigma_eff": head_metrics[h]["sigma_eff"],
                "var_r": est.var_r if est else float("nan"),
                "var_gamma": est.var_gamma if est else float("nan"),
                "e_g2": est.e_g2 if est else float("nan"),
                "value_rmse": self.value_rmse(h), "episode_return": ret,
            })


def run_training(env: MDP, config: LearnerConfig, budget: int, seed: int, oracle: bool = True,
                 eval_states=None) -> MetricsLog:
    """Train from scratch for ``budget`` updates; deterministic in ``seed``.

    With ``oracle=True`` value RMSE is measured against value iteration on
    the environment model, per head (discount and reward clipping).
    """
    oracle_q = None
    if oracle:
        oracle_q = [value_iteration(env, h.discount, h.clip) for h in config.heads]
    learner = Learner(env, config, seed, oracle_q=oracle_q,
                      eval_states=eval_states if eval_states is not None else getattr(env, "eval_states", None))
    return learner.run(budget)
