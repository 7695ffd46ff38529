"""Action-value functions with hand-written gradients.

Every value function keeps its parameters in one flat float64 vector (so
optimizers and serialization see a single array) and exposes named views
into it. All of them support several output heads: tabular and linear
heads are independent, while :class:`SmallNetQ` heads share a ReLU hidden
layer whose incoming gradient from each head is scaled by ``1/sqrt(n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .scaling import ScalerKind, make_state
from .stats import EmptyStatisticsError, ReturnStats

HEAD_DISCOUNTS = (0.0, 0.9, 0.99, 0.999, 1.0)


class OneHot:
    def __init__(self, n: int):
        self.n = n

    def __call__(self, states) -> np.ndarray:
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        out = np.zeros((states.size, self.n))
        out[np.arange(states.size), states] = 1.0
        return out


class Coords:
    """Coordinate features from ``env.coords``, cached per state."""

    def __init__(self, env, with_onehot: bool = False):
        table = np.stack([env.coords(s) for s in range(env.n_states)])
        if with_onehot:
            table = np.hstack([table, np.eye(env.n_states)])
        self.table = table
        self.n = table.shape[1]

    def __call__(self, states) -> np.ndarray:
        return self.table[np.atleast_1d(np.asarray(states, dtype=np.int64))]


class ValueFn:
    """Base class: flat parameter vector plus a layout of named blocks."""

    kind = "base"

    def __init__(self, layout: Sequence[tuple], n_actions: int, n_heads: int):
        self.layout = [(name, tuple(shape)) for name, shape in layout]
        self.n_actions = n_actions
        self.n_heads = n_heads
        size = sum(int(np.prod(shape)) for _, shape in self.layout)
        self.params = np.zeros(size)
        self._bind()

    def _bind(self):
        self.views = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            self.views[name] = self.params[offset:offset + n].reshape(shape)
            offset += n

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.params.shape:
            raise ValueError(f"expected {self.params.shape} parameters, got {flat.shape}")
        self.params[:] = flat

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = self.params.copy()
        new._bind()
        return new

    # subclasses implement the two batched primitives
    def head_q_values(self, states) -> np.ndarray:
        """Q-values of shape ``(n_heads, batch, n_actions)``."""
        raise NotImplementedError

    def head_grad(self, states, actions, coeffs) -> np.ndarray:
        """Gradient of ``sum_h sum_i coeffs[h, i] * Q_h(s_i, a_i)`` w.r.t. params."""
        raise NotImplementedError

    def output_layer(self, head: int = 0):
        """``(w, b)`` views of a head's final affine layer (``b`` may be None)."""
        raise NotImplementedError

    def q_values(self, states, head: int = 0) -> np.ndarray:
        return self.head_q_values(states)[head]

    def predict(self, state, action, head: int = 0) -> float:
        return float(self.head_q_values([state])[head, 0, action])

    def gradient(self, state, action, head: int = 0) -> np.ndarray:
        coeffs = np.zeros((self.n_heads, 1))
        coeffs[head, 0] = 1.0
        return self.head_grad([state], [action], coeffs)

    def set_output_bias(self, value: float, head: Optional[int] = None) -> None:
        heads = range(self.n_heads) if head is None else [head]
        for h in heads:
            w, b = self.output_layer(h)
            b[...] = value

    def layout_header(self) -> str:
        return ";".join(f"{name}:{'x'.join(map(str, shape))}" for name, shape in self.layout)


class TabularQ(ValueFn):
    kind = "tabular"

    def __init__(self, n_states: int, n_actions: int, n_heads: int = 1):
        self.n_states = n_states
        super().__init__([(f"q{h}", (n_states, n_actions)) for h in range(n_heads)], n_actions, n_heads)

    def head_q_values(self, states):
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        return np.stack([self.views[f"q{h}"][states] for h in range(self.n_heads)])

    def head_grad(self, states, actions, coeffs):
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
        coeffs = np.asarray(coeffs, dtype=np.float64).reshape(self.n_heads, -1)
        grad = np.zeros_like(self.params)
        per_head = self.n_states * self.n_actions
        for h in range(self.n_heads):
            flat = h * per_head + states * self.n_actions + actions
            np.add.at(grad, flat, coeffs[h])
        return grad

    def output_layer(self, head=0):
        return None, self.views[f"q{head}"]


class LinearQ(ValueFn):
    """``Q_h(s, a) = W_h[a] . phi(s) + b_h[a]``."""

    kind = "linear"

    def __init__(self, features: Callable, n_features: int, n_actions: int, n_heads: int = 1):
        self.features = features
        self.n_features = n_features
        layout = []
        for h in range(n_heads):
            layout += [(f"W{h}", (n_actions, n_features)), (f"b{h}", (n_actions,))]
        super().__init__(layout, n_actions, n_heads)

    def head_q_values(self, states):
        phi = self.features(states)
        return np.stack([phi @ self.views[f"W{h}"].T + self.views[f"b{h}"] for h in range(self.n_heads)])

    def head_grad(self, states, actions, coeffs):
        phi = self.features(states)
        actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
        coeffs = np.asarray(coeffs, dtype=np.float64).reshape(self.n_heads, -1)
        grad = np.zeros_like(self.params)
        g = self._grad_views(grad)
        for h in range(self.n_heads):
            onehot = np.zeros((actions.size, self.n_actions))
            onehot[np.arange(actions.size), actions] = coeffs[h]
            g[f"W{h}"][...] = onehot.T @ phi
            g[f"b{h}"][...] = onehot.sum(axis=0)
        return grad

    def _grad_views(self, grad):
        out, offset = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = grad[offset:offset + n].reshape(shape)
            offset += n
        return out

    def output_layer(self, head=0):
        return self.views[f"W{head}"], self.views[f"b{head}"]


class SmallNetQ(LinearQ):
    """One ReLU hidden layer shared by all heads, linear heads on top.

    Output weights are drawn so that initial predictions have standard
    deviation ``sigma_v`` over the probe states (all states when the
    feature map is a lookup table).
    """

    kind = "smallnet"

    def __init__(self, features: Callable, n_features: int, n_actions: int, n_heads: int = 1,
                 hidden: int = 64, sigma_v: float = 1e-2, rng=None, probe_states=None):
        rng = np.random.default_rng(rng)
        self.features = features
        self.n_features = n_features
        self.hidden = hidden
        layout = [("W1", (hidden, n_features)), ("b1", (hidden,))]
        for h in range(n_heads):
            layout += [(f"W{h + 2}", (n_actions, hidden)), (f"b{h + 2}", (n_actions,))]
        ValueFn.__init__(self, layout, n_actions, n_heads)
        self.trunk_scale = 1.0 / math.sqrt(n_heads)
        self.views["W1"][...] = rng.normal(0.0, math.sqrt(2.0 / n_features), (hidden, n_features))
        self.views["b1"][...] = rng.uniform(0.0, 0.1, hidden)
        if probe_states is None:
            probe_states = np.arange(getattr(features, "table", np.zeros((64, 1))).shape[0])
        h_probe = self._hidden(self.features(probe_states))
        rms = math.sqrt(max(float(np.mean(np.sum(h_probe**2, axis=1))), 1e-12))
        for h in range(n_heads):
            self.views[f"W{h + 2}"][...] = rng.normal(0.0, sigma_v / rms, (n_actions, hidden))

    def _hidden(self, phi):
        return np.maximum(phi @ self.views["W1"].T + self.views["b1"], 0.0)

    def head_q_values(self, states):
        hid = self._hidden(self.features(states))
        return np.stack([hid @ self.views[f"W{h + 2}"].T + self.views[f"b{h + 2}"] for h in range(self.n_heads)])

    def head_grad(self, states, actions, coeffs):
        phi = self.features(states)
        pre = phi @ self.views["W1"].T + self.views["b1"]
        hid = np.maximum(pre, 0.0)
        actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
        coeffs = np.asarray(coeffs, dtype=np.float64).reshape(self.n_heads, -1)
        grad = np.zeros_like(self.params)
        g = self._grad_views(grad)
        d_hidden = np.zeros_like(hid)
        rows = np.arange(actions.size)
        for h in range(self.n_heads):
            onehot = np.zeros((actions.size, self.n_actions))
            onehot[rows, actions] = coeffs[h]
            g[f"W{h + 2}"][...] = onehot.T @ hid
            g[f"b{h + 2}"][...] = onehot.sum(axis=0)
            d_hidden += self.trunk_scale * (onehot @ self.views[f"W{h + 2}"])
        d_pre = d_hidden * (pre > 0)
        g["W1"][...] = d_pre.T @ phi
        g["b1"][...] = d_pre.sum(axis=0)
        return grad

    def output_layer(self, head=0):
        return self.views[f"W{head + 2}"], self.views[f"b{head + 2}"]


def measure_sigma_v(vf: ValueFn, probe_states, head: int = 0) -> float:
    """Std of initial predictions over a probe state set (all actions pooled)."""
    return float(np.std(vf.head_q_values(probe_states)[head]))


def init_value_bias(vf: ValueFn, stats: ReturnStats, head: Optional[int] = None) -> ValueFn:
    """Shift the output bias by the mean return seen so far.

    Tabular functions get every entry set to ``E[G]``.
    """
    if stats.g.count == 0:
        raise EmptyStatisticsError("no returns observed; cannot initialise the value bias")
    e_g = stats.g.mean
    heads = range(vf.n_heads) if head is None else [head]
    for h in heads:
        _, b = vf.output_layer(h)
        b[...] = e_g if vf.kind == "tabular" else b + e_g
    return vf


@dataclass
class HeadSpec:
    clip: bool = False
    discount: float = 0.99

    def __post_init__(self):
        if not 0 <= self.discount <= 1:
            raise ValueError("head discount must lie in [0, 1]")


def standard_heads(discounts: Sequence[float] = HEAD_DISCOUNTS) -> list:
    """Unclipped heads for every discount, then clipped heads for every discount."""
    return [HeadSpec(False, g) for g in discounts] + [HeadSpec(True, g) for g in discounts]


@dataclass
class Head:
    spec: HeadSpec
    scaler: ScalerKind
    stats: ReturnStats = field(default_factory=ReturnStats)
    scaler_state: object = None


class MultiHeadValue:
    """A value function with one (HeadSpec, ReturnStats, scaler state) per head."""

    def __init__(self, vf: ValueFn, specs: Sequence[HeadSpec], scaler="return_based",
                 popart: Optional[dict] = None, error_window: int = 10_000):
        if len(specs) != vf.n_heads:
            raise ValueError(f"{len(specs)} head specs for a {vf.n_heads}-head value function")
        if not specs:
            raise ValueError("at least one head is required")
        kind = ScalerKind.parse(scaler)
        self.vf = vf
        self.heads = []
        for spec in specs:
            kwargs = {}
            if kind is ScalerKind.POPART:
                kwargs = dict(popart or {})
            elif kind is ScalerKind.ERROR_BASED:
                kwargs = {"window": error_window}
            self.heads.append(Head(spec, kind, ReturnStats(), make_state(kind, **kwargs)))
        self.target = vf.copy()

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def head_forward(self, state) -> list:
        """One Q-vector per head for a single state."""
        q = self.vf.head_q_values([state])
        return [q[h, 0] for h in range(self.n_heads)]

    def unnormalized_q(self, states, target: bool = False) -> np.ndarray:
        """Head outputs in reward units (undoes Pop-Art normalization)."""
        q = (self.target if target else self.vf).head_q_values(states)
        if self.heads[0].scaler is ScalerKind.POPART:
            for h, head in enumerate(self.heads):
                q[h] = head.scaler_state.sigma * q[h] + head.scaler_state.mu
        return q

    def sync_target(self) -> "MultiHeadValue":
        self.target.set_params(self.vf.params)
        return self

    def delta_v2(self, states) -> np.ndarray:
        """Per-head mean squared online/target gap over ``states``."""
        diff = self.unnormalized_q(states) - self.unnormalized_q(states, target=True)
        return np.mean(diff**2, axis=(1, 2))


def head_forward(mh: MultiHeadValue, state) -> list:
    return mh.head_forward(state)


def dump_params(path, vf: ValueFn) -> None:
    """Flat CSV dump with the layout in the header line."""
    np.savetxt(path, vf.params[None, :], delimiter=",", header=f"{vf.kind};{vf.layout_header()}",
               fmt="%.17g")


def load_params(path, vf: ValueFn) -> ValueFn:
    with open(path) as fh:
        header = fh.readline().lstrip("# ").strip()
    if header != f"{vf.kind};{vf.layout_header()}":
        raise ValueError(f"layout mismatch: file has {header!r}")
    vf.set_params(np.loadtxt(path, delimiter=",", ndmin=1))
    return vf
