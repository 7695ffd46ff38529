import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdscale.env import (
    ChainMDP,
    ConstantNegativeMDP,
    GridMDP,
    RANDOM_SUITE_GAMMAS,
    RandomMDP,
    RegressionSpec,
    ScaledRewardMDP,
    ScenarioKind,
    SpikeMDP,
    gen_scenario,
    random_mdp_suite,
    reference_rewards,
    regression_sample,
    rollout_episode,
    write_trace_csv,
)
from tdscale.oracle import exact_sequence_moments, rotated_return_delta_variance
from tdscale.stats import compute_returns


def always(action):
    return lambda s, rng: action


def test_reference_sequence_in_unit_interval():
    r = reference_rewards()
    assert r.size == 100 and r.min() >= 0 and r.max() <= 1


def test_scale_scenario_ratio():
    sc = gen_scenario("scale", {"c": 100.0})
    ref, var = exact_sequence_moments([sc.reference]), exact_sequence_moments([sc.variant])
    assert math.isclose(var.sigma, 100 * ref.sigma, rel_tol=1e-12)


def test_discount_scenario_to_zero():
    sc = gen_scenario("discount", {"gamma_var": 0.0})
    ref, var = exact_sequence_moments([sc.reference]), exact_sequence_moments([sc.variant])
    assert var.sigma2 == var.var_r
    assert ref.sigma2 > ref.var_r and ref.var_gamma * ref.e_g2 > 0


def test_shuffle_scenario_same_return_variance_different_td_variance():
    sc = gen_scenario("shuffle", seed=5)
    ref, var = exact_sequence_moments([sc.reference]), exact_sequence_moments([sc.variant])
    assert math.isclose(ref.var_g, var.var_g, rel_tol=1e-9)
    assert rotated_return_delta_variance(sc.variant) > 5 * rotated_return_delta_variance(sc.reference)


@pytest.mark.parametrize("kind, params", [
    ("scale", {"c": 0.0}), ("scale", {"c": -1.0}), ("sparsify", {"k": 0}),
    ("resolution", {"k": 0}), ("discount", {"gamma_var": 1.5}), ("offset", {"gamma_ref": -0.1}),
])
def test_invalid_scenario_params(kind, params):
    with pytest.raises(ValueError):
        gen_scenario(kind, params)


def test_unknown_scenario_kind():
    with pytest.raises(ValueError):
        gen_scenario("stretch")


def test_scenario_deterministic_in_seed():
    a, b = gen_scenario("sparsify", seed=3), gen_scenario("sparsify", seed=3)
    assert np.array_equal(a.variant.rewards, b.variant.rewards)
    c = gen_scenario("sparsify", seed=4)
    assert not np.array_equal(a.variant.rewards, c.variant.rewards)


def test_trace_csv(tmp_path):
    sc = gen_scenario("scale", {"c": 2.0})
    path = tmp_path / "trace.csv"
    write_trace_csv(path, sc.variant)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,reward,discount,return"
    assert len(lines) == 101
    t, r, d, g = lines[1].split(",")
    assert int(t) == 0 and float(g) == compute_returns(sc.variant)[0]


# -- MDPs -------------------------------------------------------------------------------


def test_chain_always_right():
    rng = np.random.default_rng(0)
    *_, trace = rollout_episode(ChainMDP(length=3, terminal_reward=4.0), always(1), rng, gamma=1.0)
    assert len(trace) == 3
    assert compute_returns(trace)[0] == 4.0


def test_spike_free_episode_returns_step_count():
    env = SpikeMDP(length=30, spike_prob=0.0)
    *_, trace = rollout_episode(env, always(0), np.random.default_rng(0), gamma=1.0)
    assert compute_returns(trace)[0] == len(trace) == 30


def test_spike_episode():
    env = SpikeMDP(length=30, spike_episodes=[0])
    states, _, rewards, *_ = rollout_episode(env, always(0), np.random.default_rng(0))
    assert env.spike_state in states
    assert rewards.min() == -1e6
    assert rewards.sum() == 30 - 1e6


def test_constant_negative_return():
    env = ConstantNegativeMDP(theta=3.0, T=100)
    *_, trace = rollout_episode(env, always(1), np.random.default_rng(0), gamma=1.0)
    assert len(trace) == 100
    assert compute_returns(trace)[0] == -300.0


def test_grid_tiles_terminate_with_their_reward():
    env = GridMDP(width=3, height=1, tiles={(2, 0): 1000.0}, slip=0.0)
    s2, r, c = env.step(1, 1, np.random.default_rng(0))  # move east onto the tile
    assert (s2, r, c) == (2, 1000.0, 0.0)
    s2, r, c = env.step(1, 3, np.random.default_rng(0))
    assert (s2, r, c) == (0, 0.0, 1.0)


def test_grid_reward_scales_span_five_orders():
    tiles = GridMDP().tiles.values()
    assert max(tiles) / min(tiles) == 1e5


@pytest.mark.parametrize("env", [ChainMDP(), GridMDP(), SpikeMDP(), ConstantNegativeMDP()])
def test_invalid_action(env):
    with pytest.raises(ValueError):
        env.step(0, env.n_actions, np.random.default_rng(0))


@pytest.mark.parametrize("env", [ChainMDP(), GridMDP(), SpikeMDP(), ConstantNegativeMDP(),
                                 RandomMDP(seed=2)])
def test_model_rows_are_subprobabilities(env):
    P, R, start = env.model()
    assert P.shape == (env.n_states, env.n_actions, env.n_states) and R.shape == P.shape[:2]
    assert np.all(P >= 0) and np.all(P.sum(axis=2) <= 1 + 1e-12)
    assert math.isclose(start.sum(), 1.0)


def test_grid_model_matches_sampling():
    env = GridMDP(width=3, height=3, tiles={(2, 2): 10.0, (0, 0): 0.5}, slip=0.2)
    P, R, _ = env.model()
    rng = np.random.default_rng(1)
    s, a, n = 4, 0, 20_000
    counts = np.zeros(env.n_states)
    total = 0.0
    for _ in range(n):
        s2, r, c = env.step(s, a, rng)
        total += r
        counts[s2] += c
    assert np.allclose(counts / n, P[s, a], atol=0.02)
    assert abs(total / n - R[s, a]) < 0.1


def test_all_states_reachable_on_grid():
    env = GridMDP()
    P, _, start = env.model()
    reach = start > 0
    for _ in range(env.n_states):
        reach = reach | (P.max(axis=1)[reach].sum(axis=0) > 0) | reach
    # tile cells are entered but terminate, so they never carry continuation mass
    tiles = {y * env.width + x for x, y in env.tiles}
    assert all(reach[s] for s in range(env.n_states) if s not in tiles)


def test_random_suite_frozen():
    suite = random_mdp_suite()
    assert len(suite) == 10
    assert [t.gamma for t in suite] == list(RANDOM_SUITE_GAMMAS) * 2
    scales = np.array([t.reward_scale for t in suite])
    lengths = np.array([t.mean_length for t in suite])
    assert scales.min() >= 1e-2 and scales.max() <= 1e3 and scales.max() / scales.min() > 1e4
    assert lengths.min() >= 10 and lengths.max() <= 500
    again = random_mdp_suite()
    assert all(np.array_equal(a.mean_reward, b.mean_reward) for a, b in zip(suite, again))


def test_scaled_reward_wrapper():
    env = ScaledRewardMDP(ConstantNegativeMDP(theta=3.0, T=5), 10.0)
    assert env.step(0, 0, None) == (1, -30.0, 1.0)
    assert np.all(env.model()[1] == -30.0)
    with pytest.raises(ValueError):
        ScaledRewardMDP(ChainMDP(), 0.0)


# -- regression task ---------------------------------------------------------------------


def test_regression_target_zero():
    spec = RegressionSpec()
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = regression_sample(spec, rng)
        assert y == 0.0 and x.shape == (100,)


def test_regression_expected_square_prediction():
    spec = RegressionSpec()
    rng = np.random.default_rng(1)
    w = rng.normal(size=100) * 0.1
    xs = np.stack([regression_sample(spec, rng)[0] for _ in range(20_000)])
    assert abs(np.mean((xs @ w) ** 2) - w @ w) < 0.05 * (w @ w)


def test_regression_zero_weights_zero_loss():
    x, y = regression_sample(RegressionSpec(), np.random.default_rng(2))
    assert (y - np.zeros(100) @ x) ** 2 == 0.0


# -- invariants -------------------------------------------------------------------------------


scenario_params = st.one_of(
    st.tuples(st.just("scale"), st.fixed_dictionaries({"c": st.floats(1e-3, 1e3)})),
    st.tuples(st.just("offset"), st.fixed_dictionaries({"b": st.floats(-10, 10)})),
    st.tuples(st.just("shuffle"), st.just({})),
    st.tuples(st.just("sparsify"), st.fixed_dictionaries({"k": st.integers(1, 20)})),
    st.tuples(st.just("discount"), st.fixed_dictionaries({"gamma_var": st.floats(0, 1)})),
    st.tuples(st.just("resolution"), st.fixed_dictionaries({"k": st.integers(1, 10)})),
)


@pytest.mark.invariant
@given(scenario_params, st.floats(0, 1), st.integers(20, 200), st.integers(0, 2**32 - 1))
def test_scenarios_satisfy_their_definition(kind_params, gamma, length, seed):
    kind, params = kind_params
    if kind == "discount" and params["gamma_var"] == gamma:
        gamma = 0.5 if gamma != 0.5 else 0.25
    sc = gen_scenario(kind, dict(params, gamma_ref=gamma, length=length), seed)
    assert sc.kind is ScenarioKind(kind)
    assert sc.check()


def _replay(make_env, seed, actions):
    env = make_env()
    rng = np.random.default_rng(seed)
    s = env.reset(rng)
    out = [s]
    for a in actions:
        s2, r, c = env.step(s, a % env.n_actions, rng)
        out.append((s2, r, c))
        s = env.reset(rng) if c == 0.0 else s2
    return out


ENV_FACTORIES = [
    lambda: GridMDP(slip=0.3), lambda: RandomMDP(seed=7), lambda: SpikeMDP(length=10, spike_prob=0.2),
    lambda: ChainMDP(length=4), lambda: ConstantNegativeMDP(T=7),
]


@pytest.mark.invariant
@given(st.sampled_from(range(len(ENV_FACTORIES))), st.integers(0, 2**63 - 1),
       st.lists(st.integers(0, 3), max_size=60))
def test_environments_replay_bit_exactly(which, seed, actions):
    make = ENV_FACTORIES[which]
    assert _replay(make, seed, actions) == _replay(make, seed, actions)


@pytest.mark.invariant
@given(st.integers(1, 25), st.integers(2, 300), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_resolution_preserves_total_reward(k, length, gamma, seed):
    sc = gen_scenario("resolution", {"k": k, "length": length, "gamma_ref": gamma}, seed)
    total = sc.reference.rewards.sum()
    assert len(sc.variant) == k * len(sc.reference)
    assert math.isclose(sc.variant.rewards.sum(), total, rel_tol=1e-9)
