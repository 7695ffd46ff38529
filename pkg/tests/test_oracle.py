import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdscale.env import ChainMDP, RegressionSpec, gen_scenario, random_mdp_suite
from tdscale.oracle import (
    OracleReport,
    adam_fixed_point,
    adam_steady_update,
    block_means,
    dominance_check,
    empirical_delta_variance,
    exact_sequence_moments,
    noise_amplification_run,
    policy_evaluation,
    scenario_report,
    scenario_scale_ratio,
    transient_ratio,
    uniform_policy,
    value_iteration,
)
from tdscale.stats import EpisodeTrace, ReturnStats

TWO_STEP = EpisodeTrace([1.0, 1.0], [1.0, 0.0])


def stream(traces):
    s = ReturnStats()
    for tr in traces:
        s.accumulate_episode(tr)
    return s


def test_report_relative_error():
    assert OracleReport("x", 2.0, 2.5).rel_error == 0.25
    assert OracleReport("x", 0.0, 1e-13).rel_error == pytest.approx(0.1)
    assert OracleReport("x", 4.0, 3.0, 7).to_dict()["rel_error"] == 0.25


def test_exact_moments_two_step():
    m = exact_sequence_moments([TWO_STEP])
    assert (m.var_r, m.var_gamma, m.e_g2) == (0.0, 0.25, 2.5)
    assert m.e_g == 1.5 and m.var_g == 0.25 and m.gamma_bar == 0.5


def test_exact_moments_all_zero():
    m = exact_sequence_moments([EpisodeTrace(np.zeros(4), np.zeros(4))] * 3)
    assert (m.var_r, m.var_gamma, m.e_g2, m.e_g, m.var_g) == (0.0, 0.0, 0.0, 0.0, 0.0)


def test_exact_moments_reject_truncated_and_empty():
    with pytest.raises(ValueError, match="truncated"):
        exact_sequence_moments([EpisodeTrace([1.0], [1.0], truncated=True)])
    with pytest.raises(ValueError):
        exact_sequence_moments([])


def test_stream_matches_exact_on_a_million_transitions():
    rng = np.random.default_rng(0)
    traces, n = [], 0
    while n < 1_000_000:
        T = int(rng.integers(1, 40))
        gamma = float(rng.choice([0.0, 0.9, 0.99, 1.0]))
        traces.append(EpisodeTrace.constant_discount(rng.normal(rng.normal(), 1.0, T), gamma))
        n += T
    m = exact_sequence_moments(traces)
    s = stream(traces)
    for oracle, artifact in [(m.var_r, s.r.variance()), (m.var_gamma, s.gamma.variance()),
                             (m.e_g2, s.g.second_moment()), (m.var_g, s.g.variance())]:
        assert OracleReport("q", oracle, artifact).rel_error <= 1e-12


# -- TD-error variance --------------------------------------------------------------------------


def test_delta_variance_zero_values_zero_discount():
    rng = np.random.default_rng(1)
    r = rng.normal(2.0, 3.0, 5000)
    corpus = [EpisodeTrace(r[i:i + 10], np.zeros(10)) for i in range(0, 5000, 10)]
    vd = empirical_delta_variance(corpus, None)
    se = math.sqrt(2.0 / r.size) * 9.0
    assert abs(vd - 9.0) <= 3 * se
    assert vd == float(np.var(r))


def test_delta_variance_zero_values_any_discount():
    rng = np.random.default_rng(2)
    corpus = [EpisodeTrace.constant_discount(rng.normal(size=50), 0.97) for _ in range(40)]
    assert empirical_delta_variance(corpus, None) == exact_sequence_moments(corpus).var_r


def test_delta_variance_needs_samples():
    with pytest.raises(ValueError):
        empirical_delta_variance([TWO_STEP], None, samples=1000)
    with pytest.raises(ValueError):
        empirical_delta_variance([TWO_STEP], None, samples=10)


def test_delta_variance_on_mdp_with_zero_values():
    env = ChainMDP(length=2)
    vd = empirical_delta_variance(env, np.zeros(2), uniform_policy(2), 4000, 0.9, np.random.default_rng(0))
    # rewards are Bernoulli(p) with p the fraction of rewarded transitions
    assert 0 < vd < 0.25


def test_transient_ratio_single_task():
    out = transient_ratio(random_mdp_suite()[1], samples=5000, draws=2, seed=1)
    assert 0.1 <= out["ratio"] <= 10
    assert math.isclose(out["sigma2"], out["var_r"] + out["var_gamma"] * out["e_g2"], rel_tol=1e-12)


# -- scenarios -------------------------------------------------------------------------------------


def test_scale_scenario_ratio_is_c():
    assert math.isclose(scenario_scale_ratio(gen_scenario("scale", {"c": 100.0})), 100.0, rel_tol=1e-12)


def test_discount_scenario_ratio_formula():
    sc = gen_scenario("discount", {"gamma_var": 0.0})
    m = exact_sequence_moments([sc.reference])
    expected = math.sqrt(m.var_r / (m.var_r + m.var_gamma * m.e_g2))
    assert math.isclose(scenario_scale_ratio(sc), expected, rel_tol=1e-12)


def test_offset_ratio_continuous_at_zero():
    assert math.isclose(scenario_scale_ratio(gen_scenario("offset", {"b": 1e-9})), 1.0, rel_tol=1e-7)
    assert scenario_scale_ratio(gen_scenario("offset", {"b": 0.0})) == 1.0


def test_scenario_report_fields():
    rep = scenario_report(gen_scenario("scale", {"c": 3.0}))
    assert rep["check"] and math.isclose(rep["sigma_ratio"], 3.0, rel_tol=1e-12)
    # scaling all rewards scales every TD error exactly
    assert math.isclose(rep["td_var_ratio"], 9.0, rel_tol=1e-9)
    assert math.isclose(rep["return_based_ratio"], 3.0, rel_tol=1e-9)


# -- dynamic programming ---------------------------------------------------------------------------


def test_value_iteration_on_chain():
    q = value_iteration(ChainMDP(length=4), 0.9)
    assert np.allclose(q[:, 1], 0.9 ** np.arange(3, -1, -1), rtol=1e-9)
    assert np.all(q.argmax(axis=1) == 1)


def test_policy_evaluation_matches_sampling():
    env = random_mdp_suite()[0]
    v = policy_evaluation(env, 0.9)
    rng = np.random.default_rng(0)
    totals = []
    for _ in range(4000):
        s, g, w = 3, 0.0, 1.0
        while True:
            a = int(rng.integers(env.n_actions))
            s2, r, c = env.step(s, a, rng)
            g += w * r
            w *= 0.9 * c
            if c == 0.0:
                break
            s = s2
        totals.append(g)
    assert abs(np.mean(totals) - v[3]) < 4 * np.std(totals) / math.sqrt(len(totals))


# -- regression and Adam oracles ---------------------------------------------------------------------


def test_noise_run_needs_steps():
    with pytest.raises(ValueError):
        noise_amplification_run(RegressionSpec(), "none", 9999)


def test_noise_run_vanilla_equals_return_based():
    a = noise_amplification_run(RegressionSpec(), "none", 20_000, seed=3)
    b = noise_amplification_run(RegressionSpec(), "return_based", 20_000, seed=3)
    assert np.array_equal(a["loss"], b["loss"])
    assert np.all(b["factor"] == 1.0) and np.all(a["factor"] == 1.0)
    bm = block_means(a["loss"])
    assert np.all(np.diff(bm) < 0)


def test_adam_oracles_agree():
    for g in (1e-9, 1e-6, 1e-3, 10.0):
        assert math.isclose(adam_steady_update(g), float(adam_fixed_point(g)), rel_tol=1e-9)


def test_dominance_flags():
    d = dominance_check(1.0, 50.0, 0.95)
    assert d["applies"] and d["holds"] and d["horizon_term"] == pytest.approx(0.125)
    assert not dominance_check(1.0, 1e4, 0.95)["holds"]
    assert not dominance_check(1.0, 1.0, 0.5)["applies"]


# -- invariants ----------------------------------------------------------------------------------------


@st.composite
def corpora(draw):
    traces = []
    for _ in range(draw(st.integers(1, 5))):
        rewards = draw(st.lists(st.floats(-1e3, 1e3).map(lambda x: 0.0 if abs(x) < 1e-100 else x),
                                 min_size=1, max_size=40))
        gamma = draw(st.sampled_from([0.0, 0.5, 0.9, 0.99, 0.999, 1.0]) | st.floats(0, 1))
        traces.append(EpisodeTrace.constant_discount(rewards, gamma))
    return traces


@pytest.mark.invariant
@given(corpora())
def test_stream_matches_exact(traces):
    m = exact_sequence_moments(traces)
    s = stream(traces)
    g_mag = max(abs(x) for x in np.concatenate([np.cumsum(t.rewards[::-1]) for t in traces])) + 1.0
    r_mag = max(abs(x) for t in traces for x in t.rewards) + 1.0

    def agree(oracle, artifact, mag):
        # relative to the quantity, or to the corpus magnitude when the quantity cancels
        return abs(artifact - oracle) <= 1e-10 * max(abs(oracle), mag)

    assert agree(m.var_r, s.r.variance(), 1e-6 * r_mag**2)
    assert agree(m.var_gamma, s.gamma.variance(), 1e-6)
    assert agree(m.e_g2, s.g.second_moment(), 1e-6 * g_mag**2)
    assert agree(m.e_g, s.g.mean, 1e-6 * g_mag)


@pytest.mark.invariant
@given(corpora())
def test_dominance_reported_for_long_horizons(traces):
    m = exact_sequence_moments(traces)
    d = dominance_check(m.var_r, m.var_g, m.gamma_bar)
    assert d["applies"] == (m.gamma_bar >= 0.9)
    assert d["holds"] == (m.var_r >= (1 - m.gamma_bar) ** 2 * m.var_g)
    assert set(d) == {"gamma_bar", "var_r", "horizon_term", "applies", "holds"}
