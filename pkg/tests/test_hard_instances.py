import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize, stats

from greedyrates.core import RateParams
from greedyrates.errors import ContractError, DomainError
from greedyrates.hard_instances import (Family, HardInstance, NoiseDataset, c_p, envelopes_hard,
                                        greedy_plugin, growth_coefficient, h_p, holder_constant_plus,
                                        lower_bound_constant, margin_mass_constant, optimal_action_set,
                                        plugin_qhat, q_minus, q_plus, q_value, sample_dgp,
                                        truth_reading, two_point_experiment)

P211 = RateParams(0.5, 2.0, 1.0, 1.0)
P212 = RateParams(0.5, 2.0, 1.0, 2.0)
LATTICE = np.linspace(-1.0, 1.0, 200_001)


def brute_max(inst, x):
    return float(np.max(q_value(np.full_like(LATTICE, x), LATTICE, inst)))


# ---- h_p ----------------------------------------------------------------------


@pytest.mark.parametrize("p", [0.5, 1.0, 2.0, 3.7])
def test_h_p_center_and_endpoints(p):
    assert h_p(0.0, p) == 0.5
    assert h_p(1.0, p) == 1.0
    assert h_p(-1.0, p) == 0.0


def test_h_p_hand_value():
    assert h_p(0.5, 1.0) == pytest.approx(1.5 / (1.5 + 0.5), abs=1e-15)


def test_h_p_domain():
    with pytest.raises(DomainError):
        h_p(1.01, 2.0)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-1, 1), b=st.floats(-1, 1), p=st.floats(0.1, 6))
def test_h_p_symmetry_bounds_monotone(a, b, p):
    assert h_p(-a, p) == pytest.approx(1.0 - h_p(a, p), abs=1e-14)
    assert h_p(a, p) >= 2.0 ** -(p + 1) * (1 + a) ** p - 1e-15
    assert 1.0 - h_p(a, p) >= 2.0 ** -(p + 1) * (1 - a) ** p - 1e-15
    if a <= b:
        assert h_p(a, p) <= h_p(b, p) + 1e-15


# ---- closed forms -------------------------------------------------------------


def test_q_plus_absorbing_and_degenerate():
    inst = HardInstance("plus", 0.7, P211)
    assert np.all(q_plus(np.full(5, 2.0), np.linspace(-1, 1, 5), inst) == 0.0)
    zero = HardInstance("plus", 0.0, P211)
    assert np.all(q_plus(np.zeros(5), np.linspace(-1, 1, 5), zero) == 0.0)


def test_q_plus_hand_value_and_brute_force():
    inst = HardInstance("plus", 0.5, P211)
    assert q_plus(0.1, -1.0, inst) == 0.5
    assert brute_max(inst, 0.1) == pytest.approx(0.5, abs=1e-12)


def test_q_rejects_states_outside_domain():
    inst = HardInstance("plus", 0.5, P211)
    with pytest.raises(DomainError):
        q_plus(1.5, 0.0, inst)
    with pytest.raises(ContractError):
        q_minus(0.5, 0.0, inst)


def test_q_minus_theta_zero():
    inst = HardInstance("minus", 0.0, P211)
    a = np.linspace(-1, 1, 11)
    np.testing.assert_allclose(q_minus(np.full_like(a, 0.3), a, inst), -np.abs(a) ** 2)


def test_q_minus_at_margin_is_optimal_value():
    inst = HardInstance("minus", 0.36, RateParams(0.5, 3.0, 1.0, 1.0))
    val = q_minus(0.4, inst.d_theta, inst)
    assert val == pytest.approx(0.36 ** 1.5, rel=1e-14)
    assert brute_max(inst, 0.4) == pytest.approx(val, abs=1e-9)


def test_q_minus_wrong_sign_gap():
    inst = HardInstance("minus", -0.25, P211)
    d = inst.d_theta
    wrong = q_minus(0.5, d, inst)
    best = brute_max(inst, 0.5)
    assert best == pytest.approx(0.0625, abs=1e-10)
    assert wrong == pytest.approx(-0.0625, abs=1e-15)
    assert best - wrong == pytest.approx(2 * 0.25 * d, abs=1e-10)


def test_minus_is_state_invariant_and_zero_at_absorbing():
    inst = HardInstance("minus", 0.3, P212)
    a = np.full(4, 0.2)
    vals = q_minus(np.array([0.0, 0.4, 1.0, 2.0]), a, inst)
    assert vals[0] == vals[1] == vals[2] and vals[3] == 0.0


# ---- tables -------------------------------------------------------------------


def test_table_rows():
    val, acts = optimal_action_set(HardInstance("plus", 0.5, P211), 0.1)
    assert (val, acts.points) == (0.5, (-1.0,))
    val, acts = optimal_action_set(HardInstance("plus", -0.3, P212), 0.6)
    assert acts.points == (1.0,) and val == pytest.approx(0.36)
    inst = HardInstance("minus", -0.49, P211)
    val, acts = optimal_action_set(inst, 0.2)
    assert acts.points == (-inst.d_theta,) and val == pytest.approx(0.49 ** 2)
    val, acts = optimal_action_set(inst, 2.0)
    assert acts.full and val == 0.0
    _, acts = optimal_action_set(HardInstance("plus", 0.0, P211), 0.0)
    assert acts.full and acts.dist(0.3) == 0.0


@settings(max_examples=60, deadline=None)
@given(theta=st.floats(-1, 1), x=st.floats(0, 1), family=st.sampled_from(["plus", "minus"]))
def test_table_value_matches_brute_force(theta, x, family):
    inst = HardInstance(family, theta, P212)
    val, acts = optimal_action_set(inst, x)
    assert brute_max(inst, x) <= val + 1e-12
    if not acts.full:
        for a in acts.points:
            assert q_value(x, a, inst) == pytest.approx(val, abs=1e-12)


def test_instance_validation_and_config_roundtrip():
    inst = HardInstance("minus", -0.3, P212)
    assert HardInstance.from_config(inst.to_config()) == inst
    with pytest.raises(ContractError):
        HardInstance("plus", 0.5, P211, d_theta=0.3)
    with pytest.raises(ContractError):
        HardInstance("plus", 1.5, P211)
    with pytest.raises(ContractError):
        HardInstance("minus", 0.5, RateParams(0.5, 1.0, 1.0, 1.0))
    with pytest.raises(ContractError):
        HardInstance.from_config({"family": "plus", "theta": 0.1})


def test_margin_widths():
    assert HardInstance("plus", -0.5, P212).d_theta == pytest.approx(0.5)
    assert HardInstance("minus", 0.25, RateParams(0.5, 3.0, 1.0, 1.0)).d_theta == pytest.approx(0.5)


# ---- data and plug-in -----------------------------------------------------------


def test_sample_dgp_degenerate_and_deterministic():
    assert np.all(sample_dgp(HardInstance("plus", 1.0, P211), 100, 0).y == 1)
    assert np.all(sample_dgp(HardInstance("plus", -1.0, P211), 100, 0).y == -1)
    inst = HardInstance("minus", 0.3, P211)
    a, b = sample_dgp(inst, 50, 9), sample_dgp(inst, 50, 9)
    np.testing.assert_array_equal(a.y, b.y)
    assert np.all(a.d == inst.d_theta)
    with pytest.raises(ContractError):
        sample_dgp(inst, 0, 1)


def test_sample_dgp_clt_band():
    inst = HardInstance("plus", 0.0, P211)
    n = 100_000
    hits = [abs(sample_dgp(inst, n, s).ybar) < 4 / math.sqrt(n) for s in range(200)]
    # P(|Z| > 4) = 6.3e-5, so 200 seeds should all land inside
    assert all(hits)


def test_dataset_truth_access_is_recorded():
    data = sample_dgp(HardInstance("plus", 0.2, P211), 10, 0)
    assert not data.truth_accessed
    _ = data.theta_truth
    assert data.truth_accessed


def test_empty_dataset_is_contract_error():
    data = NoiseDataset(np.array([], dtype=int), np.array([]), 0, 0.0)
    with pytest.raises(ContractError):
        plugin_qhat(HardInstance("plus", 0.2, P211), data)


def exact_dataset(inst, n):
    k = round(n * (1 + inst.theta) / 2)
    y = np.r_[np.ones(k, dtype=int), -np.ones(n - k, dtype=int)]
    return NoiseDataset(y, np.full(n, inst.d_theta), 0, inst.theta)


@pytest.mark.parametrize("family", ["plus", "minus"])
def test_plugin_exact_mean_recovers_truth(family):
    inst = HardInstance(family, 0.5, P212)
    data = exact_dataset(inst, 8)
    assert data.ybar == inst.theta
    x = np.linspace(0, 1, 41)
    for a in np.linspace(-1, 1, 21):
        est = plugin_qhat(inst, data).values(x[:, None], np.full((41, 1), a))
        np.testing.assert_allclose(est, q_value(x, np.full(41, a), inst), atol=1e-15)


def sup_error(inst, data):
    qhat = plugin_qhat(inst, data)
    x = np.linspace(0, 1, 401)
    a = np.linspace(-1, 1, 401)
    X, A = np.meshgrid(x, a, indexing="ij")
    est = qhat.evaluator(x[:, None], a[None, :, None].repeat(len(x), 0))
    return float(np.max(np.abs(est - q_value(X, A, inst))))


def test_plugin_sup_error_plus_equals_mean_error():
    inst = HardInstance("plus", 0.3, P211)
    data = sample_dgp(inst, 37, 4)
    assert sup_error(inst, data) == pytest.approx(abs(data.ybar - inst.theta), abs=1e-14)


def test_plugin_sup_error_minus_bounded():
    inst = HardInstance("minus", -0.4, P212)
    for seed in range(5):
        data = sample_dgp(inst, 25, seed)
        assert sup_error(inst, data) <= abs(data.ybar - inst.theta) + 1e-15


# ---- envelopes and constants ------------------------------------------------------


def test_envelope_floor_on_deterministic_data():
    n = 20
    data = sample_dgp(HardInstance("plus", 1.0, P211), n, 0)
    env = envelopes_hard(HardInstance("plus", 1.0, P211), data)
    assert env.delta == n ** -17.0
    assert env.lambda_q == n ** -17.0


@pytest.mark.parametrize("theta", [0.0, 0.3, -0.8])
def test_mean_error_second_moment(theta):
    n = 40
    k = np.arange(n + 1)
    pmf = stats.binom.pmf(k, n, (1 + theta) / 2)
    exact = float(np.sum(pmf * (2 * k / n - 1 - theta) ** 2))
    assert exact == pytest.approx((1 - theta ** 2) / n, rel=1e-10)
    inst = HardInstance("plus", theta, P211)
    draws = np.array([(sample_dgp(inst, n, s).ybar - theta) ** 2 for s in range(4000)])
    assert abs(draws.mean() - exact) <= 4 * draws.std() / math.sqrt(len(draws))


def test_c_p_against_independent_minimizer():
    for p in (1.0, 1.5, 2.0, 3.0):
        res = optimize.minimize_scalar(lambda r: (1 + abs(1 - r) ** p) / (1 + r) ** p,
                                       bounds=(0, 50), method="bounded", options={"xatol": 1e-12})
        # certified value can only sit at or below the oracle's; Brent stalls near kinks
        assert min(res.fun, 1.0) - 1e-7 <= c_p(p) <= min(res.fun, 1.0) + 1e-12
    assert c_p(1.0) == pytest.approx(0.5, abs=1e-12)


def test_holder_constant_plus_lipschitz_case():
    a = np.linspace(-1, 1, 2_000_001)
    slope = np.max(np.abs(np.diff(h_p(a, 2.0)) / np.diff(a)))
    assert holder_constant_plus(2.0, 1.0) == pytest.approx(slope, rel=1e-6)


def test_margin_mass_constants():
    assert margin_mass_constant("plus", P211) == 4.0
    assert margin_mass_constant("plus", RateParams(0.5, 1.0, 0.5, 4.0)) == pytest.approx(2 ** -0.25)
    assert margin_mass_constant("minus", P212) == pytest.approx(c_p(2.0) ** -0.5)


@settings(max_examples=40, deadline=None)
@given(theta=st.floats(-1, 1), family=st.sampled_from(["plus", "minus"]))
def test_p_growth_on_random_lattice(theta, family):
    inst = HardInstance(family, theta, P212)
    x = np.linspace(0, 1, 21)
    g = growth_coefficient(inst, x)
    for xi, gi in zip(x, g):
        val, acts = optimal_action_set(inst, xi)
        a = np.linspace(-1, 1, 101)
        gap = val - q_value(np.full_like(a, xi), a, inst)
        assert np.all(gap >= gi * acts.dist(a) ** 2 - 1e-12)


# ---- two-point experiment -------------------------------------------------------


def test_lower_bound_constants():
    assert lower_bound_constant("plus", P211, 64) == pytest.approx(2 ** -8 / 64)
    assert lower_bound_constant("minus", P211, 64) == pytest.approx(2 ** -6 / 64)


@pytest.mark.parametrize("family", ["plus", "minus"])
def test_two_point_respects_lower_bound(family):
    res = two_point_experiment(family, P212, 256, 300, seed=5)
    assert res.adapted
    assert res.max_expected_regret >= res.lower_bound - 3 * res.std_error


def test_truth_reading_baseline_is_flagged():
    res = two_point_experiment("plus", P211, 64, 20, algorithm=truth_reading, seed=1)
    assert res.max_expected_regret == pytest.approx(0.0, abs=1e-10)
    assert not res.adapted


def test_two_point_reproducible():
    a = two_point_experiment("minus", P211, 64, 30, seed=3)
    b = two_point_experiment("minus", P211, 64, 30, seed=3, workers=2)
    assert a == b


def test_greedy_plugin_is_in_action_interval():
    data = sample_dgp(HardInstance("plus", 0.4, P211), 30, 2)
    pol = greedy_plugin(data, Family.PLUS, P211)
    acts = pol.act(np.linspace(0, 1, 50)[:, None])
    assert np.all(np.abs(acts) <= 1.0)
    assert set(np.unique(acts)) <= {-1.0, 1.0}
