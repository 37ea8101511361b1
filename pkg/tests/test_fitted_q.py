import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from greedyrates.errors import ConfigError, ContractError, DataError, DomainError
from greedyrates.fitted_q import (
    GridSpec,
    ValueGrid,
    evaluate_qhat,
    holder_modulus,
    interp_weights,
    measure_envelopes,
    qhat_surface,
    reference_solution,
    sampled_holder_quotient,
    select_holder_exponent,
    solve_empirical_bellman,
    split_sample,
    validate_lipschitz,
)
from greedyrates.hard_instances import Family, HardInstance, envelopes_hard, instance_q, plugin_qhat, sample_dgp
from greedyrates.core import RateParams
from greedyrates.or_models import desk_inventory


@pytest.fixture(scope="module")
def desk():
    return desk_inventory(0.5)


@pytest.fixture(scope="module")
def desk_fit(desk):
    ss = split_sample(desk.noise_sampler, 256, 3)
    gs = GridSpec.for_model(desk, 21)
    return ss, solve_empirical_bellman(desk, ss.v_sample, gs, tol=1e-8)


def with_reward(model, fn):
    return dataclasses.replace(model, reward=fn)


# --- Hoelder bookkeeping --------------------------------------------------


def test_exponent_kept_when_contraction_holds():
    assert select_holder_exponent(1.0, 0.5, math.sqrt(2)) == 1.0


def test_exponent_shrinks_to_margin():
    alpha = select_holder_exponent(1.0, 0.9, 2.0)
    assert alpha == pytest.approx(math.log2(0.999 / 0.9), abs=1e-12)


def test_no_admissible_exponent():
    with pytest.raises(ConfigError):
        select_holder_exponent(1.0, 0.9995, 2.0)
    with pytest.raises(ConfigError):
        select_holder_exponent(0.0, 0.5, 1.0)


def test_holder_modulus_closed_form():
    # alpha = alpha_r leaves ell_r / (1 - gamma ell_f^alpha)
    assert holder_modulus(1.0, 1.0, 3.0, 7.0, 0.5, 1.0) == pytest.approx(6.0)
    # alpha = alpha_r / 2 mixes ell_r and 2 r_vee evenly in log space
    expect = math.sqrt(4.0 * 16.0) / (1 - 0.5 * 2.0 ** 0.25)
    assert holder_modulus(0.25, 0.5, 4.0, 8.0, 0.5, 2.0) == pytest.approx(expect)
    with pytest.raises(ConfigError):
        holder_modulus(1.0, 1.0, 1.0, 1.0, 0.6, 2.0)


def test_validate_lipschitz(desk):
    worst = validate_lipschitz(desk, n_pairs=5000)
    assert 0 < worst <= math.sqrt(2)
    with pytest.raises(ConfigError):
        validate_lipschitz(dataclasses.replace(desk, lipschitz_f=0.5), n_pairs=5000)


# --- samples and grids ----------------------------------------------------


def test_split_sample_halves(desk):
    a = split_sample(desk.noise_sampler, 100, 7)
    b = split_sample(desk.noise_sampler, 100, 7)
    assert a.v_sample.shape == a.q_sample.shape == (100, 1)
    np.testing.assert_array_equal(a.v_sample, b.v_sample)
    assert not np.any(np.isin(a.v_sample, a.q_sample))
    with pytest.raises(ContractError):
        split_sample(desk.noise_sampler, 0, 1)


def test_grid_spec_refinement():
    gs = GridSpec((0.0,), (1.0,), (5,))
    assert gs.refined(4).counts == (17,)
    np.testing.assert_allclose(gs.refined(2).axes()[0][::2], gs.axes()[0])
    with pytest.raises(ContractError):
        GridSpec((0.0,), (1.0,), (1,)).axes()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.lists(st.floats(0, 2), min_size=1, max_size=20))
def test_multilinear_reproduces_affine(xs, ys):
    axes = (np.linspace(0, 1, 6), np.array([0.0, 0.3, 1.1, 2.0]))
    k = min(len(xs), len(ys))
    pts = np.column_stack([xs[:k], ys[:k]])
    grid = ValueGrid(axes, np.zeros((6, 4)), 1.0, 1.0, 1e-8)
    nodes = grid.nodes
    grid.values = (1.5 - 2.0 * nodes[:, 0] + 0.75 * nodes[:, 1]).reshape(6, 4)
    np.testing.assert_allclose(grid(pts), 1.5 - 2.0 * pts[:, 0] + 0.75 * pts[:, 1], atol=1e-12)


def test_interp_outside_handling():
    axes = (np.linspace(0, 1, 3),)
    with pytest.raises(DomainError):
        interp_weights(axes, np.array([[1.5]]))
    _, w = interp_weights(axes, np.array([[1.5], [0.5]]), outside="zero")
    assert w[0].sum() == 0 and w[1].sum() == pytest.approx(1.0)
    grid = ValueGrid(axes, [0.0, 1.0, 2.0], 1.0, 1.0, 1e-8)
    with pytest.raises(DomainError):
        grid(np.array([-0.1]))


def test_value_grid_rejects_nan():
    with pytest.raises(Exception):
        ValueGrid((np.linspace(0, 1, 3),), [0.0, np.nan, 1.0], 1.0, 1.0, 1e-8)


def test_csv_round_trip(tmp_path, desk_fit):
    _, vg = desk_fit
    path = tmp_path / "v.csv"
    vg.to_csv(path)
    back = ValueGrid.from_csv(path)
    np.testing.assert_array_equal(back.values, vg.values)
    assert back.alpha == vg.alpha and back.ell_alpha == vg.ell_alpha
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,value\n0,1\n")
    with pytest.raises(DataError):
        ValueGrid.from_csv(bad)


# --- empirical Bellman ----------------------------------------------------


def test_zero_reward_gives_zero(desk):
    model = with_reward(desk, lambda x, a, w: np.zeros(np.broadcast_shapes(x.shape, a.shape, w.shape)[:-1]))
    ss = split_sample(model.noise_sampler, 64, 0)
    vg = solve_empirical_bellman(model, ss.v_sample, GridSpec.for_model(model, 11))
    assert np.max(np.abs(vg.values)) == 0.0


@pytest.mark.parametrize("c", [0.3, -1.2])
def test_constant_reward_geometric_value(desk, c):
    model = with_reward(desk, lambda x, a, w: np.full(np.broadcast_shapes(x.shape, a.shape, w.shape)[:-1], c))
    ss = split_sample(model.noise_sampler, 64, 0)
    vg = solve_empirical_bellman(model, ss.v_sample, GridSpec.for_model(model, 11), tol=1e-8)
    np.testing.assert_allclose(vg.values, c / (1 - model.gamma), atol=2e-8)


def test_myopic_value_is_max_mean_reward(desk):
    model = dataclasses.replace(desk, gamma=0.0)
    ss = split_sample(model.noise_sampler, 200, 1)
    vg = solve_empirical_bellman(model, ss.v_sample, GridSpec.for_model(model, 11), refine_tol=1e-10)
    # brute force over a fine action lattice per node
    acts = np.linspace(0, 1, 4001)
    for x, v in zip(vg.nodes[:, 0], vg.values.ravel()):
        r = model.reward(np.full((len(acts), 1, 1), x), acts[:, None, None], ss.v_sample[None])
        assert v == pytest.approx(np.max(r.mean(axis=1)), abs=1e-6)
        assert v >= np.max(r.mean(axis=1)) - 1e-9


def test_one_stage_q_is_saa_objective(desk):
    # reward vanishes at the absorbing state 0, so Q reduces to x * mean(-(a - w)^2)
    model = dataclasses.replace(
        desk,
        transition=lambda x, a, w: np.zeros(np.broadcast_shapes(x.shape, a.shape, w.shape)),
        reward=lambda x, a, w: -(x * (a - w) ** 2)[..., 0],
    )
    ss = split_sample(model.noise_sampler, 50, 2)
    vg = solve_empirical_bellman(model, ss.v_sample, GridSpec.for_model(model, 11))
    x, a = 0.7, np.linspace(0, 1, 9)
    got = evaluate_qhat(model, ss.q_sample, vg, x, a)
    want = np.array([-x * np.mean((ai - ss.q_sample[:, 0]) ** 2) for ai in a])
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert np.argmax(got) == np.argmin(np.abs(a - ss.q_sample.mean()))


def test_value_iteration_contracts(desk_fit, desk):
    _, vg = desk_fit
    h = np.array(vg.meta["sweep_changes"])
    h = h[h > 1e-13]
    assert np.all(h[1:] <= desk.gamma * h[:-1] * (1 + 1e-6))


@settings(max_examples=8, deadline=None)
@given(st.floats(0.0, 2.0))
def test_larger_reward_larger_value(desk, bump):
    ss = split_sample(desk.noise_sampler, 64, 5)
    gs = GridSpec.for_model(desk, 11)
    base = solve_empirical_bellman(desk, ss.v_sample, gs, tol=1e-8)
    up = with_reward(desk, lambda x, a, w: desk.reward(x, a, w) + bump * x[..., 0] ** 2)
    more = solve_empirical_bellman(up, ss.v_sample, gs, tol=1e-8)
    assert np.all(more.values >= base.values - 2e-8)


def test_grid_refinement_within_holder_budget(desk_fit, desk):
    ss, vg = desk_fit
    fine = solve_empirical_bellman(desk, ss.v_sample, GridSpec.for_model(desk, 21).refined(2), tol=1e-8)
    h = 1.0 / 20
    gap = np.max(np.abs(fine(vg.nodes) - vg.values.ravel()))
    assert gap <= vg.ell_alpha * h ** vg.alpha + 2 * 1e-8


def test_sampled_holder_quotient_below_modulus(desk_fit):
    _, vg = desk_fit
    quot = sampled_holder_quotient(vg)
    assert 0 < quot <= vg.ell_alpha


def test_sampled_holder_quotient_of_linear_grid():
    grid = ValueGrid((np.linspace(0, 1, 5),), 3.0 * np.linspace(0, 1, 5), 1.0, 3.0, 1e-8)
    assert sampled_holder_quotient(grid) == pytest.approx(3.0)
    # sqrt-Hoelder quotient of a line peaks at the widest pair
    assert sampled_holder_quotient(grid, alpha=0.5) == pytest.approx(3.0)


def test_estimate_approaches_reference(desk):
    gs = GridSpec.for_model(desk, 21)
    ref = reference_solution(desk, gs, n_nodes=4096, tol=1e-8, action_n=33)
    errs = []
    for n in (64, 4096):
        ss = split_sample(desk.noise_sampler, n, 11)
        vg = solve_empirical_bellman(desk, ss.v_sample, gs, tol=1e-7)
        errs.append(np.max(np.abs(vg.values - ref.values)))
    assert errs[1] < errs[0] and errs[1] < 0.05


def test_qhat_surface_matches_evaluate(desk_fit, desk):
    ss, vg = desk_fit
    surf = qhat_surface(desk, ss.q_sample, vg)
    xs = np.array([[0.1], [0.8]])
    acts = np.tile(np.linspace(0, 1, 5)[None, :, None], (2, 1, 1))
    vals = surf.evaluator(xs, acts)
    assert vals.shape == (2, 5)
    np.testing.assert_allclose(vals[1], evaluate_qhat(desk, ss.q_sample, vg, 0.8, np.linspace(0, 1, 5)))


# --- envelopes ------------------------------------------------------------


def test_envelopes_identical_surfaces_hit_floor():
    q = np.random.default_rng(0).normal(size=(4, 6))
    env = measure_envelopes(q, q.copy(), np.arange(4.0), np.linspace(0, 1, 6), 0.5, 10)
    assert env.delta == env.lambda_q == 10.0 ** -17


def test_envelopes_of_affine_error():
    xs, acts = np.linspace(0, 1, 3), np.linspace(-1, 1, 5)
    err = 0.2 + 0.5 * acts[None, :] * np.ones((3, 1))
    env = measure_envelopes(err, np.zeros_like(err), xs, acts, 1.0, 100)
    assert env.delta == pytest.approx(0.7)
    assert env.lambda_q == pytest.approx(0.5)


def test_envelopes_on_plus_instance_match_sample_mean():
    inst = HardInstance(Family.PLUS, 0.1, RateParams(gamma=0.5, p=2, q=1, m=1))
    data = sample_dgp(inst, 400, 3)
    xs = np.linspace(0, 1, 201)
    acts = np.linspace(-1, 1, 81)
    env = measure_envelopes(plugin_qhat(inst, data), instance_q(inst), xs, acts, 1.0, 400)
    exact = envelopes_hard(inst, data)
    assert env.delta == pytest.approx(exact.delta, rel=1e-9)
    assert env.lambda_q <= exact.lambda_q * (1 + 1e-9)
