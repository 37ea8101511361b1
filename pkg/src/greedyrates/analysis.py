"""Experiment drivers, exponent fits, audits and lemma oracles.

Everything here is deterministic given its explicit seed.  Audits return an
:class:`AuditReport`; oracles return an :class:`OracleResult` whose ``holds``
flag compares ``lhs`` against ``rhs`` plus three Monte Carlo standard errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .core import RateParams, greedy_policy, rollout
from .errors import ConfigError, ContractError, DomainError
from .fitted_q import (GridSpec, empirical_q, measure_envelopes, qhat_surface, reference_solution,
                       solve_empirical_bellman, split_sample)
from .hard_instances import (ABSORBING, ACTIONS, Family, HardInstance, derive_seed,
                             envelopes_hard, greedy_plugin, growth_coefficient,
                             margin_mass_constant, optimal_action_set, optimal_value,
                             plugin_qhat, q_value, sample_dgp, truth_reading,
                             two_point_experiment)

AUDIT_SLACK = 1e-9
Z95 = 1.959963984540054


# --------------------------------------------------------------------------
# exponents
# --------------------------------------------------------------------------


def theoretical_exponent(params: RateParams):
    """``(min{p / (2(p - q)), (m + 1) / (2m)}, p == q(m + 1))``."""
    p, q, m = params.p, params.q, params.m
    if p < q:
        raise DomainError(f"the rate needs p >= q, got p={p}, q={q}")
    growth = math.inf if p == q else p / (2.0 * (p - q))
    margin = (m + 1.0) / (2.0 * m)
    return min(growth, margin), bool(math.isclose(p, q * (m + 1.0), rel_tol=1e-12, abs_tol=1e-12))


class ExponentFit(NamedTuple):
    exponent: float
    stderr: float
    dropped: tuple  # indices of points removed for nonpositive regret

    @property
    def flagged(self) -> bool:
        return bool(self.dropped)


def fit_exponent(points: Sequence) -> ExponentFit:
    """Least-squares fit of ``log regret = c - exponent * log n``.

    Points with nonpositive (or non-finite) regret are dropped and reported.
    At least three usable points are required.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n, r = pts[:, 0], pts[:, 1]
    if np.any(n <= 0):
        raise ContractError("sample sizes must be positive")
    good = np.isfinite(r) & (r > 0)
    dropped = tuple(int(i) for i in np.flatnonzero(~good))
    if good.sum() < 3:
        raise ContractError(f"need at least three positive points, got {int(good.sum())}")
    x, y = np.log(n[good]), np.log(r[good])
    xc = x - x.mean()
    sxx = float(np.dot(xc, xc))
    if sxx == 0.0:
        raise ContractError("sample sizes must not all coincide")
    slope = float(np.dot(xc, y - y.mean()) / sxx)
    resid = y - y.mean() - slope * xc
    dof = len(x) - 2
    stderr = math.sqrt(float(np.dot(resid, resid)) / dof / sxx) if dof > 0 else math.nan
    return ExponentFit(-slope, stderr, dropped)


# --------------------------------------------------------------------------
# rate experiments
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RateConfig:
    """Inputs of :func:`run_rate_experiment`.

    ``family`` is ``"plus"``, ``"minus"`` or ``"inventory"``.  For the
    inventory model ``p``, ``q``, ``m`` only label the report; ``grid_nodes``,
    ``ref_nodes``, ``n_paths`` and ``eps`` control the fitted-Q pipeline.
    """

    family: str
    n_values: tuple
    replications: int
    seed: int
    gamma: float = 0.5
    p: float = 2.0
    q: float = 1.0
    m: float = 1.0
    algorithm: str = "greedy"
    workers: int = 1
    grid_nodes: int = 21
    ref_nodes: int = 4096
    n_paths: int = 256
    eps: float = 1e-4

    @classmethod
    def from_dict(cls, cfg: dict) -> "RateConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown rate config keys: {sorted(extra)}")
        kw = dict(cfg)
        kw["n_values"] = tuple(int(n) for n in kw.get("n_values", ()))
        return cls(**kw)

    def params(self) -> RateParams:
        return RateParams(self.gamma, self.p, self.q, self.m)


@dataclass
class RateReport:
    n_values: list
    mean_regret: list
    ci95: list
    replications: int
    fitted_exponent: float
    fitted_stderr: float
    theoretical_exponent: float
    boundary_flag: bool
    lower_bound: list = field(default_factory=list)
    std_error: list = field(default_factory=list)
    worst_theta: list = field(default_factory=list)
    degenerate: bool = False
    dropped: tuple = ()
    adapted: bool = True

    def rows(self):
        """One tuple per n: ``(n, mean_regret, ci95, std_error, lower_bound, worst_theta)``."""
        lb = self.lower_bound or [math.nan] * len(self.n_values)
        th = self.worst_theta or [math.nan] * len(self.n_values)
        return list(zip(self.n_values, self.mean_regret, self.ci95, self.std_error, lb, th))


ALGORITHMS = {"greedy": greedy_plugin, "truth": truth_reading}


def _hard_rate_point(cfg: RateConfig, params: RateParams, n: int, key: int):
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {cfg.algorithm!r}; choose from {sorted(ALGORITHMS)}")
    res = two_point_experiment(Family(cfg.family), params, n, cfg.replications,
                               ALGORITHMS[cfg.algorithm], derive_seed(cfg.seed, key), cfg.workers)
    return res.max_expected_regret, res.std_error, res.lower_bound, res.worst_theta, res.adapted


class InventoryReference(NamedTuple):
    model: object
    grid: GridSpec
    vref: object
    nodes: np.ndarray

    def v_star(self, x):
        return self.vref(x)

    def q_star(self, x, a):
        return empirical_q(self.model, self.nodes, self.vref, np.asarray(x, dtype=float),
                           np.asarray(a, dtype=float))


def inventory_reference(gamma: float = 0.5, grid_nodes: int = 21, ref_nodes: int = 4096):
    from .or_models import desk_inventory
    model = desk_inventory(gamma)
    grid = GridSpec.for_model(model, grid_nodes)
    vref = reference_solution(model, grid.refined(4), n_nodes=ref_nodes)
    return InventoryReference(model, grid, vref, np.asarray(vref.meta["noise_nodes"]))


def inventory_regret(ref: InventoryReference, n: int, seed: int, n_paths: int = 256,
                     eps: float = 1e-4, coarse_n: int = 33) -> float:
    """Regret of the greedy fitted-Q policy measured against the reference.

    Uses the occupancy form: the mean over rollouts of the discounted sum of
    ``V*(x_t) - Q*(x_t, a_t)``.
    """
    from .or_models import Simulator
    model = ref.model
    ss = split_sample(model.noise_sampler, n, seed)
    vg = solve_empirical_bellman(model, ss.v_sample, ref.grid, tol=1e-6, refine_tol=1e-6)
    policy = greedy_policy(qhat_surface(model, ss.q_sample, vg), model.action_space,
                           coarse_n=coarse_n, refine_tol=1e-6, n_peaks=1)
    sim = Simulator(model, ref.v_star, ref.q_star)
    _, _, ell = rollout(sim, policy, sim.sample_initial, model.gamma, eps, n_paths,
                        derive_seed(seed, 1), want_ell=True)
    return float(np.mean(ell))


def _inventory_rate_point(cfg: RateConfig, ref: InventoryReference, n: int, key: int):
    vals = np.array([inventory_regret(ref, n, derive_seed(cfg.seed, key, r), cfg.n_paths, cfg.eps)
                     for r in range(cfg.replications)])
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
    return float(np.mean(vals)), se, math.nan, math.nan, True


def run_rate_experiment(config) -> RateReport:
    """Expected regret per n, its 95% interval, and the fitted exponent.

    Hard families use the worst of ``theta = +-1/(4 sqrt(n))`` with exact
    quadrature regret.  A single ``n`` gives NaN exponents and sets
    ``degenerate``.
    """
    cfg = config if isinstance(config, RateConfig) else RateConfig.from_dict(config)
    if cfg.replications < 2:
        raise ConfigError("replications must be at least 2")
    if not cfg.n_values or any(n < 1 for n in cfg.n_values):
        raise ConfigError("n_values must be a nonempty list of positive integers")
    params = cfg.params()
    theo, boundary = theoretical_exponent(params)
    if cfg.family == "inventory":
        ref = inventory_reference(cfg.gamma, cfg.grid_nodes, cfg.ref_nodes)
        point = lambda n, k: _inventory_rate_point(cfg, ref, n, k)  # noqa: E731
    elif cfg.family in ("plus", "minus"):
        params.require_strict_growth()
        point = lambda n, k: _hard_rate_point(cfg, params, n, k)  # noqa: E731
    else:
        raise ConfigError(f"unknown family {cfg.family!r}")
    means, ses, lbs, thetas = [], [], [], []
    adapted = True
    for key, n in enumerate(cfg.n_values):
        mean, se, lb, th, ok = point(n, key)
        means.append(mean)
        ses.append(se)
        lbs.append(lb)
        thetas.append(th)
        adapted &= ok
    degenerate = len(set(cfg.n_values)) < 3
    if degenerate:
        fit = ExponentFit(math.nan, math.nan, ())
    else:
        try:
            fit = fit_exponent(list(zip(cfg.n_values, means)))
        except ContractError:
            fit, degenerate = ExponentFit(math.nan, math.nan, ()), True
    return RateReport(list(cfg.n_values), means, [Z95 * s for s in ses], cfg.replications,
                      fit.exponent, fit.stderr, theo, boundary, lbs, ses, thetas,
                      degenerate, fit.dropped, adapted)


# --------------------------------------------------------------------------
# audits
# --------------------------------------------------------------------------


class Violation(NamedTuple):
    inputs: dict
    lhs: float
    rhs: float
    slack: float


@dataclass
class AuditReport:
    name: str
    trials: int = 0
    violations: list = field(default_factory=list)

    def record(self, lhs, rhs, slack: float, inputs: Callable[[int], dict]):
        """Count ``len(lhs)`` trials and keep those with ``lhs > rhs + slack``."""
        lhs = np.atleast_1d(np.asarray(lhs, dtype=float))
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), lhs.shape)
        self.trials += lhs.size
        for i in np.flatnonzero(~(lhs <= rhs + slack)):
            self.violations.append(Violation(inputs(int(i)), float(lhs[i]), float(rhs[i]), slack))

    @property
    def passed(self) -> bool:
        return not self.violations

    def merge(self, other: "AuditReport") -> "AuditReport":
        self.trials += other.trials
        self.violations.extend(other.violations)
        return self


def stability_bound(params: RateParams, delta: float, lam: float, g) -> np.ndarray:
    """Right-hand side of the greedy-stability inequality at growth values ``g``."""
    g = np.asarray(g, dtype=float)
    p, q = params.p, params.q
    if p < q:
        raise DomainError(f"stability bound needs p >= q, got p={p}, q={q}")
    if p == q:
        return np.where(g <= lam, 2.0 * delta, 0.0)
    alpha, beta = q / (p - q), p / (p - q)
    if alpha == 0.0:
        inv = np.ones_like(g)
    else:
        with np.errstate(divide="ignore"):
            inv = np.where(g > 0, g ** -alpha, np.inf)
    return np.minimum(2.0 * delta, lam ** beta * inv)


def greedy_stability_audit(inst: HardInstance, data, x_lattice, slack: float = AUDIT_SLACK,
                           bound_scale: float = 1.0, refine_tol: float = 1e-9) -> AuditReport:
    """Check the per-state greedy-stability bound for the plug-in greedy policy.

    ``bound_scale`` multiplies the right-hand side; values below one give a
    deliberately corrupted bound for negative controls.
    """
    xs = np.asarray(x_lattice, dtype=float).reshape(-1)
    if xs.size == 0:
        raise ContractError("the state lattice is empty")
    policy = greedy_policy(plugin_qhat(inst, data), ACTIONS, refine_tol=refine_tol)
    acts = policy.act(xs[:, None])[:, 0]
    loss = optimal_value(inst, xs) - q_value(xs, acts, inst)
    env = envelopes_hard(inst, data)
    rhs = bound_scale * stability_bound(inst.params, env.delta, env.lambda_q, growth_coefficient(inst, xs))
    report = AuditReport("greedy-stability")
    report.record(loss, rhs, slack, lambda i: {"family": inst.family.value, "theta": inst.theta,
                                               "n": data.n, "seed": data.seed, "x": float(xs[i])})
    return report


def random_stability_audit(trials: int, seed: int, states_per_dataset: int = 50,
                           n_range=(4, 4096), slack: float = AUDIT_SLACK,
                           bound_scale: float = 1.0) -> AuditReport:
    """Randomized (family, theta, n, seed, x) greedy-stability audit with ``trials`` states."""
    rng = np.random.default_rng(seed)
    report = AuditReport("greedy-stability")
    shapes = [RateParams(0.5, 2.0, 1.0, 1.0), RateParams(0.5, 2.0, 1.0, 2.0),
              RateParams(0.5, 3.0, 0.5, 1.5), RateParams(0.5, 1.5, 0.0, 1.0)]
    done = 0
    while done < trials:
        family = Family.PLUS if rng.random() < 0.5 else Family.MINUS
        params = shapes[int(rng.integers(len(shapes)))]
        theta = float(rng.uniform(-1.0, 1.0))
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        inst = HardInstance(family, theta, params)
        data = sample_dgp(inst, n, int(rng.integers(2 ** 31)))
        k = min(states_per_dataset, trials - done)
        xs = np.concatenate([rng.uniform(0.0, 1.0, max(k - 1, 0)), [ABSORBING]])[:k]
        report.merge(greedy_stability_audit(inst, data, xs, slack, bound_scale))
        done += k
    return report


def p_growth_audit(inst: HardInstance, x_lattice, a_lattice, slack: float = AUDIT_SLACK) -> AuditReport:
    """``V - Q >= g * dist(a, A*)^p`` on a state-action lattice."""
    xs = np.asarray(x_lattice, dtype=float).reshape(-1)
    acts = np.asarray(a_lattice, dtype=float).reshape(-1)
    if xs.size == 0 or acts.size == 0:
        raise ContractError("the audit lattice is empty")
    report = AuditReport("p-growth")
    g = np.asarray(growth_coefficient(inst, xs), dtype=float).reshape(-1)
    for i, x in enumerate(xs):
        value, opt = optimal_action_set(inst, x)
        gap = value - q_value(np.full_like(acts, x), acts, inst)
        need = g[i] * opt.dist(acts) ** inst.params.p
        # the inequality is need <= gap
        report.record(need, gap, slack, lambda j, x=x: {"family": inst.family.value,
                                                        "theta": inst.theta, "x": float(x),
                                                        "a": float(acts[j])})
    return report


def margin_mass(inst: HardInstance, t: float, tol: float = 1e-15) -> float:
    """Mass of ``{g <= t}`` under half uniform on [0, 1] plus half an atom at 2.

    On [0, 1] the growth coefficient is nondecreasing, so the set is an
    interval ``[0, s]`` whose endpoint is located by bisection.
    """
    g = lambda x: float(np.asarray(growth_coefficient(inst, x)))  # noqa: E731
    atom = 0.5 if g(ABSORBING) <= t else 0.0
    if g(0.0) > t:
        return atom
    if g(1.0) <= t:
        return 0.5 + atom
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) <= t:
            lo = mid
        else:
            hi = mid
    return 0.5 * lo + atom


def margin_mass_audit(inst: HardInstance, t_lattice, slack: float = AUDIT_SLACK,
                      bound_scale: float = 1.0) -> AuditReport:
    """``mass{g <= t} <= M t^(1/m)`` on a t-lattice (``bound_scale`` multiplies M)."""
    ts = np.asarray(t_lattice, dtype=float).reshape(-1)
    if ts.size == 0:
        raise ContractError("the audit lattice is empty")
    M = bound_scale * margin_mass_constant(inst.family, inst.params)
    m = inst.params.m
    lhs = np.array([margin_mass(inst, t) for t in ts])
    report = AuditReport("margin-mass")
    report.record(lhs, M * ts ** (1.0 / m), slack, lambda i: {"family": inst.family.value,
                                                               "theta": inst.theta, "t": float(ts[i])})
    return report


def envelope_holder_audit(inst: HardInstance, data, trials: int, seed: int,
                          slack: float = AUDIT_SLACK) -> AuditReport:
    """Realized error quotients ``|e(x,a) - e(x,b)| / |a-b|^q`` against the closed-form envelope."""
    rng = np.random.default_rng(seed)
    qhat = plugin_qhat(inst, data)
    x = rng.uniform(0.0, 1.0, trials)
    a = rng.uniform(-1.0, 1.0, trials)
    b = rng.uniform(-1.0, 1.0, trials)

    def err(acts):
        est = qhat.values(x[:, None], acts[:, None])
        return est - q_value(x, acts, inst)

    keep = a != b
    x, a, b = x[keep], a[keep], b[keep]
    quot = np.abs(err(a) - err(b)) / np.abs(a - b) ** inst.params.q
    env = envelopes_hard(inst, data)
    report = AuditReport("envelope-holder")
    report.record(quot, env.lambda_q, slack, lambda i: {"x": float(x[i]), "a": float(a[i]),
                                                        "b": float(b[i])})
    return report


# --------------------------------------------------------------------------
# moment scaling
# --------------------------------------------------------------------------


class MomentScaling(NamedTuple):
    slope: float
    stderr: float
    moments: tuple
    target: float


def moment_scaling_check(sampler: Callable, n_grid: Sequence[int], k: int, replications: int,
                         seed: int = 0) -> MomentScaling:
    """Slope of ``log E[env^k]`` against ``log n``; the reference slope is ``-k/2``.

    ``sampler(n, rng)`` returns one envelope draw.
    """
    if k < 2:
        raise ContractError(f"k must be at least 2, got {k}")
    moments = []
    for i, n in enumerate(n_grid):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        draws = np.array([sampler(int(n), rng) for _ in range(replications)], dtype=float)
        moments.append(float(np.mean(draws ** k)))
    fit = fit_exponent(list(zip(n_grid, moments)))
    return MomentScaling(-fit.exponent, fit.stderr, tuple(moments), -k / 2.0)


class EnvelopeMoments(NamedTuple):
    n_values: tuple
    delta_sq: tuple
    lambda_sq: tuple
    delta_slope: float
    lambda_slope: float


def inventory_envelope_moments(n_grid: Sequence[int], replications: int, seed: int, q: float = 0.5,
                               ref: Optional["InventoryReference"] = None, x_points: int = 21,
                               a_points: int = 41, tol: float = 1e-6) -> EnvelopeMoments:
    """``E[delta_n^2]`` and ``E[Lambda_n(q)^2]`` of fitted Q on the desk inventory.

    Errors are measured on an ``x_points`` by ``a_points`` lattice against
    the reference surface; slopes come from log-log least squares.
    """
    ref = inventory_reference(ref_nodes=16384) if ref is None else ref
    model = ref.model
    xs = np.linspace(model.state_lo[0], model.state_hi[0], x_points)[:, None]
    acts = np.linspace(model.action_space.lo[0], model.action_space.hi[0], a_points)[:, None]
    pair_x = np.repeat(xs, a_points, axis=0)
    pair_a = np.tile(acts, (x_points, 1))
    q_ref = ref.q_star(pair_x, pair_a).reshape(x_points, a_points)
    d2, l2 = [], []
    for i, n in enumerate(n_grid):
        ds, ls = [], []
        for r in range(replications):
            ss = split_sample(model.noise_sampler, int(n), derive_seed(seed, i, r))
            vg = solve_empirical_bellman(model, ss.v_sample, ref.grid, tol=tol, refine_tol=tol)
            q_hat = empirical_q(model, ss.q_sample, vg, pair_x, pair_a).reshape(x_points, a_points)
            env = measure_envelopes(q_hat, q_ref, xs, acts, q, int(n))
            ds.append(env.delta ** 2)
            ls.append(env.lambda_q ** 2)
        d2.append(float(np.mean(ds)))
        l2.append(float(np.mean(ls)))
    fd = fit_exponent(list(zip(n_grid, d2)))
    fl = fit_exponent(list(zip(n_grid, l2)))
    return EnvelopeMoments(tuple(n_grid), tuple(d2), tuple(l2), -fd.exponent, -fl.exponent)


def hard_delta_sampler(family, params: RateParams, theta: float):
    """Sampler of the closed-form sup-error envelope for a fixed instance."""
    inst = HardInstance(Family(family), theta, params)

    def draw(n, rng):
        y = np.where(rng.random(n) < (1.0 + theta) / 2.0, 1.0, -1.0)
        return abs(float(np.mean(y)) - theta) + float(n) ** -17

    draw.instance = inst
    return draw


# --------------------------------------------------------------------------
# lemma oracles
# --------------------------------------------------------------------------


class OracleResult(NamedTuple):
    lhs: float
    rhs: float
    std_error: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 3.0 * self.std_error


def power_sampler(m: float, scale: float = 1.0):
    """Sampler of ``G = scale * U^m``, U uniform; ``P(G <= t) <= scale^(-1/m) t^(1/m)``."""
    return lambda rng, n: scale * rng.random(n) ** m


def truncation_constant(M: float, m: float, alpha: float) -> float:
    """Truncation constant assembled from the proof's layer-cake bounds."""
    if not alpha * m > 1.0:
        raise DomainError(f"the constant needs alpha > 1/m, got alpha={alpha}, m={m}")
    ma = m * alpha
    return max(1.0, M * 2.0 ** (1.0 - 1.0 / ma) * (1.0 + ma / (ma - 1.0)))


def truncation_rhs(M: float, m: float, alpha: float, u: float, v: float) -> float:
    if math.isclose(alpha * m, 1.0, rel_tol=1e-12):
        return (M + 1.0) * v + M * m * v * max(0.0, math.log(2.0 * u / v))
    C = truncation_constant(M, m, alpha)
    e = 1.0 / (m * alpha)
    return C * (u ** (1.0 - e) * v ** e + v)


def truncation_lemma_oracle(G_sampler: Callable, M: float, m: float, alpha: float, u: float,
                            v: float, n_mc: int = 1_000_000, seed: int = 0) -> OracleResult:
    """MC estimate of ``E min{2u, v G^-alpha}`` against the truncation bound."""
    if not (u > 0 and v > 0):
        raise DomainError("u and v must be positive")
    if alpha * m < 1.0 and not math.isclose(alpha * m, 1.0, rel_tol=1e-12):
        raise DomainError("alpha < 1/m: use inverse_moment_oracle")
    g = np.asarray(G_sampler(np.random.default_rng(seed), n_mc), dtype=float)
    if np.any(g < 0):
        raise DomainError("G must be nonnegative")
    with np.errstate(divide="ignore"):
        vals = np.where(g > 0, np.minimum(2.0 * u, v * g ** -alpha), 2.0 * u)
    return OracleResult(float(np.mean(vals)), truncation_rhs(M, m, alpha, u, v),
                        float(np.std(vals, ddof=1) / math.sqrt(n_mc)))


def inverse_moment_oracle(G_sampler: Callable, alpha: float, M: float, m: float,
                          n_mc: int = 1_000_000, seed: int = 0) -> OracleResult:
    """MC estimate of ``E[G^-alpha; G > 0]`` against ``1 + M m alpha / (1 - m alpha)``."""
    if alpha < 0 or m * alpha >= 1.0:
        raise DomainError(f"need 0 <= alpha < 1/m, got alpha={alpha}, m={m}")
    g = np.asarray(G_sampler(np.random.default_rng(seed), n_mc), dtype=float)
    with np.errstate(divide="ignore"):
        vals = np.where(g > 0, g ** -alpha, 0.0)
    rhs = 1.0 + M * m * alpha / (1.0 - m * alpha)
    return OracleResult(float(np.mean(vals)), rhs, float(np.std(vals, ddof=1) / math.sqrt(n_mc)))


def generalized_holder_oracle(X_sampler: Callable, Y_sampler: Optional[Callable], p: float, q: float,
                              n_mc: int = 1_000_000, seed: int = 0) -> OracleResult:
    """``E|XY|`` against ``E[|X|^p]^(1/p) E[|Y|^q]^(1/q)`` on one shared sample.

    With ``Y_sampler=None`` the first sampler returns the pair ``(X, Y)``.
    """
    if not (p > 0 and q > 0) or 1.0 / p + 1.0 / q > 1.0 + 1e-15:
        raise DomainError(f"need 1/p + 1/q <= 1, got p={p}, q={q}")
    rng = np.random.default_rng(seed)
    if Y_sampler is None:
        X, Y = X_sampler(rng, n_mc)
    else:
        X, Y = X_sampler(rng, n_mc), Y_sampler(rng, n_mc)
    X, Y = np.abs(np.asarray(X, dtype=float)), np.abs(np.asarray(Y, dtype=float))
    prod = X * Y
    rhs = float(np.mean(X ** p)) ** (1.0 / p) * float(np.mean(Y ** q)) ** (1.0 / q)
    return OracleResult(float(np.mean(prod)), rhs, float(np.std(prod, ddof=1) / math.sqrt(n_mc)))


def sign_power(a, q: float):
    a = np.asarray(a, dtype=float)
    return np.sign(a) * np.abs(a) ** q


def sign_power_audit(q: float, n_pairs: int = 1_000_000, seed: int = 0, bound: float = 1.0,
                     slack: float = 1e-12):
    """Max of ``|s(a) - s(b)| / |a - b|^q`` over random pairs in [-bound, bound].

    Returns ``(max_ratio, constant, report)`` with constant ``2^(1-q)``.
    """
    if not 0.0 < q <= 1.0:
        raise DomainError(f"q must lie in (0, 1], got {q}")
    rng = np.random.default_rng(seed)
    a = rng.uniform(-bound, bound, n_pairs)
    b = rng.uniform(-bound, bound, n_pairs)
    # include opposite-sign mirror pairs, where the constant is attained
    b[: n_pairs // 10] = -a[: n_pairs // 10]
    keep = a != b
    a, b = a[keep], b[keep]
    ratio = np.abs(sign_power(a, q) - sign_power(b, q)) / np.abs(a - b) ** q
    const = 2.0 ** (1.0 - q)
    report = AuditReport("sign-power")
    report.record(ratio, const * (1.0 + slack), 0.0, lambda i: {"a": float(a[i]), "b": float(b[i]), "q": q})
    return float(np.max(ratio)), const, report
