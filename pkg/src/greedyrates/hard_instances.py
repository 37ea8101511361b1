"""Two adversarial one-step families with closed-form optimal values.

States live in [0, 1] plus an absorbing state 2 with zero reward; the action
interval is [-1, 1] and the initial law is uniform on [0, 1].  ``PLUS``
instances have a state-dependent switch between the endpoints, ``MINUS``
instances have a state-free interior maximizer at distance ``d_theta`` from
the origin.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import optimize

from .core import (ActionInterval, Policy, QSurface, QuadratureSpec, RateParams, golden_maximize,
                   greedy_policy, regret_exact)
from .errors import ContractError, DomainError, NumericError

ACTIONS = ActionInterval(-1.0, 1.0)
ABSORBING = 2.0


class Family(str, Enum):
    PLUS = "plus"
    MINUS = "minus"


def margin_width(family: Family, theta: float, params: RateParams) -> float:
    family = Family(family)
    if family is Family.PLUS:
        return (abs(theta) / 2.0) ** (1.0 / params.m)
    return abs(theta) ** (1.0 / (params.p - params.q))


@dataclass(frozen=True)
class HardInstance:
    family: Family
    theta: float
    params: RateParams
    d_theta: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        theta = float(self.theta)
        if not -1.0 <= theta <= 1.0:
            raise ContractError(f"theta must lie in [-1, 1], got {theta}")
        object.__setattr__(self, "theta", theta)
        self.params.require_strict_growth()
        d = margin_width(self.family, theta, self.params)
        if self.d_theta is not None and float(self.d_theta) != d:
            raise ContractError(f"stored d_theta {self.d_theta} disagrees with recomputed {d}")
        object.__setattr__(self, "d_theta", d)

    def to_config(self) -> dict:
        p = self.params
        return {"family": self.family.value, "theta": self.theta, "gamma": p.gamma,
                "p": p.p, "q": p.q, "m": p.m}

    @classmethod
    def from_config(cls, cfg: dict) -> "HardInstance":
        try:
            params = RateParams(cfg["gamma"], cfg["p"], cfg["q"], cfg["m"])
            return cls(Family(cfg["family"]), cfg["theta"], params)
        except KeyError as exc:
            raise ContractError(f"instance config is missing key {exc}") from None


# --------------------------------------------------------------------------
# closed forms
# --------------------------------------------------------------------------


def _h(a, p):
    up = (1.0 + a) ** p
    return up / (up + (1.0 - a) ** p)


def h_p(a, p: float):
    """Smooth switch from 0 at a = -1 to 1 at a = 1."""
    a = np.asarray(a, dtype=float)
    if np.any(np.abs(a) > 1.0):
        raise DomainError("h_p needs |a| <= 1")
    return _squeeze(_h(a, p))


def _check_states(x):
    x = np.asarray(x, dtype=float)
    if x.size and not (x.min() >= 0.0 and (x.max() <= 1.0 or np.all((x <= 1.0) | (x == ABSORBING)))):
        raise DomainError(f"states must lie in [0, 1] or equal {ABSORBING}")
    return x


def _plus_formula(x, a, theta, d, p, m):
    x = _check_states(x)
    h = _h(np.asarray(a, dtype=float), p)
    inner = np.where(x <= 1.0, x, 0.0)
    val = inner ** m * h + theta * (inner <= d) * (1.0 - h)
    return np.where(x <= 1.0, val, 0.0)


def _minus_formula(x, a, theta, d, p, q):
    x = _check_states(x)
    a = np.asarray(a, dtype=float)
    if np.any(np.abs(a) > 1.0):
        raise DomainError("actions must lie in [-1, 1]")
    mag = np.abs(a)
    val = theta * np.sign(a) * np.minimum(mag ** q, d ** q) - np.abs(mag - d) ** p
    return np.where(x <= 1.0, val, 0.0)


def _squeeze(out):
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


def q_plus(x, a, inst: HardInstance):
    if inst.family is not Family.PLUS:
        raise ContractError("q_plus needs a PLUS instance")
    p = inst.params
    return _squeeze(_plus_formula(x, a, inst.theta, inst.d_theta, p.p, p.m))


def q_minus(x, a, inst: HardInstance):
    if inst.family is not Family.MINUS:
        raise ContractError("q_minus needs a MINUS instance")
    p = inst.params
    return _squeeze(_minus_formula(x, a, inst.theta, inst.d_theta, p.p, p.q))


def q_value(x, a, inst: HardInstance):
    return q_plus(x, a, inst) if inst.family is Family.PLUS else q_minus(x, a, inst)


@dataclass(frozen=True)
class OptimalActions:
    """Either a finite set of points or the whole action interval (``points=None``)."""

    points: Optional[tuple]

    @property
    def full(self) -> bool:
        return self.points is None

    def dist(self, a):
        a = np.asarray(a, dtype=float)
        if self.points is None:
            return np.zeros_like(a)
        pts = np.asarray(self.points)
        return np.min(np.abs(a[..., None] - pts), axis=-1)


def optimal_value(inst: HardInstance, x):
    """Optimal value V at states x (vectorized)."""
    x = _check_states(x)
    if inst.family is Family.PLUS:
        inner = np.where(x <= 1.0, x, 0.0)
        val = np.where((inst.theta > 0) & (inner <= inst.d_theta), inst.theta, inner ** inst.params.m)
    else:
        p, q = inst.params.p, inst.params.q
        val = np.full(x.shape, abs(inst.theta) ** (p / (p - q)))
    return _squeeze(np.where(x <= 1.0, val, 0.0))


def optimal_action_set(inst: HardInstance, x: float):
    """Table row at a single state: ``(value, OptimalActions)``."""
    x = float(_check_states(x))
    value = float(optimal_value(inst, x))
    if x == ABSORBING:
        return value, OptimalActions(None)
    theta = inst.theta
    if inst.family is Family.PLUS:
        if theta == 0.0 and x == 0.0:
            return value, OptimalActions(None)
        if theta > 0 and x <= inst.d_theta:
            return value, OptimalActions((-1.0,))
        return value, OptimalActions((1.0,))
    d = inst.d_theta
    return value, OptimalActions((-d,) if theta < 0 else (d,))


def optimal_policy(inst: HardInstance) -> Policy:
    """Exact selector of the table, smallest action on full-set rows."""

    def rule(xs):
        x = xs[:, 0]
        if inst.family is Family.PLUS:
            inner = x <= 1.0
            neg = (inst.theta > 0) & (x <= inst.d_theta)
            full = ~inner | ((inst.theta == 0.0) & (x == 0.0))
            return np.where(neg | full, -1.0, 1.0)
        d = inst.d_theta
        return np.where(x <= 1.0, -d if inst.theta < 0 else d, -1.0)

    kinks = (inst.d_theta,) if inst.family is Family.PLUS else ()
    return Policy(rule, ACTIONS, kinks=kinks)


def instance_q(inst: HardInstance) -> QSurface:
    """True Q as a surface object."""
    p = inst.params
    if inst.family is Family.PLUS:
        fn = functools.partial(_plus_formula, theta=inst.theta, d=inst.d_theta, p=p.p, m=p.m)
        return QSurface.from_scalar(fn, form="closed-form-plus", kinks=(inst.d_theta,))
    fn = functools.partial(_minus_formula, theta=inst.theta, d=inst.d_theta, p=p.p, q=p.q)
    return QSurface.from_scalar(fn, form="closed-form-minus", state_invariant=True,
                                reference_state=np.array([[0.5]]))


def instance_v(inst: HardInstance) -> Callable:
    return functools.partial(optimal_value, inst)


def growth_coefficient(inst: HardInstance, x):
    """Coefficient g in ``V - Q >= g * dist^p``."""
    x = _check_states(x)
    p = inst.params
    if inst.family is Family.PLUS:
        inner = np.where(x <= 1.0, x, 0.0)
        return _squeeze(np.where(x <= 1.0, 2.0 ** -(p.p + 1) * inner ** p.m, 2.0))
    return _squeeze(np.full(x.shape, c_p(p.p)))


def margin_mass_constant(family: Family, params: RateParams) -> float:
    family = Family(family)
    p, m = params.p, params.m
    if family is Family.PLUS:
        return max(2.0 ** ((p + 1) / m - 1), 2.0 ** (-1.0 / m))
    return c_p(p) ** (-1.0 / m)


class HardSimulator:
    """Rollout adapter: reward drawn with noise ``(y, d)``, then absorption at 2."""

    def __init__(self, inst: HardInstance):
        self.inst = inst
        self.gamma = inst.params.gamma
        # |r| <= 1 for PLUS; the MINUS penalty adds at most one more
        self.r_max = 1.0 if inst.family is Family.PLUS else 2.0
        self.kinks = (inst.d_theta,) if inst.family is Family.PLUS else ()

    def sample_noise(self, rng, size):
        y = np.where(rng.random(size) < (1.0 + self.inst.theta) / 2.0, 1.0, -1.0)
        return np.column_stack([y, np.full(size, self.inst.d_theta)])

    def sample_initial(self, rng, size):
        return rng.uniform(0.0, 1.0, size=(size, 1))

    def step(self, x, a, w):
        x = np.asarray(x, dtype=float).reshape(-1)
        a = np.asarray(a, dtype=float).reshape(-1)
        y, d = w[:, 0], w[:, 1]
        p = self.inst.params
        if self.inst.family is Family.PLUS:
            r = _plus_formula(x, a, y, d, p.p, p.m)
        else:
            r = _minus_formula(x, a, y, d, p.p, p.q)
        return r, np.full((len(x), 1), ABSORBING)

    def v_star(self, x):
        return optimal_value(self.inst, np.asarray(x, dtype=float).reshape(-1))

    def q_star(self, x, a):
        return q_value(np.asarray(x, dtype=float).reshape(-1), np.asarray(a, dtype=float).reshape(-1),
                       self.inst)


# --------------------------------------------------------------------------
# certified constants
# --------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def c_p(p: float) -> float:
    """``inf_{rho >= 0} (1 + |1 - rho|^p) / (1 + rho)^p``."""

    def ratio(rho):
        rho = np.asarray(rho, dtype=float)
        return (1.0 + np.abs(1.0 - rho) ** p) / (1.0 + rho) ** p

    grid = np.linspace(0.0, 10.0, 1001)
    vals = ratio(grid)
    j = int(np.argmin(vals))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, len(grid) - 1)]
    rho, neg = golden_maximize(lambda t: -ratio(t), np.array([lo]), np.array([hi]), 1e-12)
    best = min(float(-neg[0]), float(vals[j]))
    tail = ratio(np.geomspace(10.0, 1e8, 400))
    if np.any(tail < best - 1e-12):
        raise NumericError(f"c_p tail check failed for p={p}")
    # the ratio tends to 1 as rho grows, so 1 is always an upper bound
    return min(best, 1.0)


@functools.lru_cache(maxsize=None)
def holder_constant_plus(p: float, q: float, lattice: int = 2001) -> float:
    """Largest quotient ``|h_p(a) - h_p(b)| / |a - b|^q`` on [-1, 1]."""
    a = np.linspace(-1.0, 1.0, lattice)
    h = h_p(a, p)
    best, arg = 0.0, (0, 1)
    for i in range(lattice - 1):
        gap = a[i + 1:] - a[i]
        quot = np.abs(h[i + 1:] - h[i]) / gap ** q
        k = int(np.argmax(quot))
        if quot[k] > best:
            best, arg = float(quot[k]), (i, i + 1 + k)

    def neg_quot(z):
        lo = float(np.clip(z[0], -1.0, 1.0))
        hi = float(np.clip(z[0] + abs(z[1]), -1.0, 1.0))
        if hi - lo <= 1e-12:
            return 0.0
        return -abs(h_p(hi, p) - h_p(lo, p)) / (hi - lo) ** q

    start = np.array([a[arg[0]], a[arg[1]] - a[arg[0]]])
    res = optimize.minimize(neg_quot, start, method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
    return max(best, float(-res.fun))


# --------------------------------------------------------------------------
# data and plug-in estimators
# --------------------------------------------------------------------------


class NoiseDataset:
    """Ordered draws ``(y_i, d_i)``; ``theta_truth`` access is recorded."""

    def __init__(self, y, d, seed, theta_truth):
        self.y = np.asarray(y, dtype=np.int8)
        self.d = np.asarray(d, dtype=float)
        if self.y.shape != self.d.shape:
            raise ContractError("y and d must have equal length")
        if not np.all(np.abs(self.y) == 1):
            raise ContractError("y entries must be -1 or +1")
        self.seed = seed
        self._theta_truth = float(theta_truth)
        self.truth_accessed = False

    @property
    def theta_truth(self) -> float:
        self.truth_accessed = True
        return self._theta_truth

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def pairs(self):
        return list(zip(self.y.tolist(), self.d.tolist()))

    @property
    def ybar(self) -> float:
        if self.n == 0:
            raise ContractError("empty dataset")
        return float(np.mean(self.y, dtype=float))

    @property
    def dbar(self) -> float:
        if self.n == 0:
            raise ContractError("empty dataset")
        return float(np.mean(self.d))


def sample_dgp(inst: HardInstance, n: int, seed) -> NoiseDataset:
    if n < 1:
        raise ContractError(f"n must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < (1.0 + inst.theta) / 2.0, 1, -1)
    return NoiseDataset(y, np.full(n, inst.d_theta), seed, inst.theta)


def plugin_qhat_from(family: Family, params: RateParams, data: NoiseDataset) -> QSurface:
    """Plug-in surface that replaces theta and d_theta by sample means."""
    family = Family(family)
    if data.n == 0:
        raise ContractError("plug-in estimator needs a nonempty dataset")
    ybar, dbar = data.ybar, data.dbar
    meta = {"ybar": ybar, "dbar": dbar, "n": data.n}
    if family is Family.PLUS:
        kinks = [dbar]
        if ybar > 0:
            kinks.append(ybar ** (1.0 / params.m))
        fn = functools.partial(_plus_formula, theta=ybar, d=dbar, p=params.p, m=params.m)
        return QSurface.from_scalar(fn, form="closed-form-plus",
                                    kinks=tuple(k for k in kinks if 0 < k < 1), meta=meta)
    fn = functools.partial(_minus_formula, theta=ybar, d=dbar, p=params.p, q=params.q)
    return QSurface.from_scalar(fn, form="closed-form-minus", state_invariant=True,
                                reference_state=np.array([[0.5]]), meta=meta)


def plugin_qhat(inst: HardInstance, data: NoiseDataset) -> QSurface:
    return plugin_qhat_from(inst.family, inst.params, data)


class EnvelopePair(NamedTuple):
    delta: float
    lambda_q: float
    q: float


def envelopes_hard(inst: HardInstance, data: NoiseDataset) -> EnvelopePair:
    """Closed-form sup-error and action-Hoelder envelopes of the plug-in estimator."""
    err = abs(data.ybar - inst.theta)
    floor = float(data.n) ** -17
    q = inst.params.q
    if inst.family is Family.PLUS:
        factor = max(holder_constant_plus(inst.params.p, q), 2.0)
    else:
        factor = 2.0
    return EnvelopePair(err + floor, factor * err + floor, q)


# --------------------------------------------------------------------------
# two-point lower-bound experiment
# --------------------------------------------------------------------------


def greedy_plugin(data: NoiseDataset, family: Family, params: RateParams,
                  refine_tol: float = 1e-9) -> Policy:
    """Greedy policy of the plug-in surface."""
    return greedy_policy(plugin_qhat_from(family, params, data), ACTIONS, refine_tol=refine_tol)


def truth_reading(data: NoiseDataset, family: Family, params: RateParams) -> Policy:
    """Non-adapted baseline: peeks at the generating parameter."""
    inst = HardInstance(family, data.theta_truth, params)
    return optimal_policy(inst)


def lower_bound_constant(family: Family, params: RateParams, n: int) -> float:
    family = Family(family)
    p, q, m = params.p, params.q, params.m
    if family is Family.PLUS:
        return 2.0 ** (-5.0 - 3.0 / m) * n ** (-(m + 1) / (2 * m))
    return 2.0 ** (-2.0 - 2 * p / (p - q)) * n ** (-p / (2 * (p - q)))


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys)).generate_state(1)[0])


def replicate_regrets(inst: HardInstance, n: int, reps, algorithm, seed: int, key: int = 0,
                      quadrature: QuadratureSpec = QuadratureSpec()):
    """Exact regret of ``algorithm`` on ``len(reps)`` independent datasets.

    Returns ``(regrets, truth_accessed)``; replication ``r`` draws its data
    from the seed derived from ``(seed, key, r)``.
    """
    q_true, v_true = instance_q(inst), instance_v(inst)
    out = np.empty(len(reps))
    peeked = False
    for i, r in enumerate(reps):
        data = sample_dgp(inst, n, derive_seed(seed, key, r))
        policy = algorithm(data, inst.family, inst.params)
        peeked |= data.truth_accessed
        out[i] = regret_exact(q_true, v_true, policy, quadrature).value
    return out, peeked


def _replicate_job(args):
    return replicate_regrets(*args)


def parallel_regrets(inst, n, replications, algorithm, seed, key=0, workers=1,
                     quadrature: QuadratureSpec = QuadratureSpec()):
    reps = np.arange(replications)
    if workers <= 1:
        return replicate_regrets(inst, n, reps, algorithm, seed, key, quadrature)
    chunks = np.array_split(reps, workers)
    jobs = [(inst, n, c, algorithm, seed, key, quadrature) for c in chunks if len(c)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_replicate_job, jobs))
    return np.concatenate([p[0] for p in parts]), any(p[1] for p in parts)


class TwoPointResult(NamedTuple):
    max_expected_regret: float
    lower_bound: float
    std_error: float
    regret_plus: float
    regret_minus: float
    se_plus: float
    se_minus: float
    worst_theta: float
    adapted: bool


def two_point_experiment(family: Family, params: RateParams, n: int, replications: int,
                         algorithm=greedy_plugin, seed: int = 0, workers: int = 1) -> TwoPointResult:
    """Expected regret under theta = +xi and -xi with xi = 1 / (4 sqrt(n))."""
    if replications < 2:
        raise ContractError("need at least two replications")
    family = Family(family)
    xi = 1.0 / (4.0 * math.sqrt(n))
    stats = []
    adapted = True
    for key, theta in enumerate((xi, -xi)):
        inst = HardInstance(family, theta, params)
        regrets, peeked = parallel_regrets(inst, n, replications, algorithm, seed, key, workers)
        adapted &= not peeked
        stats.append((float(np.mean(regrets)), float(np.std(regrets, ddof=1) / math.sqrt(replications)), theta))
    (mp, sp, tp), (mm, sm, tm) = stats
    worst = 0 if mp >= mm else 1
    return TwoPointResult(max(mp, mm), lower_bound_constant(family, params, n), stats[worst][1],
                          mp, mm, sp, sm, stats[worst][2], adapted)
