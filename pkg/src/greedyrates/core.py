"""MDP primitives, greedy extraction, regret and occupancy computations.

Conventions used throughout the package: a batch of states is an array of
shape ``(N, dx)`` and a batch of candidate actions per state is an array of
shape ``(N, K, da)``.  A Q-surface evaluator maps such a pair to values of
shape ``(N, K)``.  One-dimensional helpers accept plain scalars or vectors.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, NumericError

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionInterval:
    """Compact interval [lo, hi] of admissible actions."""

    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ContractError(f"action interval endpoints must be finite, got [{lo}, {hi}]")
        if not lo < hi:
            raise ContractError(f"action interval needs lo < hi, got [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class ActionBox:
    """Product of per-coordinate action intervals."""

    intervals: tuple

    def __post_init__(self):
        ivs = tuple(self.intervals)
        if not ivs or not all(isinstance(iv, ActionInterval) for iv in ivs):
            raise ContractError("an action box needs at least one ActionInterval")
        object.__setattr__(self, "intervals", ivs)

    @classmethod
    def from_bounds(cls, lo, hi) -> "ActionBox":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        return cls(tuple(ActionInterval(l, h) for l, h in zip(lo, hi)))

    @property
    def dim(self) -> int:
        return len(self.intervals)

    @property
    def lo(self) -> np.ndarray:
        return np.array([iv.lo for iv in self.intervals])

    @property
    def hi(self) -> np.ndarray:
        return np.array([iv.hi for iv in self.intervals])

    def clip(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, self.lo, self.hi)


def as_box(actions) -> ActionBox:
    if isinstance(actions, ActionBox):
        return actions
    if isinstance(actions, ActionInterval):
        return ActionBox((actions,))
    raise ContractError(f"expected ActionInterval or ActionBox, got {type(actions).__name__}")


@dataclass(frozen=True)
class RateParams:
    """Discount and geometry exponents (gamma, p, q, m)."""

    gamma: float
    p: float
    q: float
    m: float

    def __post_init__(self):
        for name in ("gamma", "p", "q", "m"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ContractError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if not 0.0 < self.gamma < 1.0:
            raise ContractError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.p > 0.0:
            raise ContractError(f"p must be positive, got {self.p}")
        if not 0.0 <= self.q <= 1.0:
            raise ContractError(f"q must lie in [0, 1], got {self.q}")
        if not self.m > 0.0:
            raise ContractError(f"m must be positive, got {self.m}")

    def require_strict_growth(self):
        """Hard instances need p > q."""
        if not self.p > self.q:
            raise ContractError(f"hard instances require p > q, got p={self.p}, q={self.q}")
        return self


def as_states(x, dim: int = 1) -> np.ndarray:
    """Coerce scalars, vectors or matrices to an ``(N, dim)`` state batch."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1) if dim == 1 else arr.reshape(1, -1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1) if dim == 1 else arr.reshape(1, -1)
    return arr


@dataclass
class QSurface:
    """Action-value surface with batch evaluator.

    Attributes:
        evaluator: ``(x (N, dx), a (N, K, da)) -> (N, K)``.
        form: "closed-form-plus", "closed-form-minus" or "grid-backed".
        state_invariant: the maximizing action does not depend on the state,
            so greedy extraction may solve once and reuse the answer.
        kinks: states where the surface or its maximizer may jump (used to
            split quadrature).
        reference_state: state used when ``state_invariant`` is set.
        meta: free-form bookkeeping (sample means and the like).
    """

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    form: str = "grid-backed"
    state_invariant: bool = False
    kinks: tuple = ()
    reference_state: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    FORMS = ("closed-form-plus", "closed-form-minus", "grid-backed")

    def __post_init__(self):
        if self.form not in self.FORMS:
            raise ContractError(f"unknown Q-surface form {self.form!r}")

    @classmethod
    def from_scalar(cls, fn, **kwargs) -> "QSurface":
        """Wrap a broadcasting ``fn(x, a)`` on one-dimensional states and actions."""

        def evaluator(x, a):
            return np.broadcast_to(np.asarray(fn(x[:, :1], a[..., 0]), dtype=float), a.shape[:2])

        return cls(evaluator=evaluator, **kwargs)

    def __call__(self, x, a) -> np.ndarray:
        return self.evaluator(x, a)

    def values(self, x, a, state_dim: int = 1, action_dim: int = 1) -> np.ndarray:
        """Evaluate at matched pairs ``(x_i, a_i)``; returns shape ``(N,)``."""
        xs = as_states(x, state_dim)
        acts = as_states(a, action_dim)
        xs, acts = _pair(xs, acts)
        return np.asarray(self.evaluator(xs, acts[:, None, :]))[:, 0]


def _pair(xs, acts):
    n = max(len(xs), len(acts))
    if len(xs) == 1:
        xs = np.repeat(xs, n, axis=0)
    if len(acts) == 1:
        acts = np.repeat(acts, n, axis=0)
    if len(xs) != len(acts):
        raise ContractError("state and action batches have different lengths")
    return xs, acts


class Policy:
    """Stationary deterministic policy with outputs clipped into the action box."""

    def __init__(self, rule, actions, tie_break: str = "smallest", kinks: Sequence = ()):
        self.rule = rule
        self.actions = as_box(actions)
        self.tie_break = tie_break
        self.kinks = tuple(kinks)

    def act(self, x) -> np.ndarray:
        """Actions of shape ``(N, da)`` for a state batch."""
        xs = as_states(x)
        acts = np.asarray(self.rule(xs), dtype=float).reshape(len(xs), self.actions.dim)
        return self.actions.clip(acts)

    def __call__(self, x):
        scalar = np.ndim(x) == 0
        acts = self.act(x)
        if self.actions.dim == 1:
            acts = acts[:, 0]
            return float(acts[0]) if scalar else acts
        return acts[0] if scalar else acts


def _constant_rule(act, xs):
    return np.broadcast_to(act, (len(xs), len(act)))


def constant_policy(action, actions) -> Policy:
    box = as_box(actions)
    act = np.array(np.broadcast_to(np.asarray(action, dtype=float), (box.dim,)))
    return Policy(functools.partial(_constant_rule, act), box)


class RegretValue(NamedTuple):
    value: float
    method: str
    std_error: float = 0.0


# --------------------------------------------------------------------------
# greedy extraction
# --------------------------------------------------------------------------


def _check_finite(values, xs, acts):
    if np.isfinite(values).all():
        return
    bad = ~np.isfinite(values)
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise EvaluationError(xs[i].tolist(), acts[i, k].tolist(), float(values[i, k]))


def golden_maximize(fun, lo, hi, tol):
    """Vectorized golden-section search for a maximum on each ``[lo_i, hi_i]``.

    ``fun`` maps a vector of points to a vector of values.  Ties keep the
    left section so the search leans toward smaller arguments.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    width = float(np.max(hi - lo)) if lo.size else 0.0
    c = hi - INV_PHI * (hi - lo)
    d = lo + INV_PHI * (hi - lo)
    fc, fd = fun(c), fun(d)
    n_iter = 0 if width <= tol else int(math.ceil(math.log(tol / width) / math.log(INV_PHI)))
    for _ in range(n_iter):
        left = fc >= fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        new_c = hi - INV_PHI * (hi - lo)
        new_d = lo + INV_PHI * (hi - lo)
        d_next = np.where(left, c, new_d)
        c_next = np.where(left, new_c, d)
        fd_prev, fc_prev = fd, fc
        probe = np.where(left, new_c, new_d)
        fp = fun(probe)
        fc = np.where(left, fp, fd_prev)
        fd = np.where(left, fc_prev, fp)
        c, d = c_next, d_next
    take_c = fc >= fd
    return np.where(take_c, c, d), np.where(take_c, fc, fd)


def _lattice(box: ActionBox, coarse_n: int):
    if box.dim == 1:
        axes = [np.linspace(box.lo[0], box.hi[0], coarse_n)]
    else:
        per = max(3, int(round(coarse_n ** (1.0 / box.dim))))
        axes = [np.linspace(l, h, per) for l, h in zip(box.lo, box.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return axes, np.stack([m.ravel() for m in mesh], axis=-1)


def _top_peaks(values, axes, n_peaks):
    """Indices of the best local maxima on the lattice, ties to lower index."""
    n, k = values.shape
    if len(axes) == 1:
        left = np.concatenate([np.full((n, 1), -np.inf), values[:, :-1]], axis=1)
        right = np.concatenate([values[:, 1:], np.full((n, 1), -np.inf)], axis=1)
        score = np.where((values >= left) & (values >= right), values, -np.inf)
    else:
        score = values
    order = np.argsort(-score, axis=1, kind="stable")
    return order[:, : min(n_peaks, k)]


def maximize_actions(q: QSurface, x, actions, coarse_n: int = 257, refine_tol: float = 1e-9,
                     n_peaks: int = 2, lattice_values: Optional[np.ndarray] = None):
    """Lattice search plus golden-section refinement of ``a -> q(x, a)``.

    Returns ``(actions (N, da), values (N,))``.  Among candidates whose value
    is within ``refine_tol`` of the best, the smallest action (lexicographic)
    wins.
    """
    if coarse_n < 3:
        raise ContractError(f"coarse_n must be at least 3, got {coarse_n}")
    if not refine_tol > 0:
        raise ContractError(f"refine_tol must be positive, got {refine_tol}")
    box = as_box(actions)
    xs = as_states(x)
    n = len(xs)
    axes, lat = _lattice(box, coarse_n)
    if lattice_values is None:
        acts = np.broadcast_to(lat, (n,) + lat.shape)
        lattice_values = np.asarray(q.evaluator(xs, acts), dtype=float)
        _check_finite(lattice_values, xs, acts)
    peaks = _top_peaks(lattice_values, axes, n_peaks)
    n_p = peaks.shape[1]
    start = lat[peaks]  # (N, P, da)
    rows = np.repeat(np.arange(n), n_p)
    xs_rep = xs[rows]
    point = start.reshape(n * n_p, box.dim).copy()
    best_val = None
    sweeps = 1 if box.dim == 1 else 3
    for _ in range(sweeps):
        for j, ax in enumerate(axes):
            step = ax[1] - ax[0]
            lo = np.maximum(point[:, j] - step, ax[0])
            hi = np.minimum(point[:, j] + step, ax[-1])

            def fun(t, j=j, base=point):
                if box.dim == 1:
                    probe = t[:, None]
                else:
                    probe = base.copy()
                    probe[:, j] = t
                vals = np.asarray(q.evaluator(xs_rep, probe[:, None, :]), dtype=float)[:, 0]
                _check_finite(vals[:, None], xs_rep, probe[:, None, :])
                return vals

            t_best, f_best = golden_maximize(fun, lo, hi, refine_tol)
            if best_val is None:
                base_val = np.take_along_axis(lattice_values, peaks, axis=1).reshape(-1)
            else:
                base_val = best_val
            better = f_best > base_val
            point[:, j] = np.where(better, t_best, point[:, j])
            best_val = np.where(better, f_best, base_val)
    refined = point.reshape(n, n_p, box.dim)
    refined_val = best_val.reshape(n, n_p)
    cand = np.concatenate([start, refined], axis=1)
    cand_val = np.concatenate([np.take_along_axis(lattice_values, peaks, axis=1), refined_val], axis=1)
    top = cand_val.max(axis=1, keepdims=True)
    near = cand_val >= top - refine_tol
    # lexicographic smallest among near-ties
    alive = near.copy()
    for j in range(box.dim):
        col = np.where(alive, cand[..., j], np.inf)
        alive &= col <= col.min(axis=1, keepdims=True)
    choice = np.argmax(alive, axis=1)
    idx = np.arange(n)
    return cand[idx, choice], cand_val[idx, choice]


class GreedyPolicy(Policy):
    """Policy that maximizes a Q-surface on demand."""

    def __init__(self, q: QSurface, actions, coarse_n=257, refine_tol=1e-9, n_peaks=2):
        self.q = q
        self.coarse_n = coarse_n
        self.refine_tol = refine_tol
        self.n_peaks = n_peaks
        self._cached = None
        super().__init__(self._rule, actions, "smallest", kinks=q.kinks)
        if coarse_n < 3:
            raise ContractError(f"coarse_n must be at least 3, got {coarse_n}")
        if not refine_tol > 0:
            raise ContractError(f"refine_tol must be positive, got {refine_tol}")

    def _rule(self, xs):
        if self.q.state_invariant:
            if self._cached is None:
                ref = self.q.reference_state
                ref = xs[:1] if ref is None else as_states(ref)
                self._cached = self._solve(ref)[0]
            return np.broadcast_to(self._cached, (len(xs), self.actions.dim))
        return self._solve(xs)

    def _solve(self, xs):
        acts, _ = maximize_actions(self.q, xs, self.actions, self.coarse_n,
                                   self.refine_tol, self.n_peaks)
        return acts


def greedy_policy(q: QSurface, actions, coarse_n: int = 257, refine_tol: float = 1e-9,
                  n_peaks: int = 2) -> GreedyPolicy:
    """Greedy policy for ``q`` over a continuous action interval or box."""
    return GreedyPolicy(q, actions, coarse_n, refine_tol, n_peaks)


# --------------------------------------------------------------------------
# quadrature and exact regret
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureSpec:
    lo: float = 0.0
    hi: float = 1.0
    tol: float = 1e-9
    breakpoints: tuple = ()
    max_depth: int = 50
    min_depth: int = 1
    min_width: float = 1e-11


def adaptive_simpson(f, spec: QuadratureSpec = QuadratureSpec()):
    """Breadth-first adaptive Simpson rule for a vectorized integrand.

    Returns ``(integral, error_estimate)``.  Intervals that reach
    ``max_depth`` or shrink below ``min_width * (hi - lo)`` are accepted as
    they are; their error estimate still counts
    toward the total, so a discontinuity only costs its shrinking width.
    Integrand values at ``lo``, ``hi`` and the breakpoints are taken as
    one-sided limits.
    """
    a, b = float(spec.lo), float(spec.hi)
    span = b - a
    inner = []
    for t in sorted({float(t) for t in spec.breakpoints if a < float(t) < b}):
        # breakpoints that differ only by rounding would leave a sliver interval
        if t - (inner[-1] if inner else a) > 1e-12 * span and b - t > 1e-12 * span:
            inner.append(t)
    edges = np.array([a] + inner + [b])
    lo, hi = edges[:-1], edges[1:]
    k = len(lo)
    # five equispaced points per interval; the end values are one-sided
    # limits so a jump at a split point costs nothing
    nudge = 1e-13 * (hi - lo)
    pts = lo[None, :] + (hi - lo)[None, :] * np.array([0.0, 0.25, 0.5, 0.75, 1.0])[:, None]
    pts[0] += nudge
    pts[4] -= nudge
    fv = np.asarray(f(pts.ravel()), dtype=float).reshape(5, k)
    depth = 0
    parts, errs = [], []
    while lo.size:
        w = hi - lo
        whole = w / 6.0 * (fv[0] + 4 * fv[2] + fv[4])
        left = w / 12.0 * (fv[0] + 4 * fv[1] + fv[2])
        right = w / 12.0 * (fv[2] + 4 * fv[3] + fv[4])
        diff = left + right - whole
        if not np.all(np.isfinite(diff)):
            raise NumericError("integrand returned non-finite values")
        depth += 1
        ok = (np.abs(diff) <= 15.0 * spec.tol * w / span) & (depth >= spec.min_depth)
        ok |= w <= spec.min_width * span
        if depth >= spec.max_depth:
            ok[:] = True
        parts.append(left[ok] + right[ok] + diff[ok] / 15.0)
        errs.append(np.abs(diff[ok]) / 15.0)
        keep = ~ok
        if not keep.any():
            break
        mid = 0.5 * (lo + hi)
        lo = np.concatenate([lo[keep], mid[keep]])
        hi = np.concatenate([mid[keep], hi[keep]])
        m = keep.sum()
        quarter = np.concatenate([lo + 0.25 * (hi - lo), lo + 0.75 * (hi - lo)])
        fq = np.asarray(f(quarter), dtype=float)
        fv = np.stack([
            np.concatenate([fv[0, keep], fv[2, keep]]),
            fq[: 2 * m],
            np.concatenate([fv[1, keep], fv[3, keep]]),
            fq[2 * m:],
            np.concatenate([fv[2, keep], fv[4, keep]]),
        ])
    total = float(math.fsum(np.concatenate(parts))) if parts else 0.0
    err = float(math.fsum(np.concatenate(errs))) if errs else 0.0
    if err > spec.tol:
        raise NumericError(f"quadrature did not converge: estimated error {err:.3e} > tol {spec.tol:.1e}")
    return total, err


def regret_exact(instance_q: QSurface, instance_v, policy: Policy,
                 state_quadrature: QuadratureSpec = QuadratureSpec()) -> RegretValue:
    """Integral of ``V(x) - Q(x, pi(x))`` over the uniform law on [lo, hi]."""

    def gap(xs):
        states = xs.reshape(-1, 1)
        acts = policy.act(states)
        q = np.asarray(instance_q.evaluator(states, acts[:, None, :]))[:, 0]
        return np.asarray(instance_v(xs), dtype=float) - q

    bps = tuple(state_quadrature.breakpoints) + tuple(instance_q.kinks) + tuple(policy.kinks)
    spec = dataclasses.replace(state_quadrature, breakpoints=bps)
    total, _ = adaptive_simpson(gap, spec)
    return RegretValue(total / (spec.hi - spec.lo), "exact-quadrature", 0.0)


# --------------------------------------------------------------------------
# Monte Carlo rollouts
# --------------------------------------------------------------------------


def horizon(gamma: float, eps: float, r_max: float) -> int:
    """Smallest T with discarded tail ``r_max * gamma**T / (1 - gamma) <= eps``."""
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    ratio = eps * (1.0 - gamma) / r_max
    if ratio >= 1.0:
        return 1
    return max(1, int(math.ceil(math.log(ratio) / math.log(gamma))))


def _r_max(mdp) -> float:
    r_max = getattr(mdp, "r_max", None)
    if r_max is None or not np.isfinite(r_max) or r_max <= 0:
        raise ContractError("the simulator must declare a finite positive reward bound r_max")
    return float(r_max)


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Random stream for one block of paths, derived from (seed, block)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))


def _run_block(args):
    mdp, policy, mu_sampler, gamma, T, seed, block, size, want_ell = args
    rng = block_rng(seed, block)
    x = as_states(mu_sampler(rng, size))
    x0 = x.copy()
    ret = np.zeros(size)
    ell = np.zeros(size)
    disc = 1.0
    for _ in range(T):
        a = policy.act(x)
        if want_ell:
            q = np.asarray(mdp.q_star(x, a), dtype=float).reshape(size)
            ell += disc * (np.asarray(mdp.v_star(x), dtype=float).reshape(size) - q)
        w = mdp.sample_noise(rng, size)
        r, x = mdp.step(x, a, w)
        ret += disc * np.asarray(r, dtype=float).reshape(size)
        x = as_states(x)
        disc *= gamma
    return x0, ret, ell


def rollout(mdp, policy: Policy, mu_sampler, gamma: float, eps: float, n_paths: int, seed: int,
            want_ell: bool = False, workers: int = 1, block_size: int = 4096):
    """Truncated discounted rollouts.

    Returns ``(x0, returns, ell_sums)`` per path.  Paths are grouped in
    fixed-size blocks, each with its own stream, so results do not depend on
    ``workers``.
    """
    if n_paths < 2:
        raise ContractError("need at least two paths for a standard error")
    T = horizon(gamma, eps, _r_max(mdp))
    sizes = [min(block_size, n_paths - s) for s in range(0, n_paths, block_size)]
    jobs = [(mdp, policy, mu_sampler, gamma, T, seed, b, sz, want_ell) for b, sz in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_run_block, jobs))
    else:
        out = [_run_block(j) for j in jobs]
    x0 = np.concatenate([o[0] for o in out])
    ret = np.concatenate([o[1] for o in out])
    ell = np.concatenate([o[2] for o in out])
    return x0, ret, ell


def _mean_se(values: np.ndarray):
    return float(np.mean(values)), float(np.std(values, ddof=1) / math.sqrt(len(values)))


def policy_value_mc(mdp, policy, mu_sampler, gamma, eps=1e-8, n_paths=10_000, seed=0, workers=1):
    """Monte Carlo estimate of the discounted value of ``policy`` from ``mu``."""
    _, ret, _ = rollout(mdp, policy, mu_sampler, gamma, eps, n_paths, seed, workers=workers)
    mean, se = _mean_se(ret)
    return RegretValue(mean, "monte-carlo", se)


def regret_monte_carlo(mdp, policy: Policy, mu_sampler, gamma: float, eps: float = 1e-8,
                       n_paths: int = 10_000, seed: int = 0, workers: int = 1) -> RegretValue:
    """``V*(mu) - V^pi(mu)`` with V* evaluated pathwise at the initial state."""
    _r_max(mdp)
    if not hasattr(mdp, "v_star"):
        raise ContractError("the simulator must expose v_star")
    x0, ret, _ = rollout(mdp, policy, mu_sampler, gamma, eps, n_paths, seed, workers=workers)
    per_path = np.asarray(mdp.v_star(x0), dtype=float).reshape(-1) - ret
    mean, se = _mean_se(per_path)
    return RegretValue(mean, "monte-carlo", se)


@dataclass(frozen=True)
class AbsorbingOccupancy:
    """Occupancy ``(1 - gamma) mu + gamma delta_s`` for one-step absorbing models."""

    absorbing_state: float = 2.0
    quadrature: QuadratureSpec = QuadratureSpec()


class PDResidual(NamedTuple):
    residual: float
    std_error: float
    regret: float
    identity: float


def performance_difference_residual(mdp, policy: Policy, occupancy_spec, n_paths: int, seed: int,
                                    mu_sampler=None, gamma: Optional[float] = None,
                                    eps: float = 1e-8, workers: int = 1) -> PDResidual:
    """Gap between Monte Carlo regret and the occupancy-weighted suboptimality.

    ``occupancy_spec`` is either an :class:`AbsorbingOccupancy` (closed form)
    or the string ``"empirical"`` (discounted visits along the same paths).
    """
    gamma = mdp.gamma if gamma is None else gamma
    mu_sampler = mdp.sample_initial if mu_sampler is None else mu_sampler
    for name in ("v_star", "q_star"):
        if not hasattr(mdp, name):
            raise ContractError(f"the simulator must expose {name}")
    empirical = occupancy_spec == "empirical"
    x0, ret, ell = rollout(mdp, policy, mu_sampler, gamma, eps, n_paths, seed,
                           want_ell=empirical, workers=workers)
    regret_paths = np.asarray(mdp.v_star(x0), dtype=float).reshape(-1) - ret
    regret, regret_se = _mean_se(regret_paths)
    if empirical:
        identity = float(np.mean(ell))
        diff, se = _mean_se(regret_paths - ell)
        return PDResidual(abs(diff), se, regret, identity)
    if not isinstance(occupancy_spec, AbsorbingOccupancy):
        raise ContractError(f"unknown occupancy spec {occupancy_spec!r}")

    def ell_fn(xs):
        states = as_states(xs)
        acts = policy.act(states)
        return (np.asarray(mdp.v_star(states), dtype=float).reshape(-1)
                - np.asarray(mdp.q_star(states, acts), dtype=float).reshape(-1))

    qs = occupancy_spec.quadrature
    bps = tuple(qs.breakpoints) + tuple(policy.kinks) + tuple(getattr(mdp, "kinks", ()))
    spec = dataclasses.replace(qs, breakpoints=bps)
    integral, _ = adaptive_simpson(ell_fn, spec)
    mu_part = integral / (spec.hi - spec.lo)
    atom = float(ell_fn(np.array([occupancy_spec.absorbing_state]))[0])
    identity = ((1.0 - gamma) * mu_part + gamma * atom) / (1.0 - gamma)
    return PDResidual(abs(regret - identity), regret_se, regret, identity)
