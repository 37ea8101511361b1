"""Split-sample fitted-Q estimator on a rectilinear state grid.

The value half of the sample defines an empirical Bellman operator whose
fixed point is computed on grid nodes (multilinear interpolation between
them); the Q half turns that value function into a plug-in Q-surface.

Broadcasting convention for models: ``transition(x, a, w)`` and
``reward(x, a, w)`` accept arrays whose trailing axis is the coordinate
axis and broadcast over the leading axes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import sparse

from .core import ActionBox, QSurface, _lattice, as_box, as_states, maximize_actions
from .errors import ConfigError, ContractError, DataError, DomainError, NumericError
from .hard_instances import EnvelopePair

CONTRACTION_MARGIN = 0.999
CHUNK = 2_000_000  # max (pair, sample) elements materialized at once


@dataclass
class ControlModel:
    """Noise-driven control model ``x' = f(x, a, w)`` with reward ``r(x, a, w)``.

    Attributes:
        transition, reward: broadcasting callables (see module docstring).
        action_space: ActionInterval or ActionBox.
        state_lo, state_hi: bounds of the state box.
        gamma: discount factor.
        lipschitz_f: declared Lipschitz constant of f in z = (x, a).
        holder_r: ``(alpha_r, L_r)`` with ``L_r`` a constant or a callable of
            the noise batch returning per-draw moduli.
        reward_bound: constant or per-draw callable bounding ``|r|``.
        noise_sampler: ``(rng, n) -> (n, dw)``.
        noise_nodes: optional ``n -> (n, dw)`` equal-weight quadrature nodes.
    """

    transition: Callable
    reward: Callable
    action_space: Union[ActionBox, object]
    state_lo: np.ndarray
    state_hi: np.ndarray
    gamma: float
    lipschitz_f: float
    holder_r: tuple
    reward_bound: Union[float, Callable]
    noise_sampler: Optional[Callable] = None
    noise_nodes: Optional[Callable] = None
    name: str = "model"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.action_space = as_box(self.action_space)
        self.state_lo = np.atleast_1d(np.asarray(self.state_lo, dtype=float))
        self.state_hi = np.atleast_1d(np.asarray(self.state_hi, dtype=float))
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def state_dim(self) -> int:
        return len(self.state_lo)

    def per_draw(self, spec, w) -> np.ndarray:
        if callable(spec):
            return np.asarray(spec(w), dtype=float).reshape(len(w))
        return np.full(len(w), float(spec))


# --------------------------------------------------------------------------
# Hoelder bookkeeping
# --------------------------------------------------------------------------


def select_holder_exponent(alpha_r: float, gamma: float, ell_f: float,
                           margin: float = CONTRACTION_MARGIN) -> float:
    """``min(alpha_r, largest alpha with gamma * ell_f**alpha < margin)``."""
    if not 0 < alpha_r <= 1:
        raise ConfigError(f"alpha_r must lie in (0, 1], got {alpha_r}")
    if gamma == 0.0 or gamma * ell_f ** alpha_r < margin:
        return alpha_r
    if gamma >= margin:
        raise ConfigError(f"no admissible alpha: gamma={gamma} leaves no contraction margin")
    lo, hi = 0.0, alpha_r
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gamma * ell_f ** mid < margin:
            lo = mid
        else:
            hi = mid
    return lo


def holder_modulus(alpha: float, alpha_r: float, ell_r: float, r_vee: float, gamma: float,
                   ell_f: float) -> float:
    """Hoelder modulus of the optimal value for exponent ``alpha <= alpha_r``."""
    contraction = gamma * ell_f ** alpha
    if contraction >= 1.0:
        raise ConfigError(f"gamma * ell_f^alpha = {contraction} is not a contraction")
    ratio = alpha / alpha_r
    return ell_r ** ratio * (2.0 * r_vee) ** (1.0 - ratio) / (1.0 - contraction)


def validate_lipschitz(model: ControlModel, n_pairs: int = 10_000, seed: int = 0,
                       slack: float = 1e-9) -> float:
    """Largest sampled quotient ``|f(z, w) - f(z', w)| / |z - z'|``; raises if above the declared constant."""
    rng = np.random.default_rng(seed)
    box = model.action_space
    dx = model.state_dim

    def draw():
        x = rng.uniform(model.state_lo, model.state_hi, size=(n_pairs, dx))
        a = rng.uniform(box.lo, box.hi, size=(n_pairs, box.dim))
        return x, a

    (x1, a1), (x2, a2) = draw(), draw()
    w = model.noise_sampler(rng, n_pairs)
    f1 = model.transition(x1, a1, w)
    f2 = model.transition(x2, a2, w)
    dz = np.sqrt(np.sum((x1 - x2) ** 2, axis=-1) + np.sum((a1 - a2) ** 2, axis=-1))
    quot = np.linalg.norm(f1 - f2, axis=-1) / dz
    worst = float(np.max(quot))
    if worst > model.lipschitz_f * (1 + slack):
        raise ConfigError(f"sampled Lipschitz quotient {worst:.6g} exceeds declared {model.lipschitz_f}")
    return worst


# --------------------------------------------------------------------------
# samples and grids
# --------------------------------------------------------------------------


class SplitSample(NamedTuple):
    v_sample: np.ndarray
    q_sample: np.ndarray
    seed: int


def split_sample(sampler: Callable, n: int, seed: int) -> SplitSample:
    """Two independent halves of size ``n`` from disjoint child streams."""
    if n < 1:
        raise ContractError("n must be positive")
    child_v, child_q = np.random.SeedSequence(seed).spawn(2)
    v = np.asarray(sampler(np.random.default_rng(child_v), n), dtype=float)
    q = np.asarray(sampler(np.random.default_rng(child_q), n), dtype=float)
    return SplitSample(v.reshape(n, -1), q.reshape(n, -1), seed)


@dataclass(frozen=True)
class GridSpec:
    lo: tuple
    hi: tuple
    counts: tuple

    @classmethod
    def for_model(cls, model: ControlModel, counts) -> "GridSpec":
        counts = tuple(np.broadcast_to(np.asarray(counts, dtype=int), (model.state_dim,)).tolist())
        return cls(tuple(model.state_lo.tolist()), tuple(model.state_hi.tolist()), counts)

    def axes(self):
        if any(c < 2 for c in self.counts):
            raise ContractError("every grid axis needs at least two nodes")
        return tuple(np.linspace(l, h, c) for l, h, c in zip(self.lo, self.hi, self.counts))

    def refined(self, factor: int) -> "GridSpec":
        return GridSpec(self.lo, self.hi, tuple((c - 1) * factor + 1 for c in self.counts))


def _is_uniform(ax) -> bool:
    gaps = np.diff(ax)
    return bool(np.all(np.abs(gaps - gaps[0]) <= 1e-12 * abs(gaps[0])))


def interp_weights(axes, pts, outside: str = "clamp", tol: float = 1e-9):
    """Multilinear interpolation stencil.

    Returns ``(flat_index, weight)`` arrays of shape ``pts.shape[:-1] + (2**d,)``.
    ``outside="clamp"`` extends the boundary values and rejects points beyond
    ``tol``; ``outside="zero"`` gives zero weight outside the box.
    """
    pts = np.asarray(pts, dtype=float)
    d = len(axes)
    lead = pts.shape[:-1]
    idx_parts, t_parts, inside = [], [], np.ones(lead, dtype=bool)
    for j, ax in enumerate(axes):
        xj = pts[..., j]
        if outside == "clamp":
            if np.any(xj < ax[0] - tol) or np.any(xj > ax[-1] + tol):
                raise DomainError(f"point outside the grid along axis {j}")
        else:
            inside &= (xj >= ax[0]) & (xj <= ax[-1])
        step = (ax[-1] - ax[0]) / (len(ax) - 1)
        if _is_uniform(ax):
            pos = (xj - ax[0]) / step
            i = np.clip(np.floor(pos).astype(np.int64), 0, len(ax) - 2)
            t = np.clip(pos - i, 0.0, 1.0)
        else:
            i = np.clip(np.searchsorted(ax, xj, side="right") - 1, 0, len(ax) - 2)
            t = np.clip((xj - ax[i]) / (ax[i + 1] - ax[i]), 0.0, 1.0)
        idx_parts.append(i)
        t_parts.append(t)
    shape = [len(ax) for ax in axes]
    strides = np.cumprod([1] + shape[::-1][:-1])[::-1]
    corners = np.array(np.meshgrid(*[[0, 1]] * d, indexing="ij")).reshape(d, -1).T
    flat = np.zeros(lead + (len(corners),), dtype=np.int64)
    wts = np.ones(lead + (len(corners),))
    for c, bits in enumerate(corners):
        for j in range(d):
            flat[..., c] += (idx_parts[j] + bits[j]) * strides[j]
            wts[..., c] *= t_parts[j] if bits[j] else 1.0 - t_parts[j]
    if outside != "clamp":
        wts *= inside[..., None]
    return flat, wts


@dataclass
class ValueGrid:
    """Grid-backed value function with Hoelder metadata."""

    axes: tuple
    values: np.ndarray
    alpha: float
    ell_alpha: float
    tol: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        self.values = np.asarray(self.values, dtype=float).reshape([len(a) for a in self.axes])
        if not np.all(np.isfinite(self.values)):
            raise NumericError("value grid contains non-finite entries")

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def __call__(self, x) -> np.ndarray:
        return self.lookup(as_states(x, self.dim))

    def lookup(self, pts, tol: float = 1e-9) -> np.ndarray:
        """Interpolated values at points with trailing coordinate axis."""
        if self.dim == 1:
            ax = self.axes[0]
            xj = pts[..., 0]
            if xj.size and (xj.min() < ax[0] - tol or xj.max() > ax[-1] + tol):
                raise DomainError("point outside the grid along axis 0")
            return np.interp(xj, ax, self.values)
        flat, wts = interp_weights(self.axes, pts, tol=tol)
        return np.sum(self.values.ravel()[flat] * wts, axis=-1)

    def to_csv(self, path=None) -> str:
        header = {"counts": [len(a) for a in self.axes], "lo": [float(a[0]) for a in self.axes],
                  "hi": [float(a[-1]) for a in self.axes], "alpha": self.alpha,
                  "ell_alpha": self.ell_alpha, "tol": self.tol}
        buf = io.StringIO()
        buf.write("# value-grid v1 " + json.dumps(header, sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(self.dim)] + ["value"])
        for node, v in zip(self.nodes, self.values.ravel()):
            writer.writerow([repr(float(c)) for c in node] + [repr(float(v))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "ValueGrid":
        with open(path) as fh:
            first = fh.readline()
            if not first.startswith("# value-grid v1 "):
                raise DataError("missing value-grid header line")
            header = json.loads(first[len("# value-grid v1 "):])
            rows = list(csv.reader(fh))[1:]
        data = np.array(rows, dtype=float)
        axes = tuple(np.unique(data[:, j]) for j in range(data.shape[1] - 1))
        if [len(a) for a in axes] != header["counts"]:
            raise DataError("node dump does not match the declared grid")
        return cls(axes, data[:, -1], header["alpha"], header["ell_alpha"], header["tol"])


# --------------------------------------------------------------------------
# empirical Bellman operator
# --------------------------------------------------------------------------


def _pair_outcomes(model: ControlModel, xs, acts, w):
    """Mean reward and next states for matched (x, a) pairs against all draws."""
    nx = model.transition(xs[:, None, :], acts[:, None, :], w[None, :, :])
    r = model.reward(xs[:, None, :], acts[:, None, :], w[None, :, :])
    return np.asarray(r, dtype=float), np.asarray(nx, dtype=float)


def _operator(model, axes, xs, acts, w):
    """Mean rewards and interpolation operator for matched (x, a) pairs."""
    n = len(w)
    n_nodes = int(np.prod([len(a) for a in axes]))
    n_pairs = len(xs)
    rbar = np.empty(n_pairs)
    rows, cols, vals = [], [], []
    step = max(1, CHUNK // max(n, 1))
    dense = n_pairs * n_nodes <= 4_000_000
    mat = np.zeros(n_pairs * n_nodes) if dense else None
    for s in range(0, n_pairs, step):
        sl = slice(s, min(s + step, n_pairs))
        r, nx = _pair_outcomes(model, xs[sl], acts[sl], w)
        rbar[sl] = r.mean(axis=1)
        flat, wts = interp_weights(axes, nx)
        row = np.arange(sl.start, sl.stop)[:, None, None]
        if dense:
            key = (row * n_nodes + flat).ravel()
            mat += np.bincount(key, weights=wts.ravel() / n, minlength=mat.size)
        else:
            rows.append(np.broadcast_to(row, flat.shape).ravel())
            cols.append(flat.ravel())
            vals.append(wts.ravel() / n)
    if dense:
        op = mat.reshape(n_pairs, n_nodes)
    else:
        op = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(n_pairs, n_nodes))
    return rbar, op


def empirical_q(model: ControlModel, sample: np.ndarray, vgrid: ValueGrid, xs, acts) -> np.ndarray:
    """``mean_i [r(x, a, w_i) + gamma * V(f(x, a, w_i))]`` for matched pairs."""
    xs = np.asarray(xs, dtype=float)
    acts = np.asarray(acts, dtype=float)
    n = len(sample)
    out = np.empty(len(xs))
    step = max(1, CHUNK // max(n, 1))
    for s in range(0, len(xs), step):
        sl = slice(s, s + step)
        r, nx = _pair_outcomes(model, xs[sl], acts[sl], sample)
        out[sl] = np.mean(r + model.gamma * vgrid.lookup(nx), axis=1)
    return out


def qhat_surface(model: ControlModel, q_sample: np.ndarray, vgrid: ValueGrid) -> QSurface:
    """Plug-in Q-surface built from the Q half of the split sample."""

    def evaluator(x, a):
        n, k = a.shape[:2]
        xs = np.repeat(x, k, axis=0)
        return empirical_q(model, q_sample, vgrid, xs, a.reshape(n * k, -1)).reshape(n, k)

    return QSurface(evaluator=evaluator, form="grid-backed")


def evaluate_qhat(model: ControlModel, q_sample, vgrid: ValueGrid, x, a):
    """Plug-in Q at matched ``(x, a)`` pairs (scalars or batches)."""
    scalar = np.ndim(x) == 0 and np.ndim(a) == 0
    xs = as_states(x, model.state_dim)
    acts = as_states(a, model.action_space.dim)
    if len(xs) == 1 and len(acts) > 1:
        xs = np.repeat(xs, len(acts), axis=0)
    if len(acts) == 1 and len(xs) > 1:
        acts = np.repeat(acts, len(xs), axis=0)
    out = empirical_q(model, np.asarray(q_sample, dtype=float).reshape(len(q_sample), -1), vgrid, xs, acts)
    return float(out[0]) if scalar else out


def solve_empirical_bellman(model: ControlModel, v_sample, grid_spec: GridSpec, tol: float = 1e-8,
                            action_n: int = 33, refine_tol: float = 1e-8, max_outer: int = 50,
                            holder_margin: float = CONTRACTION_MARGIN) -> ValueGrid:
    """Fixed point of the empirical Bellman operator on grid nodes.

    Value iteration runs over a fixed action lattice first; each outer round
    then maximizes continuously at every node and adds the maximizers as
    extra candidate actions.  The run stops once a continuous sweep changes
    the node values by at most ``tol * (1 - gamma) / (2 * gamma)``.
    """
    if not tol > 0:
        raise ContractError("tol must be positive")
    gamma = model.gamma
    w = np.asarray(v_sample, dtype=float).reshape(len(v_sample), -1)
    alpha_r, l_r = model.holder_r
    alpha = select_holder_exponent(alpha_r, gamma, model.lipschitz_f, holder_margin)
    ell_r = float(np.mean(model.per_draw(l_r, w)))
    r_vee = float(np.mean(model.per_draw(model.reward_bound, w)))
    ell_alpha = holder_modulus(alpha, alpha_r, ell_r, r_vee, gamma, model.lipschitz_f)

    axes = grid_spec.axes()
    grid = ValueGrid(axes, np.zeros([len(a) for a in axes]), alpha, ell_alpha, tol)
    nodes = grid.nodes
    g = len(nodes)
    box = model.action_space
    _, lat = _lattice(box, action_n)
    k = len(lat)
    xs = np.repeat(nodes, k, axis=0)
    acts = np.tile(lat, (g, 1))
    r_lat, p_lat = _operator(model, axes, xs, acts, w)
    stop = tol * (1.0 - gamma) / (2.0 * gamma) if gamma > 0 else np.inf
    inner_stop = 0.25 * stop

    v = np.zeros(g)
    r_ref = p_ref = None
    history = []
    q_surf = qhat_surface(model, w, grid)

    def lattice_q(vec):
        return (r_lat + gamma * (p_lat @ vec)).reshape(g, k)

    def sweep(vec):
        best = lattice_q(vec).max(axis=1)
        if r_ref is not None:
            best = np.maximum(best, r_ref + gamma * (p_ref @ vec))
        return best

    for outer in range(max_outer):
        for _ in range(100_000):
            nxt = sweep(v)
            change = float(np.max(np.abs(nxt - v)))
            v = nxt
            if outer == 0:
                history.append(change)
            if change <= inner_stop or gamma == 0:
                break
        grid.values = v.reshape(grid.values.shape)
        lq = lattice_q(v)
        a_star, tv = maximize_actions(q_surf, nodes, box, action_n, refine_tol, n_peaks=1,
                                      lattice_values=lq)
        if r_ref is not None:
            # a continuous sweep never does worse than the previous maximizers
            prev = r_ref + gamma * (p_ref @ v)
            tv = np.maximum(tv, prev)
        change = float(np.max(np.abs(tv - v)))
        v = tv
        if change <= stop:
            grid.values = v.reshape(grid.values.shape)
            grid.meta.update({"outer_rounds": outer + 1, "sweep_changes": history,
                              "final_change": change, "n": len(w), "ell_r": ell_r, "r_vee": r_vee})
            return grid
        r_ref, p_ref = _operator(model, axes, nodes, a_star, w)
    raise NumericError(f"value iteration did not reach tolerance after {max_outer} refinement rounds")


def reference_solution(model: ControlModel, grid_spec: GridSpec, n_nodes: int = 16384,
                       tol: float = 1e-9, action_n: int = 65) -> ValueGrid:
    """High-accuracy solution using equal-weight noise quadrature nodes."""
    if model.noise_nodes is None:
        raise ContractError("the model provides no noise quadrature nodes")
    nodes = np.asarray(model.noise_nodes(n_nodes), dtype=float).reshape(n_nodes, -1)
    grid = solve_empirical_bellman(model, nodes, grid_spec, tol=tol, action_n=action_n)
    grid.meta["noise_nodes"] = nodes
    return grid


def sampled_holder_quotient(vgrid: ValueGrid, alpha: Optional[float] = None, refine: int = 4,
                            max_points: int = 4000, seed: int = 0) -> float:
    """Largest ``|V(x) - V(y)| / |x - y|^alpha`` over a refined lattice of the grid."""
    alpha = vgrid.alpha if alpha is None else alpha
    axes = tuple(np.linspace(a[0], a[-1], (len(a) - 1) * refine + 1) for a in vgrid.axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    if len(pts) > max_points:
        rng = np.random.default_rng(seed)
        pts = pts[rng.choice(len(pts), max_points, replace=False)]
    vals = vgrid(pts)
    best = 0.0
    for i in range(len(pts) - 1):
        dist = np.linalg.norm(pts[i + 1:] - pts[i], axis=-1)
        quot = np.abs(vals[i + 1:] - vals[i]) / dist ** alpha
        best = max(best, float(quot.max()))
    return best


# --------------------------------------------------------------------------
# envelopes
# --------------------------------------------------------------------------


def _surface_values(surface, xs, lat):
    xs = np.asarray(xs, dtype=float)
    acts = np.broadcast_to(lat, (len(xs),) + lat.shape)
    fn = surface.evaluator if isinstance(surface, QSurface) else surface
    return np.asarray(fn(xs, acts), dtype=float)


def measure_envelopes(qhat, qstar_ref, x_lattice, action_lattice, q: float, n: int,
                      action_pairs: Optional[Sequence] = None, max_pairs: int = 100_000,
                      seed: int = 0) -> EnvelopePair:
    """Lattice sup-error and action-Hoelder quotient of ``qhat - qstar_ref``.

    Both surfaces are QSurfaces or evaluators with the batch convention.
    Values are lower bounds of the continuous suprema; both carry the
    ``n**-17`` floor.  ``qhat`` may also be a precomputed value matrix.
    """
    xs = as_states(x_lattice)
    lat = as_states(action_lattice)
    est = np.asarray(qhat) if isinstance(qhat, np.ndarray) else _surface_values(qhat, xs, lat)
    ref = np.asarray(qstar_ref) if isinstance(qstar_ref, np.ndarray) else _surface_values(qstar_ref, xs, lat)
    err = est - ref
    floor = float(n) ** -17
    delta = float(np.max(np.abs(err))) + floor
    if action_pairs is None:
        i, j = np.triu_indices(len(lat), k=1)
        if len(i) * len(xs) > max_pairs:
            rng = np.random.default_rng(seed)
            pick = rng.choice(len(i), max(1, max_pairs // len(xs)), replace=False)
            i, j = i[pick], j[pick]
    else:
        pairs = np.asarray(action_pairs, dtype=int)
        i, j = pairs[:, 0], pairs[:, 1]
    dist = np.linalg.norm(lat[i] - lat[j], axis=-1)
    keep = dist > 0
    i, j, dist = i[keep], j[keep], dist[keep]
    quot = np.abs(err[:, i] - err[:, j]) / dist ** q
    lam = (float(np.max(quot)) if quot.size else 0.0) + floor
    return EnvelopePair(delta, lam, q)
