"""Lost-sales inventory and workload service-allocation models, plus
translation-regularity checks for noise densities.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .core import ActionBox, Policy
from .errors import ContractError, DataError, DomainError
from .fitted_q import ControlModel, interp_weights

SQRT2 = math.sqrt(2.0)


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------


def _nonneg(*arrays):
    for arr in arrays:
        if np.any(np.asarray(arr) < 0):
            raise DomainError("inputs must be nonnegative")


def inventory_step(x, a, d, b):
    """Lost-sales update ``(min(x + a, b) - d)_+`` (componentwise)."""
    _nonneg(x, a, d, b)
    return np.maximum(np.minimum(np.add(x, a), b) - d, 0.0)


def workload_step(x, xi, a, b):
    """Workload update ``min((x + xi - a)_+, b)`` (componentwise)."""
    _nonneg(x, xi, a, b)
    return np.minimum(np.maximum(np.add(x, xi) - a, 0.0), b)


def project_capacity(a, b, zeta):
    """Euclidean projection of ``a`` onto ``{0 <= a <= b, sum(a) <= zeta}``.

    The projection is 1-Lipschitz, so composing it with the dynamics keeps
    the Lipschitz constant of the transition in the action.
    """
    a = np.clip(np.asarray(a, dtype=float), 0.0, b)
    total = a.sum(axis=-1)
    over = total > zeta
    if not np.any(over):
        return a
    sub = a[over]
    bb = np.broadcast_to(b, a.shape)[over]
    lo = np.zeros(len(sub))
    hi = sub.max(axis=-1)
    for _ in range(100):
        tau = 0.5 * (lo + hi)
        s = np.clip(sub - tau[:, None], 0.0, bb).sum(axis=-1)
        lo = np.where(s > zeta, tau, lo)
        hi = np.where(s > zeta, hi, tau)
    out = a.copy()
    out[over] = np.clip(sub - hi[:, None], 0.0, bb)
    return out


# --------------------------------------------------------------------------
# noise laws and densities
# --------------------------------------------------------------------------


class DensityGrid:
    """Density on a rectilinear grid; multilinear inside, zero outside."""

    def __init__(self, axes, values, tol: float = 1e-6):
        self.axes = tuple(np.asarray(a, dtype=float) for a in axes)
        self.values = np.asarray(values, dtype=float).reshape([len(a) for a in self.axes])
        for ax in self.axes:
            if len(ax) < 2 or not np.all(np.diff(ax) > 0):
                raise DataError("density axes must be strictly increasing with at least two nodes")
            if not np.allclose(np.diff(ax), ax[1] - ax[0], rtol=1e-6, atol=0):
                raise DataError("density axes must be uniform")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise DataError("density values must be finite and nonnegative")
        mass = self.mass()
        if abs(mass - 1.0) > tol:
            raise DataError(f"density integrates to {mass:.8f}, not 1")

    @property
    def dim(self) -> int:
        return len(self.axes)

    def mass(self) -> float:
        # the trapezoid rule is exact for a multilinear interpolant
        out = self.values
        for j, ax in reversed(list(enumerate(self.axes))):
            out = np.trapezoid(out, ax, axis=j)
        return float(out)

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.dim == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
            pts = pts[..., None]
        flat, wts = interp_weights(self.axes, pts, outside="zero")
        return np.sum(self.values.ravel()[flat] * wts, axis=-1)

    @classmethod
    def from_function(cls, axes, fn, normalize: bool = True) -> "DensityGrid":
        mesh = np.meshgrid(*axes, indexing="ij")
        vals = np.asarray(fn(*mesh), dtype=float)
        if normalize:
            mass = vals
            for j, ax in reversed(list(enumerate(axes))):
                mass = np.trapezoid(mass, ax, axis=j)
            vals = vals / mass
        return cls(axes, vals)

    def to_csv(self, path):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"w{j}" for j in range(self.dim)] + ["density"])
            for row in zip(*[m.ravel() for m in mesh], self.values.ravel()):
                writer.writerow([repr(float(v)) for v in row])


def load_density_csv(path) -> DensityGrid:
    """Read ``coordinates..., density`` rows (a header row and # comments allowed)."""
    rows = []
    with open(path) as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise DataError(f"non-numeric density row {row}") from None
    if not rows:
        raise DataError("density file has no rows")
    data = np.array(rows)
    dim = data.shape[1] - 1
    order = np.lexsort(tuple(data[:, j] for j in reversed(range(dim))))
    data = data[order]
    axes = tuple(np.unique(data[:, j]) for j in range(dim))
    if int(np.prod([len(a) for a in axes])) != len(data):
        raise DataError("density rows do not form a full rectilinear grid")
    return DensityGrid(axes, data[:, -1])


def uniform_density(lo: float = 0.0, hi: float = 1.0, nodes: int = 101) -> DensityGrid:
    ax = np.linspace(lo, hi, nodes)
    return DensityGrid((ax,), np.full(nodes, 1.0 / (hi - lo)))


def gaussian_density(sd: float = 1.0, half_width: float = 8.0, spacing: float = 0.005) -> DensityGrid:
    nodes = int(round(2 * half_width / spacing)) + 1
    ax = np.linspace(-half_width * sd, half_width * sd, nodes)
    return DensityGrid.from_function((ax,), lambda w: np.exp(-0.5 * (w / sd) ** 2))


def spike_density(mass: float = 0.5, width: float = 1e-4, center: float = 0.5,
                  nodes: int = 20001) -> DensityGrid:
    """Uniform background on [0, 1] plus a narrow triangular spike standing in for an atom."""
    ax = np.linspace(0.0, 1.0, nodes)
    spike = np.maximum(1.0 - np.abs(ax - center) / width, 0.0)
    spike /= np.trapezoid(spike, ax)
    return DensityGrid((ax,), (1.0 - mass) + mass * spike)


def fgm_density(rho: float = 0.5, nodes: int = 41) -> DensityGrid:
    """Correlated density on the unit square with uniform marginals."""
    if abs(rho) > 1:
        raise ContractError("|rho| must be at most 1")
    ax = np.linspace(0.0, 1.0, nodes)
    return DensityGrid.from_function((ax, ax), lambda u, v: 1.0 + rho * (2 * u - 1) * (2 * v - 1),
                                     normalize=False)


def _pairwise(arr, op):
    for j in range(arr.ndim):
        n = arr.shape[j]
        arr = op(np.take(arr, range(0, n - 1), axis=j), np.take(arr, range(1, n), axis=j))
    return arr


def sample_density(density: DensityGrid, rng, n: int) -> np.ndarray:
    """Exact draws from a piecewise-multilinear density.

    A cell is picked with probability equal to its mass (corner average
    times volume, exact for multilinear pieces); the point inside the cell
    comes from rejection against the largest corner value.
    """
    cell_mass = _pairwise(density.values, lambda u, v: 0.5 * (u + v))
    cell_peak = _pairwise(density.values, np.maximum).ravel()
    probs = cell_mass.ravel() / cell_mass.sum()
    step = np.array([ax[1] - ax[0] for ax in density.axes])
    out = np.empty((0, density.dim))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        pick = rng.choice(len(probs), size=m, p=probs)
        idx = np.unravel_index(pick, cell_mass.shape)
        lo = np.stack([density.axes[j][idx[j]] for j in range(density.dim)], axis=-1)
        pts = lo + rng.random((m, density.dim)) * step
        accept = rng.random(m) * cell_peak[pick] <= density(pts)
        out = np.concatenate([out, pts[accept]])
    return out[:n]


@dataclass
class NoiseLaw:
    """Sampler, optional equal-weight quadrature nodes and optional density."""

    sampler: Callable
    nodes: Optional[Callable] = None
    density: Optional[DensityGrid] = None
    upper: float = 1.0
    name: str = "noise"


def _midpoint_nodes(n: int, dim: int, lo: float, hi: float) -> np.ndarray:
    per = int(round(n ** (1.0 / dim)))
    if per ** dim != n:
        raise ContractError(f"node count {n} is not a perfect power for dimension {dim}")
    ax = lo + (np.arange(per) + 0.5) * (hi - lo) / per
    mesh = np.meshgrid(*[ax] * dim, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def uniform_noise(dim: int = 1, lo: float = 0.0, hi: float = 1.0) -> NoiseLaw:
    dens = uniform_density(lo, hi) if dim == 1 else None
    return NoiseLaw(lambda rng, n: rng.uniform(lo, hi, size=(n, dim)),
                    lambda n: _midpoint_nodes(n, dim, lo, hi), dens, hi, f"uniform[{lo},{hi}]^{dim}")


def density_noise(density: DensityGrid) -> NoiseLaw:
    upper = max(float(ax[-1]) for ax in density.axes)
    return NoiseLaw(lambda rng, n: sample_density(density, rng, n), None, density, upper, "density-grid")


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------


@dataclass
class InventoryModel:
    """Multi-item lost-sales inventory with revenue, ordering and holding terms.

    Reward per item: ``price * min(y, d) - order_cost * a - holding * (y - d)_+``
    with ``y = min(x + a, b)``.
    """

    k: int = 1
    b: tuple = (1.0,)
    demand: NoiseLaw = field(default_factory=uniform_noise)
    price: float = 1.0
    order_cost: float = 0.3
    holding: float = 0.1

    def __post_init__(self):
        self.b = np.broadcast_to(np.asarray(self.b, dtype=float), (self.k,)).copy()
        if np.any(self.b <= 0):
            raise ContractError("capacities must be positive")

    def transition(self, x, a, d):
        y = np.minimum(x + a, self.b)
        return np.maximum(y - d, 0.0)

    def reward(self, x, a, d):
        y = np.minimum(x + a, self.b)
        sold = np.minimum(y, d)
        left = np.maximum(y - d, 0.0)
        return np.sum(self.price * sold - self.order_cost * a - self.holding * left, axis=-1)

    def reward_lipschitz(self) -> float:
        top = max(self.price, self.holding)
        return math.sqrt(self.k) * math.sqrt(top ** 2 + (top + self.order_cost) ** 2)

    def reward_sup(self) -> float:
        return float(np.sum((self.price + self.order_cost + self.holding) * self.b))

    def to_control_model(self, gamma: float) -> ControlModel:
        return ControlModel(self.transition, self.reward, ActionBox.from_bounds(np.zeros(self.k), self.b),
                            np.zeros(self.k), self.b, gamma, SQRT2, (1.0, self.reward_lipschitz()),
                            self.reward_sup(), self.demand.sampler, self.demand.nodes, "inventory",
                            {"k": self.k, "b": self.b.tolist(), "price": self.price,
                             "order_cost": self.order_cost, "holding": self.holding,
                             "demand": self.demand.name, "gamma": gamma})

    def pre_clip_shift(self, x, a1, a2):
        """Translation between the laws of ``min(x + a, b) - D`` for two actions."""
        return np.minimum(x + a1, self.b) - np.minimum(x + a2, self.b)


@dataclass
class WorkloadModel:
    """Service allocation across ``k`` workload classes sharing capacity ``zeta``.

    Requested service rates are projected onto the feasible set
    ``{0 <= a <= b, sum(a) <= zeta}``; the reward charges holding cost on the
    next workload and a penalty on work lost to the buffer cap.
    """

    k: int = 2
    b: tuple = (1.0, 1.0)
    zeta: float = 1.0
    arrivals: NoiseLaw = field(default_factory=lambda: uniform_noise(2, 0.0, 0.5))
    holding: tuple = (1.0, 1.0)
    overflow: float = 2.0

    def __post_init__(self):
        self.b = np.broadcast_to(np.asarray(self.b, dtype=float), (self.k,)).copy()
        self.holding = np.broadcast_to(np.asarray(self.holding, dtype=float), (self.k,)).copy()
        if self.zeta <= 0:
            raise ContractError("total capacity must be positive")

    def feasible(self, a):
        return project_capacity(a, self.b, self.zeta)

    def transition(self, x, a, xi):
        af = self.feasible(np.broadcast_to(a, np.broadcast_shapes(np.shape(a), np.shape(x))))
        return np.minimum(np.maximum(x + xi - af, 0.0), self.b)

    def reward(self, x, a, xi):
        af = self.feasible(np.broadcast_to(a, np.broadcast_shapes(np.shape(a), np.shape(x))))
        raw = np.maximum(x + xi - af, 0.0)
        nxt = np.minimum(raw, self.b)
        lost = raw - nxt
        return -np.sum(self.holding * nxt + self.overflow * lost, axis=-1)

    def reward_lipschitz(self) -> float:
        top = float(np.max(self.holding)) + self.overflow
        return top * SQRT2 * math.sqrt(self.k)

    def reward_sup(self) -> float:
        return float(np.sum(self.holding * self.b + self.overflow * self.arrivals.upper))

    def to_control_model(self, gamma: float) -> ControlModel:
        return ControlModel(self.transition, self.reward, ActionBox.from_bounds(np.zeros(self.k), self.b),
                            np.zeros(self.k), self.b, gamma, SQRT2, (1.0, self.reward_lipschitz()),
                            self.reward_sup(), self.arrivals.sampler, self.arrivals.nodes, "workload",
                            {"k": self.k, "b": self.b.tolist(), "zeta": self.zeta,
                             "holding": self.holding.tolist(), "overflow": self.overflow,
                             "arrivals": self.arrivals.name, "gamma": gamma})

    def pre_clip_shift(self, x, a1, a2):
        return self.feasible(a2) - self.feasible(a1)


class Simulator:
    """Adapter exposing a control model to the Monte Carlo rollout helpers."""

    def __init__(self, model: ControlModel, v_star=None, q_star=None):
        self.model = model
        self.gamma = model.gamma
        self.r_max = float(model.reward_bound) if not callable(model.reward_bound) else None
        if v_star is not None:
            self.v_star = v_star
        if q_star is not None:
            self.q_star = q_star

    def sample_noise(self, rng, size):
        return self.model.noise_sampler(rng, size)

    def sample_initial(self, rng, size):
        return rng.uniform(self.model.state_lo, self.model.state_hi, size=(size, self.model.state_dim))

    def step(self, x, a, w):
        return self.model.reward(x, a, w), self.model.transition(x, a, w)


def base_stock_policy(model: ControlModel, level) -> Policy:
    """Order up to ``level`` (clipped to the action box)."""
    level = np.asarray(level, dtype=float)
    return Policy(lambda xs: np.maximum(level - xs, 0.0), model.action_space)


def desk_inventory(gamma: float = 0.5, **kwargs) -> ControlModel:
    """One-item inventory on [0, 1] with uniform demand; contraction holds with alpha = 1."""
    return InventoryModel(**kwargs).to_control_model(gamma)


# --------------------------------------------------------------------------
# translation regularity
# --------------------------------------------------------------------------


def _segments(ax, shift, cells):
    """Midpoints and widths of cells aligned to the grid and its shifted copy."""
    step = ax[1] - ax[0]
    pts = np.unique(np.concatenate([ax, ax - shift]))
    # drop sliver segments created by rounding
    pts = pts[np.concatenate([[True], np.diff(pts) > 1e-9 * step])]
    lo, hi = pts[:-1], pts[1:]
    frac = (np.arange(cells) + 0.5) / cells
    mids = (lo[:, None] + (hi - lo)[:, None] * frac[None, :]).ravel()
    widths = np.repeat((hi - lo) / cells, cells)
    return mids, widths


def _shift_integral(density: DensityGrid, h, cells):
    grids, weights = [], []
    for j, ax in enumerate(density.axes):
        m, w = _segments(ax, h[j], cells)
        grids.append(m)
        weights.append(w)
    mesh = np.meshgrid(*grids, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    wmesh = np.meshgrid(*weights, indexing="ij")
    vol = np.prod(np.stack([w.ravel() for w in wmesh], axis=-1), axis=-1)
    diff = np.abs(density(pts + h) - density(pts))
    return float(np.sum(diff * vol))


def tv_shift_norm(density: DensityGrid, h, rel_tol: float = 1e-4, max_cells: int = 64) -> float:
    """``integral |p(w + h) - p(w)| dw`` by aligned midpoint quadrature.

    Cells are aligned with the grid nodes and their shifted copies, then
    halved until the relative change drops below ``rel_tol``.
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if h.shape != (density.dim,):
        raise ContractError(f"shift must have dimension {density.dim}")
    if not np.any(h):
        return 0.0
    cells = 1
    prev = _shift_integral(density, h, cells)
    while cells < max_cells:
        cells *= 2
        cur = _shift_integral(density, h, cells)
        if abs(cur - prev) <= rel_tol * abs(cur):
            return cur
        prev = cur
    return prev


class TVFit(NamedTuple):
    ell: float
    q_bar: float
    regular: bool
    h: np.ndarray
    norms: np.ndarray


def fit_tv_exponent(density: DensityGrid, h_grid: Sequence[float], direction=None,
                    min_exponent: float = 0.25) -> TVFit:
    """Log-log fit ``norm ~ ell * |h|^q_bar``; flags ``q_bar < min_exponent`` as irregular."""
    h = np.asarray(h_grid, dtype=float)
    h = h[h > 0]
    if len(h) < 3:
        raise ContractError("need at least three positive shifts for a fit")
    if h.max() / h.min() < 100 * (1 - 1e-12):
        raise ContractError("shift grid must span at least two decades")
    u = np.zeros(density.dim)
    u[0] = 1.0
    if direction is not None:
        u = np.asarray(direction, dtype=float)
        u = u / np.linalg.norm(u)
    norms = np.array([tv_shift_norm(density, t * u) for t in h])
    if np.any(norms <= 0):
        raise ContractError("zero shift norm; the fit is degenerate")
    slope, intercept = np.polyfit(np.log(h), np.log(norms), 1)
    return TVFit(float(math.exp(intercept)), float(slope), bool(slope >= min_exponent), h, norms)


def tv_constant(density: DensityGrid, q_bar: float = 1.0, h_grid=None, directions=None) -> float:
    """Largest ``norm(h) / |h|^q_bar`` over a set of shifts (sup-type constant)."""
    h_grid = np.geomspace(1e-3, 0.5, 12) if h_grid is None else np.asarray(h_grid, dtype=float)
    if directions is None:
        if density.dim == 1:
            directions = [np.array([1.0])]
        else:
            ang = np.linspace(0, np.pi, 9)[:-1]
            directions = [np.array([math.cos(t), math.sin(t)]) for t in ang]
    best = 0.0
    for u in directions:
        u = np.asarray(u, dtype=float) / np.linalg.norm(u)
        for t in h_grid:
            best = max(best, tv_shift_norm(density, t * u) / t ** q_bar)
    return best


def post_clip_tv(density: DensityGrid, y1: float, y2: float, cells: int = 200_000) -> float:
    """Total variation between the laws of ``(y1 - D)_+`` and ``(y2 - D)_+`` (scalar D)."""
    if density.dim != 1:
        raise ContractError("post-clip TV is implemented for scalar demand")
    ax = density.axes[0]
    top = max(y1, y2) - ax[0]
    edges = np.linspace(0.0, max(top, 1e-12), cells + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    p1 = np.where(mid <= y1, density(y1 - mid), 0.0)
    p2 = np.where(mid <= y2, density(y2 - mid), 0.0)

    def tail(y):
        # P(D >= y) by midpoint rule on the density grid
        grid = np.linspace(y, ax[-1], cells + 1) if y < ax[-1] else None
        if grid is None:
            return 0.0
        m = 0.5 * (grid[:-1] + grid[1:])
        return float(np.sum(density(m)) * (grid[1] - grid[0]))

    atom_gap = abs(tail(max(y1, ax[0])) - tail(max(y2, ax[0])))
    return 0.5 * (atom_gap + float(np.sum(np.abs(p1 - p2)) * width))


class TVAudit(NamedTuple):
    max_ratio: float
    ratios: np.ndarray
    skipped: int
    ell: float
    q_bar: float


def tv_action_regularity_audit(model, x_samples, action_pairs, n_mc: int = 0, seed: int = 0,
                               density: Optional[DensityGrid] = None, ell: Optional[float] = None,
                               q_bar: float = 1.0) -> TVAudit:
    """Max over pairs of the pushforward TV bound relative to ``(ell / 2) |a - a'|^q_bar``.

    ``model`` is an :class:`InventoryModel` or :class:`WorkloadModel`.  The
    pre-clip laws of two actions differ by a translation, so their TV
    distance is half the shifted-density L1 norm.  ``n_mc`` extra random
    (x, a, a') triples are appended to the supplied ones.
    """
    density = density if density is not None else getattr(
        getattr(model, "demand", None) or getattr(model, "arrivals", None), "density", None)
    if density is None:
        raise ContractError("the model noise has no density grid")
    if ell is None:
        ell = tv_constant(density, q_bar)
    k = model.k
    xs = [np.atleast_1d(np.asarray(x, dtype=float)) for x in x_samples]
    pairs = [(np.atleast_1d(np.asarray(a, dtype=float)), np.atleast_1d(np.asarray(c, dtype=float)))
             for a, c in action_pairs]
    if len(xs) != len(pairs):
        raise ContractError("x_samples and action_pairs must have equal length")
    rng = np.random.default_rng(seed)
    for _ in range(n_mc):
        xs.append(rng.uniform(0, model.b))
        pairs.append((rng.uniform(0, model.b), rng.uniform(0, model.b)))
    ratios, skipped = [], 0
    for x, (a1, a2) in zip(xs, pairs):
        gap = float(np.linalg.norm(a1 - a2))
        if gap == 0.0:
            skipped += 1
            continue
        shift = np.broadcast_to(model.pre_clip_shift(x, a1, a2), (k,))
        tv = 0.5 * tv_shift_norm(density, shift)
        ratios.append(tv / (0.5 * ell * gap ** q_bar))
    ratios = np.array(ratios)
    return TVAudit(float(ratios.max()) if ratios.size else float("nan"), ratios, skipped, ell, q_bar)
