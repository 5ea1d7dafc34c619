"""Bootstrap generalized inferential model.

The observed ranking statistic ``T(theta)`` is calibrated by the
distribution of its bootstrap analogue ``T^xi(theta_hat)`` over
multinomial weights ``xi``.  The Monte Carlo contour is

    pi(theta) = B^-1 #{b : T^xi_b(theta_hat) > T(theta)}

and everything else (upper and lower probabilities, plausibility
regions, marginal contours) is read off that contour.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SingularityError, SolverQualityError
from .estimation import solve, solve_batch
from .problems import Dataset

CHUNK = 256
CLAMP = 1e-10
RCOND = 1e-10
GRID_WIDTH = 6.0
GRID_STEPS = 401
EXACT_MAX_N = 7


# ---------------------------------------------------------------------------
# Randomness

def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the substream of ``seed`` labelled by ``key``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def sample_weights(n: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Multinomial bootstrap counts, ``Mult_n(n^-1 1_n)``."""
    if n < 1:
        raise DomainError("n must be at least 1")
    return rng.multinomial(n, np.full(n, 1.0 / n), size=size)


def weight_chunks(n: int, B: int, seed: int):
    """Yield ``(start, W)`` blocks of bootstrap weights.

    Block ``k`` always holds replicates ``k*CHUNK ..`` drawn from the
    substream keyed by ``k``, so the weights do not depend on how the
    blocks are later scheduled.
    """
    for k, start in enumerate(range(0, B, CHUNK)):
        size = min(CHUNK, B - start)
        yield start, sample_weights(n, substream(seed, k), size=size)


# ---------------------------------------------------------------------------
# T statistics

def _quad_form(Psi, S, n):
    """``n Psi' S^+ Psi`` for stacks of vectors and matrices."""
    Sp = np.linalg.pinv(S, rcond=RCOND, hermitian=True)
    return n * np.einsum("...i,...ij,...j->...", Psi, Sp, Psi)


def _z_stat(psi, w, n):
    """T from psi values (n, d) and weights (n,).  Raises on a rank-0 S."""
    Psi = w @ psi / n
    S = (psi * w[:, None]).T @ psi / n
    if not np.any(S):
        raise SingularityError("estimating-function covariance is zero")
    return float(_quad_form(Psi, S, n))


def t_observed(problem, data: Dataset, theta, theta_hat) -> float:
    """Observed statistic ``T(theta)`` (risk gap or quadratic form)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return float(t_observed_many(problem, data, theta[None, :], theta_hat)[0])


def t_observed_many(problem, data: Dataset, thetas, theta_hat, block: int = 4096) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim == 1:
        thetas = thetas[:, None] if problem.dim == 1 else thetas[None, :]
    if thetas.shape[1] != problem.dim:
        raise DomainError(f"parameter has dimension {thetas.shape[1]}, problem needs {problem.dim}")
    n = data.n
    out = np.empty(thetas.shape[0])
    if problem.kind == "M":
        r0 = problem.losses(np.atleast_2d(theta_hat), data)[0].mean()
        for s in range(0, thetas.shape[0], block):
            gap = problem.losses(thetas[s:s + block], data).mean(axis=1) - r0
            out[s:s + block] = np.maximum(gap, 0.0)
        return out
    if hasattr(problem, "psi_many"):
        for s in range(0, thetas.shape[0], block):
            psi = problem.psi_many(thetas[s:s + block], data)
            Psi = psi.mean(axis=1)
            S = np.einsum("gni,gnj->gij", psi, psi) / n
            if not np.all(np.any(S, axis=(1, 2))):
                raise SingularityError("estimating-function covariance is zero")
            out[s:s + block] = _quad_form(Psi, S, n)
        return out
    ones = np.ones(n)
    for g, th in enumerate(thetas):
        out[g] = _z_stat(problem.psi_values(th, data), ones, n)
    return out


def _clamp(t, scale):
    tol = CLAMP * np.maximum(1.0, scale)
    if np.any(t <= -tol):
        worst = float(np.min(t))
        raise SolverQualityError(f"bootstrap risk gap {worst:.3g} is negative beyond solver slack")
    return np.maximum(t, 0.0)


def t_bootstrap_batch(problem, data: Dataset, W, theta_hat):
    """Bootstrap statistics ``T^xi(theta_hat)`` for each row of ``W``.

    Returns ``(stats, flags, thetas)``; ``thetas`` holds the replicate
    estimators in the M-case and is ``None`` in the Z-case, which does not
    need them.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    n = data.n
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    if problem.kind == "M":
        thetas, flags = solve_batch(problem, data, W, theta_hat=theta_hat)
        l_hat = problem.losses(theta_hat[None, :], data)[0]
        r_hat = W @ l_hat / n
        r_xi = np.einsum("bn,bn->b", W, problem.losses(thetas, data)) / n
        return _clamp(r_hat - r_xi, np.abs(r_hat)), flags, thetas
    psi = problem.psi_values(theta_hat, data)
    Psi = W @ psi / n
    S = np.einsum("bn,ni,nj->bij", W, psi, psi) / n
    dead = ~np.any(S, axis=(1, 2))
    stats = _quad_form(Psi, S, n)
    stats[dead] = 0.0
    return np.maximum(stats, 0.0), dead, None


def t_bootstrap(problem, data: Dataset, w, theta_hat) -> float:
    """Single bootstrap statistic for weights ``w``."""
    return float(t_bootstrap_batch(problem, data, np.asarray(w)[None, :], theta_hat)[0][0])


# ---------------------------------------------------------------------------
# Bootstrap distribution

def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BootstrapDistribution:
    """Sorted bootstrap sample of ``T^xi(theta_hat)``.

    ``cov`` is a covariance estimate for ``theta_hat`` used to size default
    grids and to whiten fiber searches.
    """

    stats: np.ndarray
    theta_hat: np.ndarray
    seed: int
    flags: int = 0
    cov: np.ndarray | None = None
    problem: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "stats", _readonly(np.sort(self.stats)))
        object.__setattr__(self, "theta_hat", _readonly(np.atleast_1d(self.theta_hat)))
        if self.cov is not None:
            object.__setattr__(self, "cov", _readonly(np.atleast_2d(self.cov)))

    @property
    def B(self) -> int:
        return self.stats.size

    def exceedance(self, t) -> np.ndarray:
        """``B^-1 #{stats > t}`` by binary search; vectorized over ``t``."""
        t = np.asarray(t, dtype=float)
        return (self.B - np.searchsorted(self.stats, t, side="right")) / self.B

    def snapshot(self) -> dict:
        return {"B": self.B, "seed": self.seed, "theta_hat": self.theta_hat.tolist(),
                "flags": self.flags, "problem": self.problem, "stats": self.stats.tolist()}

    def to_json(self, path=None, **kw) -> str:
        text = json.dumps(self.snapshot(), **kw)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _numerical_jacobian(problem, data, theta):
    d = theta.size
    J = np.empty((d, d))
    for j in range(d):
        h = 1e-6 * max(1.0, abs(theta[j]))
        e = np.zeros(d)
        e[j] = h
        up = problem.psi_values(theta + e, data).mean(axis=0)
        dn = problem.psi_values(theta - e, data).mean(axis=0)
        J[:, j] = (up - dn) / (2 * h)
    return J


def sandwich_cov(problem, data, theta_hat) -> np.ndarray:
    """``J^-1 S J^-T / n`` for a Z-problem at its root."""
    psi = problem.psi_values(theta_hat, data)
    S = psi.T @ psi / data.n
    Jinv = np.linalg.pinv(_numerical_jacobian(problem, data, theta_hat))
    return Jinv @ S @ Jinv.T / data.n


def build_distribution(problem, data: Dataset, B: int = 500, seed: int = 0,
                       threads: int = 1) -> BootstrapDistribution:
    """Run the bootstrap: estimate ``theta_hat``, then ``B`` replicates.

    Weight blocks come from fixed substreams, so the result is identical
    for every value of ``threads``.
    """
    if B < 1:
        raise DomainError("B must be at least 1")
    problem.validate(data)
    theta_hat = solve(problem, data, np.ones(data.n)).theta_hat
    chunks = list(weight_chunks(data.n, B, seed))

    def work(item):
        return t_bootstrap_batch(problem, data, item[1], theta_hat)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    stats = np.concatenate([p[0] for p in parts])
    flags = int(sum(int(np.sum(p[1])) for p in parts))
    if problem.kind == "M":
        thetas = np.concatenate([p[2] for p in parts])
        cov = np.atleast_2d(np.cov(thetas, rowvar=False)) if B > 1 else np.zeros((problem.dim,) * 2)
    else:
        cov = sandwich_cov(problem, data, theta_hat)
    return BootstrapDistribution(stats, theta_hat, int(seed), flags, cov, problem.describe())


# ---------------------------------------------------------------------------
# Contours

@dataclass(frozen=True)
class ContourTable:
    """Contour values on a grid of parameter values.

    ``axes`` is set when the grid is a Cartesian product (first axis
    varying slowest); ``t`` holds the observed statistic per grid point.
    """

    grid: np.ndarray
    values: np.ndarray
    t: np.ndarray | None = None
    axes: tuple | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim == 1:
            grid = grid[:, None]
        object.__setattr__(self, "grid", _readonly(grid))
        object.__setattr__(self, "values", _readonly(self.values))
        if self.t is not None:
            object.__setattr__(self, "t", _readonly(self.t))

    def __len__(self):
        return self.values.size

    @property
    def dim(self) -> int:
        return self.grid.shape[1]

    def cell_volume(self) -> float | None:
        if self.axes is None:
            return None
        return float(np.prod([(a[-1] - a[0]) / (len(a) - 1) for a in self.axes]))

    def to_csv(self, path=None, names=None) -> str:
        """CSV text ``theta_1..theta_p,contour`` headed by the run config."""
        names = names or [f"theta_{j + 1}" for j in range(self.dim)]
        lines = [f"# {json.dumps(self.config, sort_keys=True)}"] if self.config else []
        lines.append(",".join([*names, "contour"]))
        for row, v in zip(self.grid, self.values):
            lines.append(",".join([*(repr(float(x)) for x in row), repr(float(v))]))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def product_grid(axes) -> np.ndarray:
    axes = [np.asarray(a, dtype=float) for a in axes]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def default_axes(dist: BootstrapDistribution, width: float = GRID_WIDTH, steps: int = GRID_STEPS):
    """Per-axis grids ``theta_hat +- width * se`` with ``steps`` points."""
    th = dist.theta_hat
    cov = dist.cov if dist.cov is not None else np.zeros((th.size, th.size))
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    se = np.where(se > 0, se, 1e-3 * np.maximum(1.0, np.abs(th)))
    return tuple(np.linspace(t - width * s, t + width * s, steps) for t, s in zip(th, se))


def contour_at(dist: BootstrapDistribution, problem, data: Dataset, theta) -> float:
    """Contour value at a single parameter."""
    return float(dist.exceedance(t_observed(problem, data, theta, dist.theta_hat)))


def contour_grid(dist: BootstrapDistribution, problem, data: Dataset, grid=None, axes=None,
                 config=None, threads: int = 1) -> ContourTable:
    """Contour on explicit grid points or on the product of ``axes``.

    With neither given, the default grid is used (only for ``dim <= 2``).
    """
    if grid is None:
        if axes is None:
            if problem.dim > 2:
                raise DomainError("default grid only for dimension <= 2; pass a grid")
            axes = default_axes(dist)
        axes = tuple(np.asarray(a, dtype=float) for a in axes)
        grid = product_grid(axes)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None] if problem.dim == 1 else grid[None, :]
    if grid.shape[0] == 0:
        raise DomainError("empty grid")
    blocks = np.array_split(np.arange(grid.shape[0]), max(1, min(threads, grid.shape[0])))

    def work(idx):
        return t_observed_many(problem, data, grid[idx], dist.theta_hat)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            t = np.concatenate(list(pool.map(work, blocks)))
    else:
        t = work(np.arange(grid.shape[0]))
    return ContourTable(grid, dist.exceedance(t), t, axes, dict(config or {}))


# ---------------------------------------------------------------------------
# Possibility calculus

def _mask(table: ContourTable, assertion) -> np.ndarray:
    if callable(assertion):
        m = np.array([bool(assertion(row)) for row in table.grid], dtype=bool)
    else:
        a = np.asarray(assertion)
        if a.dtype == bool:
            m = a
        else:
            m = np.zeros(len(table), bool)
            m[a.astype(int)] = True
    if m.shape != (len(table),):
        raise DomainError("assertion does not match the grid")
    return m


def upper_probability(table: ContourTable, assertion) -> float:
    """Maximum contour over the grid points selected by ``assertion`` (0 if none).

    ``assertion`` is a boolean mask, an index array, or a predicate on
    grid rows.
    """
    m = _mask(table, assertion)
    return float(table.values[m].max()) if m.any() else 0.0


def lower_probability(table: ContourTable, assertion) -> float:
    return 1.0 - upper_probability(table, ~_mask(table, assertion))


@dataclass(frozen=True)
class PlausibilityRegion:
    """Grid points with contour above ``alpha``."""

    alpha: float
    members: np.ndarray
    grid: np.ndarray
    intervals: list | None = None
    area: float | None = None
    config: dict = field(default_factory=dict)

    def points(self) -> np.ndarray:
        return self.grid[self.members]

    def hull(self):
        """Smallest interval containing every member (1-D), or None."""
        if not self.members.any():
            return None
        pts = self.grid[self.members, 0]
        return float(pts.min()), float(pts.max())

    def to_dict(self) -> dict:
        out = {"alpha": self.alpha, "config": self.config}
        if self.intervals is not None:
            out["intervals"] = [list(iv) for iv in self.intervals]
        else:
            out["members"] = self.points().tolist()
            out["area"] = self.area
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _runs(mask):
    """Index pairs (start, stop) of maximal True runs."""
    edges = np.diff(np.r_[0, mask.astype(np.int8), 0])
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1) - 1))


def plausibility_region(table: ContourTable, alpha: float) -> PlausibilityRegion:
    """``{theta in grid : contour(theta) > alpha}``, with intervals in 1-D."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError("alpha must lie in [0, 1]")
    members = table.values > alpha
    intervals = area = None
    if table.dim == 1:
        order = np.argsort(table.grid[:, 0], kind="stable")
        g = table.grid[order, 0]
        intervals = [(float(g[a]), float(g[b])) for a, b in _runs(members[order])]
    elif table.cell_volume() is not None:
        area = float(members.sum() * table.cell_volume())
    return PlausibilityRegion(float(alpha), members, table.grid, intervals, area, table.config)


# ---------------------------------------------------------------------------
# Marginal contours

def marginal_contour(dist: BootstrapDistribution, problem, data: Dataset, feature, phi_grid,
                     rng=None, config=None) -> ContourTable:
    """Contour of ``phi(theta)``: exceedance of the fiber minimum of ``T``.

    Grid points whose fiber minimization fails carry NaN.
    """
    from .errors import GimError

    phi_grid = np.atleast_1d(np.asarray(phi_grid, dtype=float))
    rng = np.random.default_rng(0) if rng is None else rng
    hess = problem.risk_hessian(data) if hasattr(problem, "risk_hessian") else None

    def t_func(thetas):
        return t_observed_many(problem, data, thetas, dist.theta_hat)

    cov = dist.cov if dist.cov is not None else np.eye(problem.dim)
    tstar = np.full(phi_grid.size, np.nan)
    for g, phi0 in enumerate(phi_grid):
        try:
            theta = feature.fiber_min(phi0, t_func, dist.theta_hat.copy(), cov, hessian=hess, rng=rng)
        except GimError:
            continue
        tstar[g] = t_func(np.atleast_2d(theta))[0]
    values = np.where(np.isnan(tstar), np.nan, dist.exceedance(np.nan_to_num(tstar)))
    return ContourTable(phi_grid, values, tstar, None, dict(config or {}))


# ---------------------------------------------------------------------------
# Exhaustive bootstrap

@dataclass(frozen=True)
class ExactDistribution:
    """Atoms and probabilities of ``T^xi(theta_hat)`` under the exact bootstrap."""

    atoms: np.ndarray
    probs: np.ndarray

    def cdf(self, t) -> np.ndarray:
        c = np.cumsum(self.probs)
        idx = np.searchsorted(self.atoms, np.asarray(t, dtype=float), side="right")
        return np.where(idx > 0, c[np.maximum(idx - 1, 0)], 0.0)


def compositions(n: int):
    """All weak compositions of ``n`` into ``n`` parts (stars and bars)."""
    rows = []
    for bars in itertools.combinations(range(2 * n - 1), n - 1):
        cuts = (-1, *bars, 2 * n - 1)
        rows.append([cuts[i + 1] - cuts[i] - 1 for i in range(n)])
    return np.array(rows, dtype=int)


def _merge_atoms(values, probs):
    order = np.argsort(values, kind="stable")
    v, p = values[order], probs[order]
    new = np.r_[True, np.diff(v) > 1e-12 * np.maximum(1.0, np.abs(v[1:]))]
    groups = np.cumsum(new) - 1
    return ExactDistribution(_readonly(v[new]), _readonly(np.bincount(groups, weights=p)))


def exact_bootstrap(problem, data: Dataset, order: str = "compositions") -> ExactDistribution:
    """Exact distribution of ``T^xi(theta_hat)`` by enumeration (``n <= 7``).

    ``order="compositions"`` enumerates weight vectors with multinomial
    probabilities; ``order="sequences"`` enumerates all ``n^n`` index
    sequences with equal mass (an independent check, practical for small n).
    """
    n = data.n
    if n > EXACT_MAX_N:
        raise DomainError(f"exact bootstrap refused for n={n} > {EXACT_MAX_N}")
    theta_hat = solve(problem, data, np.ones(n)).theta_hat
    if order == "compositions":
        W = compositions(n)
        logp = (math.lgamma(n + 1) - np.sum([[math.lgamma(k + 1) for k in row] for row in W], axis=1)
                - n * math.log(n))
        probs = np.exp(logp)
    elif order == "sequences":
        seqs = np.array(list(itertools.product(range(n), repeat=n)), dtype=int)
        W = np.zeros((seqs.shape[0], n), dtype=int)
        np.add.at(W, (np.repeat(np.arange(seqs.shape[0]), n), seqs.ravel()), 1)
        probs = np.full(seqs.shape[0], float(n) ** -n)
    else:
        raise DomainError(f"unknown enumeration order {order!r}")
    stats = t_bootstrap_batch(problem, data, W, theta_hat)[0]
    return _merge_atoms(stats, probs)
