"""Datasets, loss and estimating functions, and feature maps.

Every problem here is a small object describing *what* is being estimated:
an M-problem carries a loss ``l(theta, z)``, a Z-problem carries an
estimating function ``psi(theta, z)``.  The ``estimator`` tag tells
:func:`gimkit.estimation.solve` which weighted solver to use.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DomainError

DEFAULT_THRESHOLD = 120.0
DTR_COLUMNS = ("x1", "x2", "a", "y")


class SchemaError(DomainError):
    """Input table does not match the schema a problem expects."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# ---------------------------------------------------------------------------
# Data containers

@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered, homogeneous collection of observations.

    ``values`` has one row per observation; ``columns`` names the entries.
    The array is copied and frozen on construction.
    """

    values: np.ndarray
    columns: tuple = ()

    def __post_init__(self):
        arr = np.array(self.values, dtype=float, copy=True)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise DomainError("dataset must be a 2-D table")
        if arr.shape[0] < 1:
            raise DomainError("dataset must contain at least one row")
        if not np.all(np.isfinite(arr)):
            raise DomainError("dataset contains non-finite entries")
        cols = tuple(self.columns) or tuple(f"z{j + 1}" for j in range(arr.shape[1]))
        if len(cols) != arr.shape[1]:
            raise DomainError(f"{len(cols)} column names for {arr.shape[1]} columns")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "columns", cols)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise SchemaError(f"missing column {name!r}") from None

    def take(self, index) -> "Dataset":
        return Dataset(self.values[np.asarray(index)], self.columns)

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"Dataset(n={self.n}, columns={self.columns})"


def read_csv(path) -> Dataset:
    """Read a headed CSV of base-10 numbers into a :class:`Dataset`.

    Errors carry the 1-based line number of the offending row.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file (header required)", line=1) from None
        header = [h.strip() for h in header]
        if not header or any(not h for h in header):
            raise SchemaError("blank column name in header", line=1)
        for h in header:
            try:
                float(h)
            except ValueError:
                continue
            raise SchemaError(f"header expected, found numeric field {h!r}", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise SchemaError(f"non-numeric field ({exc})", line=lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise SchemaError("non-finite value", line=lineno)
            rows.append(vals)
    if not rows:
        raise SchemaError("no data rows", line=2)
    return Dataset(np.array(rows), tuple(header))


def write_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(data.columns)
        for row in data.values:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Pointwise losses and estimating functions

def _check_tau(tau):
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")


def quantile_loss(theta, z, tau):
    """Check loss for the ``tau``-quantile, in the affine form

    ``0.5 * ((|z - theta| - z) + (1 - 2 tau) theta)``.

    Subtracting ``z`` keeps the risk finite for heavy-tailed data
    (e.g. Cauchy) without changing the minimizer.
    """
    _check_tau(tau)
    theta = np.asarray(theta, dtype=float)
    z = np.asarray(z, dtype=float)
    return 0.5 * ((np.abs(z - theta) - z) + (1.0 - 2.0 * tau) * theta)


def spatial_median_loss(theta, z):
    theta = np.asarray(theta, dtype=float)
    z = np.asarray(z, dtype=float)
    if theta.shape[-1:] != z.shape[-1:]:
        raise DomainError(f"dimension mismatch: {theta.shape} vs {z.shape}")
    return np.linalg.norm(z - theta, axis=-1) - np.linalg.norm(z, axis=-1)


def spatial_median_psi(theta, z):
    """Unit vector pointing from ``theta`` to ``z``.

    Undefined when ``z == theta``; raises :class:`SingularityError`.
    """
    from .errors import SingularityError

    theta = np.asarray(theta, dtype=float)
    z = np.asarray(z, dtype=float)
    if theta.shape != z.shape:
        raise DomainError(f"dimension mismatch: {theta.shape} vs {z.shape}")
    diff = z - theta
    norm = np.linalg.norm(diff)
    if norm == 0.0:
        raise SingularityError("psi is undefined at z == theta")
    return diff / norm


def qr_loss(theta, x, y, tau):
    """Quantile-regression loss ``|y - x'theta| - (2 tau - 1) x'theta``."""
    _check_tau(tau)
    fit = np.dot(np.asarray(x, dtype=float), np.asarray(theta, dtype=float))
    return np.abs(y - fit) - (2.0 * tau - 1.0) * fit


def _check_treatment(a):
    a = np.asarray(a, dtype=float)
    if not np.all((a == 0.0) | (a == 1.0)):
        raise DomainError("treatment flag must be exactly 0 or 1")
    return a


def dtr_q(theta, x1, x2, a):
    """Linear Q-function ``t0 + t1 x1 + t2 x2 + a (t3 + t4 x1 + t5 x2)``."""
    t = np.asarray(theta, dtype=float)
    return t[0] + t[1] * x1 + t[2] * x2 + a * (t[3] + t[4] * x1 + t[5] * x2)


def dtr_loss(theta, x1, x2, a, y):
    a = _check_treatment(a)
    return (y - dtr_q(theta, x1, x2, a)) ** 2


def dtr_design(data: Dataset) -> np.ndarray:
    """Columns ``1, x1, x2, a, a*x1, a*x2`` of the Q-function regression."""
    x1, x2 = data.column("x1"), data.column("x2")
    a = _check_treatment(data.column("a"))
    return np.column_stack([np.ones(data.n), x1, x2, a, a * x1, a * x2])


class DTRFeatures(NamedTuple):
    treatment_effect: float
    value_static: float
    value_cd: float
    value_diff: float
    value_optimal: float


def dtr_features(theta, data: Dataset, threshold: float = DEFAULT_THRESHOLD) -> DTRFeatures:
    """Treatment effect and regime values implied by ``theta``.

    Expectations over the covariates are empirical means over ``data``.
    The covariate-dependent regime treats rows with ``x1 > threshold``.
    """
    if data.n < 1:
        raise DomainError("empty dataset")
    x1, x2 = data.column("x1"), data.column("x2")
    q0 = dtr_q(theta, x1, x2, 0.0)
    q1 = dtr_q(theta, x1, x2, 1.0)
    t = np.asarray(theta, dtype=float)
    te = t[3] + t[4] * x1.mean() + t[5] * x2.mean()
    static = q1.mean()
    cd = np.where(x1 > threshold, q1, q0).mean()
    opt = np.maximum(q0, q1).mean()
    return DTRFeatures(float(te), float(static), float(cd), float(cd - static), float(opt))


# ---------------------------------------------------------------------------
# Problem specifications

class Problem:
    """Base class for an inferential target.

    Subclasses set ``kind`` ("M" or "Z"), ``dim`` and ``estimator``, and
    implement :meth:`losses` (M) or :meth:`psi_values` (Z).
    """

    kind = "M"
    estimator = "direct-search"
    dim = 1

    def validate(self, data: Dataset) -> None:
        pass

    def losses(self, thetas, data: Dataset) -> np.ndarray:
        """Loss of each row of ``thetas`` (G, dim) at each observation: (G, n)."""
        raise NotImplementedError

    def psi_values(self, theta, data: Dataset) -> np.ndarray:
        """Estimating function at one ``theta`` for every observation: (n, dim)."""
        raise NotImplementedError

    def start(self, data: Dataset) -> np.ndarray:
        return np.zeros(self.dim)

    def describe(self) -> dict:
        return {"problem": self.name, "kind": self.kind, "dim": self.dim}

    name = "custom"


class MProblem(Problem):
    """User-defined M-problem from a pointwise loss ``loss(theta, z_row)``."""

    kind = "M"

    def __init__(self, loss: Callable, dim: int, x0=None, scale=1.0, name="custom-m"):
        self.loss = loss
        self.dim = int(dim)
        self.x0 = None if x0 is None else np.asarray(x0, dtype=float)
        self.scale = scale
        self.name = name

    def losses(self, thetas, data):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        return np.array([[self.loss(t, z) for z in data.values] for t in thetas])

    def start(self, data):
        return np.zeros(self.dim) if self.x0 is None else self.x0.copy()


class ZProblem(Problem):
    """User-defined Z-problem from a pointwise ``psi(theta, z_row) -> dim-vector``."""

    kind = "Z"

    def __init__(self, psi: Callable, dim: int, x0=None, scale=1.0, name="custom-z"):
        self.psi = psi
        self.dim = int(dim)
        self.x0 = None if x0 is None else np.asarray(x0, dtype=float)
        self.scale = scale
        self.name = name

    def psi_values(self, theta, data):
        out = np.array([np.atleast_1d(self.psi(np.asarray(theta, dtype=float), z)) for z in data.values])
        return out.reshape(data.n, self.dim)

    def start(self, data):
        return np.zeros(self.dim) if self.x0 is None else self.x0.copy()


class QuantileProblem(Problem):
    kind = "M"
    estimator = "quantile"
    dim = 1
    name = "quantile"

    def __init__(self, tau: float = 0.5):
        _check_tau(tau)
        self.tau = float(tau)

    def validate(self, data):
        if data.width != 1:
            raise SchemaError(f"quantile problem expects one column z1, got {data.columns}")

    def sample(self, data):
        return data.values[:, 0]

    def losses(self, thetas, data):
        th = np.asarray(thetas, dtype=float).reshape(-1, 1)
        return quantile_loss(th, self.sample(data)[None, :], self.tau)

    def start(self, data):
        return np.array([np.median(self.sample(data))])

    def describe(self):
        return {**super().describe(), "tau": self.tau}


class SpatialMedianProblem(Problem):
    """Spatial median as the root of the averaged unit-vector equation."""

    kind = "Z"
    estimator = "weiszfeld"
    name = "spatial-median"

    def __init__(self, dim: int = 2):
        self.dim = int(dim)

    def validate(self, data):
        if data.width != self.dim:
            raise SchemaError(f"spatial median expects {self.dim} columns, got {data.width}")

    def psi_values(self, theta, data):
        diff = data.values - np.asarray(theta, dtype=float)[None, :]
        norm = np.linalg.norm(diff, axis=1)
        out = np.zeros_like(diff)
        ok = norm > 0
        out[ok] = diff[ok] / norm[ok, None]
        return out

    def psi_many(self, thetas, data):
        """(G, n, dim) estimating-function values for a batch of ``thetas``."""
        diff = data.values[None, :, :] - np.asarray(thetas, dtype=float)[:, None, :]
        norm = np.linalg.norm(diff, axis=2, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(norm > 0, diff / norm, 0.0)
        return out

    def losses(self, thetas, data):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        return spatial_median_loss(thetas[:, None, :], data.values[None, :, :])

    def start(self, data):
        return data.values.mean(axis=0)


class QuantileRegressionProblem(Problem):
    """Linear quantile regression of ``y`` on ``x1..xp`` (plus an intercept)."""

    kind = "M"
    estimator = "qr"
    name = "quantile-regression"

    def __init__(self, tau: float = 0.5, p: int = 1, intercept: bool = True):
        _check_tau(tau)
        self.tau = float(tau)
        self.p = int(p)
        self.intercept = bool(intercept)
        self.dim = self.p + int(self.intercept)

    def validate(self, data):
        expected = tuple(f"x{j + 1}" for j in range(self.p)) + ("y",)
        if data.columns != expected:
            raise SchemaError(f"expected columns {expected}, got {data.columns}")

    def design(self, data):
        x = data.values[:, :-1]
        if self.intercept:
            x = np.column_stack([np.ones(data.n), x])
        return x, data.values[:, -1]

    def losses(self, thetas, data):
        x, y = self.design(data)
        fit = np.atleast_2d(np.asarray(thetas, dtype=float)) @ x.T
        return np.abs(y[None, :] - fit) - (2.0 * self.tau - 1.0) * fit

    def describe(self):
        return {**super().describe(), "tau": self.tau, "intercept": self.intercept}


class DTRProblem(Problem):
    """Least-squares fit of the linear Q-function for a single-stage regime."""

    kind = "M"
    estimator = "wls"
    dim = 6
    name = "dtr"

    def validate(self, data):
        if data.columns != DTR_COLUMNS:
            raise SchemaError(f"expected columns {DTR_COLUMNS}, got {data.columns}")
        _check_treatment(data.column("a"))

    def design(self, data):
        return dtr_design(data), data.column("y")

    def losses(self, thetas, data):
        x, y = self.design(data)
        fit = np.atleast_2d(np.asarray(thetas, dtype=float)) @ x.T
        return (y[None, :] - fit) ** 2

    def risk_hessian(self, data):
        """The risk gap is exactly ``(t - t_hat)' H (t - t_hat)`` with this H."""
        x, _ = self.design(data)
        return x.T @ x / data.n


# ---------------------------------------------------------------------------
# Feature maps for marginal inference

class FeatureMap:
    """A scalar feature ``phi(theta)`` with a fiber minimizer.

    ``fiber_min`` must return the parameter minimizing ``t_func`` over
    ``{theta : phi(theta) == phi0}``.  Non-affine features have no generic
    fiber minimizer and must override it.
    """

    name = "feature"

    def phi(self, theta) -> float:
        raise NotImplementedError

    def gradient(self, theta) -> np.ndarray:
        raise NotImplementedError

    def fiber_min(self, phi0, t_func, theta_hat, cov, hessian=None, rng=None):
        raise NotImplementedError(f"feature {self.name!r} needs a user-supplied fiber_min")


@dataclass
class AffineFeature(FeatureMap):
    """``phi(theta) = coef . theta + offset``."""

    coef: np.ndarray
    offset: float = 0.0
    name: str = "affine"
    restarts: int = 10

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float)
        if not np.any(self.coef):
            raise DomainError("affine feature with zero coefficient vector")

    def phi(self, theta):
        return float(np.dot(self.coef, theta) + self.offset)

    def gradient(self, theta=None):
        return self.coef.copy()

    def fiber_min(self, phi0, t_func, theta_hat, cov, hessian=None, rng=None):
        a = self.coef
        gap = phi0 - self.phi(theta_hat)
        if hessian is not None:
            # exact minimizer of a quadratic risk gap on the hyperplane
            step = np.linalg.solve(hessian, a)
            return theta_hat + step * gap / np.dot(a, step)
        return _affine_direct_search(a, gap, t_func, theta_hat, cov, self.restarts, rng)


def _affine_direct_search(a, gap, t_func, theta_hat, cov, restarts, rng):
    from .estimation import direct_search

    p = a.size
    if p == 1:
        return theta_hat + gap / a
    cov = np.atleast_2d(cov)
    # whitened coordinates: theta = theta_hat + L u, constraint (L'a) . u = gap
    L = _factor(cov, p)
    b = L.T @ a
    base = b * gap / np.dot(b, b)
    # orthonormal basis of the null space of b
    _, _, vt = np.linalg.svd(b[None, :])
    null = vt[1:].T

    def f(v):
        return t_func((theta_hat + L @ (base + null @ v))[None, :])[0]

    res = direct_search(f, np.zeros(p - 1), restarts=restarts, spread=2.0, rng=rng)
    return theta_hat + L @ (base + null @ res.x)


def _factor(cov, p):
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    top = max(w.max(), 0.0)
    w = np.where(w > 1e-12 * top, w, max(1e-12 * top, 1e-300))
    return v * np.sqrt(w)


class DTROptimalValue(FeatureMap):
    """Value of the optimal regime, ``mean(max(Q0, Q1))`` over observed covariates."""

    name = "value-optimal"

    def __init__(self, data: Dataset, restarts: int = 10):
        x1, x2 = data.column("x1"), data.column("x2")
        one = np.ones(data.n)
        self._x0 = np.column_stack([one, x1, x2, 0 * one, 0 * one, 0 * one])
        self._x1 = np.column_stack([one, x1, x2, one, x1, x2])
        self.restarts = restarts

    def phi(self, theta):
        t = np.asarray(theta, dtype=float)
        return float(np.maximum(self._x0 @ t, self._x1 @ t).mean())

    def gradient(self, theta):
        t = np.asarray(theta, dtype=float)
        pick = (self._x1 @ t > self._x0 @ t)[:, None]
        return np.where(pick, self._x1, self._x0).mean(axis=0)

    def fiber_min(self, phi0, t_func, theta_hat, cov, hessian=None, rng=None):
        from scipy.optimize import minimize

        rng = np.random.default_rng(0) if rng is None else rng
        p = theta_hat.size
        metric = hessian if hessian is not None else np.linalg.pinv(np.atleast_2d(cov))
        L = _factor(np.linalg.pinv(metric), p)
        Linv_metric = L.T @ metric @ L  # ~ identity

        def theta_of(u):
            return theta_hat + L @ u

        def obj(u):
            if hessian is not None:
                return float(u @ Linv_metric @ u), 2.0 * Linv_metric @ u
            return float(t_func(theta_of(u)[None, :])[0]), None

        g = L.T @ self.gradient(theta_hat)
        lin = g * (phi0 - self.phi(theta_hat)) / np.dot(g, g)
        starts = [lin] + [lin + rng.normal(scale=0.5 * (1.0 + np.linalg.norm(lin)), size=p)
                          for _ in range(self.restarts - 1)]
        cons = {"type": "eq",
                "fun": lambda u: self.phi(theta_of(u)) - phi0,
                "jac": lambda u: L.T @ self.gradient(theta_of(u))}
        best, best_val = None, np.inf
        for u0 in starts:
            if hessian is not None:
                res = minimize(obj, u0, jac=True, constraints=[cons], method="SLSQP",
                               options={"maxiter": 200, "ftol": 1e-12})
            else:
                res = minimize(lambda u: obj(u)[0], u0, constraints=[cons], method="SLSQP",
                               options={"maxiter": 200, "ftol": 1e-12})
            if abs(self.phi(theta_of(res.x)) - phi0) > 1e-7 * (1.0 + abs(phi0)):
                continue
            val = obj(res.x)[0]
            if val < best_val:
                best, best_val = res.x, val
        if best is None:
            from .errors import ConvergenceError
            raise ConvergenceError(f"fiber minimization failed at phi0={phi0}")
        return theta_of(best)


DTR_FEATURES = ("treatment-effect", "value-static", "value-cd", "value-diff", "value-optimal")


def dtr_feature_maps(data: Dataset, threshold: float = DEFAULT_THRESHOLD) -> dict:
    """Feature maps for the DTR target, with covariate means taken from ``data``."""
    x1, x2 = data.column("x1"), data.column("x2")
    m1, m2 = x1.mean(), x2.mean()
    ind = (x1 > threshold).astype(float)
    te = np.array([0, 0, 0, 1, m1, m2])
    st = np.array([1, m1, m2, 1, m1, m2])
    cd = np.array([1, m1, m2, ind.mean(), (ind * x1).mean(), (ind * x2).mean()])
    return {
        "treatment-effect": AffineFeature(te, name="treatment-effect"),
        "value-static": AffineFeature(st, name="value-static"),
        "value-cd": AffineFeature(cd, name="value-cd"),
        "value-diff": AffineFeature(cd - st, name="value-diff"),
        "value-optimal": DTROptimalValue(data),
    }


PROBLEMS = {
    "quantile": QuantileProblem,
    "spatial-median": SpatialMedianProblem,
    "quantile-regression": QuantileRegressionProblem,
    "dtr": DTRProblem,
}
