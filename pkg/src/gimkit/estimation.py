"""Weighted M- and Z-estimators.

Every solver takes nonnegative observation weights ``w``.  Bootstrap
replicates use multinomial counts (summing to ``n``); uniform weights
give the ordinary estimator.  Batched variants solve many weight vectors
against the same data at once, which is what the bootstrap needs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import ConvergenceError, DomainError, SingularityError

TOL = 1e-8
MAX_ITER = 500
SMOOTHING = (1e-2, 1e-4, 1e-6)
RANK_TOL = 1e-10
ANCHOR_TOL = 1e-12


@dataclass(frozen=True)
class EstimateResult:
    """Outcome of one weighted fit.

    ``objective`` is the attained weighted risk for M-problems and the
    norm of the weighted estimating equation for Z-problems.  ``flagged``
    marks fits that needed a numerical fallback (e.g. a pseudo-inverse).
    """

    theta_hat: np.ndarray
    objective: float
    iterations: int
    converged: bool
    flagged: bool = False


def check_weights(w, n=None) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise DomainError("weights must be a vector")
    if n is not None and w.size != n:
        raise DomainError(f"{w.size} weights for {n} observations")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise DomainError("all weights are zero")
    return w


# ---------------------------------------------------------------------------
# Quantiles

def weighted_quantile(z, w, tau: float) -> float:
    """Smallest data value ``v`` with ``sum(w[z <= v]) >= tau * sum(w)``.

    This is the left-continuous inverse of the weighted ECDF and the
    smallest minimizer of the weighted check-loss risk.
    """
    z = np.asarray(z, dtype=float)
    w = check_weights(w, z.size)
    return float(weighted_quantile_batch(z, w[None, :], tau)[0])


def weighted_quantile_batch(z, W, tau: float) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    z = np.asarray(z, dtype=float)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    order = np.argsort(z, kind="stable")
    zs = z[order]
    cum = np.cumsum(W[:, order], axis=1)
    total = cum[:, -1]
    if np.any(total <= 0):
        raise DomainError("all weights are zero")
    thresh = tau * total
    # counts are integers, tau*total is not: guard the comparison against rounding
    hit = cum >= thresh[:, None] - 1e-12 * total[:, None]
    return zs[np.argmax(hit, axis=1)]


# ---------------------------------------------------------------------------
# Spatial median

def _weiszfeld_residual(Z, w, y):
    diff = Z - y
    d = np.linalg.norm(diff, axis=1)
    at = d < ANCHOR_TOL
    grad = (w[~at, None] * diff[~at] / d[~at, None]).sum(axis=0)
    if at.any():
        return max(0.0, np.linalg.norm(grad) - w[at].sum()), d, at, grad
    return np.linalg.norm(grad), d, at, grad


def weiszfeld(Z, w, tol: float = TOL, max_iter: int = MAX_ITER) -> EstimateResult:
    """Weighted spatial median by Weiszfeld iterations.

    Stops once ``||sum_i w_i psi(z_i)|| <= tol * n``.  When an iterate
    lands on a data point, the subgradient condition is checked there and,
    if it fails, the iterate steps off along the averaged direction
    (Vardi-Zhang modification).
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n = Z.shape[0]
    w = check_weights(w, n)
    pos = w > 0
    Zp, wp = Z[pos], w[pos]
    if np.all(Zp == Zp[0]):
        return EstimateResult(Zp[0].copy(), 0.0, 0, True)

    y = (wp[:, None] * Zp).sum(axis=0) / wp.sum()
    best_y, best_res = y, np.inf
    for it in range(1, max_iter + 1):
        res, d, at, grad = _weiszfeld_residual(Zp, wp, y)
        if res < best_res:
            best_y, best_res = y, res
        if res <= tol * n:
            return EstimateResult(y, res / n, it - 1, True)
        inv = wp[~at] / d[~at]
        ty = (inv[:, None] * Zp[~at]).sum(axis=0) / inv.sum()
        if at.any():
            lam = min(1.0, w_at / np.linalg.norm(grad)) if (w_at := wp[at].sum()) else 0.0
            y = (1.0 - lam) * ty + lam * y
        else:
            y = ty
    res = _weiszfeld_residual(Zp, wp, y)[0]
    if res < best_res:
        best_y, best_res = y, res
    result = EstimateResult(best_y, best_res / n, max_iter, False)
    raise ConvergenceError(f"Weiszfeld did not converge in {max_iter} iterations", result)


def spatial_median_risk(Z, w, theta) -> float:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    d = np.linalg.norm(Z - theta, axis=1) - np.linalg.norm(Z, axis=1)
    return float(np.dot(w, d) / Z.shape[0])


# ---------------------------------------------------------------------------
# Quantile regression

def qr_risk_batch(X, y, W, B, tau):
    fit = B @ X.T
    return (W * (np.abs(y[None, :] - fit) - (2.0 * tau - 1.0) * fit)).sum(axis=1) / X.shape[0]


def qr_risk(X, y, w, theta, tau) -> float:
    """Weighted risk ``n^-1 sum w_i (|y - x'theta| - (2 tau - 1) x'theta)``."""
    fit = X @ theta
    return float(np.dot(w, np.abs(y - fit) - (2.0 * tau - 1.0) * fit) / X.shape[0])


def _irls(X, y, W, tau, beta, schedule=SMOOTHING, rtol=1e-10, max_iter=MAX_ITER):
    """Majorize-minimize on the Huberized check loss, one stage per epsilon."""
    c = 2.0 * tau - 1.0
    iters = 0
    for eps in schedule:
        prev = np.full(W.shape[0], np.inf)
        active = np.ones(W.shape[0], bool)
        for _ in range(max_iter):
            ia = np.flatnonzero(active)
            if ia.size == 0:
                break
            iters += 1
            Wa = W[ia]
            r = y[None, :] - beta[ia] @ X.T
            D = Wa / np.maximum(np.abs(r), eps)
            A = np.einsum("bn,ni,nj->bij", D, X, X)
            rhs = np.einsum("bn,ni->bi", D * y[None, :] + c * Wa, X)
            beta[ia] = np.linalg.solve(A, rhs[..., None])[..., 0]
            r = y[None, :] - beta[ia] @ X.T
            ar = np.abs(r)
            h = np.where(ar <= eps, r * r / (2 * eps), ar - eps / 2)
            f = (Wa * (h + c * r)).sum(axis=1)
            done = np.abs(prev[ia] - f) <= rtol * np.maximum(1.0, np.abs(f))
            prev[ia] = f
            active[ia[done]] = False
    return beta, iters


def _initial_basis(X, r, w):
    """Rows with the smallest |residual| (positive weight) spanning the design."""
    p = X.shape[1]
    order = np.argsort(np.where(w > 0, np.abs(r), np.inf), kind="stable")
    basis = []
    for i in order:
        cand = basis + [i]
        if np.linalg.matrix_rank(X[cand]) == len(cand):
            basis = cand
            if len(basis) == p:
                return np.array(basis)
    raise SingularityError("weighted design is rank deficient")


def _vertex_descent(X, y, W, tau, H, max_pivots=MAX_ITER):
    """Exact simplex-style descent over basic solutions, batched over rows of W.

    ``H`` holds ``p`` basis rows per replicate; each basic solution
    interpolates its basis rows.  At every step the steepest improving
    edge is followed to the best breakpoint (a weighted-median line
    search).  Returns (thetas, converged mask, pivots used).
    """
    Bn, n = W.shape
    p = X.shape[1]
    c = 2.0 * tau - 1.0
    H = H.copy()
    beta = np.empty((Bn, p))
    active = np.ones(Bn, bool)
    ytol = 1e-12 * (1.0 + np.abs(y))
    pivots = 0
    for _ in range(max_pivots):
        ia = np.flatnonzero(active)
        if ia.size == 0:
            break
        Ha, Wa = H[ia], W[ia]
        Xinv = np.linalg.inv(X[Ha])
        ba = np.einsum("bij,bj->bi", Xinv, y[Ha])
        beta[ia] = ba
        r = y[None, :] - ba @ X.T
        a = np.einsum("ni,bij->bnj", X, Xinv)
        rows = np.arange(ia.size)[:, None]
        nonbasic = np.ones_like(r, dtype=bool)
        nonbasic[rows, Ha] = False
        zero = nonbasic & (np.abs(r) <= ytol[None, :])
        live = nonbasic & ~zero
        G = -np.einsum("bn,bnj->bj", Wa * (np.sign(r) + c) * live, a)
        dz = np.einsum("bn,bnj->bj", Wa * zero, np.abs(a))
        lz = -c * np.einsum("bn,bnj->bj", Wa * zero, a)
        wh = np.take_along_axis(Wa, Ha, axis=1)
        slopes = np.concatenate([G + wh * (1 - c) + dz + lz, -G + wh * (1 + c) + dz - lz], axis=1)
        k = np.argmin(slopes, axis=1)
        smin = slopes[np.arange(ia.size), k]
        done = smin >= -1e-12 * Wa.sum(axis=1)
        active[ia[done]] = False
        move = np.flatnonzero(~done)
        if move.size == 0:
            break
        pivots += 1
        k, smin = k[move], smin[move]
        j = k % p
        sign = np.where(k < p, 1.0, -1.0)
        aj = sign[:, None] * a[move, :, j]
        rr, Wm = r[move], Wa[move]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = rr / aj
        cand = (Wm > 0) & (np.abs(aj) > 1e-14) & (t > 0) & nonbasic[move]
        t = np.where(cand, t, np.inf)
        order = np.argsort(t, axis=1, kind="stable")
        inc = np.take_along_axis(np.where(cand, 2.0 * Wm * np.abs(aj), 0.0), order, axis=1)
        slope_after = smin[:, None] + np.cumsum(inc, axis=1)
        first = np.argmax(slope_after >= 0, axis=1)
        enter = order[np.arange(move.size), first]
        H[ia[move], j] = enter
    return beta, ~active, pivots


def weighted_qr(X, y, w, tau: float, tol: float = TOL) -> EstimateResult:
    """Weighted linear quantile regression.

    A Huberized check loss is minimized by iteratively reweighted least
    squares for a decreasing smoothing schedule; the smoothed optimum is
    then polished to the exact optimum by vertex descent.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    w = check_weights(w, X.shape[0])
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    if np.linalg.matrix_rank(X[w > 0]) < X.shape[1]:
        raise SingularityError("weighted design is rank deficient")
    W = w[None, :]
    beta0 = np.linalg.lstsq(X * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)[0]
    beta, iters = _irls(X, y, W, tau, beta0[None, :].copy())
    r = y - X @ beta[0]
    H = _initial_basis(X, r, w)[None, :]
    theta, ok, pivots = _vertex_descent(X, y, W, tau, H)
    smooth_obj = qr_risk(X, y, w, beta[0], tau)
    obj = qr_risk(X, y, w, theta[0], tau)
    if not ok[0] and smooth_obj < obj:
        theta, obj = beta, smooth_obj
    return EstimateResult(theta[0], obj, iters + pivots, bool(ok[0]))


def qr_basis(X, y, theta, w=None):
    """Basis rows interpolated by the solution ``theta``."""
    w = np.ones(X.shape[0]) if w is None else w
    return _initial_basis(X, y - X @ theta, w)


def weighted_qr_batch(X, y, W, tau: float, start_basis=None):
    """Solve many weighted quantile regressions sharing ``X`` and ``y``.

    ``start_basis`` (e.g. the basis of the unweighted fit) warm-starts the
    vertex descent; without it each replicate is started from its own
    smoothed solution.  Returns (thetas, flags).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    Bn, n = W.shape
    p = X.shape[1]
    flags = np.zeros(Bn, bool)
    if start_basis is None:
        beta0 = np.stack([np.linalg.lstsq(X * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)[0] for w in W])
        beta, _ = _irls(X, y, W, tau, beta0, schedule=SMOOTHING[:1])
        R = y[None, :] - beta @ X.T
        H = np.empty((Bn, p), dtype=int)
        for b in range(Bn):
            H[b] = _initial_basis(X, R[b], W[b])
    else:
        H = np.repeat(np.asarray(start_basis, dtype=int)[None, :], Bn, axis=0)
    rank_ok = np.array([np.linalg.matrix_rank(X[w > 0]) == p for w in W]) if Bn <= 64 else None
    theta, ok, _ = _vertex_descent(X, y, W, tau, H)
    if rank_ok is not None:
        flags |= ~rank_ok
    flags |= ~ok
    return theta, flags


# ---------------------------------------------------------------------------
# Least squares

def _wls_solve(A, rhs):
    """Solve normal equations, falling back to a pseudo-inverse when singular.

    Columns are rescaled to unit diagonal first; returns (solution, flagged).
    """
    d = np.sqrt(np.clip(np.diagonal(A, axis1=-2, axis2=-1), 1e-300, None))
    As = A / d[..., :, None] / d[..., None, :]
    rs = rhs / d
    s = np.linalg.svd(As, compute_uv=False)
    flagged = s[..., -1] <= RANK_TOL * s[..., 0]
    out = np.empty_like(rs)
    good = ~flagged
    if np.any(good):
        out[good] = np.linalg.solve(As[good], rs[good][..., None])[..., 0]
    if np.any(flagged):
        out[flagged] = np.einsum("bij,bj->bi", np.linalg.pinv(As[flagged], rcond=RANK_TOL), rs[flagged])
    return out / d, flagged


def weighted_ls(X, y, w) -> EstimateResult:
    """Closed-form weighted least squares.

    A singular weighted normal matrix is pseudo-inverted and the result
    flagged (with a warning) rather than rejected.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    w = check_weights(w, X.shape[0])
    theta, flags = weighted_ls_batch(X, y, w[None, :])
    if flags[0]:
        warnings.warn("singular weighted design; pseudo-inverse used", RuntimeWarning, stacklevel=2)
    r = y - X @ theta[0]
    return EstimateResult(theta[0], float(np.dot(w, r * r) / X.shape[0]), 1, True, bool(flags[0]))


def weighted_ls_batch(X, y, W):
    W = np.atleast_2d(np.asarray(W, dtype=float))
    A = np.einsum("bn,ni,nj->bij", W, X, X)
    rhs = (W * y[None, :]) @ X
    return _wls_solve(A, rhs)


# ---------------------------------------------------------------------------
# Direct search

def direct_search(f, x0, restarts: int = 10, spread: float = 1.0, rng=None,
                  xatol: float = 1e-10, fatol: float = 1e-13, maxiter=None):
    """Multi-start Nelder-Mead; the first start is ``x0`` itself.

    Each start is refined once more from its own optimum, which helps
    Nelder-Mead on kinked objectives.  Returns the best
    :class:`scipy.optimize.OptimizeResult`.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dim = x0.size
    opts = {"xatol": xatol, "fatol": fatol, "maxiter": maxiter or 400 * max(dim, 1)}
    best = None
    for k in range(max(restarts, 1)):
        start = x0 if k == 0 else x0 + spread * rng.standard_normal(dim)
        res = minimize(f, start, method="Nelder-Mead", options=opts)
        res = minimize(f, res.x, method="Nelder-Mead", options=opts)
        if best is None or res.fun < best.fun:
            best = res
    return best


# ---------------------------------------------------------------------------
# Dispatch

def _fallback(problem, data, w, restarts=10):
    n = data.n
    if problem.kind == "M":
        def f(t):
            return float(np.dot(w, problem.losses(t[None, :], data)[0]) / n)
    else:
        def f(t):
            return float(np.sum((w @ problem.psi_values(t, data) / n) ** 2))
    spread = getattr(problem, "scale", 1.0)
    res = direct_search(f, problem.start(data), restarts=restarts, spread=spread)
    obj = res.fun if problem.kind == "M" else float(np.sqrt(res.fun))
    return EstimateResult(np.atleast_1d(res.x), obj, int(res.nit), bool(res.success))


def solve(problem, data, w) -> EstimateResult:
    """Fit ``problem`` to ``data`` under weights ``w`` with the matching solver.

    Problems with an unknown estimator tag fall back to multi-start
    direct search on the weighted risk (M) or on ``||Psi||^2`` (Z).
    """
    w = check_weights(w, data.n)
    problem.validate(data)
    tag = problem.estimator
    if tag == "quantile":
        z = problem.sample(data)
        q = weighted_quantile(z, w, problem.tau)
        obj = float(np.dot(w, problem.losses([q], data)[0]) / data.n)
        return EstimateResult(np.array([q]), obj, 0, True)
    if tag == "weiszfeld":
        return weiszfeld(data.values, w)
    if tag == "qr":
        X, y = problem.design(data)
        return weighted_qr(X, y, w, problem.tau)
    if tag == "wls":
        X, y = problem.design(data)
        return weighted_ls(X, y, w)
    return _fallback(problem, data, w)


def solve_batch(problem, data, W, theta_hat=None):
    """Fit every row of ``W``; returns (thetas (B, dim), flags (B,)).

    Fits that fail are flagged and carry their best iterate.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    tag = problem.estimator
    if tag == "quantile":
        q = weighted_quantile_batch(problem.sample(data), W, problem.tau)
        return q[:, None], np.zeros(W.shape[0], bool)
    if tag == "qr":
        X, y = problem.design(data)
        start = None if theta_hat is None else qr_basis(X, y, theta_hat)
        return weighted_qr_batch(X, y, W, problem.tau, start_basis=start)
    if tag == "wls":
        X, y = problem.design(data)
        return weighted_ls_batch(X, y, W)
    thetas = np.empty((W.shape[0], problem.dim))
    flags = np.zeros(W.shape[0], bool)
    for b, w in enumerate(W):
        try:
            res = solve(problem, data, w)
            thetas[b], flags[b] = res.theta_hat, res.flagged or not res.converged
        except ConvergenceError as exc:
            thetas[b], flags[b] = exc.result.theta_hat, True
    return thetas, flags
