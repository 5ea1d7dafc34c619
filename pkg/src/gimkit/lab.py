"""Repeated-sampling experiments for checking calibration.

Each replication draws a dataset from a generator with a known target,
builds the bootstrap IM and evaluates its contour at the truth.  Under
approximate validity those contour values are close to Unif(0, 1).
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import engine
from .errors import DomainError, GimError
from .estimation import weighted_quantile_batch
from .problems import (DEFAULT_THRESHOLD, DTR_COLUMNS, DTR_FEATURES, Dataset, DTRProblem,
                       QuantileProblem, QuantileRegressionProblem, SpatialMedianProblem,
                       dtr_feature_maps)

DTR_TRUTH = np.array([-15.0, -0.2, 12.0, -65.0, 0.5, -5.5])
METHODS = ("gim", "conservative", "percentile-boot")


# ---------------------------------------------------------------------------
# Generators

@dataclass(frozen=True)
class Generator:
    """A sampling model, the problem it is analysed with and the true target."""

    name: str
    params: dict
    problem: object
    truth: np.ndarray
    draw: Callable = field(repr=False)

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        if n < 1:
            raise DomainError("n must be at least 1")
        return self.draw(n, rng)


def _check_tau(tau):
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")


def gamma_generator(tau: float = 0.5, shape: float = 4.0, scale: float = 1.0) -> Generator:
    _check_tau(tau)
    if shape <= 0 or scale <= 0:
        raise DomainError("gamma shape and scale must be positive")
    truth = np.array([stats.gamma.ppf(tau, shape, scale=scale)])
    return Generator("gamma", {"shape": shape, "scale": scale, "tau": tau}, QuantileProblem(tau), truth,
                     lambda n, rng: Dataset(rng.gamma(shape, scale, size=n)[:, None]))


def cauchy_generator(tau: float = 0.5, loc: float = 2.0, scale: float = 1.0) -> Generator:
    _check_tau(tau)
    if scale <= 0:
        raise DomainError("cauchy scale must be positive")
    truth = np.array([loc + scale * math.tan(math.pi * (tau - 0.5))])
    return Generator("cauchy", {"loc": loc, "scale": scale, "tau": tau}, QuantileProblem(tau), truth,
                     lambda n, rng: Dataset((loc + scale * rng.standard_cauchy(n))[:, None]))


def bvn_generator(mean=(1.0, 1.0), corr: float = 0.7) -> Generator:
    if not -1.0 < corr < 1.0:
        raise DomainError("correlation must lie in (-1, 1)")
    mean = np.asarray(mean, dtype=float)
    cov = np.array([[1.0, corr], [corr, 1.0]])
    # centrally symmetric, so the spatial median is the mean
    return Generator("bvn", {"mean": mean.tolist(), "corr": corr}, SpatialMedianProblem(2), mean.copy(),
                     lambda n, rng: Dataset(rng.multivariate_normal(mean, cov, size=n)))


def qr_generator(tau: float = 0.5) -> Generator:
    """X ~ U(0, 4), Y = 4 + 0.1 X + (0.1 + 0.1 X) N(0, 1)."""
    _check_tau(tau)
    z = stats.norm.ppf(tau)
    truth = np.array([4.0 + 0.1 * z, 0.1 + 0.1 * z])

    def draw(n, rng):
        x = rng.uniform(0.0, 4.0, n)
        y = 4.0 + 0.1 * x + (0.1 + 0.1 * x) * rng.standard_normal(n)
        return Dataset(np.column_stack([x, y]), ("x1", "y"))

    return Generator("qr", {"tau": tau}, QuantileRegressionProblem(tau), truth, draw)


def _truncated_baseline(n, rng):
    out = np.empty(0)
    while out.size < n:
        y0 = rng.normal(160.0, 12.0, size=2 * (n - out.size) + 16)
        out = np.r_[out, y0[(y0 > 140.0) & (y0 <= 200.0)]]
    return out[:n]


def dtr_sample(n: int, rng: np.random.Generator) -> Dataset:
    """Blood-pressure treatment data with columns x1, x2, a, y."""
    y0 = _truncated_baseline(n, rng)
    x1 = rng.normal(211.0, 45.0, n)
    x2 = rng.normal(4.2, 0.35, n)
    a = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(16.348 - 0.078 * y0 - 0.017 * x1))).astype(float)
    mu = -15.0 - 0.2 * x1 + 12.0 * x2 + a * (-65.0 + 0.5 * x1 - 5.5 * x2)
    y = rng.normal(mu, 3.0)
    return Dataset(np.column_stack([x1, x2, a, y]), DTR_COLUMNS)


def dtr_generator() -> Generator:
    return Generator("dtr", {}, DTRProblem(), DTR_TRUTH.copy(), dtr_sample)


GENERATORS = {
    "gamma": gamma_generator,
    "cauchy": cauchy_generator,
    "bvn": bvn_generator,
    "qr": qr_generator,
    "dtr": dtr_generator,
}


def make_generator(name: str, **params) -> Generator:
    try:
        factory = GENERATORS[name]
    except KeyError:
        raise DomainError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return factory(**params)


# ---------------------------------------------------------------------------
# Reports

def ks_to_uniform(u) -> float:
    """Kolmogorov-Smirnov distance between the ECDF of ``u`` and Unif(0, 1)."""
    u = np.asarray(u, dtype=float)
    u = u[~np.isnan(u)]
    if u.size == 0:
        return float("nan")
    return float(stats.kstest(u, "uniform").statistic)


@dataclass
class SimulationReport:
    """Aggregated outcome of a repeated-sampling experiment."""

    experiment: str
    config: dict
    contour_at_truth: np.ndarray
    methods: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    failures: int = 0

    @property
    def replications(self) -> int:
        return int(np.asarray(self.contour_at_truth).size)

    @property
    def ks_to_uniform(self) -> float:
        return ks_to_uniform(self.contour_at_truth)

    @property
    def coverage(self):
        g = self.methods.get("gim")
        return None if g is None else g["coverage"]

    @property
    def mean_length(self):
        g = self.methods.get("gim")
        return None if g is None else g["mean_length"]

    def ecdf(self):
        u = np.sort(np.asarray(self.contour_at_truth)[~np.isnan(self.contour_at_truth)])
        levels = np.unique(u)
        return levels, np.searchsorted(u, levels, side="right") / u.size

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "config": self.config,
                "replications": self.replications, "failures": self.failures,
                "ks_to_uniform": self.ks_to_uniform, "methods": self.methods,
                "extra": self.extra,
                "contour_at_truth": [None if np.isnan(v) else float(v) for v in self.contour_at_truth]}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def ecdf_csv(self, path=None) -> str:
        u, f = self.ecdf()
        lines = [f"# {json.dumps(self.config, sort_keys=True)}", "u,ecdf"]
        lines += [f"{a!r},{b!r}" for a, b in zip(u.tolist(), f.tolist())]
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_markdown(self) -> str:
        lines = [f"<!-- {json.dumps(self.config, sort_keys=True)} -->",
                 f"Experiment `{self.experiment}`, M = {self.replications}, failures = {self.failures}", "",
                 f"KS distance to uniform: {self.ks_to_uniform:.4f}"]
        if self.methods:
            lines += ["", coverage_table([self])]
        return "\n".join(lines) + "\n"


def coverage_table(reports) -> str:
    """Markdown table: one row per method, one column per tau, ``coverage (length)``."""
    cols = [f"tau = {r.config.get('tau')}" for r in reports]
    lines = ["| Method | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
    for m in METHODS:
        if not all(m in r.methods for r in reports):
            continue
        cells = [f"{r.methods[m]['coverage']:.2f} ({r.methods[m]['mean_length']:.2f})" for r in reports]
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Baseline intervals

def conservative_interval(z, tau: float, alpha: float = 0.05):
    """Binomial order-statistic interval ``[z_(l), z_(u)]`` for the tau-quantile.

    ``l`` is the largest k with ``P(Bin(n, tau) < k) <= alpha/2`` and ``u``
    the smallest k with ``P(Bin(n, tau) >= k) <= alpha/2``.  Returns
    ``(lo, hi, l, u)`` with 1-based ranks; when the sample is too small
    for the level the ranks are clamped to ``[1, n]`` with a warning.
    """
    _check_tau(tau)
    z = np.sort(np.asarray(z, dtype=float).ravel())
    n = z.size
    if n < 1:
        raise DomainError("empty sample")
    k = np.arange(n + 2)
    below = stats.binom.cdf(k - 1, n, tau)  # P(Bin < k)
    above = stats.binom.sf(k - 1, n, tau)   # P(Bin >= k)
    l = int(k[below <= alpha / 2].max())
    u = int(k[above <= alpha / 2].min())
    if l < 1 or u > n:
        warnings.warn(f"n={n} too small for level {alpha}; using the widest order-statistic interval",
                      RuntimeWarning, stacklevel=2)
        l, u = max(l, 1), min(u, n)
    return float(z[l - 1]), float(z[u - 1]), l, u


def conservative_coverage(n: int, tau: float, l: int, u: int) -> float:
    """Exact coverage ``P(l <= Bin(n, tau) <= u - 1)`` of the order-statistic interval."""
    return float(stats.binom.cdf(u - 1, n, tau) - stats.binom.cdf(l - 1, n, tau))


def percentile_boot_interval(z, tau: float, B: int = 500, alpha: float = 0.05, seed: int = 0):
    """Percentile bootstrap interval for the tau-quantile.

    The endpoints are order statistics (inverted-CDF quantiles) of the
    ``B`` resampled sample quantiles.
    """
    if B < 1:
        raise DomainError("B must be at least 1")
    z = np.asarray(z, dtype=float).ravel()
    reps = np.concatenate([weighted_quantile_batch(z, W, tau)
                           for _, W in engine.weight_chunks(z.size, B, seed)])
    lo, hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2], method="inverted_cdf")
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# Experiments

def _boot_seed(seed, m):
    return int(np.random.SeedSequence(int(seed), spawn_key=(m, 1)).generate_state(1)[0])


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def uniformity_experiment(gen: Generator, n: int, B: int = 500, M: int = 1000, seed: int = 0,
                          threads: int = 1) -> SimulationReport:
    """Contour at the truth over ``M`` replications.

    Replication ``m`` uses substreams keyed by ``m``, so the report does
    not depend on the order or parallelism of replications.  Failing
    replications are recorded as NaN and counted.
    """
    if M < 1:
        raise DomainError("M must be at least 1")

    def one(m):
        data = gen.sample(n, engine.substream(seed, m, 0))
        try:
            dist = engine.build_distribution(gen.problem, data, B, _boot_seed(seed, m))
            return engine.contour_at(dist, gen.problem, data, gen.truth)
        except GimError:
            return float("nan")

    u = np.array(_map(one, range(M), threads))
    config = {"experiment": "uniformity", "generator": gen.name, **gen.params,
              "truth": gen.truth.tolist(), "n": n, "B": B, "M": M, "seed": seed}
    return SimulationReport("uniformity", config, u, failures=int(np.isnan(u).sum()))


def gim_interval(dist, problem, data, alpha, steps=engine.GRID_STEPS):
    """Hull of the plausibility region on the default grid (scalar targets)."""
    table = engine.contour_grid(dist, problem, data, axes=engine.default_axes(dist, steps=steps))
    return engine.plausibility_region(table, alpha).hull()


def coverage_experiment(gen: Generator, n: int, B: int = 500, M: int = 1000, alpha: float = 0.05,
                        methods=METHODS, seed: int = 0, threads: int = 1) -> SimulationReport:
    """Coverage and mean length of 1 - alpha intervals for a scalar quantile.

    GIM coverage is decided by ``contour_at(truth) > alpha``, which is
    membership in the plausibility region; GIM length is the hull of the
    region on the default grid.
    """
    if gen.truth.size != 1:
        raise DomainError("coverage experiments need a scalar target")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise DomainError(f"unknown methods {sorted(unknown)}")
    truth = float(gen.truth[0])
    tau = gen.problem.tau

    def one(m):
        data = gen.sample(n, engine.substream(seed, m, 0))
        z = data.values[:, 0]
        out = {}
        if "gim" in methods:
            try:
                dist = engine.build_distribution(gen.problem, data, B, _boot_seed(seed, m))
                u = engine.contour_at(dist, gen.problem, data, truth)
                hull = gim_interval(dist, gen.problem, data, alpha)
                length = 0.0 if hull is None else hull[1] - hull[0]
                out["gim"] = (u > alpha, length, u)
            except GimError:
                out["gim"] = (np.nan, np.nan, np.nan)
        if "conservative" in methods:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                lo, hi, _, _ = conservative_interval(z, tau, alpha)
            out["conservative"] = (lo <= truth <= hi, hi - lo, None)
        if "percentile-boot" in methods:
            lo, hi = percentile_boot_interval(z, tau, B, alpha, seed=_boot_seed(seed, m) ^ 0x5EED)
            out["percentile-boot"] = (lo <= truth <= hi, hi - lo, None)
        return out

    rows = _map(one, range(M), threads)
    summary = {}
    for meth in methods:
        cov = np.array([r[meth][0] for r in rows], dtype=float)
        length = np.array([r[meth][1] for r in rows], dtype=float)
        summary[meth] = {"coverage": float(np.nanmean(cov)), "mean_length": float(np.nanmean(length))}
    u = np.array([r["gim"][2] for r in rows], dtype=float) if "gim" in methods else np.empty(0)
    config = {"experiment": "coverage", "generator": gen.name, **gen.params, "truth": truth,
              "n": n, "B": B, "M": M, "alpha": alpha, "methods": list(methods), "seed": seed}
    return SimulationReport("coverage", config, u, summary, failures=int(np.isnan(u).sum()))


def feature_grid(dist, feature, steps: int = 121, width: float = engine.GRID_WIDTH,
                 include=()):
    """Grid for a feature: ``phi(theta_hat) +- width`` delta-method standard errors."""
    center = feature.phi(dist.theta_hat)
    g = feature.gradient(dist.theta_hat)
    se = math.sqrt(max(float(g @ dist.cov @ g), 0.0)) or 1e-3 * max(1.0, abs(center))
    grid = np.linspace(center - width * se, center + width * se, steps)
    return np.unique(np.r_[grid, np.asarray(include, dtype=float)])


def marginal_peak(table) -> float:
    """Mean of the grid values where the marginal contour is maximal."""
    v = np.nan_to_num(table.values, nan=-1.0)
    return float(table.grid[v == v.max(), 0].mean())


def dtr_marginals(data: Dataset, B: int = 500, seed: int = 0, threshold: float = DEFAULT_THRESHOLD,
                  steps: int = 121, features=DTR_FEATURES, dist=None):
    """Marginal contours of the DTR features on one dataset.

    Returns ``(dist, tables)`` with one ContourTable per feature.  Every
    grid also contains 0, so null assertions can be read off directly.
    """
    problem = DTRProblem()
    dist = dist or engine.build_distribution(problem, data, B, seed)
    maps = dtr_feature_maps(data, threshold)
    tables = {}
    for name in features:
        grid = feature_grid(dist, maps[name], steps=steps, include=[0.0])
        tables[name] = engine.marginal_contour(dist, problem, data, maps[name], grid,
                                               rng=np.random.default_rng(seed),
                                               config={"feature": name, "threshold": threshold,
                                                       "B": B, "seed": seed})
    return dist, tables


def dtr_experiment(n: int = 1000, B: int = 500, M: int = 1000, seed: int = 0,
                   threshold: float = DEFAULT_THRESHOLD, steps: int = 121, threads: int = 1):
    """Validity of the DTR contour at the true coefficients plus feature marginals.

    Marginal contours come from replication 0's dataset.  Returns
    ``(report, tables)``.
    """
    if n < 2:
        raise DomainError("n must be at least 2")
    gen = dtr_generator()
    report = uniformity_experiment(gen, n, B, M, seed, threads)
    data = gen.sample(n, engine.substream(seed, 0, 0))
    _, tables = dtr_marginals(data, B, _boot_seed(seed, 0), threshold, steps)
    extra = {"marginal_at_zero": {k: float(tables[k].values[tables[k].grid[:, 0] == 0.0][0])
                                  for k in ("treatment-effect", "value-diff")},
             "marginal_peak": {k: marginal_peak(t) for k, t in tables.items()}}
    report.experiment = "dtr"
    report.config.update({"experiment": "dtr", "threshold": threshold})
    report.extra.update(extra)
    return report, tables
