import itertools
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gimkit import engine as G
from gimkit import problems as P
from gimkit.errors import DomainError, SingularityError
from gimkit.lab import bvn_generator, dtr_sample, gamma_generator, qr_generator


@pytest.fixture(scope="module")
def gamma_case():
    gen = gamma_generator(0.5)
    data = gen.sample(100, G.substream(1, 0))
    dist = G.build_distribution(gen.problem, data, 500, seed=3)
    return gen.problem, data, dist


@pytest.fixture(scope="module")
def bvn_case():
    gen = bvn_generator()
    data = gen.sample(80, G.substream(2, 0))
    dist = G.build_distribution(gen.problem, data, 300, seed=4)
    return gen.problem, data, dist


@pytest.fixture(scope="module")
def qr_case():
    gen = qr_generator(0.5)
    data = gen.sample(80, G.substream(3, 0))
    dist = G.build_distribution(gen.problem, data, 300, seed=5)
    return gen.problem, data, dist


# -- weights ---------------------------------------------------------------

def test_sample_weights_single_category():
    rng = np.random.default_rng(0)
    assert all(G.sample_weights(1, rng).tolist() == [1] for _ in range(10))


def test_sample_weights_mean_and_sum():
    W = G.sample_weights(10, np.random.default_rng(1), size=100_000)
    assert np.all(W.sum(axis=1) == 10)
    np.testing.assert_allclose(W.mean(axis=0), 1.0, atol=0.02)


def test_sample_weights_binomial_marginal():
    W = G.sample_weights(5, np.random.default_rng(2), size=100_000)
    counts = np.bincount(W[:, 0], minlength=6)
    expected = stats.binom.pmf(np.arange(6), 5, 0.2) * W.shape[0]
    # pool the sparse top cells
    obs = np.r_[counts[:3], counts[3:].sum()]
    exp = np.r_[expected[:3], expected[3:].sum()]
    assert stats.chisquare(obs, exp).pvalue > 0.01


def test_weight_chunks_fixed_by_seed():
    a = np.vstack([w for _, w in G.weight_chunks(7, 600, 9)])
    b = np.vstack([w for _, w in G.weight_chunks(7, 600, 9)])
    np.testing.assert_array_equal(a, b)
    assert a.shape == (600, 7)


# -- T statistics ----------------------------------------------------------

def test_t_observed_zero_at_estimate(gamma_case, qr_case):
    for prob, data, dist in (gamma_case, qr_case):
        assert G.t_observed(prob, data, dist.theta_hat, dist.theta_hat) == 0.0


def test_t_observed_scalar_z_closed_form():
    rng = np.random.default_rng(3)
    for _ in range(100):
        z = rng.normal(size=(rng.integers(3, 30), 1))
        data = P.Dataset(z)
        prob = P.ZProblem(lambda t, x: x - t, 1)
        th = rng.normal()
        psi = z[:, 0] - th
        n = len(psi)
        direct = n * psi.mean() ** 2 / np.mean(psi ** 2)
        assert G.t_observed(prob, data, [th], [0.0]) == pytest.approx(direct, rel=1e-10)


def test_t_observed_scale_invariant():
    rng = np.random.default_rng(4)
    data = P.Dataset(rng.normal(size=(40, 2)))
    base = P.SpatialMedianProblem()
    for c in (-3.0, 0.01, 7.5):
        scaled = P.ZProblem(lambda t, z, c=c: c * P.spatial_median_psi(t, z), 2)
        th = rng.normal(size=2)
        assert G.t_observed(scaled, data, th, th) == pytest.approx(
            G.t_observed(base, data, th, th), rel=1e-9)


def test_t_observed_zero_covariance_rejected():
    data = P.Dataset(np.ones((5, 2)))
    with pytest.raises(SingularityError):
        G.t_observed(P.SpatialMedianProblem(), data, np.ones(2), np.ones(2))


def test_t_bootstrap_uniform_weights_zero(gamma_case, qr_case):
    for prob, data, dist in (gamma_case, qr_case):
        assert G.t_bootstrap(prob, data, np.ones(data.n), dist.theta_hat) == 0.0


def test_t_bootstrap_nonnegative(gamma_case, qr_case):
    for prob, data, dist in (gamma_case, qr_case):
        W = G.sample_weights(data.n, np.random.default_rng(5), size=10_000 if prob.dim == 1 else 2000)
        stats_, _, _ = G.t_bootstrap_batch(prob, data, W, dist.theta_hat)
        assert np.all(stats_ >= 0)


def test_t_bootstrap_hand_enumeration_n3():
    # median of (1, 2, 4); risk per point is |z - t|/2 up to terms free of t
    z = np.array([1.0, 2.0, 4.0])
    data = P.Dataset(z[:, None])
    prob = P.QuantileProblem(0.5)
    for w in itertools.product(range(4), repeat=3):
        if sum(w) != 3:
            continue
        w = np.array(w, float)
        cum = np.cumsum(w)
        med = z[np.argmax(cum >= 1.5)]
        risk = lambda t: np.dot(w, np.abs(z - t)) / 6
        expect = risk(2.0) - risk(med)
        assert G.t_bootstrap(prob, data, w, [2.0]) == pytest.approx(expect, abs=1e-15)


# -- bootstrap distribution -------------------------------------------------

def test_build_distribution_b1_reproducible(gamma_case):
    prob, data, _ = gamma_case
    a = G.build_distribution(prob, data, 1, seed=11)
    b = G.build_distribution(prob, data, 1, seed=11)
    assert a.B == 1 and a.stats.tolist() == b.stats.tolist()


def test_build_distribution_thread_invariant(qr_case, bvn_case):
    for prob, data, _ in (qr_case, bvn_case):
        a = G.build_distribution(prob, data, 700, seed=12, threads=1)
        b = G.build_distribution(prob, data, 700, seed=12, threads=4)
        np.testing.assert_array_equal(a.stats, b.stats)
        np.testing.assert_array_equal(a.cov, b.cov)


def test_build_distribution_fast_at_default_scale():
    gen = gamma_generator(0.5)
    data = gen.sample(100, G.substream(13, 0))
    t0 = time.perf_counter()
    G.build_distribution(gen.problem, data, 500, seed=1)
    assert time.perf_counter() - t0 < 60


def test_distribution_is_sorted_and_readonly(gamma_case):
    dist = gamma_case[2]
    assert np.all(np.diff(dist.stats) >= 0)
    with pytest.raises(ValueError):
        dist.stats[0] = 1.0
    snap = dist.snapshot()
    assert snap["B"] == 500 and len(snap["stats"]) == 500


def test_build_distribution_rejects_b0(gamma_case):
    with pytest.raises(DomainError):
        G.build_distribution(gamma_case[0], gamma_case[1], 0)


# -- contours --------------------------------------------------------------

def test_contour_beyond_max_is_zero(gamma_case):
    prob, data, dist = gamma_case
    assert G.contour_at(dist, prob, data, 1e6) == 0.0


def test_contour_at_estimate(gamma_case):
    prob, data, dist = gamma_case
    assert G.contour_at(dist, prob, data, dist.theta_hat) == np.mean(dist.stats > 0)


def test_contour_matches_naive_loop(gamma_case, bvn_case):
    rng = np.random.default_rng(14)
    for prob, data, dist in (gamma_case, bvn_case):
        for _ in range(50):
            th = dist.theta_hat + rng.normal(size=prob.dim) * 0.3
            t = G.t_observed(prob, data, th, dist.theta_hat)
            naive = sum(1 for s in dist.stats if s > t) / dist.B
            assert G.contour_at(dist, prob, data, th) == naive


def test_contour_grid_preserves_order(gamma_case):
    prob, data, dist = gamma_case
    grid = np.array([5.0, 3.0, 4.0])
    table = G.contour_grid(dist, prob, data, grid)
    assert table.grid[:, 0].tolist() == grid.tolist()
    assert table.values.tolist() == [G.contour_at(dist, prob, data, g) for g in grid]


def test_contour_grid_rejects_empty(gamma_case):
    prob, data, dist = gamma_case
    with pytest.raises(DomainError):
        G.contour_grid(dist, prob, data, np.empty((0, 1)))


@pytest.mark.parametrize("case", ["gamma_case", "bvn_case", "qr_case"])
def test_contour_range_and_monotone_in_t(case, request):
    prob, data, dist = request.getfixturevalue(case)
    table = G.contour_grid(dist, prob, data, axes=G.default_axes(dist, steps=41 if prob.dim == 2 else 401))
    assert np.all((table.values >= 0) & (table.values <= 1))
    order = np.argsort(table.t, kind="stable")
    assert np.all(np.diff(table.values[order]) <= 0)


def test_contour_grid_deterministic(bvn_case):
    prob, data, _ = bvn_case
    a = G.build_distribution(prob, data, 200, seed=21)
    b = G.build_distribution(prob, data, 200, seed=21)
    ta = G.contour_grid(a, prob, data, axes=G.default_axes(a, steps=31)).to_csv()
    tb = G.contour_grid(b, prob, data, axes=G.default_axes(b, steps=31), threads=3).to_csv()
    assert ta == tb


# -- possibility calculus --------------------------------------------------

@pytest.fixture(scope="module")
def table(gamma_case):
    prob, data, dist = gamma_case
    return G.contour_grid(dist, prob, data, axes=G.default_axes(dist, steps=201))


def test_upper_probability_basics(gamma_case, table):
    prob, data, dist = gamma_case
    assert G.upper_probability(table, np.ones(len(table), bool)) == table.values.max()
    assert G.upper_probability(table, [17]) == G.contour_at(dist, prob, data, table.grid[17])
    assert G.upper_probability(table, np.zeros(len(table), bool)) == 0.0
    assert G.upper_probability(table, lambda th: th[0] > dist.theta_hat[0]) == \
        table.values[table.grid[:, 0] > dist.theta_hat[0]].max()


masks = st.lists(st.booleans(), min_size=201, max_size=201).map(np.array)


@settings(max_examples=200)
@given(masks, masks)
def test_maxitivity_and_duality(table, a, b):
    up = G.upper_probability
    assert up(table, a | b) == max(up(table, a), up(table, b))
    assert up(table, a & b) <= up(table, a)
    assert G.lower_probability(table, a) == 1.0 - up(table, ~a)
    # a tie atom at T = 0 keeps the peak below 1; lower can exceed upper by that gap only
    assert G.lower_probability(table, a) <= up(table, a) + (1.0 - table.values.max())


@pytest.fixture(scope="module")
def smooth_table(bvn_case):
    prob, data, dist = bvn_case
    axes = G.default_axes(dist, steps=15)
    axes = tuple(np.sort(np.r_[a, t]) for a, t in zip(axes, dist.theta_hat))
    return G.contour_grid(dist, prob, data, axes=axes)


@settings(max_examples=200)
@given(st.lists(st.booleans(), min_size=256, max_size=256).map(np.array))
def test_lower_below_upper_when_peak_is_one(smooth_table, a):
    assert smooth_table.values.max() == 1.0
    assert G.lower_probability(smooth_table, a) <= G.upper_probability(smooth_table, a)


def test_region_extremes(table):
    assert not G.plausibility_region(table, 1.0).members.any()
    np.testing.assert_array_equal(G.plausibility_region(table, 0.0).members, table.values > 0)
    with pytest.raises(DomainError):
        G.plausibility_region(table, 1.5)


def test_region_membership_duality(gamma_case, table):
    prob, data, dist = gamma_case
    alphas = np.r_[np.random.default_rng(15).uniform(size=20), np.unique(table.values)[:5]]
    direct = np.array([G.contour_at(dist, prob, data, g) for g in table.grid])
    for a in alphas:
        reg = G.plausibility_region(table, a)
        np.testing.assert_array_equal(reg.members, direct > a)
        for lo, hi in reg.intervals:
            inside = (table.grid[:, 0] >= lo) & (table.grid[:, 0] <= hi)
            assert np.all(direct[inside] > a)


def test_region_json_shapes(table, bvn_case):
    import json

    reg = json.loads(G.plausibility_region(table, 0.05).to_json())
    assert set(reg) >= {"alpha", "intervals"}
    prob, data, dist = bvn_case
    t2 = G.contour_grid(dist, prob, data, axes=G.default_axes(dist, steps=41))
    reg2 = G.plausibility_region(t2, 0.05)
    assert reg2.area == pytest.approx(reg2.members.sum() * t2.cell_volume())
    assert "members" in json.loads(reg2.to_json())


def test_contour_csv_header(table):
    text = table.to_csv()
    assert text.splitlines()[0] == "theta_1,contour"
    assert len(text.splitlines()) == len(table) + 1


# -- marginal contours -----------------------------------------------------

def test_marginal_identity_feature_equals_joint(gamma_case, table):
    prob, data, dist = gamma_case
    ident = P.AffineFeature(np.array([1.0]))
    marg = G.marginal_contour(dist, prob, data, ident, table.grid[:, 0])
    np.testing.assert_array_equal(marg.values, table.values)


def test_marginal_at_estimate_is_joint_max(qr_case):
    prob, data, dist = qr_case
    feat = P.AffineFeature(np.array([0.3, -1.2]), 0.5)
    marg = G.marginal_contour(dist, prob, data, feat, [feat.phi(dist.theta_hat)])
    assert marg.values[0] == G.contour_at(dist, prob, data, dist.theta_hat)


def test_marginal_fiber_failure_is_missing(gamma_case):
    prob, data, dist = gamma_case

    class Broken(P.FeatureMap):
        def phi(self, theta):
            return float(theta[0])

        def fiber_min(self, *a, **k):
            raise P.DomainError("no fiber")

    marg = G.marginal_contour(dist, prob, data, Broken(), [1.0, 2.0])
    assert np.isnan(marg.values).all()


def test_dtr_treatment_effect_marginal():
    data = dtr_sample(1000, G.substream(16, 0))
    prob = P.DTRProblem()
    dist = G.build_distribution(prob, data, 500, seed=16)
    te = P.dtr_feature_maps(data)["treatment-effect"]
    marg = G.marginal_contour(dist, prob, data, te, [0.0, 17.4])
    assert marg.values[0] <= 0.01
    assert marg.values[1] >= 0.2


def _dense_fiber_max(dist, prob, data, feat, phi0, half_width, steps=4001):
    a = feat.coef
    base = dist.theta_hat + a * (phi0 - feat.phi(dist.theta_hat)) / (a @ a)
    v = np.array([-a[1], a[0]]) / np.linalg.norm(a)
    s = np.linspace(-half_width, half_width, steps)
    pts = base + s[:, None] * v
    vals = dist.exceedance(G.t_observed_many(prob, data, pts, dist.theta_hat))
    return vals.max(), np.abs(np.diff(vals)).max()


@pytest.mark.parametrize("case", ["qr_case", "bvn_case"])
def test_marginal_fiber_identity(case, request):
    prob, data, dist = request.getfixturevalue(case)
    rng = np.random.default_rng(17)
    se = np.sqrt(np.diag(dist.cov))
    for _ in range(5):
        feat = P.AffineFeature(rng.normal(size=2) / se, rng.normal())
        g = feat.gradient()
        sd = math.sqrt(g @ dist.cov @ g)
        phi0 = feat.phi(dist.theta_hat) + rng.uniform(-3, 3) * sd
        marg = G.marginal_contour(dist, prob, data, feat, [phi0]).values[0]
        dense, cell = _dense_fiber_max(dist, prob, data, feat, phi0, 10 * np.max(se))
        assert dense <= marg <= dense + cell


# -- exact bootstrap -------------------------------------------------------

def test_compositions_n2():
    ex = G.compositions(2)
    assert sorted(map(tuple, ex)) == [(0, 2), (1, 1), (2, 0)]
    data = P.Dataset(np.array([[0.0], [1.0]]))
    res = G.exact_bootstrap(P.QuantileProblem(0.5), data)
    assert res.probs.sum() == pytest.approx(1.0)


def test_exact_probabilities_normalized():
    for n in range(1, 8):
        W = G.compositions(n)
        assert len(W) == math.comb(2 * n - 1, n - 1)
        assert np.all(W.sum(axis=1) == n)
        p = [math.factorial(n) / np.prod([math.factorial(k) for k in w]) / n ** n for w in W]
        assert sum(p) == pytest.approx(1.0, abs=1e-12)
        if n == 2:
            assert sorted(p) == [0.25, 0.25, 0.5]


def test_exact_two_orders_agree():
    rng = np.random.default_rng(18)
    for n in (3, 4, 5):
        data = P.Dataset(rng.normal(size=(n, 1)))
        for tau in (0.5, 0.25):
            a = G.exact_bootstrap(P.QuantileProblem(tau), data)
            b = G.exact_bootstrap(P.QuantileProblem(tau), data, order="sequences")
            np.testing.assert_allclose(a.atoms, b.atoms, rtol=1e-12)
            np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)


def test_exact_vs_monte_carlo_n3():
    data = P.Dataset(np.array([[1.0], [2.0], [4.0]]))
    prob = P.QuantileProblem(0.5)
    ex = G.exact_bootstrap(prob, data)
    dist = G.build_distribution(prob, data, 1_000_000, seed=19)
    F = ex.cdf(ex.atoms)
    # atoms reached by different weight vectors differ in the last bits
    mc = np.searchsorted(dist.stats, ex.atoms + 1e-9 * np.maximum(1, ex.atoms), side="right") / dist.B
    se = np.sqrt(np.clip(F * (1 - F), 0, None) / dist.B)
    assert np.all(np.abs(mc - F) <= 3 * se + 1e-12)


def test_exact_refuses_large_n():
    with pytest.raises(DomainError):
        G.exact_bootstrap(P.QuantileProblem(0.5), P.Dataset(np.arange(8.0)[:, None]))
