import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmiss.datamodel import EstimatorChoice, ModelSpec, SiteDataset, concat_sites
from fedmiss.exceptions import DegreesOfFreedom, NonDiscreteData, SingularMatrix
from fedmiss.estimators import (
    CountRow, SuffStats, canonical_key, combine_glm, combine_linear, combine_sigma, count_design, sigma_round,
    site_counts, site_rss, site_suffstats,
)
from fedmiss.fedproto import KnownWeights, SuppressionPolicy, run_protocol
from fedmiss.numerics import wls
from fedmiss.variance import assemble_stacked, count_variance_blocks
from fedmiss.weights import SiteWeighting, WeightVector

from conftest import MAIN, linear_sites, logistic_sites
from oracles import glm_logistic, loop_cross_products, lstsq_wls

LIN = ModelSpec("linear", ("x", "z1", "z2"))
LOGIT = ModelSpec("logistic", ("x", "z1", "z2"))
PI_MODEL = ModelSpec("logistic", ("x", "z1"))

# (y, x, z1) cells and the two sites' crude and inverse-probability counts
PI_KEYS = [(0, 0, 0), (0, 1, 0), (0, 0, 1), (0, 1, 1), (1, 0, 0), (1, 1, 0), (1, 0, 1), (1, 1, 1)]
PI_CRUDE = {"a": [65, 76, 93, 126, 17, 23, 16, 28], "b": [203, 190, 364, 314, 30, 49, 37, 78]}
PI_WEIGHTED = {"a": [67.4, 78.7, 94.7, 127.8, 17.4, 23.6, 16.2, 28.3],
               "b": [240.1, 224.0, 431.6, 374.9, 34.6, 56.1, 42.4, 89.3]}


def _pi_rows(site, weighted=False):
    w = PI_WEIGHTED[site] if weighted else PI_CRUDE[site]
    return [CountRow({"y": k[0], "x": k[1], "z1": k[2]}, float(w[i]), PI_CRUDE[site][i])
            for i, k in enumerate(PI_KEYS)]


def _complete(site, model=LIN):
    m = site.r == 1
    return model.design(site, m), site.y[m]


# ------------------------------------------------------------- sufficient info


def test_empty_site_contributes_zeros():
    site = SiteDataset("e", [1.0, 2.0], [np.nan, np.nan], np.zeros((2, 2)))
    s = site_suffstats(site, LIN)
    assert not s.xtwx.any() and not s.xtwy.any() and s.xtwx.shape == (4, 4)
    assert site_rss(site, LIN, None, np.zeros(4)).n_complete == 0


def test_cross_products_match_loop(mar_sites):
    site = mar_sites[0]
    X, y = _complete(site)
    xtwx, xtwy = loop_cross_products(X, y, np.ones(len(y)))
    s = site_suffstats(site, LIN)
    npt.assert_allclose(s.xtwx, xtwx, rtol=1e-12)
    npt.assert_allclose(s.xtwy, xtwy, rtol=1e-12)


def test_doubling_weights_doubles_summaries(mar_sites):
    site = mar_sites[1]
    pi = np.random.default_rng(0).uniform(0.2, 0.9, site.n)
    one = site_suffstats(site, LIN, WeightVector(pi, "oracle"))
    two = site_suffstats(site, LIN, WeightVector(pi / 2, "oracle"))
    npt.assert_array_equal(two.xtwx, 2 * one.xtwx)
    npt.assert_array_equal(two.xtwy, 2 * one.xtwy)


def test_single_site_equals_local_wls(mar_sites):
    site = mar_sites[0]
    X, y = _complete(site)
    npt.assert_array_equal(combine_linear([site_suffstats(site, LIN)]), wls(X, y, np.ones(len(y))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.integers(20, 150), min_size=1, max_size=5), st.booleans())
def test_federated_linear_equals_pooled(seed, sizes, weighted):
    sites = linear_sites(seed, sizes)
    rng = np.random.default_rng(seed)
    pis = [rng.uniform(0.2, 1.0, s.n) if weighted else np.ones(s.n) for s in sites]
    try:
        beta = combine_linear([site_suffstats(s, LIN, WeightVector(p, "oracle")) for s, p in zip(sites, pis)])
    except SingularMatrix:
        return
    X = np.vstack([_complete(s)[0] for s in sites])
    y = np.concatenate([_complete(s)[1] for s in sites])
    w = np.concatenate([1 / p[s.r == 1] for s, p in zip(sites, pis)])
    npt.assert_allclose(beta, lstsq_wls(X, y, w), rtol=1e-10, atol=1e-10)


def test_splitting_a_site_leaves_beta_unchanged(mar_sites):
    site = mar_sites[1]
    half = site.n // 2
    parts = [site.replace(y=site.y[sl], x=site.x[sl], z=site.z[sl], oracle_pi=None, site_id=f"p{i}")
             for i, sl in enumerate((slice(0, half), slice(half, None)))]
    whole = combine_linear([site_suffstats(site, LIN)])
    split = combine_linear([site_suffstats(p, LIN) for p in parts])
    npt.assert_allclose(split, whole, rtol=1e-12)


def test_suffstats_serialization_and_symmetry(mar_sites):
    s = site_suffstats(mar_sites[0], LIN)
    back = SuffStats.from_dict(s.to_dict())
    npt.assert_array_equal(back.xtwx, s.xtwx)
    with pytest.raises(ValueError):
        SuffStats("x", np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))


def test_no_variation_is_singular():
    site = SiteDataset("s", [1.0, 2.0, 3.0], [1.0, 1.0, 1.0], np.ones((3, 2)))
    with pytest.raises(SingularMatrix):
        combine_linear([site_suffstats(site, LIN)])


# ----------------------------------------------------------------------- sigma


def test_sigma_zero_on_exact_data():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(30, 2))
    x = rng.normal(size=30)
    y = 2 + x - z[:, 0] + 0.5 * z[:, 1]
    site = SiteDataset("s", y, x, z)
    pi = rng.uniform(0.3, 1, 30)
    beta = combine_linear([site_suffstats(site, LIN, WeightVector(pi, "oracle"))])
    assert sigma_round([site], [WeightVector(pi, "oracle")], beta, LIN) <= 1e-12


def test_sigma_matches_textbook_residual_sd(mar_sites):
    site = mar_sites[0]
    X, y = _complete(site)
    beta = combine_linear([site_suffstats(site, LIN)])
    resid = y - X @ beta
    expected = np.sqrt(resid @ resid / (len(y) - 4))
    npt.assert_allclose(sigma_round([site], [None], beta, LIN), expected, rtol=1e-12)


def test_sigma_two_sites_equals_concatenation(mar_sites):
    a, b = mar_sites[0], mar_sites[1]
    beta = combine_linear([site_suffstats(s, LIN) for s in (a, b)])
    npt.assert_allclose(sigma_round([a, b], [None, None], beta, LIN),
                        sigma_round([concat_sites([a, b])], [None], beta, LIN), rtol=1e-12)


def test_sigma_needs_degrees_of_freedom():
    site = SiteDataset("s", [1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 0.0, 1.0], np.eye(4)[:, :2])
    with pytest.raises(DegreesOfFreedom):
        sigma_round([site], [None], np.zeros(4), LIN)
    with pytest.raises(DegreesOfFreedom):
        combine_sigma([], 4)


# ---------------------------------------------------------------------- counts


def _binary_site(rows, site_id="s"):
    rows = np.asarray(rows, dtype=float)
    return SiteDataset(site_id, rows[:, 0], rows[:, 1], rows[:, 2:])


def test_identical_rows_collapse():
    site = _binary_site([[1, 0, 1, 0]] * 3)
    (row,) = site_counts(site, LOGIT).rows
    assert row.w == 3 and row.n_raw == 3
    assert row.u == {"y": 1.0, "x": 0.0, "z1": 1.0, "z2": 0.0}


def test_cells_below_threshold_are_suppressed():
    site = _binary_site([[1, 0, 1, 0]] * 5 + [[0, 1, 1, 1]] * 6)
    table = site_counts(site, LOGIT, suppression_T=6)
    assert [r.n_raw for r in table.rows] == [6]
    assert table.n_cells_dropped == 1 and table.n_raw_dropped == 5
    assert table.suppressed_keys == [canonical_key(LOGIT.key_fields, [1, 0, 1, 0])]


def test_constant_weights_scale_counts(pi_sites):
    site = pi_sites[0]
    model = ModelSpec("logistic", ("x", "z1"))
    table = site_counts(site, model, WeightVector(np.full(site.n, 0.5), "oracle"))
    assert all(r.w == 2 * r.n_raw for r in table.rows)


def test_continuous_key_is_refused(mar_sites):
    with pytest.raises(NonDiscreteData):
        site_counts(mar_sites[0], LOGIT)


def test_count_row_validation_and_wire_format():
    with pytest.raises(ValueError):
        CountRow({"y": 1.0}, 1.0, 0)
    with pytest.raises(ValueError):
        CountRow({"y": 1.0}, -1.0, 1)
    row = CountRow({"y": 1.0, "x": 0.0}, 2.5, 2)
    assert row.to_dict() == {"u": {"y": 1.0, "x": 0.0}, "w": 2.5, "n_raw": 2}
    assert CountRow.from_dict(row.to_dict()) == row


def test_one_site_counts_equal_raw_fit():
    site = logistic_sites(4, (400,))[0]
    theta = combine_glm(site_counts(site, LOGIT).rows, LOGIT)
    X, y = _complete(site, LOGIT)
    npt.assert_allclose(theta, glm_logistic(X, y), rtol=1e-8)


def test_duplicated_tables_equal_doubled_weights():
    site = logistic_sites(5, (300,))[0]
    rows = site_counts(site, LOGIT).rows
    doubled = [CountRow(r.u, 2 * r.w, r.n_raw) for r in rows]
    npt.assert_allclose(combine_glm(rows + rows, LOGIT), combine_glm(doubled, LOGIT), rtol=1e-12)


def test_pi_data_complete_case_fit():
    rows = _pi_rows("a") + _pi_rows("b")
    X, _, _ = count_design(rows, PI_MODEL)
    assert X.shape == (16, 3)
    theta = combine_glm(rows, PI_MODEL)
    npt.assert_allclose(theta, [-1.8428, 0.6041, -0.2313], atol=5e-5)
    var = assemble_stacked([count_variance_blocks(rows, PI_MODEL, theta)], "cc")
    npt.assert_allclose(var.se_theta, [0.1342, 0.1357, 0.1339], atol=5e-5)


@pytest.mark.parametrize("site, est, se", [
    ("a", [-1.3745, 0.2042, -0.3534], [0.2304, 0.2479, 0.2440]),
    ("b", [-2.0345, 0.7560, -0.1639], [0.1653, 0.1630, 0.1611]),
])
def test_pi_data_single_site_fits(site, est, se):
    rows = _pi_rows(site)
    theta = combine_glm(rows, PI_MODEL)
    npt.assert_allclose(theta, est, atol=5e-5)
    npt.assert_allclose(assemble_stacked([count_variance_blocks(rows, PI_MODEL, theta)], "cc").se_theta,
                        se, atol=5e-5)


def test_pi_data_weighted_fit():
    # the published weighted counts are rounded to one decimal
    theta = combine_glm(_pi_rows("a", True) + _pi_rows("b", True), PI_MODEL)
    npt.assert_allclose(theta, [-1.8808, 0.6152, -0.2340], atol=2e-3)


# ------------------------------------------------------------ pipeline identities


def test_unit_probabilities_reproduce_cc_bit_for_bit(mar_sites):
    ones = KnownWeights({s.site_id: np.ones(s.n) for s in mar_sites})
    cc, _, _ = run_protocol(mar_sites, LIN, EstimatorChoice("CC", "si"))
    ipw, _, _ = run_protocol(mar_sites, LIN, EstimatorChoice("IPW_site", "si"), ones)
    assert cc.theta.tobytes() == ipw.theta.tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_weight_scale_invariance(seed, c):
    sites = linear_sites(seed, (80, 120))
    rng = np.random.default_rng(seed)
    pis = {s.site_id: rng.uniform(0.3, 0.9, s.n) for s in sites}
    scaled = {k: np.minimum(v / c, 1e6) for k, v in pis.items()}
    try:
        a = combine_linear([site_suffstats(s, LIN, WeightVector(pis[s.site_id], "oracle")) for s in sites])
    except SingularMatrix:
        return
    b = combine_linear([site_suffstats(s, LIN, WeightVector(scaled[s.site_id], "oracle")) for s in sites])
    npt.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_logistic_weight_scale_invariance():
    site = logistic_sites(6, (400,))[0]
    pi = np.random.default_rng(6).uniform(0.3, 0.9, site.n)
    a = combine_glm(site_counts(site, LOGIT, WeightVector(pi, "oracle")).rows, LOGIT)
    b = combine_glm(site_counts(site, LOGIT, WeightVector(pi * 0.25, "oracle")).rows, LOGIT)
    npt.assert_allclose(a, b, rtol=1e-7)


@pytest.mark.parametrize("est, transport, formula, rounds", [
    ("CC", "si", None, 3), ("IPW_site", "si", MAIN, 3), ("IPW_calibrated", "si", MAIN, 4),
    ("CC", "counts", None, 1), ("IPW_site", "counts", MAIN, 2), ("IPW_calibrated", "counts", MAIN, 3),
])
def test_rounds_used(est, transport, formula, rounds):
    model = LIN if transport == "si" else LOGIT
    sites = linear_sites(21, (150, 200)) if transport == "si" else logistic_sites(21, (300, 400))
    fit, _, tr = run_protocol(sites, model, EstimatorChoice(est, transport), formula,
                              policy=SuppressionPolicy(1))
    assert fit.rounds_used == tr.total_rounds == rounds


def test_site_weighting_unit_is_cc(mar_sites):
    site = mar_sites[0]
    a = site_suffstats(site, LIN, SiteWeighting.unit())
    b = site_suffstats(site, LIN)
    npt.assert_array_equal(a.xtwx, b.xtwx)
