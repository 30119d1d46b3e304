import numpy as np
import numpy.testing as npt
import pytest
from scipy import stats

from fedmiss.datamodel import SiteDataset
from fedmiss.exceptions import DriverUnavailable
from fedmiss.missingness import (
    S1_MAR_MECHANISM, S1_MNAR_MECHANISM, S2_INTERACTION_MECHANISM, S2_MAIN_MECHANISM, MechanismSpec,
    ScenarioSpec, apply_missingness, cc_consistent, classify_mechanism, generate_linear_site,
    generate_logistic_site, scenario2_mechanism, stream,
)

from oracles import expected_completeness, glm_logistic, lstsq_wls

BIG = 100_000


@pytest.fixture(scope="module")
def big_linear():
    return generate_linear_site(BIG, stream(2024, 0, 1))


@pytest.fixture(scope="module")
def big_logistic():
    return generate_logistic_site(BIG, stream(2024, 0, 2))


def _ols(site, mask=None):
    keep = np.ones(site.n, bool) if mask is None else mask
    X = np.column_stack([np.ones(site.n), site.x, site.z])[keep]
    return lstsq_wls(X, site.y[keep], np.ones(keep.sum()))


def test_linear_generator_z1_mean(big_linear):
    assert abs(big_linear.z[:, 0].mean() - 0.5) <= 0.01
    assert big_linear.complete_count() == BIG


def test_linear_generator_recovers_coefficients_and_scale(big_linear):
    beta = _ols(big_linear)
    npt.assert_allclose(beta, [1, 1, 1, 1], atol=0.1)
    X = np.column_stack([np.ones(BIG), big_linear.x, big_linear.z])
    resid = big_linear.y - X @ beta
    assert abs(resid.std(ddof=4) - 5.0) <= 0.1


def test_logistic_generator_support_and_recovery(big_logistic):
    cols = np.column_stack([big_logistic.y, big_logistic.x, big_logistic.z])
    assert set(np.unique(cols)) <= {0.0, 1.0}
    assert len({tuple(r) for r in cols}) <= 16
    X = np.column_stack([np.ones(BIG), big_logistic.x, big_logistic.z])
    npt.assert_allclose(glm_logistic(X, big_logistic.y), [1, 1, 1, 1], atol=0.1)


def test_generators_need_rows():
    with pytest.raises(ValueError):
        generate_linear_site(0, stream(0))


def test_intercept_fifty_keeps_everything():
    site = generate_linear_site(500, stream(1, 0))
    mech = MechanismSpec((("z1",),), (50.0, 0.0))
    out = apply_missingness(site, mech, "X", stream(1, 1))
    assert out.complete_count() == 500


def test_oracle_pi_at_origin():
    site = SiteDataset("s", [0.0], [0.0], [[0.0, 0.0]])
    npt.assert_allclose(S1_MNAR_MECHANISM.probability(site), [0.475021], atol=5e-7)
    flipped = ScenarioSpec("S1_MNAR").mechanism(0)
    npt.assert_allclose(flipped.probability(site), [1 - 0.475021], atol=5e-7)
    assert ScenarioSpec("S1_MNAR", mechanism_event="observed").mechanism(0) == S1_MNAR_MECHANISM


def test_missingness_needs_observable_drivers():
    site = SiteDataset("s", [np.nan, 1.0], [0.0, 1.0], [[0.0, 0.0], [1.0, 1.0]], target="Y")
    with pytest.raises(DriverUnavailable):
        S1_MAR_MECHANISM.probability(site)


@pytest.mark.parametrize("mech, driver", [(S1_MAR_MECHANISM, "y"), (S1_MNAR_MECHANISM, "x")])
@pytest.mark.parametrize("event", ["observed", "missing"])
def test_completeness_rate_matches_quadrature(big_linear, mech, driver, event):
    m = mech.with_event(event)
    out = apply_missingness(big_linear, m, "X", stream(7, 3))
    expected = expected_completeness(m.coefficients, driver, event)
    assert abs(out.oracle_pi.mean() - expected) <= 0.01
    assert abs(out.r.mean() - expected) <= 0.01


def test_r_is_bernoulli_pi(big_linear):
    out = apply_missingness(big_linear, S1_MAR_MECHANISM, "X", stream(8, 3))
    pi = out.oracle_pi
    assert np.all((pi > 0) & (pi < 1))
    edges = np.quantile(pi, np.linspace(0, 1, 11))
    bins = np.clip(np.searchsorted(edges, pi, side="right") - 1, 0, 9)
    obs = np.bincount(bins, weights=out.r, minlength=10)
    exp = np.bincount(bins, weights=pi, minlength=10)
    var = np.bincount(bins, weights=pi * (1 - pi), minlength=10)
    chi2 = np.sum((obs - exp) ** 2 / var)
    assert stats.chi2.sf(chi2, 10) > 0.001


def test_seeded_generation_is_reproducible():
    def draw():
        rng = stream(99, 4, 2)
        return apply_missingness(generate_linear_site(300, rng), S1_MAR_MECHANISM, "X", rng)

    a, b = draw(), draw()
    for f in ("y", "x", "z", "r", "oracle_pi"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    other = generate_linear_site(300, stream(99, 4, 3))
    assert other.y.tobytes() != a.y.tobytes()


def test_scenario2_parity():
    assert scenario2_mechanism(0).coefficients == (-0.2, 0.1, 0.1, 0.1)
    assert scenario2_mechanism(1).coefficients == (-0.2, 0.1, 0.05, 0.05, 0.1)
    for K in (1, 2, 5, 10, 30):
        mains = sum(scenario2_mechanism(k) is S2_MAIN_MECHANISM for k in range(K))
        assert mains == -(-K // 2)
    assert S2_INTERACTION_MECHANISM.group == "interaction"
    with pytest.raises(ValueError):
        scenario2_mechanism(-1)


def test_classification():
    assert classify_mechanism({"X", "Z"}, "X") == "MNAR"
    assert classify_mechanism({"Y", "Z"}, "X") == "MAR"
    assert classify_mechanism({"Y"}, "Y") == "MNAR"
    assert classify_mechanism(set(), "YX") == "MCAR"
    assert not cc_consistent({"Y", "Z"}) and cc_consistent({"X", "Z"})
    with pytest.raises(ValueError):
        MechanismSpec((("x",),), (0.0, 1.0), "MAR", target="X")


def test_cc_unbiased_when_y_not_a_driver(big_linear):
    out = apply_missingness(big_linear, S1_MNAR_MECHANISM.with_event("missing"), "X", stream(9, 3))
    npt.assert_allclose(_ols(big_linear, out.r == 1), [1, 1, 1, 1], atol=0.12)


def test_scenario_replication_shape_and_determinism():
    sc = ScenarioSpec("S2_heterogeneous", K=6, seed=3)
    a, b = sc.replicate(2), sc.replicate(2)
    assert len(a.sites) == 6
    assert all(s.n in (30, 100, 1000) for s in a.sites)
    assert [s.group for s in a.sites] == ["main_effects", "interaction"] * 3
    for s, t in zip(a.sites, b.sites):
        assert s.x.tobytes() == t.x.tobytes()
    assert sc.draw_sizes(2) != sc.draw_sizes(3) or sc.replicate(3).sites[0].y.tobytes() != a.sites[0].y.tobytes()


def test_scenario_json_round_trip():
    sc = ScenarioSpec("LOGISTIC_MAR", K=4, site_sizes=(50, 60), seed=8, mechanism_event="observed")
    assert ScenarioSpec.from_json(sc.to_json()) == sc
    assert sc.family == "logistic"
    with pytest.raises(ValueError):
        ScenarioSpec("S3")
    with pytest.raises(ValueError):
        ScenarioSpec(mechanism_event="sometimes")
