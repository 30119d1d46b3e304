import numpy as np
import pytest

from fedmiss.datamodel import SiteDataset, WeightingFormula
from fedmiss.missingness import (
    S1_MAR_MECHANISM, apply_missingness, generate_linear_site, generate_logistic_site, stream,
)
from fedmiss.numerics import expit

MAIN = WeightingFormula("main_effects", ("y", "z1", "z2"))


def linear_sites(seed, sizes, mechanism=S1_MAR_MECHANISM):
    """Linear sites with X missing under a completeness mechanism on (Y, Z)."""
    out = []
    for k, n in enumerate(sizes):
        rng = stream(seed, 99, k)
        full = generate_linear_site(n, rng, site_id=f"s{k}")
        out.append(apply_missingness(full, mechanism, "X", rng))
    return out


def logistic_sites(seed, sizes, mechanism=S1_MAR_MECHANISM):
    out = []
    for k, n in enumerate(sizes):
        rng = stream(seed, 98, k)
        full = generate_logistic_site(n, rng, site_id=f"s{k}")
        out.append(apply_missingness(full, mechanism, "X", rng))
    return out


def binary_sites(seed, sizes=(1494, 454), z_dim=5):
    """Binary outcome, binary X and ``z_dim`` binary auxiliaries; X missing on (Y, Z)."""
    rng = np.random.default_rng(seed)
    out = []
    for k, n in enumerate(sizes):
        z = rng.binomial(1, 0.5, (n, z_dim)).astype(float)
        x = rng.binomial(1, 0.4, n).astype(float)
        y = (rng.random(n) < expit(-1.8 + 0.6 * x - 0.2 * z[:, 0])).astype(float)
        keep = rng.random(n) < expit(1.0 + 0.5 * y + 0.3 * z[:, 1] - 0.3 * z[:, 2])
        x[~keep] = np.nan
        out.append(SiteDataset(f"site_{'ab'[k] if k < 2 else k}", y, x, z))
    return out


@pytest.fixture
def mar_sites():
    return linear_sites(11, (120, 200, 80))


@pytest.fixture
def pi_sites():
    return binary_sites(5)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
