"""Synthetic site generators and logistic missingness mechanisms.

Random streams come from :class:`numpy.random.SeedSequence` keyed by
``(replication, slot)``, so every replication and every site owns an
independent generator and results do not depend on execution order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .datamodel import MissingnessTarget, SiteDataset, Term, as_target, build_design
from .exceptions import DriverUnavailable
from .numerics import expit

LINEAR_BETA = (1.0, 1.0, 1.0, 1.0)
LINEAR_SIGMA = 5.0
LOGISTIC_BETA = (1.0, 1.0, 1.0, 1.0)
SITE_SIZE_POOL = (30, 100, 1000)
EVENTS = ("observed", "missing")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the slot ``key`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def generate_linear_site(n: int, rng: np.random.Generator, site_id: str = "site") -> SiteDataset:
    """Draw ``n`` rows from the linear outcome model; nothing is missing yet."""
    if n < 1:
        raise ValueError("n must be at least 1")
    z1 = rng.binomial(1, 0.5, n).astype(float)
    z2 = rng.normal(z1, 1.0)
    x = rng.normal(z1 * z2, 1.0)
    b0, b1, b2, b3 = LINEAR_BETA
    y = b0 + b1 * x + b2 * z1 + b3 * z2 + rng.normal(0.0, LINEAR_SIGMA, n)
    return SiteDataset(site_id, y, x, np.column_stack([z1, z2]))


def generate_logistic_site(n: int, rng: np.random.Generator, site_id: str = "site") -> SiteDataset:
    """Draw ``n`` rows with binary outcome and three binary covariates."""
    if n < 1:
        raise ValueError("n must be at least 1")
    x = rng.binomial(1, 0.5, n).astype(float)
    z1 = rng.binomial(1, 0.5, n).astype(float)
    z2 = rng.binomial(1, 0.5, n).astype(float)
    b0, b1, b2, b3 = LOGISTIC_BETA
    y = (rng.random(n) < expit(b0 + b1 * x + b2 * z1 + b3 * z2)).astype(float)
    return SiteDataset(site_id, y, x, np.column_stack([z1, z2]))


def _kind(var: str) -> str:
    return "Z" if var.startswith("z") else var.upper()


def classify_mechanism(drivers, target) -> str:
    """MCAR/MAR/MNAR label for a driver set under a missingness target."""
    target = as_target(target)
    drivers = set(drivers)
    if not drivers:
        return "MCAR"
    missable = {v.upper() for v in target.missable}
    return "MNAR" if drivers & missable else "MAR"


def cc_consistent(drivers) -> bool:
    """Complete-case fits stay consistent unless missingness depends on Y."""
    return "Y" not in set(drivers)


@dataclass(frozen=True)
class MechanismSpec:
    """Logistic missingness mechanism ``expit(intercept + Σ slope·term)``.

    ``terms`` excludes the intercept; ``coefficients`` starts with it.
    ``event`` names what the expit gives: ``"observed"`` means
    ``Pr(R=1)`` and ``"missing"`` means ``Pr(R=0)``. :meth:`probability`
    always returns the probability of a complete row.
    """

    terms: tuple[Term, ...]
    coefficients: tuple[float, ...]
    label: str | None = None
    target: MissingnessTarget | None = None
    group: str | None = None
    event: str = "observed"

    def __post_init__(self):
        if self.event not in EVENTS:
            raise ValueError(f"event must be one of {EVENTS}")
        terms = tuple(tuple(t) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        if len(self.coefficients) != len(terms) + 1:
            raise ValueError("need one coefficient per term plus the intercept")
        if self.target is not None:
            object.__setattr__(self, "target", as_target(self.target))
            self.check_label(self.target)

    @property
    def drivers(self) -> set[str]:
        return {_kind(v) for t in self.terms for v in t}

    def check_label(self, target) -> str:
        derived = classify_mechanism(self.drivers, target)
        if self.label is not None and self.label != derived:
            raise ValueError(f"label {self.label} disagrees with drivers {sorted(self.drivers)} "
                             f"under target {as_target(target).value} ({derived})")
        return derived

    def probability(self, data: SiteDataset) -> np.ndarray:
        for t in self.terms:
            for v in t:
                col = data.column(v)
                if np.any(np.isnan(col)):
                    raise DriverUnavailable(f"driver {v!r} is missing at site {data.site_id}")
        eta = build_design(data, ((),) + self.terms) @ np.asarray(self.coefficients)
        return expit(eta) if self.event == "observed" else expit(-eta)

    def to_dict(self) -> dict:
        return {"terms": [list(t) for t in self.terms], "coefficients": list(self.coefficients),
                "label": self.label, "group": self.group, "event": self.event}

    def with_event(self, event: str) -> "MechanismSpec":
        return replace(self, event=event)


def apply_missingness(data: SiteDataset, mech: MechanismSpec, target, rng: np.random.Generator) -> SiteDataset:
    """Blank the target fields of each row with probability ``1 − π``."""
    target = as_target(target)
    mech.check_label(target)
    pi = mech.probability(data)
    keep = rng.random(data.n) < pi
    y = np.array(data.y, copy=True)
    x = np.array(data.x, copy=True)
    if "y" in target.missable:
        y[~keep] = np.nan
    if "x" in target.missable:
        x[~keep] = np.nan
    return data.replace(y=y, x=x, target=target, oracle_pi=pi, group=mech.group or data.group)


S1_MNAR_MECHANISM = MechanismSpec((("x",), ("z1",), ("z2",)), (-0.1, 0.2, 0.2, 0.2), "MNAR")
S1_MAR_MECHANISM = MechanismSpec((("y",), ("z1",), ("z2",)), (-0.1, 0.1, 0.2, 0.2), "MAR")
S2_MAIN_MECHANISM = MechanismSpec(
    (("y",), ("z1",), ("z2",)), (-0.2, 0.1, 0.1, 0.1), "MAR", group="main_effects")
S2_INTERACTION_MECHANISM = MechanismSpec(
    (("y",), ("z1",), ("z2",), ("y", "z1")), (-0.2, 0.1, 0.05, 0.05, 0.1), "MAR", group="interaction")


def scenario2_mechanism(site_index: int) -> MechanismSpec:
    """Even-indexed sites get the main-effects mechanism, odd ones the interaction."""
    if site_index < 0:
        raise ValueError("site_index must be non-negative")
    return S2_MAIN_MECHANISM if site_index % 2 == 0 else S2_INTERACTION_MECHANISM


SCENARIOS = ("S1_MNAR", "S1_MAR", "S2_heterogeneous", "LOGISTIC_MAR")


@dataclass
class Replication:
    """One Monte Carlo draw: complete data, observed data and uniform pseudo-weights."""

    full: list[SiteDataset]
    sites: list[SiteDataset]
    uniform_pi: list[np.ndarray]


@dataclass(frozen=True)
class ScenarioSpec:
    """A named simulation design.

    ``mechanism_event`` sets how the preset mechanisms read their linear
    predictor. The default ``"missing"`` treats ``expit(η)`` as the chance
    that a row loses its target fields, which gives about 55-60% missing
    rows. ``"observed"`` reads the same predictor as the chance of a
    complete row.
    """

    scenario_id: str = "S1_MAR"
    K: int = 10
    site_sizes: tuple[int, ...] = SITE_SIZE_POOL
    seed: int = 0
    target: MissingnessTarget = field(default=MissingnessTarget.X)
    mechanism_event: str = "missing"

    def __post_init__(self):
        if self.mechanism_event not in EVENTS:
            raise ValueError(f"mechanism_event must be one of {EVENTS}")
        if self.scenario_id not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.K < 1:
            raise ValueError("K must be positive")
        object.__setattr__(self, "site_sizes", tuple(int(s) for s in self.site_sizes))
        if not self.site_sizes or min(self.site_sizes) < 1:
            raise ValueError("site sizes must be positive")
        object.__setattr__(self, "target", as_target(self.target))

    @property
    def family(self) -> str:
        return "logistic" if self.scenario_id == "LOGISTIC_MAR" else "linear"

    @property
    def true_beta(self) -> np.ndarray:
        return np.array(LOGISTIC_BETA if self.family == "logistic" else LINEAR_BETA)

    def mechanism(self, site_index: int) -> MechanismSpec:
        if self.scenario_id == "S1_MNAR":
            mech = S1_MNAR_MECHANISM
        elif self.scenario_id == "S2_heterogeneous":
            mech = scenario2_mechanism(site_index)
        else:
            mech = S1_MAR_MECHANISM
        return mech.with_event(self.mechanism_event)

    def draw_sizes(self, rep: int) -> list[int]:
        rng = stream(self.seed, rep, 0)
        return [int(s) for s in rng.choice(self.site_sizes, size=self.K)]

    def replicate(self, rep: int) -> Replication:
        from .weights import uniform_random_weights

        gen = generate_logistic_site if self.family == "logistic" else generate_linear_site
        full, sites, unif = [], [], []
        for k, n in enumerate(self.draw_sizes(rep)):
            rng = stream(self.seed, rep, k + 1)
            complete = gen(n, rng, site_id=f"site{k}")
            observed = apply_missingness(complete, self.mechanism(k), self.target, rng)
            full.append(complete)
            sites.append(observed)
            unif.append(uniform_random_weights(observed, rng).pi)
        return Replication(full, sites, unif)

    def to_dict(self) -> dict:
        return {"scenario_id": self.scenario_id, "K": self.K, "site_sizes": list(self.site_sizes),
                "seed": self.seed, "target": self.target.value, "mechanism_event": self.mechanism_event}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(d["scenario_id"], int(d["K"]), tuple(d.get("site_sizes", SITE_SIZE_POOL)),
                   int(d.get("seed", 0)), d.get("target", "X"), d.get("mechanism_event", "missing"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioSpec":
        return cls.from_dict(json.loads(text))


def sites_from_sizes(sizes: Sequence[int], seed: int, family: str = "linear") -> list[SiteDataset]:
    gen = generate_logistic_site if family == "logistic" else generate_linear_site
    return [gen(n, stream(seed, 0, k + 1), site_id=f"site{k}") for k, n in enumerate(sizes)]
