"""Completeness-probability models: local fits, transport and calibration."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .datamodel import SiteDataset, WeightingFormula
from .exceptions import AllCompleteOrAllMissing, DimensionMismatch, NonPositiveWeight, NotConverged
from .numerics import expit, irls_logistic, solve_spd

PI_FLOOR = 1e-6
RIDGE = 1e-5
DUPLICATE_DECIMALS = 5
CALIBRATION_VARIANTS = ("projection", "supplement_normalized")
SOURCES = ("oracle", "site_specific", "calibrated", "uniform_random", "pooled", "unit")


@dataclass(frozen=True, eq=False)
class CandidateModel:
    """A fitted completeness model that can be re-evaluated at any site.

    ``n_rows`` and ``group`` are site-level metadata used only by the
    candidate-selection rules.
    """

    origin_site: str
    formula: WeightingFormula
    alpha: np.ndarray
    n_rows: int | None = None
    group: str | None = None

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).reshape(-1)
        if not np.all(np.isfinite(alpha)):
            raise ValueError("alpha must be finite")
        if alpha.size != self.formula.alpha_dim:
            raise DimensionMismatch(f"alpha has {alpha.size} entries, formula expects {self.formula.alpha_dim}")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "origin_site", str(self.origin_site))

    @property
    def dim(self) -> int:
        return self.alpha.size

    def design(self, data: SiteDataset) -> np.ndarray:
        return self.formula.design(data)

    def to_dict(self) -> dict:
        d = {"origin_site": self.origin_site, **self.formula.to_dict(), "alpha": self.alpha.tolist()}
        if self.n_rows is not None:
            d["n_rows"] = int(self.n_rows)
        if self.group is not None:
            d["group"] = self.group
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateModel":
        return cls(d["origin_site"], WeightingFormula.from_dict(d), np.asarray(d["alpha"], dtype=float),
                   d.get("n_rows"), d.get("group"))


class CandidateSet(tuple):
    """Ordered candidates; the order fixes the α block layout everywhere."""

    def __new__(cls, candidates: Iterable[CandidateModel] = ()):
        return super().__new__(cls, tuple(candidates))

    @property
    def dims(self) -> list[int]:
        return [c.dim for c in self]

    def offsets(self, theta_dim: int) -> list[int]:
        out, pos = [], theta_dim
        for d in self.dims:
            out.append(pos)
            pos += d
        return out

    def owned_by(self, site_id: str) -> list[int]:
        return [j for j, c in enumerate(self) if c.origin_site == site_id]


@dataclass(frozen=True, eq=False)
class WeightVector:
    pi: np.ndarray
    source: str

    def __post_init__(self):
        pi = np.array(self.pi, dtype=float).reshape(-1)
        if not np.all(np.isfinite(pi)):
            raise ValueError("probabilities must be finite")
        if self.source not in SOURCES:
            raise ValueError(f"unknown weight source {self.source!r}")
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)

    def inverse_weights(self, r) -> np.ndarray:
        """``r/π`` with zero at incomplete rows; ``π`` must clear the floor where ``r=1``."""
        r = np.asarray(r)
        if r.shape != self.pi.shape:
            raise DimensionMismatch("weight vector and data disagree in length")
        done = r == 1
        if np.any(self.pi[done] <= PI_FLOOR):
            raise NonPositiveWeight(f"probability at or below {PI_FLOOR:g} at a complete row")
        w = np.zeros(r.shape)
        w[done] = 1.0 / self.pi[done]
        return w


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    tau: np.ndarray
    pi_cal: WeightVector
    variant: str
    gamma: np.ndarray


def fit_nuisance(data: SiteDataset, formula: WeightingFormula, tol: float = 1e-8) -> CandidateModel:
    """Logistic regression of ``r`` on the formula's features over all rows."""
    formula.check_target(data.target)
    r = data.r.astype(float)
    if r.min() == r.max():
        raise AllCompleteOrAllMissing(f"site {data.site_id}: r is constant ({int(r[0])})")
    H = formula.design(data)
    alpha, converged = irls_logistic(H, r, None, tol=tol)
    if not converged:
        raise NotConverged(f"site {data.site_id}: weighting model did not converge", alpha)
    return CandidateModel(data.site_id, formula, alpha, n_rows=data.n, group=data.group)


def predict_pi(model: CandidateModel, data: SiteDataset, source: str = "site_specific") -> WeightVector:
    return WeightVector(expit(model.design(data) @ model.alpha), source)


def candidate_matrix(data: SiteDataset, candidates: Sequence[CandidateModel]) -> np.ndarray:
    """``n × J`` matrix γ of candidate probabilities."""
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    return np.column_stack([predict_pi(c, data).pi for c in candidates])


def _unique_columns(gamma: np.ndarray) -> list[int]:
    seen, keep = set(), []
    rounded = np.round(gamma, DUPLICATE_DECIMALS)
    for j in range(gamma.shape[1]):
        key = rounded[:, j].tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(j)
    return keep


def calibrate(data: SiteDataset, candidates: Sequence[CandidateModel], variant: str = "projection") -> CalibrationResult:
    """Combine candidate probabilities by least squares against ``r``.

    ``projection`` solves the normal equations over every row.
    ``supplement_normalized`` drops near-duplicate columns, adds a small
    ridge and rescales τ to ``τ²/Στ²``.
    """
    gamma = candidate_matrix(data, candidates)
    r = data.r.astype(float)
    J = gamma.shape[1]
    if variant == "projection":
        gram = gamma.T @ gamma
        tau = solve_spd(0.5 * (gram + gram.T), gamma.T @ r)
        pi = gamma @ tau
    elif variant == "supplement_normalized":
        keep = _unique_columns(gamma)
        g = gamma[:, keep]
        gram = g.T @ g
        gram = 0.5 * (gram + gram.T) + RIDGE * np.eye(len(keep))
        t = np.linalg.solve(gram, g.T @ r)
        denom = float(np.sum(t ** 2))
        t = t ** 2 / (denom if denom > 0 else 1.0)
        tau = np.zeros(J)
        tau[keep] = t
        pi = g @ t
    else:
        raise ValueError(f"unknown calibration variant {variant!r}")
    done = data.r == 1
    if np.any(pi[done] <= PI_FLOOR):
        raise NonPositiveWeight(f"site {data.site_id}: calibrated probability ≤ {PI_FLOOR:g} at a complete row")
    if np.any(pi > 1.0):
        warnings.warn(f"site {data.site_id}: calibrated probability exceeds 1", RuntimeWarning, stacklevel=2)
    return CalibrationResult(tau, WeightVector(pi, "calibrated"), variant, gamma)


@dataclass(frozen=True, eq=False)
class SiteWeighting:
    """Everything a site needs to weight its complete cases and differentiate π.

    ``kind`` is ``unit`` (complete-case), ``known`` (fixed probabilities such
    as oracle or uniform draws), ``site_specific`` (a local fit, candidate 0)
    or ``calibrated`` (a combination of the network candidate set with the
    site's plug-in ``tau``). ``own`` lists the candidates whose estimating
    equations live at this site.
    """

    kind: str
    pi: np.ndarray | None = None
    candidates: CandidateSet = CandidateSet()
    tau: np.ndarray | None = None
    own: tuple[int, ...] = ()

    @property
    def regime(self) -> str:
        return "cc" if self.kind in ("unit", "known") else self.kind

    def row_weights(self, r) -> np.ndarray:
        r = np.asarray(r)
        if self.pi is None:
            return r.astype(float)
        return WeightVector(self.pi, "oracle").inverse_weights(r)

    @classmethod
    def unit(cls) -> "SiteWeighting":
        return cls("unit")

    @classmethod
    def known(cls, pi) -> "SiteWeighting":
        return cls("known", WeightVector(pi, "oracle").pi)

    @classmethod
    def site_specific(cls, data: SiteDataset, formula: WeightingFormula) -> "SiteWeighting":
        model = fit_nuisance(data, formula)
        return cls.from_candidate(data, model)

    @classmethod
    def from_candidate(cls, data: SiteDataset, model: CandidateModel) -> "SiteWeighting":
        return cls("site_specific", predict_pi(model, data).pi, CandidateSet([model]), None, (0,))

    @classmethod
    def calibrated(cls, data: SiteDataset, candidates, variant: str = "projection") -> "SiteWeighting":
        candidates = CandidateSet(candidates)
        cal = calibrate(data, candidates, variant)
        return cls("calibrated", cal.pi_cal.pi, candidates, cal.tau, tuple(candidates.owned_by(data.site_id)))


def uniform_random_weights(data: SiteDataset, rng: np.random.Generator) -> WeightVector:
    """Probabilities drawn from Uniform(0.1, 0.9), unrelated to the data."""
    return WeightVector(rng.uniform(0.1, 0.9, data.n), "uniform_random")
