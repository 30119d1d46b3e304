"""Site-side summaries and coordinator-side combiners for point estimation.

Two transports are supported. Sufficient information sends the weighted
cross-products ``XᵀWX`` and ``XᵀWy`` (linear family). Count aggregation
sends the distinct complete-case combinations of outcome and covariates
with their (weighted) counts, from which any GLM can be refitted exactly
(logistic family here).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .datamodel import EstimatorChoice, ModelSpec, SiteDataset
from .exceptions import DegreesOfFreedom, DimensionMismatch, NonDiscreteData, NotConverged
from .numerics import cross_products, irls_logistic, solve_spd
from .weights import SiteWeighting, WeightVector

KEY_DIGITS = 12


def _row_weights(data: SiteDataset, weights) -> np.ndarray:
    """Per-row weights ``r/π`` (``r`` for unit weights); zero at incomplete rows."""
    if weights is None:
        return data.r.astype(float)
    if isinstance(weights, SiteWeighting):
        return weights.row_weights(data.r)
    if isinstance(weights, WeightVector):
        return weights.inverse_weights(data.r)
    w = np.asarray(weights, dtype=float)
    if w.shape != (data.n,):
        raise DimensionMismatch("row weights disagree with the site size")
    return np.where(data.r == 1, w, 0.0)


def _matrix_dict(m: np.ndarray) -> dict:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    return {"shape": list(m.shape), "data": m.reshape(-1).tolist()}


def _matrix_from(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


# -------------------------------------------------------- sufficient information


@dataclass(frozen=True, eq=False)
class SuffStats:
    site: str
    xtwx: np.ndarray
    xtwy: np.ndarray

    def __post_init__(self):
        xtwx = np.asarray(self.xtwx, dtype=float)
        scale = np.max(np.abs(xtwx), initial=0.0)
        if np.max(np.abs(xtwx - xtwx.T), initial=0.0) > 1e-9 * scale:
            raise ValueError("xtwx must be symmetric")

    def to_dict(self) -> dict:
        return {"site": self.site, "xtwx": _matrix_dict(self.xtwx), "xtwy": self.xtwy.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SuffStats":
        return cls(d["site"], _matrix_from(d["xtwx"]), np.asarray(d["xtwy"], dtype=float))


def site_suffstats(data: SiteDataset, model: ModelSpec, weights=None) -> SuffStats:
    """Weighted cross-products over the site's complete cases."""
    w = _row_weights(data, weights)
    mask = data.r == 1
    p = model.design_dim
    if not mask.any():
        return SuffStats(data.site_id, np.zeros((p, p)), np.zeros(p))
    X = model.design(data, mask)
    xtwx, xtwy = cross_products(X, data.y[mask], w[mask])
    return SuffStats(data.site_id, xtwx, xtwy)


def combine_linear(stats: Sequence[SuffStats]) -> np.ndarray:
    """Solve the pooled normal equations; sums run in the given site order."""
    if not stats:
        raise ValueError("need at least one site")
    xtwx = np.zeros_like(stats[0].xtwx)
    xtwy = np.zeros_like(stats[0].xtwy)
    for s in stats:
        if s.xtwx.shape != xtwx.shape:
            raise DimensionMismatch("sites disagree on the design dimension")
        xtwx = xtwx + s.xtwx
        xtwy = xtwy + s.xtwy
    return solve_spd(xtwx, xtwy)


@dataclass(frozen=True)
class RSSReport:
    site: str
    rss: float
    n_complete: int

    def to_dict(self) -> dict:
        return {"site": self.site, "rss": float(self.rss), "n_complete": int(self.n_complete)}

    @classmethod
    def from_dict(cls, d: dict) -> "RSSReport":
        return cls(d["site"], float(d["rss"]), int(d["n_complete"]))


def site_rss(data: SiteDataset, model: ModelSpec, weights, beta) -> RSSReport:
    """Weighted residual sum of squares over complete cases."""
    w = _row_weights(data, weights)
    mask = data.r == 1
    if not mask.any():
        return RSSReport(data.site_id, 0.0, 0)
    resid = data.y[mask] - model.design(data, mask) @ np.asarray(beta, dtype=float)
    return RSSReport(data.site_id, float(np.sum(w[mask] * resid ** 2)), int(mask.sum()))


def combine_sigma(reports: Sequence[RSSReport], p: int) -> float:
    rss = 0.0
    n = 0
    for rep in reports:
        rss += rep.rss
        n += rep.n_complete
    if n <= p:
        raise DegreesOfFreedom(f"{n} complete cases for {p} coefficients")
    return float(np.sqrt(rss / (n - p)))


def sigma_round(sites: Sequence[SiteDataset], weights: Sequence, theta, model: ModelSpec | None = None) -> float:
    """Residual scale from per-site weighted RSS: ``sqrt(ΣRSS / (Σn_R − p))``."""
    beta = np.asarray(theta, dtype=float)
    if model is None:
        model = ModelSpec("linear", tuple(["x"] + [f"z{j + 1}" for j in range(sites[0].z_dim)]))
    beta = beta[: model.design_dim]
    reports = [site_rss(s, model, w, beta) for s, w in zip(sites, weights)]
    return combine_sigma(reports, model.design_dim)


# ------------------------------------------------------------ count aggregation


def canonical_key(fields: Sequence[str], values: Sequence[float]) -> str:
    return "|".join(f"{f}={format(float(v), f'.{KEY_DIGITS}g')}" for f, v in zip(fields, values))


@dataclass(frozen=True)
class CountRow:
    u: dict
    w: float
    n_raw: int

    def __post_init__(self):
        if self.n_raw < 1:
            raise ValueError("n_raw must be at least 1")
        if not (self.w >= 0 and np.isfinite(self.w)):
            raise ValueError("w must be finite and non-negative")

    def key(self, fields: Sequence[str]) -> str:
        return canonical_key(fields, [self.u[f] for f in fields])

    def to_dict(self) -> dict:
        return {"u": {k: float(v) for k, v in self.u.items()}, "w": float(self.w), "n_raw": int(self.n_raw)}

    @classmethod
    def from_dict(cls, d: dict) -> "CountRow":
        return cls({k: float(v) for k, v in d["u"].items()}, float(d["w"]), int(d["n_raw"]))


@dataclass
class CountTable:
    """A site's count rows plus what suppression removed."""

    site: str
    fields: tuple[str, ...]
    rows: list[CountRow]
    suppressed_keys: list[str] = field(default_factory=list)
    n_raw_dropped: int = 0

    @property
    def n_cells_dropped(self) -> int:
        return len(self.suppressed_keys)

    def report(self) -> dict:
        return {"site": self.site, "cells_sent": len(self.rows), "cells_dropped": self.n_cells_dropped,
                "n_raw_dropped": int(self.n_raw_dropped)}


def site_counts(data: SiteDataset, model: ModelSpec, weights=None, suppression_T: int = 1) -> CountTable:
    """Group complete cases by their (y, covariates) combination.

    ``w`` is the count under unit weights or the sum of ``1/π`` otherwise.
    Combinations seen fewer than ``suppression_T`` times are withheld.
    """
    if suppression_T < 1:
        raise ValueError("suppression threshold must be at least 1")
    fields = model.key_fields
    w = _row_weights(data, weights)
    mask = data.r == 1
    if not mask.any():
        return CountTable(data.site_id, fields, [])
    U = np.column_stack([data.column(f)[mask] for f in fields])
    if np.any(np.isnan(U)):
        raise NonDiscreteData(f"site {data.site_id}: a key field is missing at a complete row")
    if np.any(U != np.round(U)):
        raise NonDiscreteData(f"site {data.site_id}: key fields must be discrete (integer-coded)")
    uniq, inverse = np.unique(U, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    wsum = np.bincount(inverse, weights=w[mask], minlength=len(uniq))
    nraw = np.bincount(inverse, minlength=len(uniq))
    rows, dropped, n_dropped = [], [], 0
    for j, vals in enumerate(uniq):
        if nraw[j] < suppression_T:
            dropped.append(canonical_key(fields, vals))
            n_dropped += int(nraw[j])
            continue
        rows.append(CountRow(dict(zip(fields, map(float, vals))), float(wsum[j]), int(nraw[j])))
    return CountTable(data.site_id, fields, rows, dropped, n_dropped)


def suppressed_mask(data: SiteDataset, model: ModelSpec, suppressed_keys: Sequence[str]) -> np.ndarray:
    """Rows whose combination was withheld (they leave the outcome equation)."""
    out = np.zeros(data.n, dtype=bool)
    if not suppressed_keys:
        return out
    keys = set(suppressed_keys)
    fields = model.key_fields
    cols = [data.column(f) for f in fields]
    for i in np.flatnonzero(data.r == 1):
        if canonical_key(fields, [c[i] for c in cols]) in keys:
            out[i] = True
    return out


def count_design(rows: Sequence[CountRow], model: ModelSpec):
    """Design matrix, outcome and weights for a list of count rows."""
    if not rows:
        raise ValueError("no count rows to fit")
    fields = model.key_fields
    U = np.array([[r.u[f] for f in fields] for r in rows], dtype=float)
    X = np.ones((len(rows), model.design_dim))
    for c, term in enumerate(model.terms):
        for var in term:
            X[:, c] *= U[:, fields.index(var)]
    return X, U[:, 0], np.array([r.w for r in rows], dtype=float)


def combine_glm(counts: Sequence[CountRow], model: ModelSpec, tol: float = 1e-8) -> np.ndarray:
    """Weighted IRLS over pooled count rows."""
    if model.family != "logistic":
        raise ValueError("count aggregation is implemented for the logistic family")
    X, y, w = count_design(counts, model)
    theta, converged = irls_logistic(X, y, w, tol=tol)
    if not converged:
        raise NotConverged("outcome model did not converge on pooled counts", theta)
    return theta


@dataclass
class FitResult:
    theta: np.ndarray
    sigma: float | None
    estimator: EstimatorChoice
    rounds_used: int
    transcript: Any = None
    names: list[str] = field(default_factory=list)

    @property
    def beta(self) -> np.ndarray:
        return self.theta[:-1] if self.sigma is not None else self.theta
