"""Sandwich variance for complete-case and weighted estimators.

The parameter vector is ξ = (θ, α₁, …, α_J): outcome parameters followed
by every candidate completeness model. Sites compute raw sums of
estimating-function Jacobians (A) and outer products (B) from their own
rows; the coordinator adds them, applies a single ``1/n`` and forms
``A⁻¹ B A⁻ᵀ / n``, the variance of ξ̂ itself.

For the linear family θ = (β, σ) with the normal score
``(y − xᵀβ)x/σ²`` and ``((y − xᵀβ)² − σ²)/σ³``. Weighted estimating
functions are ``(r/π)·S``. When π comes from calibration, τ is held fixed at
its plug-in value while differentiating with respect to α.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .datamodel import ModelSpec, SiteDataset
from .estimators import CountRow, count_design
from .exceptions import DimensionMismatch, SingularMatrix
from .numerics import SINGULAR_RTOL, expit
from .weights import CandidateModel, CandidateSet, SiteWeighting

REGIMES = ("cc", "site_specific", "calibrated")
BLOCK_NAMES = ("A_tt", "B_tt", "A_ta", "B_ta", "A_aa", "B_aa", "A", "B")


def outcome_score(model: ModelSpec, X: np.ndarray, y: np.ndarray, theta, w: np.ndarray):
    """Per-row outcome score ``S`` and the weighted Jacobian ``Σ wᵢ ∂Sᵢ/∂θ``."""
    theta = np.asarray(theta, dtype=float)
    if theta.size != model.theta_dim:
        raise DimensionMismatch(f"theta has {theta.size} entries, model expects {model.theta_dim}")
    if model.family == "logistic":
        mu = expit(X @ theta)
        S = (y - mu)[:, None] * X
        jac = -X.T @ (X * (w * mu * (1.0 - mu))[:, None])
        return S, jac
    beta, sigma = theta[:-1], theta[-1]
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    e = y - X @ beta
    s2, s3, s4 = sigma ** 2, sigma ** 3, sigma ** 4
    S = np.column_stack([X * (e / s2)[:, None], (e ** 2 - s2) / s3])
    p = X.shape[1]
    jac = np.empty((p + 1, p + 1))
    jac[:p, :p] = -X.T @ (X * w[:, None]) / s2
    cross = -2.0 * X.T @ (w * e) / s3
    jac[:p, p] = cross
    jac[p, :p] = cross
    jac[p, p] = np.sum(w * (1.0 / s2 - 3.0 * e ** 2 / s4))
    return S, jac


@dataclass
class SiteTerms:
    """Row-level pieces shared by the block and alternative computations.

    ``phi_theta`` has one row per site row (zero where the row does not
    enter the outcome equation); ``phi_alpha[j]`` and ``A_aa[j]`` exist only
    for candidates whose estimating equation lives at this site.
    """

    n: int
    phi_theta: np.ndarray
    A_tt: np.ndarray
    A_ta: dict[int, np.ndarray]
    phi_alpha: dict[int, np.ndarray]
    A_aa: dict[int, np.ndarray]


def site_terms(data: SiteDataset, model: ModelSpec, theta, weighting: SiteWeighting,
               outcome_mask=None) -> SiteTerms:
    mask = data.r == 1
    if outcome_mask is not None:
        mask = mask & ~np.asarray(outcome_mask, dtype=bool)
    d = model.theta_dim
    n = data.n
    phi_theta = np.zeros((n, d))
    A_ta: dict[int, np.ndarray] = {}
    phi_alpha: dict[int, np.ndarray] = {}
    A_aa: dict[int, np.ndarray] = {}
    pi_all = None if weighting.pi is None else np.asarray(weighting.pi, dtype=float)
    if mask.any():
        X = model.design(data, mask)
        pi = np.ones(mask.sum()) if pi_all is None else pi_all[mask]
        w = 1.0 / pi
        S, A_tt = outcome_score(model, X, data.y[mask], theta, w)
        P = S * w[:, None]
        phi_theta[mask] = P
    else:
        A_tt = np.zeros((d, d))
    kind = weighting.kind
    if kind in ("site_specific", "calibrated"):
        cands = weighting.candidates
        used = range(len(cands)) if kind == "calibrated" else weighting.own
        for j in used:
            cand = cands[j]
            if mask.any():
                h = cand.formula.design(data, mask)
                g = expit(h @ cand.alpha)
                scale = g * (1.0 - g)
                if kind == "calibrated":
                    scale = weighting.tau[j] * scale
                A_ta[j] = -(P * (scale / pi)[:, None]).T @ h
            else:
                A_ta[j] = np.zeros((d, cand.dim))
        for j in weighting.own:
            cand = cands[j]
            H = cand.formula.design(data)
            g = expit(H @ cand.alpha)
            phi_alpha[j] = (data.r - g)[:, None] * H
            A_aa[j] = -H.T @ (H * (g * (1.0 - g))[:, None])
    return SiteTerms(n, phi_theta, A_tt, A_ta, phi_alpha, A_aa)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


@dataclass
class VarianceBlocks:
    """One site's contribution to the stacked A and B (raw sums).

    ``cc``: ``A_tt``/``B_tt`` only. ``site_specific``: the site's own
    candidate blocks in ``A_ta``, ``B_ta``, ``A_aa``, ``B_aa`` (one-element
    lists). ``calibrated``: full ``A``/``B`` over ξ.
    """

    site: str
    regime: str
    theta_dim: int
    alpha_dims: list[int]
    n: int
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.blocks[name]

    def to_dict(self) -> dict:
        return {
            "site": self.site,
            "regime": self.regime,
            "dims": {"theta_dim": self.theta_dim, "alpha_dims": list(self.alpha_dims)},
            "n": int(self.n),
            "blocks": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                       for k, v in sorted(self.blocks.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceBlocks":
        if d["regime"] not in REGIMES:
            raise ValueError(f"unknown regime {d['regime']!r}")
        blocks = {}
        for k, v in d["blocks"].items():
            if k not in BLOCK_NAMES:
                raise ValueError(f"unknown block {k!r}")
            blocks[k] = np.asarray(v["data"], dtype=float).reshape(v["shape"])
        dims = d["dims"]
        return cls(d["site"], d["regime"], int(dims["theta_dim"]), [int(a) for a in dims["alpha_dims"]],
                   int(d["n"]), blocks)


def site_variance_blocks(data: SiteDataset, model: ModelSpec, theta, weighting: SiteWeighting,
                         regime: str | None = None, outcome_mask=None) -> VarianceBlocks:
    """Raw-sum A and B contributions of one site."""
    regime = weighting.regime if regime is None else regime
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if regime != weighting.regime:
        raise DimensionMismatch(f"weighting of kind {weighting.kind} cannot emit {regime} blocks")
    t = site_terms(data, model, theta, weighting, outcome_mask)
    d = model.theta_dim
    P = t.phi_theta
    B_tt = _sym(P.T @ P)
    if regime == "cc":
        return VarianceBlocks(data.site_id, regime, d, [], t.n, {"A_tt": t.A_tt, "B_tt": B_tt})
    if regime == "site_specific":
        (j,) = weighting.own
        phi = t.phi_alpha[j]
        blocks = {
            "A_tt": t.A_tt, "B_tt": B_tt,
            "A_ta": t.A_ta[j], "B_ta": P.T @ phi,
            "A_aa": _sym(t.A_aa[j]), "B_aa": _sym(phi.T @ phi),
        }
        return VarianceBlocks(data.site_id, regime, d, [weighting.candidates[j].dim], t.n, blocks)
    cands = weighting.candidates
    dims = cands.dims
    offs = cands.offsets(d)
    total = d + sum(dims)
    A = np.zeros((total, total))
    B = np.zeros((total, total))
    A[:d, :d] = t.A_tt
    B[:d, :d] = B_tt
    for j, blk in t.A_ta.items():
        A[:d, offs[j]:offs[j] + dims[j]] = blk
    for j, phi in t.phi_alpha.items():
        sj = slice(offs[j], offs[j] + dims[j])
        A[sj, sj] = _sym(t.A_aa[j])
        B[:d, sj] = P.T @ phi
        B[sj, :d] = B[:d, sj].T
        for m, phi_m in t.phi_alpha.items():
            sm = slice(offs[m], offs[m] + dims[m])
            B[sj, sm] = phi.T @ phi_m
    B = _sym(B)
    return VarianceBlocks(data.site_id, regime, d, dims, t.n, {"A": A, "B": B})


def count_variance_blocks(rows: Sequence[CountRow], model: ModelSpec, theta) -> VarianceBlocks:
    """A and B of the complete-case logistic fit computed from count rows alone.

    Every member of a combination has the same score, so weighting the
    per-combination outer product by the count reproduces the row-level sum.
    """
    X, y, w = count_design(rows, model)
    S, A_tt = outcome_score(model, X, y, theta, w)
    B_tt = _sym(S.T @ (S * w[:, None]))
    n = int(sum(r.n_raw for r in rows))
    return VarianceBlocks("coordinator", "cc", model.theta_dim, [], n, {"A_tt": A_tt, "B_tt": B_tt})


@dataclass
class StackedVariance:
    """Assembled system over ξ.

    ``A_stacked`` and ``B_stacked`` are the ``1/n``-scaled averages;
    ``cov_xi`` and ``cov_theta`` are variances of the estimates themselves.
    """

    A_stacked: np.ndarray
    B_stacked: np.ndarray
    cov_xi: np.ndarray
    cov_theta: np.ndarray
    regime: str
    n: int
    theta_dim: int
    alpha_dims: list[int]
    naive_cov: np.ndarray | None = None

    @property
    def se_theta(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_theta), 0.0, None))


def _inverse(A: np.ndarray) -> np.ndarray:
    lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    diag = np.abs(np.diag(lu))
    if diag.size == 0 or diag.min() <= SINGULAR_RTOL * max(diag.max(), np.abs(A).max()):
        raise SingularMatrix("stacked Jacobian is singular")
    return scipy.linalg.lu_solve((lu, piv), np.eye(A.shape[0]))


def sandwich(A: np.ndarray, B: np.ndarray, n: int) -> np.ndarray:
    """``A⁻¹ B A⁻ᵀ / n`` for averaged ``A`` and ``B``."""
    Ainv = _inverse(A)
    return _sym(Ainv @ B @ Ainv.T) / n


def _check(blocks: Sequence[VarianceBlocks], regime: str) -> int:
    if not blocks:
        raise ValueError("no variance blocks")
    d = blocks[0].theta_dim
    for b in blocks:
        if b.regime != regime:
            raise DimensionMismatch(f"site {b.site} sent {b.regime} blocks in a {regime} assembly")
        if b.theta_dim != d:
            raise DimensionMismatch("sites disagree on theta_dim")
    return d


def assemble_stacked(blocks: Sequence[VarianceBlocks], regime: str) -> StackedVariance:
    """Add site contributions (in the given order) and form the sandwich."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    d = _check(blocks, regime)
    n = sum(b.n for b in blocks)
    if regime == "cc":
        dims: list[int] = []
        A = np.zeros((d, d))
        B = np.zeros((d, d))
        for b in blocks:
            A = A + b["A_tt"]
            B = B + b["B_tt"]
    elif regime == "site_specific":
        dims = [b.alpha_dims[0] for b in blocks]
        total = d + sum(dims)
        A = np.zeros((total, total))
        B = np.zeros((total, total))
        pos = d
        for b, a in zip(blocks, dims):
            if b["A_ta"].shape != (d, a) or b["A_aa"].shape != (a, a):
                raise DimensionMismatch(f"site {b.site}: block shapes disagree with its dims ledger")
            s = slice(pos, pos + a)
            A[:d, :d] += b["A_tt"]
            B[:d, :d] += b["B_tt"]
            A[:d, s] = b["A_ta"]
            A[s, s] = b["A_aa"]
            B[:d, s] = b["B_ta"]
            B[s, :d] = b["B_ta"].T
            B[s, s] = b["B_aa"]
            pos += a
    else:
        dims = list(blocks[0].alpha_dims)
        total = d + sum(dims)
        A = np.zeros((total, total))
        B = np.zeros((total, total))
        for b in blocks:
            if b.alpha_dims != dims or b["A"].shape != (total, total):
                raise DimensionMismatch(f"site {b.site}: dims ledger disagrees with the network")
            A = A + b["A"]
            B = B + b["B"]
    A_avg = A / n
    B_avg = _sym(B / n)
    cov = sandwich(A_avg, B_avg, n)
    return StackedVariance(A_avg, B_avg, cov, cov[:d, :d].copy(), regime, n, d, dims)


def naive_variance(blocks: Sequence[VarianceBlocks]) -> np.ndarray:
    """Sandwich over the θ blocks only, as if the weights were known."""
    if not blocks:
        raise ValueError("no variance blocks")
    d = blocks[0].theta_dim
    A = np.zeros((d, d))
    B = np.zeros((d, d))
    n = 0
    for b in blocks:
        if b.regime == "calibrated":
            A = A + b["A"][:d, :d]
            B = B + b["B"][:d, :d]
        else:
            A = A + b["A_tt"]
            B = B + b["B_tt"]
        n += b.n
    return sandwich(A / n, _sym(B / n), n)


def alt_variance_check(sites: Sequence[SiteDataset], model: ModelSpec, theta,
                       candidates: Sequence[CandidateModel]) -> np.ndarray:
    """Variance of θ̂ from the projected-score representation.

    Each site uses its own single candidate. B is built from
    ``Φ_θ − A_θα A_αα⁻¹ Φ_α`` and the result is ``A_θθ⁻¹ B A_θθ⁻ᵀ``.
    """
    if len(sites) != len(candidates):
        raise DimensionMismatch("need exactly one candidate per site")
    d = model.theta_dim
    dims = [c.dim for c in candidates]
    total_a = sum(dims)
    A_tt = np.zeros((d, d))
    A_ta = np.zeros((d, total_a))
    A_aa = np.zeros((total_a, total_a))
    phi_t, phi_a = [], []
    pos = 0
    for data, cand in zip(sites, candidates):
        wt = SiteWeighting.from_candidate(data, cand)
        t = site_terms(data, model, theta, wt)
        s = slice(pos, pos + cand.dim)
        A_tt += t.A_tt
        A_ta[:, s] = t.A_ta[0]
        A_aa[s, s] = t.A_aa[0]
        rows = np.zeros((data.n, total_a))
        rows[:, s] = t.phi_alpha[0]
        phi_t.append(t.phi_theta)
        phi_a.append(rows)
        pos += cand.dim
    Pt = np.vstack(phi_t)
    Pa = np.vstack(phi_a)
    proj = A_ta @ np.linalg.solve(A_aa, Pa.T)
    resid = Pt - proj.T
    B = resid.T @ resid
    Ainv = _inverse(A_tt)
    return _sym(Ainv @ B @ Ainv.T)
