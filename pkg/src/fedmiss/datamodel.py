"""Observation, site and model vocabulary shared by every module.

A site's data is held column-wise: ``y`` and ``x`` are float arrays with
NaN marking a missing value, ``z`` is an ``n × p`` array of always-observed
covariates and ``r`` is the completeness flag derived from the missingness
target. Feature maps are declared by name over variable names (``"y"``,
``"x"``, ``"z1"`` ...) so that fitted coefficients can be shipped to another
site and re-applied there.
"""
from __future__ import annotations

import csv
import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DriverUnavailable, ParseError, SchemaError


class MissingnessTarget(str, enum.Enum):
    """Which fields may be missing."""

    Y = "Y"
    X = "X"
    YX = "YX"

    @property
    def missable(self) -> tuple[str, ...]:
        return {"Y": ("y",), "X": ("x",), "YX": ("y", "x")}[self.value]


def as_target(target) -> MissingnessTarget:
    if isinstance(target, MissingnessTarget):
        return target
    try:
        return MissingnessTarget(str(target).upper())
    except ValueError:
        raise ValueError(f"unknown missingness target {target!r}") from None


@dataclass(frozen=True)
class Observation:
    y: float | None
    x: float | None
    z: tuple[float, ...]
    r: int


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SiteDataset:
    """One site's rows.

    ``r`` is recomputed from the NaN pattern of the missable fields; passing
    an inconsistent ``r`` is an error. ``oracle_pi`` holds the generator's
    true completeness probabilities when the data are synthetic, and
    ``group`` is an optional label (for instance the missingness mechanism a
    simulated site was drawn under) that candidate-selection rules may read.
    """

    site_id: str
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    target: MissingnessTarget = MissingnessTarget.X
    r: np.ndarray | None = None
    oracle_pi: np.ndarray | None = None
    group: str | None = None

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "target", as_target(self.target))
        y = _frozen(self.y)
        x = _frozen(self.x)
        z = np.array(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1) if z.size else z.reshape(len(y), 0)
        z = _frozen(z)
        n = len(y)
        if n == 0:
            raise ValueError("a site must contain at least one row")
        if x.shape != (n,) or z.shape[0] != n:
            raise ValueError("y, x and z disagree in length")
        if not np.all(np.isfinite(z)):
            raise SchemaError("z covariates must be fully observed")
        for name, col in (("y", y), ("x", x)):
            if np.any(np.isinf(col)):
                raise ValueError(f"infinite value in {name}")
        present = np.ones(n, dtype=bool)
        for name in self.target.missable:
            present &= ~np.isnan(y if name == "y" else x)
        r = present.astype(np.int8)
        if self.r is not None and not np.array_equal(np.asarray(self.r, dtype=np.int8), r):
            raise ValueError("r is inconsistent with the missing-value pattern")
        set_(self, "y", y)
        set_(self, "x", x)
        set_(self, "z", z)
        set_(self, "r", _frozen(r, np.int8))
        if self.oracle_pi is not None:
            pi = _frozen(self.oracle_pi)
            if pi.shape != (n,):
                raise ValueError("oracle_pi has the wrong length")
            set_(self, "oracle_pi", pi)
        set_(self, "site_id", str(self.site_id))

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def z_dim(self) -> int:
        return self.z.shape[1]

    @property
    def variables(self) -> tuple[str, ...]:
        return ("y", "x") + tuple(f"z{j + 1}" for j in range(self.z_dim))

    def complete_count(self) -> int:
        return int(self.r.sum())

    def column(self, name: str) -> np.ndarray:
        if name == "y":
            return self.y
        if name == "x":
            return self.x
        if name.startswith("z") and name[1:].isdigit():
            j = int(name[1:])
            if 1 <= j <= self.z_dim:
                return self.z[:, j - 1]
        raise DriverUnavailable(f"site {self.site_id} has no column {name!r}")

    def rows(self) -> list[Observation]:
        def opt(v):
            return None if np.isnan(v) else float(v)

        return [
            Observation(opt(self.y[i]), opt(self.x[i]), tuple(map(float, self.z[i])), int(self.r[i]))
            for i in range(self.n)
        ]

    @classmethod
    def from_rows(cls, site_id, rows: Sequence[Observation], target=MissingnessTarget.X, **kw):
        nan = float("nan")
        y = [nan if o.y is None else o.y for o in rows]
        x = [nan if o.x is None else o.x for o in rows]
        z = np.array([o.z for o in rows], dtype=float).reshape(len(rows), -1)
        ds = cls(site_id, y, x, z, target=target, **kw)
        if [o.r for o in rows] != ds.r.tolist():
            raise ValueError("row flags are inconsistent with the missing-value pattern")
        return ds

    def replace(self, **changes) -> "SiteDataset":
        fields_ = dict(site_id=self.site_id, y=self.y, x=self.x, z=self.z, target=self.target,
                       oracle_pi=self.oracle_pi, group=self.group)
        fields_.update(changes)
        return SiteDataset(**fields_)


def concat_sites(sites: Sequence[SiteDataset], site_id: str = "pooled") -> SiteDataset:
    """Stack several sites into one (benchmark use only)."""
    if not sites:
        raise ValueError("no sites to concatenate")
    targets = {s.target for s in sites}
    if len(targets) != 1:
        raise ValueError("sites disagree on the missingness target")
    pis = [s.oracle_pi for s in sites]
    pi = None if any(p is None for p in pis) else np.concatenate(pis)
    return SiteDataset(
        site_id,
        np.concatenate([s.y for s in sites]),
        np.concatenate([s.x for s in sites]),
        np.vstack([s.z for s in sites]),
        target=sites[0].target,
        oracle_pi=pi,
    )


# ---------------------------------------------------------------- feature maps

FEATURE_MAPS = ("main_effects", "pairwise_interactions")

Term = tuple  # tuple of variable names; () is the intercept


def feature_terms(name: str, variables: Sequence[str]) -> tuple[Term, ...]:
    variables = tuple(variables)
    if name == "main_effects":
        return ((),) + tuple((v,) for v in variables)
    if name == "pairwise_interactions":
        pairs = tuple(itertools.combinations(variables, 2))
        return ((),) + tuple((v,) for v in variables) + pairs
    raise ValueError(f"unknown feature map {name!r}; choose from {FEATURE_MAPS}")


def term_label(term: Term) -> str:
    return "intercept" if not term else ":".join(term)


def build_design(data: SiteDataset, terms: Sequence[Term], mask=None) -> np.ndarray:
    """Evaluate ``terms`` on the rows selected by ``mask`` (all rows if None)."""
    cols = []
    sel = slice(None) if mask is None else np.asarray(mask, dtype=bool)
    for term in terms:
        col = np.ones(data.n)[sel]
        for var in term:
            col = col * data.column(var)[sel]
        cols.append(col)
    X = np.column_stack(cols) if cols else np.empty((0, 0))
    if np.any(np.isnan(X)):
        raise DriverUnavailable(f"site {data.site_id}: a required field is missing in selected rows")
    return X


@dataclass(frozen=True)
class ModelSpec:
    """Outcome model: family plus a named feature map over covariates."""

    family: str = "linear"
    covariates: tuple[str, ...] = ("x", "z1", "z2")
    feature_map: str = "main_effects"

    def __post_init__(self):
        if self.family not in ("linear", "logistic"):
            raise ValueError(f"family must be 'linear' or 'logistic', got {self.family!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if "y" in self.covariates:
            raise ValueError("the outcome cannot be a covariate")
        feature_terms(self.feature_map, self.covariates)

    @property
    def terms(self) -> tuple[Term, ...]:
        return feature_terms(self.feature_map, self.covariates)

    @property
    def design_dim(self) -> int:
        return len(self.terms)

    @property
    def theta_dim(self) -> int:
        """Length of θ in the stacked system (σ is appended for the linear family)."""
        return self.design_dim + (1 if self.family == "linear" else 0)

    @property
    def key_fields(self) -> tuple[str, ...]:
        return ("y",) + self.covariates

    def coefficient_names(self, with_sigma: bool = True) -> list[str]:
        names = [term_label(t) for t in self.terms]
        if with_sigma and self.family == "linear":
            names.append("sigma")
        return names

    def design(self, data: SiteDataset, mask=None) -> np.ndarray:
        return build_design(data, self.terms, mask)

    def to_dict(self) -> dict:
        return {"family": self.family, "covariates": list(self.covariates), "feature_map": self.feature_map}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["family"], tuple(d["covariates"]), d.get("feature_map", "main_effects"))


@dataclass(frozen=True)
class WeightingFormula:
    """Feature map for the completeness model ``Pr(R=1 | ...)``.

    ``name`` is one of the named feature maps, or ``"custom"`` with
    explicit ``terms``. When ``target`` is given the formula is checked
    against it: a field that can be missing cannot drive the model.
    """

    name: str = "main_effects"
    variables: tuple[str, ...] = ("y", "z1", "z2")
    terms: tuple[Term, ...] | None = None
    target: MissingnessTarget | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        if self.terms is None:
            object.__setattr__(self, "terms", feature_terms(self.name, self.variables))
        else:
            terms = tuple(tuple(t) for t in self.terms)
            if not terms or terms[0] != ():
                raise ValueError("custom terms must start with the intercept ()")
            object.__setattr__(self, "terms", terms)
        if self.target is not None:
            self.check_target(self.target)

    @property
    def used_fields(self) -> set[str]:
        return {v for t in self.terms for v in t}

    @property
    def includes_y(self) -> bool:
        return "y" in self.used_fields

    @property
    def includes_x(self) -> bool:
        return "x" in self.used_fields

    @property
    def alpha_dim(self) -> int:
        return len(self.terms)

    def check_target(self, target) -> None:
        target = as_target(target)
        bad = self.used_fields.intersection(target.missable)
        if bad:
            raise ValueError(
                f"weighting formula uses {sorted(bad)}, which can be missing under target {target.value}"
            )

    def design(self, data: SiteDataset, mask=None) -> np.ndarray:
        return build_design(data, self.terms, mask)

    def to_dict(self) -> dict:
        d = {"formula_name": self.name, "variables": list(self.variables)}
        if self.name not in FEATURE_MAPS:
            d["terms"] = [list(t) for t in self.terms]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WeightingFormula":
        terms = d.get("terms")
        return cls(d["formula_name"], tuple(d.get("variables", ())),
                   None if terms is None else tuple(tuple(t) for t in terms))


ESTIMATORS = ("CC", "IPW_site", "IPW_calibrated")
TRANSPORTS = ("sufficient_info", "count_aggregation")
_ALIASES = {
    "cc": "CC", "ipw_site": "IPW_site", "ipw-site": "IPW_site", "site": "IPW_site",
    "ipw_calibrated": "IPW_calibrated", "ipw-calibrated": "IPW_calibrated", "calibrated": "IPW_calibrated",
    "si": "sufficient_info", "sufficient_info": "sufficient_info", "sufficient-info": "sufficient_info",
    "counts": "count_aggregation", "count_aggregation": "count_aggregation",
    "count-aggregation": "count_aggregation",
}


@dataclass(frozen=True)
class EstimatorChoice:
    estimator: str = "CC"
    transport: str = "sufficient_info"

    def __post_init__(self):
        est = _ALIASES.get(str(self.estimator).lower(), self.estimator)
        tr = _ALIASES.get(str(self.transport).lower(), self.transport)
        if est not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if tr not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}, got {self.transport!r}")
        object.__setattr__(self, "estimator", est)
        object.__setattr__(self, "transport", tr)

    @property
    def is_ipw(self) -> bool:
        return self.estimator != "CC"

    def check_model(self, model: ModelSpec) -> None:
        if self.transport == "sufficient_info" and model.family != "linear":
            raise ValueError("sufficient-information transport fits the linear family only")
        if self.transport == "count_aggregation" and model.family != "logistic":
            raise ValueError("count-aggregation transport fits the logistic family only")


# ------------------------------------------------------------------------ CSV


def _parse_cell(cell: str, line: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"line {line}, column {col}: cannot parse {cell!r}") from None
    if not np.isfinite(v):
        raise ParseError(f"line {line}, column {col}: non-finite value {cell!r}")
    return v


def load_site_csv(path, target=MissingnessTarget.X, site_id: str | None = None) -> SiteDataset:
    """Read a site file with header ``y,x,z1..zp``; empty cells are missing."""
    target = as_target(target)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file")
        header = [h.strip() for h in header]
        p = len(header) - 2
        expected = ["y", "x"] + [f"z{j + 1}" for j in range(max(p, 0))]
        if p < 0 or header != expected:
            raise SchemaError(f"{path}: header must be y,x,z1..zp, got {','.join(header)}")
        ys, xs, zs = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}: line {lineno} has {len(row)} cells, expected {len(header)}")
            cells = [c.strip() for c in row]
            ys.append(float("nan") if cells[0] == "" else _parse_cell(cells[0], lineno, "y"))
            xs.append(float("nan") if cells[1] == "" else _parse_cell(cells[1], lineno, "x"))
            zrow = []
            for name, c in zip(header[2:], cells[2:]):
                if c == "":
                    raise SchemaError(f"{path}: line {lineno}: {name} is empty but z must be observed")
                zrow.append(_parse_cell(c, lineno, name))
            zs.append(zrow)
    if not ys:
        raise SchemaError(f"{path}: no data rows")
    if site_id is None:
        site_id = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return SiteDataset(site_id, ys, xs, np.array(zs, dtype=float).reshape(len(ys), p), target=target)


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else format(float(v), ".17g")


def write_site_csv(data: SiteDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(data.variables)
        for i in range(data.n):
            w.writerow([_fmt(data.y[i]), _fmt(data.x[i])] + [_fmt(v) for v in data.z[i]])


def iter_sites(paths: Iterable, target=MissingnessTarget.X) -> list[SiteDataset]:
    return [load_site_csv(p, target) for p in paths]
