"""Monte Carlo engine: bias, standard errors and coverage per estimator arm."""
from __future__ import annotations

import csv
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import EstimatorChoice, ModelSpec, WeightingFormula, concat_sites
from .exceptions import FedMissError
from .fedproto import KnownWeights, SuppressionPolicy, run_protocol
from .missingness import ScenarioSpec

ARMS = ("oracle_full", "cc", "ipw_oracle", "ipw_pooled", "ipw_site", "ipw_calibrated", "ipw_uniform")
BENCHMARK_ARMS = ("oracle_full", "ipw_pooled")
VARIANCE_MODES = ("naive", "robust")
COLUMNS = ("scenario", "K", "estimator", "variance_mode", "coefficient", "bias_pct", "mean_se", "emp_sd",
           "coverage", "failures")
Z_975 = 1.959963984540054

MAIN_FORMULA = WeightingFormula("main_effects", ("y", "z1", "z2"))
INTERACTION_FORMULA = WeightingFormula("custom", ("y", "z1", "z2"), ((), ("y",), ("z1",), ("z2",), ("y", "z1")))


def worker_count(requested: int | None = None) -> int:
    """Workers allowed by the request, the CPU count and ``FEDMISS_THREADS``."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("FEDMISS_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError("FEDMISS_THREADS must be a positive integer") from None
    return max(1, n)


@dataclass
class SimConfig:
    scenario: ScenarioSpec
    reps: int = 500
    arms: tuple[str, ...] = ARMS
    variance_modes: tuple[str, ...] = VARIANCE_MODES
    seed: int | None = None
    weighting: WeightingFormula = MAIN_FORMULA
    candidates_from: str | None = None
    group_formulas: dict | None = None
    T: int = 1
    workers: int | None = 1

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        bad = set(self.arms) - set(ARMS)
        if bad:
            raise ValueError(f"unknown arms {sorted(bad)}; choose from {ARMS}")
        bad = set(self.variance_modes) - set(VARIANCE_MODES)
        if bad:
            raise ValueError(f"unknown variance modes {sorted(bad)}")
        if self.seed is not None and self.seed != self.scenario.seed:
            self.scenario = ScenarioSpec(**{**self.scenario.to_dict(), "seed": self.seed})
        if self.candidates_from is None:
            self.candidates_from = ("two_largest_one_per_mechanism"
                                    if self.scenario.scenario_id == "S2_heterogeneous" else "largest_site")
        if self.group_formulas is None and self.scenario.scenario_id == "S2_heterogeneous":
            self.group_formulas = {"main_effects": MAIN_FORMULA, "interaction": INTERACTION_FORMULA}

    @property
    def model(self) -> ModelSpec:
        return ModelSpec(self.scenario.family, ("x", "z1", "z2"))

    @property
    def transport(self) -> str:
        return "count_aggregation" if self.scenario.family == "logistic" else "sufficient_info"

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(), "reps": self.reps, "arms": list(self.arms),
            "variance_modes": list(self.variance_modes), "seed": self.scenario.seed,
            "weighting": self.weighting.to_dict(), "candidates_from": self.candidates_from,
            "group_formulas": None if self.group_formulas is None
            else {k: v.to_dict() for k, v in self.group_formulas.items()},
            "T": self.T,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        gf = d.get("group_formulas")
        return cls(
            scenario=ScenarioSpec.from_dict(d["scenario"]),
            reps=int(d.get("reps", 500)),
            arms=tuple(d.get("arms", ARMS)),
            variance_modes=tuple(d.get("variance_modes", VARIANCE_MODES)),
            seed=d.get("seed"),
            weighting=WeightingFormula.from_dict(d["weighting"]) if "weighting" in d else MAIN_FORMULA,
            candidates_from=d.get("candidates_from"),
            group_formulas=None if gf is None else {k: WeightingFormula.from_dict(v) for k, v in gf.items()},
            T=int(d.get("T", 1)),
        )

    @classmethod
    def from_json_file(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ArmDraw:
    """One replication's outcome for one arm (``theta`` is None on failure)."""

    theta: np.ndarray | None
    se: dict = field(default_factory=dict)
    error: str | None = None


def _fit_arm(arm: str, config: SimConfig, rep) -> ArmDraw:
    model = config.model
    transport = config.transport
    policy = SuppressionPolicy(config.T)
    sites = rep.sites
    kwargs: dict = {"policy": policy}
    if arm == "oracle_full":
        sites, est, weighting = rep.full, "CC", None
    elif arm == "cc":
        est, weighting = "CC", None
    elif arm == "ipw_oracle":
        est, weighting = "IPW_site", KnownWeights({s.site_id: s.oracle_pi for s in sites})
    elif arm == "ipw_uniform":
        est, weighting = "IPW_site", KnownWeights({s.site_id: p for s, p in zip(sites, rep.uniform_pi)}, "uniform")
    elif arm == "ipw_pooled":
        sites, est, weighting = [concat_sites(sites)], "IPW_site", config.weighting
    elif arm == "ipw_site":
        est, weighting = "IPW_site", config.weighting
    else:
        est = "IPW_calibrated"
        if config.group_formulas:
            weighting = {s.site_id: config.group_formulas.get(s.group, config.weighting) for s in sites}
        else:
            weighting = config.weighting
        kwargs["candidates_from"] = config.candidates_from
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit, var, _ = run_protocol(sites, model, EstimatorChoice(est, transport), weighting, **kwargs)
    p = model.design_dim
    se = {"robust": var.se_theta[:p]}
    if "naive" in config.variance_modes:
        se["naive"] = np.sqrt(np.clip(np.diag(var.naive_cov), 0.0, None))[:p]
    return ArmDraw(fit.theta[:p].copy(), se)


def run_replication(config: SimConfig, rep_index: int) -> dict[str, ArmDraw]:
    rep = config.scenario.replicate(rep_index)
    out = {}
    for arm in config.arms:
        try:
            out[arm] = _fit_arm(arm, config, rep)
        except (FedMissError, np.linalg.LinAlgError) as exc:
            out[arm] = ArmDraw(None, error=f"{type(exc).__name__}: {exc}")
    return out


def _run_chunk(args):
    config, indices = args
    return [run_replication(config, i) for i in indices]


@dataclass
class SimMetrics:
    """Per-arm draws and the table of summary rows."""

    config: SimConfig
    draws: dict[str, list[ArmDraw]]

    @property
    def coefficient_names(self) -> list[str]:
        return self.config.model.coefficient_names(with_sigma=False)

    def estimates(self, arm: str) -> np.ndarray:
        ok = [d.theta for d in self.draws[arm] if d.theta is not None]
        return np.array(ok).reshape(len(ok), -1)

    def failures(self, arm: str) -> int:
        return sum(d.theta is None for d in self.draws[arm])

    def summary(self, arm: str, mode: str = "robust") -> dict[str, np.ndarray]:
        truth = self.config.scenario.true_beta
        est = self.estimates(arm)
        se = np.array([d.se[mode] for d in self.draws[arm] if d.theta is not None]).reshape(est.shape)
        if est.shape[0] == 0:
            nan = np.full(truth.shape, np.nan)
            return {"bias_pct": nan, "mean_se": nan, "emp_sd": nan, "coverage": nan}
        covered = np.abs(est - truth) <= Z_975 * se
        return {
            "bias_pct": 100.0 * (est.mean(axis=0) - truth) / truth,
            "mean_se": se.mean(axis=0),
            "emp_sd": est.std(axis=0, ddof=1) if est.shape[0] > 1 else np.full(truth.shape, np.nan),
            "coverage": 100.0 * covered.mean(axis=0),
        }

    def rows(self) -> list[dict]:
        out = []
        sc = self.config.scenario
        for arm in self.config.arms:
            for mode in self.config.variance_modes:
                s = self.summary(arm, mode)
                for j, name in enumerate(self.coefficient_names):
                    out.append({
                        "scenario": sc.scenario_id, "K": sc.K, "estimator": arm, "variance_mode": mode,
                        "coefficient": name, "bias_pct": s["bias_pct"][j], "mean_se": s["mean_se"][j],
                        "emp_sd": s["emp_sd"][j], "coverage": s["coverage"][j], "failures": self.failures(arm),
                    })
        return out


def run_simulation(config: SimConfig) -> SimMetrics:
    """Run every replication and every arm; results do not depend on worker count."""
    reps = list(range(config.reps))
    workers = min(worker_count(config.workers), len(reps))
    if workers <= 1:
        results = [run_replication(config, i) for i in reps]
    else:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [(config, c) for c in chunks]))
        by_index = {}
        for chunk, part in zip(chunks, parts):
            by_index.update(zip(chunk, part))
        results = [by_index[i] for i in reps]
    draws = {arm: [res[arm] for res in results] for arm in config.arms}
    return SimMetrics(config, draws)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else format(float(v), ".10g")
    return str(v)


def emit_results(metrics: SimMetrics | Sequence[dict] | None, path) -> None:
    """Write the metrics table as CSV (header only when there is nothing to report)."""
    rows = [] if metrics is None else (metrics.rows() if isinstance(metrics, SimMetrics) else list(metrics))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in COLUMNS])
