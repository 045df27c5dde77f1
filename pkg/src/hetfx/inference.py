"""Best linear predictor of the CATE and quartile classification analysis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .causal_forest import CalibrationResult, CateEstimate
from .dataset import AnalysisFrame, raw_values
from .errors import ConfigError, DomainError, EstimationError
from .linreg import wls

WEIGHT_MODES = ("balanced", "raw_propensity", "none")


@dataclass(frozen=True)
class BlpTerm:
    name: str
    estimate: float
    se: float
    is_dummy: bool
    rescaled: bool

    @property
    def t(self) -> float:
        return self.estimate / self.se if self.se > 0 else float("nan")


@dataclass
class BlpResult:
    terms: list[BlpTerm]
    intercept: tuple[float, float]
    n: int
    weighting: str
    n_clusters: int = 0
    fixed_effects: bool = False
    standardized: dict[str, tuple[float, float]] = field(default_factory=dict)

    def term(self, name: str) -> BlpTerm:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def ate(self) -> float:
        return self.intercept[0]


def rescale_dummy(beta_std: float, se_std: float, p: float) -> tuple[float, float]:
    """Map a coefficient on a standardized dummy back to 0-1 units."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"dummy share must lie in (0, 1), got {p}")
    sd = math.sqrt(p * (1.0 - p))
    return beta_std / sd, se_std / sd


def blp_weights(e_hat: np.ndarray | None, mode: str, n: int) -> np.ndarray:
    if mode not in WEIGHT_MODES:
        raise ConfigError(f"blp weights must be one of {', '.join(WEIGHT_MODES)}, got {mode!r}")
    if mode == "none":
        return np.ones(n)
    if e_hat is None:
        raise ConfigError(f"blp weights {mode!r} need propensity scores")
    e = np.asarray(e_hat, dtype=np.float64)
    return e * (1.0 - e) if mode == "balanced" else e


def _group_demean(X: np.ndarray, groups: np.ndarray, w: np.ndarray) -> np.ndarray:
    _, codes = np.unique(groups, return_inverse=True)
    g = int(codes.max()) + 1
    tot = np.bincount(codes, weights=w, minlength=g)
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        means = np.bincount(codes, weights=w * X[:, j], minlength=g) / tot
        out[:, j] = X[:, j] - means[codes]
    return out


def blp(
    frame: AnalysisFrame,
    cate: CateEstimate,
    e_hat: np.ndarray | None = None,
    cluster: np.ndarray | None = None,
    weights: str = "balanced",
    features: Sequence[str] | None = None,
    absorb: np.ndarray | None = None,
    dummies: Iterable[str] | None = None,
) -> BlpResult:
    """Weighted regression of tau-hat on an intercept and demeaned covariates.

    Covariates are weighted-demeaned inside the fit, so the intercept is the
    weighted mean of tau-hat whatever the frame's centering. ``absorb`` holds
    group ids (e.g. municipality) whose fixed effects are swept out of the
    covariates by within-group demeaning. Terms listed in ``dummies`` (default:
    columns flagged as dummies in the frame metadata) are reported in 0-1 units.
    """
    names = list(features) if features is not None else frame.feature_names
    X = np.column_stack([frame.column(c) for c in names]) if names else np.zeros((frame.rows, 0))
    tau = np.asarray(cate.tau, dtype=np.float64)
    if tau.shape[0] != frame.rows:
        raise EstimationError("CATE vector is not aligned with the frame")
    w = blp_weights(e_hat, weights, frame.rows)
    if absorb is not None:
        Xd = _group_demean(X, np.asarray(absorb), w)
    else:
        Xd = X - (w @ X) / w.sum()
    cl = frame.cluster if cluster is None else np.asarray(cluster)
    design = np.column_stack([np.ones(frame.rows), Xd])
    fit = wls(design, tau, weights=w, clusters=cl, names=["(intercept)", *names])
    dummy_set = set(dummies) if dummies is not None else {m.name for m in frame.columns if m.kind == "dummy"}
    terms = []
    standardized = {}
    for j, name in enumerate(names, start=1):
        est, se = float(fit.coef[j]), float(fit.se[j])
        standardized[name] = (est, se)
        is_dummy = name in dummy_set
        rescaled = False
        if is_dummy:
            meta = frame.meta(name)
            if meta.source == "standardized":
                est, se = rescale_dummy(est, se, meta.mean)
                rescaled = True
        terms.append(BlpTerm(name, est, se, is_dummy, rescaled))
    return BlpResult(
        terms=terms,
        intercept=(float(fit.coef[0]), float(fit.se[0])),
        n=frame.rows,
        weighting=weights,
        n_clusters=fit.n_clusters,
        fixed_effects=absorb is not None,
        standardized=standardized,
    )


def weighted_mean_tau(cate: CateEstimate, e_hat: np.ndarray | None, weights: str) -> float:
    w = blp_weights(e_hat, weights, cate.tau.shape[0])
    return float(w @ cate.tau / w.sum())


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else repr(float(v))


def write_blp_csv(
    result: BlpResult,
    path: str | Path,
    calibration: CalibrationResult | None = None,
) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["term", "estimate", "se", "t", "is_dummy", "rescaled"])
        est, se = result.intercept
        out.writerow(["(intercept)", _fmt(est), _fmt(se), _fmt(est / se if se > 0 else float("nan")), 0, 0])
        for t in result.terms:
            out.writerow([t.name, _fmt(t.estimate), _fmt(t.se), _fmt(t.t), int(t.is_dummy), int(t.rescaled)])
        if calibration is not None:
            rows = [
                ("mean_forest_prediction", calibration.mean_forest_prediction),
                ("differential_forest_prediction", calibration.differential_forest_prediction),
            ]
            for name, (e, s) in rows:
                tval = e / s if np.isfinite(s) and s > 0 else float("nan")
                out.writerow([name, _fmt(e), _fmt(s), _fmt(tval), 0, 0])
        out.writerow(["N", result.n, "", "", 0, 0])


@dataclass
class ClanResult:
    quartile_assignment: np.ndarray
    table: dict[str, tuple[float, float, float, float]]
    tau_q4: tuple[float, float]
    tau_q1: tuple[float, float]

    def rows(self, q: int) -> np.ndarray:
        return np.flatnonzero(self.quartile_assignment == q)


def quartiles(tau: np.ndarray) -> np.ndarray:
    """Quartile 1..4 per row by ascending tau; ties keep row order."""
    tau = np.asarray(tau)
    n = tau.shape[0]
    order = np.argsort(tau, kind="stable")
    q = np.empty(n, dtype=np.int64)
    q[order] = np.arange(n) * 4 // n + 1
    return q


def _mean_sd(v: np.ndarray) -> tuple[float, float]:
    return float(np.mean(v)), float(np.std(v))


def clan(
    frame: AnalysisFrame,
    cate: CateEstimate,
    features: Sequence[str] | None = None,
    e_hat: np.ndarray | None = None,
    y_hat: np.ndarray | None = None,
    bias: np.ndarray | None = None,
) -> ClanResult:
    """Compare the most and least affected quartiles; features in raw units."""
    if frame.rows < 8:
        raise EstimationError(f"classification analysis needs >= 8 rows, found {frame.rows}")
    tau = np.asarray(cate.tau, dtype=np.float64)
    q = quartiles(tau)
    top = q == 4
    bottom = q == 1
    table = {}
    names = list(features) if features is not None else frame.feature_names
    columns = [(n, raw_values(frame, n)) for n in names]
    for label, v in (("propensity_score", e_hat), ("predicted_outcome", y_hat), ("treatment_effect", tau), ("bias", bias)):
        if v is not None:
            columns.append((label, np.asarray(v, dtype=np.float64)))
    for name, v in columns:
        table[name] = (*_mean_sd(v[top]), *_mean_sd(v[bottom]))
    return ClanResult(q, table, _mean_sd(tau[top]), _mean_sd(tau[bottom]))


def write_clan_csv(result: ClanResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["variable", "most_affected_mean", "most_affected_sd", "least_affected_mean", "least_affected_sd"])
        for name, vals in result.table.items():
            out.writerow([name, *(_fmt(v) for v in vals)])
