"""Worker ability as the individual fixed effect of a Mincerian wage panel.

log_wage = worker FE + year FE + poly(age) + controls + gamma * treated_period + e

Slopes come from the within estimator: every regressor and the wage are swept
by alternating worker and year demeaning, then the fixed effects are recovered
from the slope-adjusted residuals.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .dataset import AnalysisFrame, describe_column, standardize
from .errors import ConfigError, DataValidationError, EstimationError, SchemaError
from .linreg import wls

log = logging.getLogger(__name__)

VARIANTS = ("full", "pretreatment-only")
TOL = 1e-8
MAX_ITER = 100
AGE_CENTER = 40.0
AGE_SCALE = 10.0


@dataclass(frozen=True)
class WagePanel:
    worker_id: np.ndarray
    year: np.ndarray
    log_wage: np.ndarray
    age: np.ndarray
    controls: np.ndarray
    control_names: tuple[str, ...]
    treated_period: np.ndarray
    in_pretreatment: np.ndarray

    def __post_init__(self):
        n = self.worker_id.shape[0]
        for name in ("year", "log_wage", "age", "treated_period", "in_pretreatment"):
            if getattr(self, name).shape[0] != n:
                raise DataValidationError(f"panel column {name!r} has the wrong length")
        if self.controls.shape != (n, len(self.control_names)):
            raise DataValidationError("panel controls do not match their names")
        if not np.all(np.isfinite(self.log_wage)):
            bad = int(np.flatnonzero(~np.isfinite(self.log_wage))[0]) + 1
            raise DataValidationError(f"non-finite log_wage on panel row {bad}")
        keys = pd.MultiIndex.from_arrays([self.worker_id, self.year])
        if keys.has_duplicates:
            dup = int(np.flatnonzero(keys.duplicated())[0]) + 1
            raise DataValidationError(f"duplicate (worker_id, year) on panel row {dup}")

    @property
    def rows(self) -> int:
        return int(self.worker_id.shape[0])

    def take(self, idx: np.ndarray) -> "WagePanel":
        return WagePanel(
            self.worker_id[idx],
            self.year[idx],
            self.log_wage[idx],
            self.age[idx],
            self.controls[idx],
            self.control_names,
            self.treated_period[idx],
            self.in_pretreatment[idx],
        )


@dataclass
class AbilityEstimates:
    worker_id: np.ndarray
    ability: np.ndarray
    n_obs: np.ndarray
    variant: str
    coef: dict[str, tuple[float, float]] = field(default_factory=dict)
    dropped_terms: list[str] = field(default_factory=list)
    excluded_workers: int = 0
    rows_used: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    iterations: int = 0
    residuals: np.ndarray | None = None

    def lookup(self) -> dict:
        return dict(zip(self.worker_id.tolist(), self.ability.tolist()))


def two_way_demean(
    M: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> tuple[np.ndarray, int]:
    """Sweep group means of two factors out of each column until stable."""
    M = np.array(M, dtype=np.float64, copy=True)
    if M.ndim == 1:
        M = M[:, None]
    na, nb = int(a.max()) + 1, int(b.max()) + 1
    ca = np.bincount(a, minlength=na).astype(np.float64)
    cb = np.bincount(b, minlength=nb).astype(np.float64)
    delta = np.inf
    for it in range(1, max_iter + 1):
        prev = M.copy()
        for j in range(M.shape[1]):
            M[:, j] -= (np.bincount(a, weights=M[:, j], minlength=na) / ca)[a]
            M[:, j] -= (np.bincount(b, weights=M[:, j], minlength=nb) / cb)[b]
        delta = float(np.max(np.abs(M - prev))) if M.size else 0.0
        if delta < tol:
            return M, it
    raise EstimationError(f"two-way demeaning did not converge in {max_iter} iterations (last change {delta:.3g})")


def _design(panel: WagePanel, degree: int) -> tuple[np.ndarray, list[str]]:
    z = (panel.age - AGE_CENTER) / AGE_SCALE
    cols = [z**k for k in range(1, degree + 1)]
    names = [f"age^{k}" for k in range(1, degree + 1)]
    cols += [panel.controls[:, j] for j in range(panel.controls.shape[1])]
    names += list(panel.control_names)
    cols.append(panel.treated_period.astype(np.float64))
    names.append("treated_period")
    return np.column_stack(cols), names


def _recover_effects(r, a, b, tol, max_iter):
    na, nb = int(a.max()) + 1, int(b.max()) + 1
    ca = np.bincount(a, minlength=na).astype(np.float64)
    cb = np.bincount(b, minlength=nb).astype(np.float64)
    alpha = np.bincount(a, weights=r, minlength=na) / ca
    delta = np.zeros(nb)
    change = np.inf
    for _ in range(max_iter):
        new_delta = np.bincount(b, weights=r - alpha[a], minlength=nb) / cb
        new_alpha = np.bincount(a, weights=r - new_delta[b], minlength=na) / ca
        change = max(float(np.max(np.abs(new_alpha - alpha))), float(np.max(np.abs(new_delta - delta))))
        alpha, delta = new_alpha, new_delta
        if change < tol:
            return alpha, delta
    raise EstimationError(f"fixed-effect recovery did not converge in {max_iter} iterations (last change {change:.3g})")


def fit_mincer(
    panel: WagePanel,
    poly_degree: int = 3,
    variant: str = "full",
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> AbilityEstimates:
    """Worker fixed effects, normalized to mean zero over estimated workers."""
    if poly_degree not in (2, 3, 4):
        raise ConfigError(f"poly_degree must be 2, 3 or 4, got {poly_degree}")
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}, got {variant!r}")
    all_workers = np.unique(panel.worker_id)
    rows = np.arange(panel.rows)
    if variant == "pretreatment-only":
        rows = rows[panel.in_pretreatment.astype(bool)]
    ids, inv, counts = np.unique(panel.worker_id[rows], return_inverse=True, return_counts=True)
    keep = counts[inv] >= 2
    excluded = int(all_workers.shape[0] - np.sum(counts >= 2))
    if excluded:
        log.warning("%d worker(s) with fewer than 2 observations get ability 0", excluded)
    rows = rows[keep]
    n_obs_all = np.zeros(all_workers.shape[0], dtype=np.int64)
    n_obs_all[np.searchsorted(all_workers, ids)] = counts
    if rows.shape[0] == 0:
        return AbilityEstimates(
            all_workers, np.zeros(all_workers.shape[0]), n_obs_all, variant,
            excluded_workers=excluded, rows_used=rows,
        )
    sub = panel.take(rows)
    _, a = np.unique(sub.worker_id, return_inverse=True)
    _, b = np.unique(sub.year, return_inverse=True)
    Z, names = _design(sub, poly_degree)
    both, iters = two_way_demean(np.column_stack([sub.log_wage, Z]), a, b, tol, max_iter)
    yd, Zd = both[:, 0], both[:, 1:]
    scale = np.maximum(np.sqrt(np.mean(Z**2, axis=0)), 1.0)
    live = np.sqrt(np.mean(Zd**2, axis=0)) > 1e-7 * scale
    dropped = [n for n, ok in zip(names, live) if not ok]
    coef_vec = np.zeros(len(names))
    coef = {}
    if live.any():
        fit = wls(Zd[:, live], yd, clusters=sub.worker_id, names=[n for n, ok in zip(names, live) if ok])
        coef_vec[live] = fit.coef
        for name, c, s in zip([n for n, ok in zip(names, live) if ok], fit.coef, fit.se):
            coef[name] = (float(c), float(s))
    r = sub.log_wage - Z @ coef_vec
    alpha, _ = _recover_effects(r, a, b, tol, max_iter)
    alpha = alpha - alpha.mean()
    fitted_ids = np.unique(sub.worker_id)
    ability = np.zeros(all_workers.shape[0])
    ability[np.searchsorted(all_workers, fitted_ids)] = alpha
    resid = yd - Zd @ coef_vec
    return AbilityEstimates(
        worker_id=all_workers,
        ability=ability,
        n_obs=n_obs_all,
        variant=variant,
        coef=coef,
        dropped_terms=dropped,
        excluded_workers=excluded,
        rows_used=rows,
        iterations=iters,
        residuals=resid,
    )


def attach_ability(
    frame: AnalysisFrame,
    abilities: AbilityEstimates,
    worker_col: str = "worker_id",
    name: str = "ability",
) -> AnalysisFrame:
    """Join abilities by worker id as a standardized feature; unmatched rows get 0."""
    if worker_col not in frame.extra:
        raise SchemaError(f"frame has no {worker_col!r} column to join abilities on")
    ids = frame.extra[worker_col]
    table = abilities.lookup()
    values = np.zeros(frame.rows)
    matched = np.zeros(frame.rows, dtype=bool)
    for i, wid in enumerate(ids.tolist()):
        v = table.get(wid)
        if v is not None:
            values[i] = v
            matched[i] = True
    unmatched = int(np.sum(~matched))
    if unmatched:
        log.warning("%d row(s) without an ability estimate get 0", unmatched)
    meta = describe_column(name, values, "continuous", "ability")
    out = frame.with_features([name], values[:, None], [meta]).with_note("unmatched_ability", unmatched)
    if meta.sd > 0:
        out = standardize(out, [name])
    return out


def load_panel(
    path: str | Path,
    controls: Sequence[str] = (),
    delimiter: str = ",",
) -> WagePanel:
    """Read a long wage panel; missing ``in_pretreatment`` means before the worker's first treated year."""
    df = pd.read_csv(path, sep=delimiter, comment="#", float_precision="round_trip")
    need = ["worker_id", "year", "log_wage", "age", *controls, "treated_period"]
    missing = [c for c in need if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing panel column(s): {', '.join(missing)}")
    treated = df["treated_period"].to_numpy()
    if "in_pretreatment" in df.columns:
        pre = df["in_pretreatment"].to_numpy().astype(np.int64)
    else:
        first = df["year"].where(treated == 1).groupby(df["worker_id"]).transform("min")
        pre = (first.isna() | (df["year"] < first)).to_numpy().astype(np.int64)
    ctrl = df[list(controls)].to_numpy(dtype=np.float64) if controls else np.zeros((len(df), 0))
    return WagePanel(
        worker_id=df["worker_id"].to_numpy(),
        year=df["year"].to_numpy(),
        log_wage=df["log_wage"].to_numpy(dtype=np.float64),
        age=df["age"].to_numpy(dtype=np.float64),
        controls=ctrl,
        control_names=tuple(controls),
        treated_period=treated.astype(np.int64),
        in_pretreatment=pre,
    )


def write_panel(panel: WagePanel, path: str | Path) -> None:
    df = pd.DataFrame({"worker_id": panel.worker_id, "year": panel.year, "log_wage": panel.log_wage, "age": panel.age})
    for j, name in enumerate(panel.control_names):
        df[name] = panel.controls[:, j]
    df["treated_period"] = panel.treated_period
    df["in_pretreatment"] = panel.in_pretreatment
    df.to_csv(path, index=False, lineterminator="\n")


def write_ability_csv(est: AbilityEstimates, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["worker_id", "ability", "n_obs", "variant"])
        for wid, ab, n in zip(est.worker_id.tolist(), est.ability.tolist(), est.n_obs.tolist()):
            out.writerow([wid, repr(float(ab)), n, est.variant])
