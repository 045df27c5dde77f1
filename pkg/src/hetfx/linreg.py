"""Weighted least squares with cluster-robust (CR1) sandwich errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EstimationError


@dataclass
class WlsFit:
    coef: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    resid: np.ndarray
    n: int
    n_clusters: int


def collinear_columns(X: np.ndarray, names: list[str] | None = None, tol: float = 1e-10) -> list[str]:
    """Columns that add no rank when appended left to right."""
    names = names or [f"x{j}" for j in range(X.shape[1])]
    bad = []
    kept = []
    for j in range(X.shape[1]):
        trial = X[:, kept + [j]]
        s = np.linalg.svd(trial, compute_uv=False)
        if s.size == 0 or s[-1] <= tol * max(s[0], 1.0) * np.sqrt(X.shape[0]):
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def wls(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    clusters: np.ndarray | None = None,
    names: list[str] | None = None,
) -> WlsFit:
    """Solve min sum w_i (y_i - x_i b)^2 and attach CR1 standard errors.

    Without ``clusters`` every row is its own cluster, which reduces CR1 to
    HC1.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    xtx = Xw.T @ Xw
    if np.linalg.matrix_rank(Xw) < k:
        raise EstimationError(f"rank-deficient design; collinear column(s): {', '.join(collinear_columns(Xw, names))}")
    coef = np.linalg.solve(xtx, Xw.T @ (sw * y))
    resid = y - X @ coef
    if clusters is None:
        codes = np.arange(n)
    else:
        _, codes = np.unique(clusters, return_inverse=True)
    g = int(codes.max()) + 1 if n else 0
    scores = X * (w * resid)[:, None]
    sums = np.zeros((g, k))
    np.add.at(sums, codes, scores)
    meat = sums.T @ sums
    bread = np.linalg.inv(xtx)
    if n <= k or g < 2:
        factor = np.nan
    else:
        factor = g / (g - 1) * (n - 1) / (n - k)
    cov = factor * bread @ meat @ bread
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return WlsFit(coef=coef, se=se, cov=cov, resid=resid, n=n, n_clusters=g)
