"""Nuisance surfaces: outcome and treatment regressions, centering, and bias.

All forests subsample whole clusters, so "out-of-bag" for a row means trees
that never saw any row of its cluster.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dataset import AnalysisFrame
from .ensemble import (
    NUISANCE_DEFAULTS,
    ClusterIndex,
    ForestParams,
    PackedTrees,
    draw_clusters,
    kernel_seed,
    ordered_map,
    tree_rng,
)
from .errors import EstimationError, SchemaError

log = logging.getLogger(__name__)

CLIP = (0.01, 0.99)
_STREAMS = {"y": 11, "w": 12, "mu0": 13, "mu1": 14}


@dataclass
class RegressionForestModel:
    trees: PackedTrees
    value: np.ndarray
    in_tree: np.ndarray
    params: ForestParams
    seed: int
    target: str
    train_rows: np.ndarray
    stage2: "RegressionForestModel | None" = None

    @property
    def num_trees(self) -> int:
        return self.trees.n_trees

    def oob_index(self, codes: np.ndarray) -> list[np.ndarray]:
        """Per row, the trees that never sampled that row's cluster."""
        return [np.flatnonzero(~self.in_tree[:, c]) for c in codes]

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        out, _ = kernels.predict_regression(
            x, np.zeros(x.shape[0], dtype=np.int64), False, *self.trees.arrays(), self.value, self.in_tree
        )
        if self.stage2 is not None:
            out = out + self.stage2.predict(x)
        return out

    def predict_oob_codes(self, x: np.ndarray, codes: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        out, used = kernels.predict_regression(x, codes, True, *self.trees.arrays(), self.value, self.in_tree)
        if np.any(used == 0):
            raise EstimationError(f"{int(np.sum(used == 0))} row(s) have no out-of-bag tree")
        if self.stage2 is not None:
            out = out + self.stage2.predict_oob_codes(x, codes)
        return out


def _target_vector(frame: AnalysisFrame, target: str) -> np.ndarray:
    if target == "y":
        return frame.y.astype(np.float64)
    if target == "w":
        return frame.w.astype(np.float64)
    raise SchemaError(f"regression target must be 'y' or 'w', got {target!r}")


def _fit(x, target, codes, n_clusters, train_rows, params, seed, stream, threads, name):
    index = ClusterIndex(codes, n_clusters)
    pool = index.present(train_rows)
    if pool.shape[0] < 2:
        raise EstimationError(f"regression forest for {name!r} needs >= 2 clusters, found {pool.shape[0]}")
    train_mask = np.zeros(codes.shape[0], dtype=bool)
    train_mask[train_rows] = True
    d = x.shape[1]
    mtry = params.resolved_mtry(d)
    depth = params.depth_limit()
    dummy_w = np.zeros(codes.shape[0])
    dummy_raw = np.zeros(codes.shape[0], dtype=np.int64)

    def one(b):
        rng = tree_rng(seed, stream, b)
        chosen = draw_clusters(rng, pool, params.subsample_rate)
        rows = index.rows_of(chosen)
        rows = rows[train_mask[rows]]
        f, t, lft, rgt = kernels.grow_tree(
            x, rows, False, target, dummy_w, dummy_raw, params.min_leaf, params.alpha, depth, mtry, kernel_seed(rng)
        )
        leaf = kernels.route(x, rows, f, t, lft, rgt)
        cnt = np.bincount(leaf, minlength=f.shape[0])
        tot = np.bincount(leaf, weights=target[rows], minlength=f.shape[0])
        val = np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)
        return (f, t, lft, rgt), val, chosen

    results = ordered_map(one, list(range(params.num_trees)), threads)
    trees = PackedTrees.pack([r[0] for r in results])
    in_tree = np.zeros((params.num_trees, n_clusters), dtype=np.bool_)
    for b, r in enumerate(results):
        in_tree[b, r[2]] = True
    no_oob = in_tree[:, pool].all(axis=0)
    if no_oob.any():
        raise EstimationError(
            f"{int(no_oob.sum())} cluster(s) appear in every tree of the {name!r} forest; "
            "out-of-bag prediction is undefined (raise num_trees or lower subsample_rate)"
        )
    return RegressionForestModel(
        trees=trees,
        value=np.concatenate([r[1] for r in results]),
        in_tree=in_tree,
        params=params,
        seed=seed,
        target=name,
        train_rows=np.asarray(train_rows, dtype=np.int64),
    )


def fit_regression_forest(
    frame: AnalysisFrame,
    target: str,
    params: ForestParams = NUISANCE_DEFAULTS,
    seed: int = 0,
    threads: int | None = None,
    rows: np.ndarray | None = None,
    stream: int | None = None,
) -> RegressionForestModel:
    """Fit a cluster-subsampled CART forest for E[target | X].

    ``rows`` restricts training to a subset (used for the per-arm outcome
    surfaces); trees still subsample whole clusters.
    """
    if frame.rows == 0:
        raise EstimationError("cannot fit a forest on an empty frame")
    y = _target_vector(frame, target)
    codes = frame.cluster_codes
    train = np.arange(frame.rows) if rows is None else np.asarray(rows, dtype=np.int64)
    stream = _STREAMS.get(target, 10) if stream is None else stream
    model = _fit(frame.x, y, codes, frame.n_clusters, train, params, seed, stream, threads, target)
    if params.boost_steps:
        first = model.predict_oob_codes(frame.x[train], codes[train])
        resid = np.zeros(frame.rows)
        resid[train] = y[train] - first
        model.stage2 = _fit(frame.x, resid, codes, frame.n_clusters, train, params, seed, stream + 100, threads, target + "+boost")
    return model


def predict_oob(model: RegressionForestModel, frame: AnalysisFrame) -> np.ndarray:
    """Keep-one-out predictions for every row of the training frame."""
    return model.predict_oob_codes(frame.x, frame.cluster_codes)


@dataclass
class CenteredSample:
    y_tilde: np.ndarray
    w_tilde: np.ndarray
    e_hat: np.ndarray
    y_hat: np.ndarray
    clip_count: int = 0


def center(frame: AnalysisFrame, y_model: RegressionForestModel, w_model: RegressionForestModel) -> CenteredSample:
    y_hat = predict_oob(y_model, frame)
    w_hat = predict_oob(w_model, frame)
    e_hat = np.clip(w_hat, *CLIP)
    clipped = int(np.sum(e_hat != w_hat))
    if clipped:
        log.warning("clipped %d propensity score(s) to [%g, %g]", clipped, *CLIP)
    return CenteredSample(
        y_tilde=frame.y - y_hat,
        w_tilde=frame.w - w_hat,
        e_hat=e_hat,
        y_hat=y_hat,
        clip_count=clipped,
    )


@dataclass
class ConditionalMeanModel:
    mu0: RegressionForestModel
    mu1: RegressionForestModel
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray
    mu0_bar: float
    mu1_bar: float
    w_bar: float


def fit_conditional_means(
    frame: AnalysisFrame,
    params: ForestParams = NUISANCE_DEFAULTS,
    seed: int = 0,
    threads: int | None = None,
) -> ConditionalMeanModel:
    """Per-arm outcome surfaces; the arm means average the fitted surfaces over all rows."""
    control = np.flatnonzero(frame.w == 0)
    treated = np.flatnonzero(frame.w == 1)
    if control.size == 0 or treated.size == 0:
        raise EstimationError("both treatment arms are required for the conditional mean surfaces")
    mu0 = fit_regression_forest(frame, "y", params, seed, threads, rows=control, stream=_STREAMS["mu0"])
    mu1 = fit_regression_forest(frame, "y", params, seed, threads, rows=treated, stream=_STREAMS["mu1"])
    mu0_hat = predict_oob(mu0, frame)
    mu1_hat = predict_oob(mu1, frame)
    return ConditionalMeanModel(
        mu0=mu0,
        mu1=mu1,
        mu0_hat=mu0_hat,
        mu1_hat=mu1_hat,
        mu0_bar=float(np.mean(mu0_hat)),
        mu1_bar=float(np.mean(mu1_hat)),
        w_bar=float(np.mean(frame.w)),
    )


@dataclass
class BiasEstimate:
    b: np.ndarray
    scaled: np.ndarray | None = field(default=None)


def bias_formula(w_hat, w_bar, mu0_dev, mu1_dev):
    """(W(x) - E[W]) * (E[W] * (mu0(x) - mu0) + (1 - E[W]) * (mu1(x) - mu1))."""
    w_hat = np.asarray(w_hat, dtype=np.float64)
    return (w_hat - w_bar) * (w_bar * np.asarray(mu0_dev) + (1.0 - w_bar) * np.asarray(mu1_dev))


def bias(frame: AnalysisFrame, means: ConditionalMeanModel, e_hat: np.ndarray, scale: bool = True) -> BiasEstimate:
    """Prediction bias of the propensity-adjusted comparison, optionally in sd(Y) units."""
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if e_hat.shape[0] != frame.rows:
        raise EstimationError("e_hat is not aligned with the frame")
    b = bias_formula(e_hat, means.w_bar, means.mu0_hat - means.mu0_bar, means.mu1_hat - means.mu1_bar)
    if not scale:
        return BiasEstimate(b)
    sd = float(np.std(frame.y))
    if not sd > 0:
        raise EstimationError("outcome has zero standard deviation; scaled bias is undefined")
    return BiasEstimate(b, b / sd)


@dataclass
class HistogramTable:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    sd: float

    @property
    def bin_lo(self) -> np.ndarray:
        return self.edges[:-1]

    @property
    def bin_hi(self) -> np.ndarray:
        return self.edges[1:]


def propensity_histogram(e_hat: np.ndarray, bins: int = 50) -> HistogramTable:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    e_hat = np.asarray(e_hat, dtype=np.float64)
    counts, edges = np.histogram(e_hat, bins=bins, range=(0.0, 1.0))
    return HistogramTable(edges, counts, float(np.mean(e_hat)), float(np.std(e_hat)))
