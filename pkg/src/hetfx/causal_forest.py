"""Honest causal forest on centered outcomes and treatments.

Each tree draws whole clusters, splits them into a split half (grows the
partition on gradient pseudo-outcomes) and an estimation half (fills the
leaves). A prediction at x is the ratio of forest-weighted sums

    tau(x) = sum_i a_i(x) Yt_i Wt_i / sum_i a_i(x) Wt_i^2,

where a_i(x) averages 1{i in leaf_b(x)} / |leaf_b(x)| over trees. Trees are
trained in little bags (groups sharing a half-sample of clusters) so the
between-group spread gives a variance estimate.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .dataset import AnalysisFrame
from .ensemble import (
    CAUSAL_DEFAULTS,
    ClusterIndex,
    ForestParams,
    PackedTrees,
    draw_clusters,
    kernel_seed,
    ordered_map,
    tree_rng,
)
from .errors import ConfigError, DegenerateTreatmentError, EstimationError
from .linreg import wls
from .nuisance import CenteredSample

FORMAT_VERSION = 1
SE_FLOOR = 1e-12
DENOM_TOL = 1e-12
MAX_ATTEMPTS = 3
_STREAM = 21

OUT, SPLIT, ESTIMATE = 0, 1, 2


@dataclass
class CausalForest:
    trees: PackedTrees
    leaf_n: np.ndarray
    leaf_syw: np.ndarray
    leaf_sww: np.ndarray
    membership: np.ndarray
    tree_group: np.ndarray
    n_groups: int
    params: ForestParams
    seed: int
    x: np.ndarray
    codes: np.ndarray
    y_tilde: np.ndarray
    w_tilde: np.ndarray
    w_raw: np.ndarray
    min_leaf_used: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_trees(self) -> int:
        return self.trees.n_trees

    @property
    def in_tree(self) -> np.ndarray:
        return self.membership != OUT

    def split_rows(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.membership[b, self.codes] == SPLIT)

    def estimate_rows(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.membership[b, self.codes] == ESTIMATE)

    def data_checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.x, self.codes, self.y_tilde, self.w_tilde, self.w_raw):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def _stats_for(self, centered: CenteredSample | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if centered is None or (
            np.array_equal(centered.y_tilde, self.y_tilde) and np.array_equal(centered.w_tilde, self.w_tilde)
        ):
            return self.leaf_n, self.leaf_syw, self.leaf_sww
        syw = np.zeros_like(self.leaf_syw)
        sww = np.zeros_like(self.leaf_sww)
        yw = centered.y_tilde * centered.w_tilde
        ww = centered.w_tilde * centered.w_tilde
        for b in range(self.num_trees):
            off = self.trees.node_offset[b]
            rows = self.estimate_rows(b)
            leaf = kernels.route(self.x, rows, *self.trees.tree(b))
            size = self.trees.node_offset[b + 1] - off
            syw[off:off + size] = np.bincount(leaf, weights=yw[rows], minlength=size)
            sww[off:off + size] = np.bincount(leaf, weights=ww[rows], minlength=size)
        return self.leaf_n, syw, sww


@dataclass
class CateEstimate:
    tau: np.ndarray
    se: np.ndarray
    tau_bar: float
    variance: np.ndarray | None = None


@dataclass
class ForestWeights:
    indices: np.ndarray
    values: np.ndarray
    n: int

    def dense(self) -> np.ndarray:
        out = np.zeros(self.n)
        out[self.indices] = self.values
        return out


@dataclass
class CalibrationResult:
    mean_forest_prediction: tuple[float, float]
    differential_forest_prediction: tuple[float, float]
    differential_defined: bool = True


def _n_groups(params: ForestParams) -> int:
    if params.ci_groups is not None:
        g = params.ci_groups
    else:
        g = math.ceil(math.sqrt(params.num_trees))
    g = max(1, min(g, params.num_trees))
    if g > 1 and params.subsample_rate > 0.5:
        # half-samples cannot hold a larger subsample
        return 1
    return g


def _grow_one(x, y_t, w_t, w_raw, index, pool, params, rng, mtry, depth):
    """One honest tree; returns node arrays, leaf stats, and the cluster roles."""
    rate = params.subsample_rate
    n_total = index.n_clusters
    k = max(2, int(round(rate * n_total)))
    chosen = np.sort(rng.choice(pool, size=min(k, len(pool)), replace=False))
    if params.honesty:
        shuffled = rng.permutation(chosen)
        n_split = max(1, min(len(shuffled) - 1, int(round(params.honesty_fraction * len(shuffled)))))
        split_clusters = np.sort(shuffled[:n_split])
        est_clusters = np.sort(shuffled[n_split:])
    else:
        split_clusters = chosen
        est_clusters = chosen
    split_rows = index.rows_of(split_clusters)
    est_rows = index.rows_of(est_clusters)
    seed = kernel_seed(rng)

    min_leaf = params.min_leaf
    for _ in range(MAX_ATTEMPTS):
        f, t, lft, rgt = kernels.grow_tree(
            x, split_rows, True, y_t, w_t, w_raw, min_leaf, params.alpha, depth, mtry, seed
        )
        leaf = kernels.route(x, est_rows, f, t, lft, rgt)
        root_ok, is_leaf = kernels.prune_tree(lft, rgt, leaf, w_raw[est_rows], params.min_leaf)
        if root_ok:
            break
        min_leaf *= 2
    else:
        raise EstimationError(
            f"tree could not place both treatment arms in every leaf after {MAX_ATTEMPTS} attempts "
            f"({est_rows.shape[0]} estimation rows)"
        )
    f, t, lft, rgt, mapping = kernels.compact_tree(f, t, lft, rgt, is_leaf)
    leaf = mapping[leaf]
    size = f.shape[0]
    n = np.bincount(leaf, minlength=size).astype(np.float64)
    syw = np.bincount(leaf, weights=y_t[est_rows] * w_t[est_rows], minlength=size)
    sww = np.bincount(leaf, weights=w_t[est_rows] * w_t[est_rows], minlength=size)
    return (f, t, lft, rgt), n, syw, sww, split_clusters, est_clusters, min_leaf


def fit_causal_forest(
    frame: AnalysisFrame,
    centered: CenteredSample,
    params: ForestParams = CAUSAL_DEFAULTS,
    seed: int = 0,
    threads: int | None = None,
) -> CausalForest:
    if centered.y_tilde.shape[0] != frame.rows or centered.w_tilde.shape[0] != frame.rows:
        raise EstimationError("centered sample is not aligned with the frame")
    if frame.n_clusters < 4:
        raise EstimationError(f"causal forest needs >= 4 clusters, found {frame.n_clusters}")
    x = np.ascontiguousarray(frame.x, dtype=np.float64)
    y_t = np.ascontiguousarray(centered.y_tilde, dtype=np.float64)
    w_t = np.ascontiguousarray(centered.w_tilde, dtype=np.float64)
    w_raw = np.ascontiguousarray(frame.w, dtype=np.int64)
    index = ClusterIndex(frame.cluster_codes, frame.n_clusters)
    all_clusters = np.arange(frame.n_clusters)
    mtry = params.resolved_mtry(x.shape[1])
    depth = params.depth_limit()
    n_groups = _n_groups(params)
    tree_group = np.arange(params.num_trees) % n_groups
    if n_groups > 1:
        pools = [
            draw_clusters(tree_rng(seed, _STREAM + 1, g), all_clusters, 0.5, minimum=2)
            for g in range(n_groups)
        ]
    else:
        pools = [all_clusters]

    def one(b):
        rng = tree_rng(seed, _STREAM, b)
        return _grow_one(x, y_t, w_t, w_raw, index, pools[tree_group[b]], params, rng, mtry, depth)

    results = ordered_map(one, list(range(params.num_trees)), threads)
    membership = np.zeros((params.num_trees, frame.n_clusters), dtype=np.int8)
    for b, r in enumerate(results):
        membership[b, r[4]] = SPLIT
        membership[b, r[5]] = ESTIMATE
    return CausalForest(
        trees=PackedTrees.pack([r[0] for r in results]),
        leaf_n=np.concatenate([r[1] for r in results]),
        leaf_syw=np.concatenate([r[2] for r in results]),
        leaf_sww=np.concatenate([r[3] for r in results]),
        membership=membership,
        tree_group=tree_group.astype(np.int64),
        n_groups=n_groups,
        params=params,
        seed=seed,
        x=x,
        codes=index.codes,
        y_tilde=y_t,
        w_tilde=w_t,
        w_raw=w_raw,
        min_leaf_used=np.array([r[6] for r in results], dtype=np.int64),
    )


def forest_from_partition(
    frame: AnalysisFrame,
    centered: CenteredSample,
    feature: np.ndarray,
    threshold: np.ndarray,
    left: np.ndarray,
    right: np.ndarray,
    num_trees: int = 1,
) -> CausalForest:
    """A forest whose trees all share one fixed partition, leaves filled with every row.

    Used to check the forest's leaf arithmetic against direct summation.
    """
    x = np.ascontiguousarray(frame.x, dtype=np.float64)
    rows = np.arange(frame.rows, dtype=np.int64)
    f = np.asarray(feature, dtype=np.int64)
    t = np.asarray(threshold, dtype=np.float64)
    lft = np.asarray(left, dtype=np.int64)
    rgt = np.asarray(right, dtype=np.int64)
    leaf = kernels.route(x, rows, f, t, lft, rgt)
    size = f.shape[0]
    y_t = np.asarray(centered.y_tilde, dtype=np.float64)
    w_t = np.asarray(centered.w_tilde, dtype=np.float64)
    n = np.bincount(leaf, minlength=size).astype(np.float64)
    syw = np.bincount(leaf, weights=y_t * w_t, minlength=size)
    sww = np.bincount(leaf, weights=w_t * w_t, minlength=size)
    tree = (f, t, lft, rgt)
    membership = np.full((num_trees, frame.n_clusters), ESTIMATE, dtype=np.int8)
    return CausalForest(
        trees=PackedTrees.pack([tree] * num_trees),
        leaf_n=np.tile(n, num_trees),
        leaf_syw=np.tile(syw, num_trees),
        leaf_sww=np.tile(sww, num_trees),
        membership=membership,
        tree_group=np.zeros(num_trees, dtype=np.int64),
        n_groups=1,
        params=ForestParams(num_trees=num_trees, subsample_rate=1.0, honesty=False),
        seed=0,
        x=x,
        codes=frame.cluster_codes,
        y_tilde=y_t,
        w_tilde=w_t,
        w_raw=np.asarray(frame.w, dtype=np.int64),
    )


def _as_queries(x) -> np.ndarray:
    q = np.asarray(x, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    return np.ascontiguousarray(q)


def weights(forest: CausalForest, x) -> ForestWeights:
    """Forest kernel weights of every estimation row for one query point."""
    q = _as_queries(x)
    if q.shape != (1, forest.x.shape[1]):
        raise ConfigError(f"query must have {forest.x.shape[1]} features")
    n = forest.x.shape[0]
    acc = np.zeros(n)
    B = forest.num_trees
    for b in range(B):
        tree = forest.trees.tree(b)
        qleaf = kernels.route(q, np.zeros(1, dtype=np.int64), *tree)[0]
        rows = forest.estimate_rows(b)
        leaf = kernels.route(forest.x, rows, *tree)
        members = rows[leaf == qleaf]
        acc[members] += 1.0 / (B * members.shape[0])
    idx = np.flatnonzero(acc > 0)
    vals = acc[idx]
    return ForestWeights(idx, vals / vals.sum(), n)


def estimate_cate(forest: CausalForest, centered: CenteredSample, x) -> float:
    """Weighted projection of centered outcome on centered treatment at x."""
    a = weights(forest, x)
    yt = centered.y_tilde[a.indices]
    wt = centered.w_tilde[a.indices]
    den = float(np.sum(a.values * wt * wt))
    if den < DENOM_TOL:
        raise DegenerateTreatmentError("degenerate local treatment variation")
    return float(np.sum(a.values * yt * wt)) / den


def _predict(forest: CausalForest, q: np.ndarray, codes: np.ndarray, oob: bool, centered=None):
    n, syw, sww = forest._stats_for(centered)
    f, t, lft, rgt, off = forest.trees.arrays()
    return kernels.predict_causal(
        q, codes, oob, f, t, lft, rgt, off, n, syw, sww, forest.in_tree, forest.tree_group, forest.n_groups
    )


def predict(forest: CausalForest, x=None, oob: bool | None = None, centered: CenteredSample | None = None) -> CateEstimate:
    """CATE at query rows; with ``x=None`` returns out-of-bag estimates for the training rows."""
    if x is None:
        q = forest.x
        codes = forest.codes
        oob = True if oob is None else oob
    else:
        q = _as_queries(x)
        codes = np.zeros(q.shape[0], dtype=np.int64)
        if oob:
            raise ConfigError("out-of-bag prediction is only defined for the training rows")
        oob = False
    tau, var, den, used = _predict(forest, q, codes, oob, centered)
    if np.any(used == 0):
        raise EstimationError(f"{int(np.sum(used == 0))} row(s) have no out-of-bag tree")
    if np.any(~(den >= DENOM_TOL)):
        raise DegenerateTreatmentError("degenerate local treatment variation")
    se = np.sqrt(np.where(np.isnan(var), np.nan, np.maximum(var, SE_FLOOR**2)))
    se = np.where(np.isnan(se), np.nan, np.maximum(se, SE_FLOOR))
    return CateEstimate(tau=tau, se=se, tau_bar=float(np.mean(tau)), variance=var)


def estimate_variance(forest: CausalForest, centered: CenteredSample, x) -> float:
    """Little-bag variance of tau(x); floored at zero."""
    if forest.n_groups < 2:
        raise EstimationError("variance needs >= 2 little-bag groups")
    q = _as_queries(x)
    _, var, den, _ = _predict(forest, q, np.zeros(q.shape[0], dtype=np.int64), False, centered)
    if not den[0] >= DENOM_TOL:
        raise DegenerateTreatmentError("degenerate local treatment variation")
    if np.isnan(var[0]):
        raise EstimationError("too few populated little-bag groups for a variance estimate")
    return float(var[0])


def calibration_regression(tau: np.ndarray, centered: CenteredSample, cluster: np.ndarray) -> CalibrationResult:
    """Regress Yt on tau_bar*Wt and (tau - tau_bar)*Wt without intercept, CR1 by cluster."""
    tau = np.asarray(tau, dtype=np.float64)
    tau_bar = float(np.mean(tau))
    wt = centered.w_tilde
    names = ["mean_forest_prediction", "differential_forest_prediction"]
    if float(np.var(tau)) <= 1e-24:
        if not np.any(tau_bar * wt):
            nan = (float("nan"), float("nan"))
            return CalibrationResult(nan, nan, differential_defined=False)
        fit = wls((tau_bar * wt)[:, None], centered.y_tilde, clusters=cluster, names=names[:1])
        return CalibrationResult(
            (float(fit.coef[0]), float(fit.se[0])), (float("nan"), float("nan")), differential_defined=False
        )
    X = np.column_stack([tau_bar * wt, (tau - tau_bar) * wt])
    fit = wls(X, centered.y_tilde, clusters=cluster, names=names)
    return CalibrationResult((float(fit.coef[0]), float(fit.se[0])), (float(fit.coef[1]), float(fit.se[1])))


def calibration_test(forest: CausalForest, centered: CenteredSample, frame: AnalysisFrame) -> CalibrationResult:
    """Calibration regression on the out-of-bag CATEs."""
    return calibration_regression(predict(forest, centered=centered).tau, centered, frame.cluster)


def audit(forest: CausalForest) -> dict[str, bool]:
    """Exhaustive structural checks over every tree."""
    honest = True
    integral = True
    leaves_ok = True
    for b in range(forest.num_trees):
        split = forest.split_rows(b)
        est = forest.estimate_rows(b)
        if forest.params.honesty and np.intersect1d(split, est).size:
            honest = False
        for rows in (split, est):
            cl = np.unique(forest.codes[rows])
            full = np.isin(forest.codes, cl).sum()
            if full != rows.shape[0]:
                integral = False
        tree = forest.trees.tree(b)
        leaf = kernels.route(forest.x, est, *tree)
        size = tree[0].shape[0]
        cnt = np.bincount(leaf, minlength=size)
        trt = np.bincount(leaf, weights=forest.w_raw[est], minlength=size)
        is_leaf = tree[2] < 0
        if np.any(is_leaf & ((cnt < forest.params.min_leaf) | (trt < 1) | (cnt - trt < 1))):
            leaves_ok = False
    return {"honesty": honest, "cluster_integrity": integral, "leaf_validity": leaves_ok}


def save_forest(forest: CausalForest, path: str | Path) -> None:
    header = {
        "format": "hetfx-causal-forest",
        "version": FORMAT_VERSION,
        "params": forest.params.to_dict(),
        "seed": int(forest.seed),
        "n_groups": int(forest.n_groups),
        "data_checksum": forest.data_checksum(),
    }
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh,
            header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
            feature=forest.trees.feature,
            threshold=forest.trees.threshold,
            left=forest.trees.left,
            right=forest.trees.right,
            node_offset=forest.trees.node_offset,
            leaf_n=forest.leaf_n,
            leaf_syw=forest.leaf_syw,
            leaf_sww=forest.leaf_sww,
            membership=forest.membership,
            tree_group=forest.tree_group,
            x=forest.x,
            codes=forest.codes,
            y_tilde=forest.y_tilde,
            w_tilde=forest.w_tilde,
            w_raw=forest.w_raw,
            min_leaf_used=forest.min_leaf_used,
        )


def read_header(path: str | Path) -> dict:
    with np.load(path) as z:
        return json.loads(z["header"].tobytes().decode())


def load_forest(path: str | Path) -> CausalForest:
    with np.load(path) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("format") != "hetfx-causal-forest" or header.get("version") != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported forest file (header {header.get('format')!r} v{header.get('version')})")
        forest = CausalForest(
            trees=PackedTrees(z["feature"], z["threshold"], z["left"], z["right"], z["node_offset"]),
            leaf_n=z["leaf_n"],
            leaf_syw=z["leaf_syw"],
            leaf_sww=z["leaf_sww"],
            membership=z["membership"],
            tree_group=z["tree_group"],
            n_groups=int(header["n_groups"]),
            params=ForestParams(**header["params"]),
            seed=int(header["seed"]),
            x=z["x"],
            codes=z["codes"],
            y_tilde=z["y_tilde"],
            w_tilde=z["w_tilde"],
            w_raw=z["w_raw"],
            min_leaf_used=z["min_leaf_used"],
        )
    if forest.data_checksum() != header["data_checksum"]:
        raise ConfigError(f"{path}: data checksum mismatch")
    return forest
