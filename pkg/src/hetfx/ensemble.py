"""Plumbing shared by the regression and causal forests.

Cluster-level subsampling, per-tree random streams, thread fan-out, and the
packed node arrays both forest types predict from.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .errors import ConfigError

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 500
    min_leaf: int = 5
    subsample_rate: float = 0.5
    mtry: int | None = None
    max_depth: int | None = None
    alpha: float = 0.0
    honesty: bool = True
    honesty_fraction: float = 0.5
    ci_groups: int | None = None
    boost_steps: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ConfigError("num_trees must be >= 1")
        if self.min_leaf < 1:
            raise ConfigError("min_leaf must be >= 1")
        if not 0.0 < self.subsample_rate <= 1.0:
            raise ConfigError("subsample_rate must lie in (0, 1]")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError("mtry must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")
        if not 0.0 <= self.alpha < 0.5:
            raise ConfigError("alpha must lie in [0, 0.5)")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ConfigError("honesty_fraction must lie in (0, 1)")
        if self.ci_groups is not None and self.ci_groups < 1:
            raise ConfigError("ci_groups must be >= 1")
        if self.boost_steps not in (0, 1):
            raise ConfigError("boost_steps must be 0 or 1")

    def resolved_mtry(self, d: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(math.sqrt(d))
        return max(1, min(m, d))

    def depth_limit(self) -> int:
        return -1 if self.max_depth is None else self.max_depth

    def to_dict(self) -> dict:
        return asdict(self)


NUISANCE_DEFAULTS = ForestParams()
CAUSAL_DEFAULTS = ForestParams(num_trees=2000, alpha=0.05)


def thread_count(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("HETFX_THREADS", "").strip()
        threads = int(env) if env else 1
    return max(1, int(threads))


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int | None = None) -> list[R]:
    """Map in input order; results never depend on the worker count."""
    n = thread_count(threads)
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def tree_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(index)])


def kernel_seed(rng: np.random.Generator) -> np.uint64:
    return np.uint64(rng.integers(0, 2**63 - 1, dtype=np.int64))


class ClusterIndex:
    """Rows grouped by dense cluster code."""

    def __init__(self, codes: np.ndarray, n_clusters: int | None = None):
        self.codes = np.asarray(codes, dtype=np.int64)
        self.n_clusters = int(n_clusters if n_clusters is not None else (self.codes.max() + 1 if self.codes.size else 0))
        self.order = np.argsort(self.codes, kind="stable")
        counts = np.bincount(self.codes, minlength=self.n_clusters)
        self.offsets = np.r_[0, np.cumsum(counts)]

    def rows_of(self, clusters: Iterable[int]) -> np.ndarray:
        """Row ids of the given clusters, ascending."""
        parts = [self.order[self.offsets[c]:self.offsets[c + 1]] for c in clusters]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))

    def present(self, rows: np.ndarray | None = None) -> np.ndarray:
        codes = self.codes if rows is None else self.codes[rows]
        return np.unique(codes)


def draw_clusters(rng: np.random.Generator, pool: np.ndarray, rate: float, minimum: int = 1) -> np.ndarray:
    k = min(len(pool), max(minimum, int(round(rate * len(pool)))))
    return np.sort(rng.choice(pool, size=k, replace=False))


@dataclass
class PackedTrees:
    """Concatenated preorder node arrays; tree b owns nodes node_offset[b]:node_offset[b+1]."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    node_offset: np.ndarray

    @classmethod
    def pack(cls, trees: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]) -> "PackedTrees":
        sizes = [t[0].shape[0] for t in trees]
        return cls(
            feature=np.concatenate([t[0] for t in trees]).astype(np.int64),
            threshold=np.concatenate([t[1] for t in trees]).astype(np.float64),
            left=np.concatenate([t[2] for t in trees]).astype(np.int64),
            right=np.concatenate([t[3] for t in trees]).astype(np.int64),
            node_offset=np.r_[0, np.cumsum(sizes)].astype(np.int64),
        )

    @property
    def n_trees(self) -> int:
        return int(self.node_offset.shape[0] - 1)

    def tree(self, b: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        s, e = self.node_offset[b], self.node_offset[b + 1]
        return self.feature[s:e], self.threshold[s:e], self.left[s:e], self.right[s:e]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self.feature, self.threshold, self.left, self.right, self.node_offset
