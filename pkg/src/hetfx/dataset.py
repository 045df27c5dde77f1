"""Analysis frames: ingestion, validation, and the pre-estimation transforms."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from . import predicate as _predicate
from .errors import DataValidationError, DomainError, EmptyFrameError, SchemaError

log = logging.getLogger(__name__)

KINDS = ("continuous", "dummy", "categorical-cluster")
SOURCES = ("raw", "arsinh", "standardized", "mean-encoded", "ability")


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    kind: str
    mean: float
    sd: float
    source: str = "raw"


@dataclass(frozen=True)
class Schema:
    """Maps column roles onto CSV headers.

    ``features`` become the feature matrix; ``keep`` columns are carried along
    untouched (worker ids, alternative outcomes, predicate inputs).
    ``dummies`` forces the dummy kind; otherwise 0/1-valued columns are
    detected as dummies.
    """

    outcome: str
    treatment: str
    cluster: str
    margin: str
    features: tuple[str, ...]
    keep: tuple[str, ...] = ()
    dummies: tuple[str, ...] | None = None

    def with_outcome(self, outcome: str) -> "Schema":
        keep = tuple(c for c in (*self.keep, self.outcome) if c != outcome)
        return replace(self, outcome=outcome, keep=tuple(dict.fromkeys(keep)))


def _population_stats(v: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(v))
    sd = float(np.sqrt(np.mean((v - mean) ** 2)))
    return mean, sd


def _is_binary(v: np.ndarray) -> bool:
    return bool(np.all((v == 0) | (v == 1)))


def describe_column(name: str, values: np.ndarray, kind: str | None = None, source: str = "raw") -> ColumnMeta:
    if kind is None:
        kind = "dummy" if _is_binary(values) else "continuous"
    mean, sd = _population_stats(values)
    return ColumnMeta(name, kind, mean, sd, source)


@dataclass(frozen=True)
class AnalysisFrame:
    y: np.ndarray
    w: np.ndarray
    cluster: np.ndarray
    margin: np.ndarray
    x: np.ndarray
    columns: tuple[ColumnMeta, ...]
    schema: Schema
    extra: Mapping[str, np.ndarray] = field(default_factory=dict)
    notes: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        n = self.y.shape[0]
        arrays = {"w": self.w, "cluster": self.cluster, "margin": self.margin, **self.extra}
        for name, arr in arrays.items():
            if arr.shape[0] != n:
                raise DataValidationError(f"column {name!r} has {arr.shape[0]} rows, expected {n}")
        if self.x.shape != (n, len(self.columns)):
            raise DataValidationError(f"feature matrix shape {self.x.shape} does not match {len(self.columns)} columns")
        bad = np.flatnonzero((self.w != 0) & (self.w != 1))
        if bad.size:
            raise DataValidationError(f"non-binary treatment value at row {bad[0] + 1}")
        if self.x.size and not np.all(np.isfinite(self.x)):
            r, c = np.argwhere(~np.isfinite(self.x))[0]
            raise DataValidationError(f"non-finite value in feature {self.columns[c].name!r} at row {r + 1}")

    @property
    def rows(self) -> int:
        return int(self.y.shape[0])

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @cached_property
    def _cluster_index(self) -> tuple[np.ndarray, np.ndarray]:
        labels, codes = np.unique(self.cluster, return_inverse=True)
        return labels, codes.astype(np.int64)

    @property
    def cluster_codes(self) -> np.ndarray:
        """Dense 0..G-1 cluster codes, ordered by sorted cluster label."""
        return self._cluster_index[1]

    @property
    def n_clusters(self) -> int:
        return int(self._cluster_index[0].shape[0])

    def meta(self, name: str) -> ColumnMeta:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"no feature column named {name!r}")

    def column(self, name: str) -> np.ndarray:
        """Look up any column by its CSV name (role, feature, or carried)."""
        s = self.schema
        roles = {s.outcome: self.y, s.treatment: self.w, s.cluster: self.cluster, s.margin: self.margin}
        if name in roles:
            return roles[name]
        if name in self.feature_names:
            return self.x[:, self.feature_names.index(name)]
        if name in self.extra:
            return self.extra[name]
        raise SchemaError(f"unknown column {name!r}")

    def take(self, idx: np.ndarray) -> "AnalysisFrame":
        idx = np.asarray(idx)
        return replace(
            self,
            y=self.y[idx],
            w=self.w[idx],
            cluster=self.cluster[idx],
            margin=self.margin[idx],
            x=self.x[idx],
            extra={k: v[idx] for k, v in self.extra.items()},
        )

    def with_features(self, names: Sequence[str], values: np.ndarray, metas: Sequence[ColumnMeta]) -> "AnalysisFrame":
        """Replace existing feature columns in place, append new ones at the end."""
        x = self.x.copy()
        columns = list(self.columns)
        extra_cols = []
        extra_meta = []
        for j, (name, meta) in enumerate(zip(names, metas)):
            if name in self.feature_names:
                k = self.feature_names.index(name)
                x[:, k] = values[:, j]
                columns[k] = meta
            else:
                extra_cols.append(values[:, j])
                extra_meta.append(meta)
        if extra_cols:
            x = np.column_stack([x, *extra_cols])
            columns.extend(extra_meta)
        features = tuple(c.name for c in columns)
        return replace(self, x=np.ascontiguousarray(x), columns=tuple(columns), schema=replace(self.schema, features=features))

    def drop_features(self, names: Iterable[str]) -> "AnalysisFrame":
        gone = set(names)
        keep = [j for j, n in enumerate(self.feature_names) if n not in gone]
        columns = tuple(self.columns[j] for j in keep)
        return replace(
            self,
            x=np.ascontiguousarray(self.x[:, keep]),
            columns=columns,
            schema=replace(self.schema, features=tuple(c.name for c in columns)),
        )

    def with_outcome(self, name: str) -> "AnalysisFrame":
        """Swap a carried column in as the outcome; the old outcome is carried."""
        if name == self.schema.outcome:
            return self
        if name not in self.extra:
            raise SchemaError(f"no carried column named {name!r}")
        extra = {k: v for k, v in self.extra.items() if k != name}
        extra[self.schema.outcome] = self.y
        return replace(
            self,
            y=np.asarray(self.extra[name], dtype=np.float64),
            extra=extra,
            schema=self.schema.with_outcome(name),
        )

    def with_note(self, key: str, value: int) -> "AnalysisFrame":
        return replace(self, notes={**self.notes, key: value})

    def equals(self, other: "AnalysisFrame") -> bool:
        """Cell-exact comparison of every array plus metadata."""
        if self.columns != other.columns or self.schema != other.schema:
            return False
        pairs = [(self.y, other.y), (self.w, other.w), (self.cluster, other.cluster), (self.margin, other.margin), (self.x, other.x)]
        if set(self.extra) != set(other.extra):
            return False
        pairs += [(self.extra[k], other.extra[k]) for k in self.extra]
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


def build_frame(
    data: Mapping[str, np.ndarray],
    schema: Schema,
    sources: Mapping[str, str] | None = None,
) -> AnalysisFrame:
    """Assemble a frame from named arrays, deriving column metadata."""
    sources = sources or {}
    missing = [c for c in (schema.outcome, schema.treatment, schema.cluster, schema.margin, *schema.features, *schema.keep) if c not in data]
    if missing:
        raise SchemaError(f"missing columns: {', '.join(missing)}")
    metas = []
    cols = []
    for name in schema.features:
        v = np.asarray(data[name], dtype=np.float64)
        kind = None
        if schema.dummies is not None:
            kind = "dummy" if name in schema.dummies else "continuous"
        metas.append(describe_column(name, v, kind, sources.get(name, "raw")))
        cols.append(v)
    n = len(data[schema.outcome])
    x = np.column_stack(cols) if cols else np.zeros((n, 0))
    w = np.asarray(data[schema.treatment])
    if w.dtype.kind == "f" and np.all((w == 0) | (w == 1)):
        w = w.astype(np.int64)
    frame = AnalysisFrame(
        y=np.asarray(data[schema.outcome], dtype=np.float64),
        w=w,
        cluster=np.asarray(data[schema.cluster]),
        margin=np.asarray(data[schema.margin], dtype=np.float64),
        x=np.ascontiguousarray(x, dtype=np.float64),
        columns=tuple(metas),
        schema=schema,
        extra={k: np.asarray(data[k]) for k in schema.keep},
    )
    _check_cluster_margins(frame)
    return frame


def _check_cluster_margins(frame: AnalysisFrame) -> None:
    codes = frame.cluster_codes
    order = np.argsort(codes, kind="stable")
    c = codes[order]
    m = frame.margin[order]
    same = c[1:] == c[:-1]
    bad = np.flatnonzero(same & (m[1:] != m[:-1]))
    if bad.size:
        row = order[bad[0] + 1]
        raise DataValidationError(f"cluster {frame.cluster[row]!r} has more than one margin value (row {row + 1})")


def _invalid_rows(df: pd.DataFrame, schema: Schema) -> tuple[np.ndarray, list[str]]:
    reasons = np.full(len(df), "", dtype=object)
    w = pd.to_numeric(df[schema.treatment], errors="coerce").to_numpy()
    bad_w = ~((w == 0) | (w == 1))
    reasons[bad_w & (reasons == "")] = "non-binary treatment value"
    for name in (schema.outcome, schema.margin, *schema.features):
        v = pd.to_numeric(df[name], errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(v)
        reasons[bad & (reasons == "")] = f"missing or non-finite value in {name!r}"
    cl = df[schema.cluster]
    reasons[cl.isna().to_numpy() & (reasons == "")] = "missing cluster id"
    return np.flatnonzero(reasons != ""), list(reasons)


def load_csv(path: str | Path, schema: Schema, drop_invalid: bool = False, delimiter: str = ",") -> AnalysisFrame:
    """Read and validate a frame.

    Invalid rows raise ``DataValidationError`` naming the 1-based data row,
    unless ``drop_invalid`` is set, in which case they are dropped and the
    count is recorded in ``frame.notes["dropped_invalid"]``.
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"input file not found: {path}")
    df = pd.read_csv(path, sep=delimiter, comment="#", float_precision="round_trip")
    needed = [schema.outcome, schema.treatment, schema.cluster, schema.margin, *schema.features, *schema.keep]
    missing = [c for c in dict.fromkeys(needed) if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    bad, reasons = _invalid_rows(df, schema)
    dropped = 0
    if bad.size:
        if not drop_invalid:
            raise DataValidationError(f"{path}: row {bad[0] + 1}: {reasons[bad[0]]}")
        df = df.drop(index=df.index[bad]).reset_index(drop=True)
        dropped = int(bad.size)
        log.warning("dropped %d invalid row(s) from %s", dropped, path)
    if len(df) == 0:
        raise EmptyFrameError(f"{path}: no rows")
    data = {c: df[c].to_numpy() for c in dict.fromkeys(needed)}
    frame = build_frame(data, schema)
    return frame.with_note("dropped_invalid", dropped) if drop_invalid else frame


def frame_to_dataframe(frame: AnalysisFrame) -> pd.DataFrame:
    s = frame.schema
    cols: dict[str, np.ndarray] = {
        s.cluster: frame.cluster,
        s.margin: frame.margin,
        s.treatment: frame.w,
        s.outcome: frame.y,
    }
    for j, name in enumerate(frame.feature_names):
        cols[name] = frame.x[:, j]
    for k, v in frame.extra.items():
        cols.setdefault(k, v)
    return pd.DataFrame(cols)


def write_csv(frame: AnalysisFrame, path: str | Path, delimiter: str = ",") -> None:
    frame_to_dataframe(frame).to_csv(path, index=False, sep=delimiter, lineterminator="\n")


def arsinh(v):
    """Inverse hyperbolic sine, ln(v + sqrt(v^2 + 1)); rejects non-finite input."""
    arr = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("arsinh is only defined for finite input")
    out = np.arcsinh(arr)
    return float(out) if out.ndim == 0 else out


def apply_arsinh(frame: AnalysisFrame, cols: Iterable[str]) -> AnalysisFrame:
    """arsinh-transform named feature columns and/or the outcome."""
    for name in cols:
        if name == frame.schema.outcome:
            frame = replace(frame, y=arsinh(frame.y))
        elif name in frame.feature_names:
            v = arsinh(frame.column(name))
            meta = describe_column(name, v, frame.meta(name).kind, "arsinh")
            frame = frame.with_features([name], v[:, None], [meta])
        elif name in frame.extra:
            frame = replace(frame, extra={**frame.extra, name: arsinh(frame.extra[name])})
        else:
            raise SchemaError(f"unknown column {name!r}")
    return frame


def bandwidth_filter(frame: AnalysisFrame, h: float) -> AnalysisFrame:
    """Keep rows with |margin| <= h (closed interval)."""
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    keep = np.abs(frame.margin) <= h
    if not keep.any():
        raise EmptyFrameError(f"no rows with |margin| <= {h}")
    return frame.take(np.flatnonzero(keep))


def standardize(frame: AnalysisFrame, cols: Iterable[str] | None = None) -> AnalysisFrame:
    """Center and scale columns by their population sd.

    Metadata keeps the raw-scale mean and sd; standardizing an already
    standardized column composes the transforms so the raw-scale statistics
    survive.
    """
    names = list(frame.feature_names if cols is None else cols)
    values = np.empty((frame.rows, len(names)))
    metas = []
    for j, name in enumerate(names):
        v = frame.column(name).astype(np.float64)
        mean, sd = _population_stats(v)
        if not sd > 0:
            raise DataValidationError(f"column {name!r} has zero variance; cannot standardize")
        values[:, j] = (v - mean) / sd
        old = frame.meta(name)
        if old.source == "standardized":
            metas.append(replace(old, mean=old.mean + old.sd * mean, sd=old.sd * sd))
        else:
            metas.append(ColumnMeta(name, old.kind, mean, sd, "standardized"))
    return frame.with_features(names, values, metas)


def raw_values(frame: AnalysisFrame, name: str) -> np.ndarray:
    """Undo standardization for a feature column."""
    meta = frame.meta(name)
    v = frame.column(name)
    if meta.source == "standardized":
        return v * meta.sd + meta.mean
    return v


def _leave_one_out_means(values: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Within-cluster mean of the other rows, summed without touching row i."""
    order = np.argsort(codes, kind="stable")
    c = codes[order]
    v = values[order].astype(np.float64)
    n = c.shape[0]
    starts = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
    ends = np.r_[starts[1:], n]
    sizes = np.repeat(ends - starts, ends - starts)
    out = np.empty(n)
    for s, e in zip(starts, ends):
        seg = v[s:e]
        pre = np.r_[0.0, np.cumsum(seg)[:-1]]
        suf = np.r_[np.cumsum(seg[::-1])[::-1][1:], 0.0]
        with np.errstate(invalid="ignore", divide="ignore"):
            out[s:e] = (pre + suf) / (e - s - 1)
    res = np.empty(n)
    res[order] = out
    size = np.empty(n, dtype=np.int64)
    size[order] = sizes
    return res, size


def mean_encode_cluster(frame: AnalysisFrame) -> AnalysisFrame:
    """Append leave-one-out cluster means of y and w plus log cluster size.

    Singleton clusters fall back to the global mean; their count lands in
    ``notes["loo_singletons"]``.
    """
    codes = frame.cluster_codes
    loo_y, size = _leave_one_out_means(frame.y, codes)
    loo_w, _ = _leave_one_out_means(frame.w, codes)
    single = size == 1
    if single.any():
        loo_y[single] = frame.y.mean()
        loo_w[single] = frame.w.mean()
        log.warning("%d singleton cluster row(s) encoded with global means", int(single.sum()))
    values = np.column_stack([loo_y, loo_w, np.log(size)])
    names = ["cluster_loo_y", "cluster_loo_w", "cluster_log_size"]
    metas = [describe_column(nm, values[:, j], "continuous", "mean-encoded") for j, nm in enumerate(names)]
    return frame.with_features(names, values, metas).with_note("loo_singletons", int(single.sum()))


def subsample(frame: AnalysisFrame, predicate: str | Callable[[AnalysisFrame], np.ndarray]) -> AnalysisFrame:
    """Filter rows by a predicate expression or a callable returning a mask."""
    if isinstance(predicate, str):
        mask = _predicate.evaluate(predicate, frame.column, frame.rows)
    else:
        mask = np.asarray(predicate(frame), dtype=bool)
    if not mask.any():
        raise EmptyFrameError(f"predicate {predicate!r} selects no rows")
    return frame.take(np.flatnonzero(mask))
