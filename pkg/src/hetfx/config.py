"""Pipeline configuration read from TOML."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import predicate
from .dataset import Schema
from .ensemble import CAUSAL_DEFAULTS, NUISANCE_DEFAULTS, ForestParams
from .errors import ConfigError
from .inference import WEIGHT_MODES
from .mincer import VARIANTS
from .synth import DgpConfig, default_schema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DERIVED_FEATURES = ("ability", "cluster_loo_y", "cluster_loo_w", "cluster_log_size")


@dataclass(frozen=True)
class BlpOptions:
    weights: str = "balanced"
    fixed_effects: bool = False
    features: tuple[str, ...] | None = None


@dataclass(frozen=True)
class MincerOptions:
    enabled: bool = False
    poly_degree: int = 3
    variant: str = "full"
    controls: tuple[str, ...] = ()
    worker_column: str = "worker_id"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    schema: Schema
    outcomes: tuple[str, ...]
    frame_path: str | None = None
    panel_path: str | None = None
    simulate: DgpConfig | None = None
    delimiter: str = ","
    drop_invalid: bool = False
    arsinh: tuple[str, ...] = ()
    mean_encode: bool = True
    standardize: bool = True
    bandwidths: tuple[float, ...] = (5.0,)
    subsamples: tuple[tuple[str, str], ...] = (("all", ""),)
    nuisance: ForestParams = NUISANCE_DEFAULTS
    forest: ForestParams = CAUSAL_DEFAULTS
    blp: BlpOptions = field(default_factory=BlpOptions)
    clan_features: tuple[str, ...] | None = None
    mincer: MincerOptions = field(default_factory=MincerOptions)
    bins: int = 50
    output_dir: str = "out"

    def variants(self) -> list[tuple[str, float, str]]:
        """(directory name, bandwidth, predicate) for every bandwidth x subsample."""
        out = []
        for h in self.bandwidths:
            for name, pred in self.subsamples:
                out.append((f"h{h:g}_{name}", h, pred))
        return out

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("output_dir")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def _table(raw: dict, key: str) -> dict:
    v = raw.get(key, {})
    if not isinstance(v, dict):
        raise ConfigError(f"[{key}] must be a table")
    return v


def _dataclass_from(cls, table: dict, where: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(unknown)}")
    kw = {}
    for k, v in table.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    kw.update(extra)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def forest_params(table: dict, base: ForestParams, where: str) -> ForestParams:
    merged = {**base.to_dict(), **table}
    return _dataclass_from(ForestParams, merged, where)


def dgp_config(table: dict, seed: int | None = None) -> DgpConfig:
    extra = {} if seed is None else {"seed": seed}
    return _dataclass_from(DgpConfig, table, "simulate", **extra)


def read_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


def parse_config(raw: dict, base: Path | None = None) -> PipelineConfig:
    base = base or Path(".")
    if "seed" not in raw:
        raise ConfigError("config must set an explicit integer seed")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    data = _table(raw, "data")
    sim_table = raw.get("simulate")
    simulate = dgp_config(sim_table, sim_table.get("seed", seed)) if sim_table is not None else None
    frame_path = _resolve(base, data.get("frame"))
    if frame_path is None and simulate is None:
        raise ConfigError("config needs [data].frame or a [simulate] table")

    s = _table(raw, "schema")
    if s:
        try:
            schema = Schema(
                outcome=s["outcome"],
                treatment=s["treatment"],
                cluster=s["cluster"],
                margin=s["margin"],
                features=tuple(s["features"]),
                keep=tuple(s.get("keep", ())),
                dummies=tuple(s["dummies"]) if "dummies" in s else None,
            )
        except KeyError as exc:
            raise ConfigError(f"[schema] missing key {exc}") from None
    else:
        schema = default_schema()
    outcomes = tuple(s.get("outcomes", (schema.outcome,)))
    for o in outcomes:
        if o != schema.outcome and o not in schema.keep:
            raise ConfigError(f"outcome {o!r} must be the schema outcome or a kept column")

    tr = _table(raw, "transform")
    sample = _table(raw, "sample")
    bandwidths = tuple(float(h) for h in sample.get("bandwidths", (5.0,)))
    if not bandwidths or any(not h > 0 for h in bandwidths):
        raise ConfigError("bandwidths must be positive")
    subs = sample.get("subsamples", {"all": ""})
    if not isinstance(subs, dict) or not subs:
        raise ConfigError("[sample].subsamples must be a non-empty table of name = predicate")
    known_cols = {schema.outcome, schema.treatment, schema.cluster, schema.margin, *schema.features, *schema.keep}
    for name, text in subs.items():
        if text:
            predicate.evaluate(text, lambda c: np.zeros(1), 1)
            missing = sorted(predicate.column_names(text) - known_cols - set(DERIVED_FEATURES))
            if missing:
                raise ConfigError(f"subsample {name!r} references unknown column(s): {', '.join(missing)}")

    blp_t = _table(raw, "blp")
    blp = _dataclass_from(BlpOptions, blp_t, "blp")
    if blp.weights not in WEIGHT_MODES:
        raise ConfigError(f"[blp].weights must be one of {', '.join(WEIGHT_MODES)}")
    mincer = _dataclass_from(MincerOptions, _table(raw, "mincer"), "mincer")
    if mincer.variant not in VARIANTS:
        raise ConfigError(f"[mincer].variant must be one of {', '.join(VARIANTS)}")
    if mincer.poly_degree not in (2, 3, 4):
        raise ConfigError("[mincer].poly_degree must be 2, 3 or 4")
    panel_path = _resolve(base, data.get("panel"))
    if mincer.enabled and panel_path is None and simulate is None:
        raise ConfigError("[mincer] is enabled but no panel is configured")

    clan_t = _table(raw, "clan")
    clan_features = tuple(clan_t["features"]) if "features" in clan_t else None
    allowed = set(schema.features) | set(DERIVED_FEATURES)
    for group, names in (("clan", clan_features), ("blp", blp.features)):
        for c in names or ():
            if c not in allowed:
                raise ConfigError(f"[{group}] feature {c!r} is not a schema feature")
    for c in tr.get("arsinh", ()):
        if c not in known_cols:
            raise ConfigError(f"[transform].arsinh column {c!r} is not in the schema")

    report = _table(raw, "report")
    bins = int(report.get("bins", 50))
    if bins < 2:
        raise ConfigError("[report].bins must be >= 2")
    return PipelineConfig(
        seed=seed,
        schema=schema,
        outcomes=outcomes,
        frame_path=frame_path,
        panel_path=panel_path,
        simulate=simulate,
        delimiter=data.get("delimiter", ","),
        drop_invalid=bool(data.get("drop_invalid", False)),
        arsinh=tuple(tr.get("arsinh", ())),
        mean_encode=bool(tr.get("mean_encode", True)),
        standardize=bool(tr.get("standardize", True)),
        bandwidths=bandwidths,
        subsamples=tuple((k, str(v)) for k, v in subs.items()),
        nuisance=forest_params(_table(raw, "nuisance"), NUISANCE_DEFAULTS, "nuisance"),
        forest=forest_params(_table(raw, "forest"), CAUSAL_DEFAULTS, "forest"),
        blp=blp,
        clan_features=clan_features,
        mincer=mincer,
        bins=bins,
        output_dir=_resolve(base, _table(raw, "output").get("dir", "out")),
    )


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    return parse_config(read_toml(path), path.parent)
