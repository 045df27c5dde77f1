"""End-to-end run: prepare each sample variant, estimate, and write the report bundle."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import __version__
from .causal_forest import CalibrationResult, CateEstimate, CausalForest, calibration_test, fit_causal_forest, predict
from .config import PipelineConfig
from .dataset import (
    AnalysisFrame,
    apply_arsinh,
    bandwidth_filter,
    build_frame,
    frame_to_dataframe,
    load_csv,
    mean_encode_cluster,
    standardize,
    subsample,
)
from .errors import HetfxError
from .inference import BlpResult, ClanResult, blp, clan, weighted_mean_tau, write_blp_csv, write_clan_csv
from .mincer import AbilityEstimates, WagePanel, attach_ability, fit_mincer, load_panel, write_ability_csv
from .nuisance import (
    BiasEstimate,
    CenteredSample,
    bias,
    center,
    fit_conditional_means,
    fit_regression_forest,
    propensity_histogram,
)
from .report import emit_correlation_matrix, emit_histogram, write_histogram_csv, render_svg
from .synth import generate

log = logging.getLogger(__name__)


@contextlib.contextmanager
def stage(name: str, timings: dict[str, float] | None = None) -> Iterator[None]:
    """Prefix errors with the stage that raised them; keeps the error class."""
    t0 = time.perf_counter()
    try:
        yield
    except HetfxError as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def load_inputs(cfg: PipelineConfig) -> tuple[AnalysisFrame, WagePanel | None]:
    if cfg.frame_path is not None:
        frame = load_csv(cfg.frame_path, cfg.schema, cfg.drop_invalid, cfg.delimiter)
        panel = load_panel(cfg.panel_path, cfg.mincer.controls) if cfg.panel_path else None
        return frame, panel
    frame, panel, _ = generate(cfg.simulate)
    if frame.schema != cfg.schema:
        df = frame_to_dataframe(frame)
        needed = dict.fromkeys([cfg.schema.outcome, cfg.schema.treatment, cfg.schema.cluster, cfg.schema.margin,
                                *cfg.schema.features, *cfg.schema.keep])
        frame = build_frame({c: df[c].to_numpy() for c in needed if c in df.columns}, cfg.schema)
    return frame, panel


def constant_features(frame: AnalysisFrame) -> list[str]:
    return [n for j, n in enumerate(frame.feature_names) if np.ptp(frame.x[:, j]) == 0]


def prepare(
    cfg: PipelineConfig,
    frame: AnalysisFrame,
    h: float,
    predicate: str,
    abilities: AbilityEstimates | None,
) -> tuple[AnalysisFrame, list[str]]:
    """Filters, ability join, encodings, and standardization for one variant.

    Features that are constant inside the variant sample are dropped (a
    subsample defined by ``x == 1`` leaves ``x`` without variance) and returned.
    """
    frame = bandwidth_filter(frame, h)
    if predicate:
        frame = subsample(frame, predicate)
    if abilities is not None:
        frame = attach_ability(frame, abilities, cfg.mincer.worker_column)
    if cfg.mean_encode:
        frame = mean_encode_cluster(frame)
    dropped = constant_features(frame)
    if dropped:
        log.warning("dropping feature(s) constant in this sample: %s", ", ".join(dropped))
        frame = frame.drop_features(dropped)
    if cfg.standardize:
        frame = standardize(frame)
    return frame, dropped


def fit_abilities(cfg: PipelineConfig, panel: WagePanel | None) -> AbilityEstimates | None:
    if not cfg.mincer.enabled or panel is None:
        return None
    return fit_mincer(panel, cfg.mincer.poly_degree, cfg.mincer.variant)


@dataclass
class Nuisance:
    centered: CenteredSample
    bias: BiasEstimate


def fit_nuisance(cfg: PipelineConfig, frame: AnalysisFrame, threads: int | None) -> Nuisance:
    y_model = fit_regression_forest(frame, "y", cfg.nuisance, cfg.seed, threads)
    w_model = fit_regression_forest(frame, "w", cfg.nuisance, cfg.seed, threads)
    centered = center(frame, y_model, w_model)
    means = fit_conditional_means(frame, cfg.nuisance, cfg.seed, threads)
    return Nuisance(centered, bias(frame, means, centered.e_hat))


@dataclass
class VariantResult:
    frame: AnalysisFrame
    nuisance: Nuisance
    forest: CausalForest
    cate: CateEstimate
    calibration: CalibrationResult
    blp: BlpResult
    clan: ClanResult
    tau_bar: float
    dropped_features: list[str]


def estimate(cfg: PipelineConfig, frame: AnalysisFrame, threads: int | None, timings: dict | None = None,
             dropped: list[str] | None = None) -> VariantResult:
    with stage("nuisance", timings):
        nz = fit_nuisance(cfg, frame, threads)
    with stage("causal_forest", timings):
        forest = fit_causal_forest(frame, nz.centered, cfg.forest, cfg.seed, threads)
        cate = predict(forest)
        calib = calibration_test(forest, nz.centered, frame)
    with stage("blp", timings):
        absorb = frame.cluster if cfg.blp.fixed_effects else None
        res = blp(frame, cate, nz.centered.e_hat, frame.cluster, cfg.blp.weights, cfg.blp.features, absorb=absorb)
        tau_bar = weighted_mean_tau(cate, nz.centered.e_hat, cfg.blp.weights)
    with stage("clan", timings):
        cl = clan(frame, cate, cfg.clan_features, nz.centered.e_hat, nz.centered.y_hat, nz.bias.b)
    return VariantResult(frame, nz, forest, cate, calib, res, cl, tau_bar, list(dropped or []))


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_variant(cfg: PipelineConfig, r: VariantResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_blp_csv(r.blp, out / "blp.csv", r.calibration)
    write_clan_csv(r.clan, out / "clan.csv")
    hist = propensity_histogram(r.nuisance.centered.e_hat, cfg.bins)
    write_histogram_csv(hist.counts, hist.edges, out / "propensity_hist.csv")
    (out / "propensity_hist.svg").write_text(render_svg(hist.counts, hist.edges, title="propensity score"))
    emit_histogram(r.nuisance.bias.scaled, cfg.bins, out / "bias_hist", title="bias / sd(Y)")
    emit_histogram(r.cate.tau, cfg.bins, out / "tau_hist", marker=r.blp.ate, title="CATE")
    if len(r.frame.feature_names) >= 2:
        emit_correlation_matrix(r.frame, r.frame.feature_names, out / "correlation.csv")
    summary = {
        "tau_bar": r.tau_bar,
        "tau_bar_unweighted": r.cate.tau_bar,
        "blp_weights": cfg.blp.weights,
        "rows": r.frame.rows,
        "clusters": r.frame.n_clusters,
        "num_trees": r.forest.num_trees,
        "little_bag_groups": r.forest.n_groups,
        "propensity_clipped": r.nuisance.centered.clip_count,
        "dropped_features": r.dropped_features,
        "notes": dict(r.frame.notes),
        "outcome": r.frame.schema.outcome,
    }
    (out / "forest.json").write_text(_json(summary))


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_pipeline(cfg: PipelineConfig, threads: int | None = None, out_dir: str | Path | None = None) -> Path:
    """Run every variant; outputs appear only after all stages succeed."""
    out = Path(out_dir or cfg.output_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".hetfx-stage-", dir=out.parent))
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    try:
        with stage("load", timings):
            frame, panel = load_inputs(cfg)
        with stage("transforms", timings):
            frame = apply_arsinh(frame, cfg.arsinh)
        with stage("mincer", timings):
            abilities = fit_abilities(cfg, panel)
            if abilities is not None:
                write_ability_csv(abilities, staging / "ability.csv")
        for name, h, pred in cfg.variants():
            for outcome in cfg.outcomes:
                with stage(f"filter[{name}/{outcome}]", timings):
                    fr, dropped = prepare(cfg, frame.with_outcome(outcome), h, pred, abilities)
                with stage(f"estimate[{name}/{outcome}]"):
                    result = estimate(cfg, fr, threads, timings, dropped)
                write_variant(cfg, result, staging / name / outcome)
        files = sorted(p for p in staging.rglob("*") if p.is_file())
        manifest = {
            "version": __version__,
            "config_sha256": cfg.digest(),
            "seed": cfg.seed,
            "outputs": {p.relative_to(staging).as_posix(): sha256_file(p) for p in files},
        }
        (staging / "manifest.json").write_text(_json(manifest))
        timings["total"] = time.perf_counter() - t0
        (staging / "runtime.json").write_text(_json({k: round(v, 3) for k, v in timings.items()}))
        out.mkdir(parents=True, exist_ok=True)
        for p in sorted(staging.rglob("*")):
            if p.is_file():
                dest = out / p.relative_to(staging)
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(p, dest)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return out
