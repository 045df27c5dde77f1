"""Command-line entry point: ``hetfx <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 estimation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .causal_forest import calibration_test, fit_causal_forest, load_forest, predict, save_forest
from .config import PipelineConfig, dgp_config, load_config, read_toml
from .dataset import apply_arsinh, write_csv
from .ensemble import thread_count
from .errors import ConfigError, HetfxError
from .inference import blp, clan, weighted_mean_tau, write_blp_csv, write_clan_csv
from .mincer import fit_mincer, load_panel, write_ability_csv, write_panel
from .nuisance import CLIP, CenteredSample, propensity_histogram
from .pipeline import fit_abilities, fit_nuisance, load_inputs, prepare, run_pipeline, stage
from .report import correlation, emit_histogram, render_svg, write_correlation_csv, write_histogram_csv
from .synth import generate, write_truth

log = logging.getLogger("hetfx")


def _variant(cfg: PipelineConfig, name: str | None) -> tuple[str, float, str]:
    variants = cfg.variants()
    if name is None:
        return variants[0]
    for v in variants:
        if v[0] == name:
            return v
    raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(v[0] for v in variants)}")


def _frame_for(cfg: PipelineConfig, variant: str | None, outcome: str | None):
    with stage("load"):
        frame, panel = load_inputs(cfg)
    with stage("transforms"):
        frame = apply_arsinh(frame, cfg.arsinh)
    with stage("mincer"):
        abilities = fit_abilities(cfg, panel)
    _, h, pred = _variant(cfg, variant)
    with stage("filter"):
        frame, _ = prepare(cfg, frame.with_outcome(outcome or cfg.outcomes[0]), h, pred, abilities)
    return frame


def _centered_from_forest(forest) -> CenteredSample:
    w_hat = forest.w_raw - forest.w_tilde
    e_hat = np.clip(w_hat, *CLIP)
    return CenteredSample(forest.y_tilde, forest.w_tilde, e_hat, np.full(w_hat.shape, np.nan), int(np.sum(e_hat != w_hat)))


def _load_matching_forest(path: str, frame):
    forest = load_forest(path)
    if forest.x.shape != frame.x.shape or not np.array_equal(forest.x, frame.x):
        raise ConfigError(f"{path} was trained on different data than this config produces")
    return forest


def cmd_simulate(args) -> None:
    raw = read_toml(args.config)
    table = raw.get("simulate", raw)
    cfg = dgp_config(table, args.seed if args.seed is not None else table.get("seed", 0))
    frame, panel, truth = generate(cfg)
    write_csv(frame, args.out_frame)
    if args.out_panel:
        write_panel(panel, args.out_panel)
    if args.out_truth:
        write_truth(truth, args.out_truth)


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    frame = _frame_for(cfg, args.variant, args.outcome)
    with stage("nuisance"):
        nz = fit_nuisance(cfg, frame, args.threads)
    with stage("causal_forest"):
        forest = fit_causal_forest(frame, nz.centered, cfg.forest, cfg.seed, args.threads)
    save_forest(forest, args.out)


def cmd_diagnose(args) -> None:
    cfg = load_config(args.config)
    frame = _frame_for(cfg, args.variant, args.outcome)
    with stage("nuisance"):
        nz = fit_nuisance(cfg, frame, args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hist = propensity_histogram(nz.centered.e_hat, cfg.bins)
    write_histogram_csv(hist.counts, hist.edges, out / "propensity_hist.csv")
    (out / "propensity_hist.svg").write_text(render_svg(hist.counts, hist.edges, title="propensity score"))
    emit_histogram(nz.bias.scaled, cfg.bins, out / "bias_hist", title="bias / sd(Y)")
    summary = {
        "propensity_mean": hist.mean,
        "propensity_sd": hist.sd,
        "propensity_clipped": nz.centered.clip_count,
        "share_abs_scaled_bias_below_0.05": float(np.mean(np.abs(nz.bias.scaled) < 0.05)),
    }
    (out / "diagnostics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_blp(args) -> None:
    cfg = load_config(args.config)
    frame = _frame_for(cfg, args.variant, args.outcome)
    forest = _load_matching_forest(args.forest, frame)
    centered = _centered_from_forest(forest)
    with stage("blp"):
        cate = predict(forest)
        calib = calibration_test(forest, centered, frame)
        absorb = frame.cluster if cfg.blp.fixed_effects else None
        res = blp(frame, cate, centered.e_hat, frame.cluster, cfg.blp.weights, cfg.blp.features, absorb=absorb)
    write_blp_csv(res, args.out, calib)
    print(f"ATE {res.ate:.6f} (se {res.intercept[1]:.6f}); tau_bar {weighted_mean_tau(cate, centered.e_hat, cfg.blp.weights):.6f}")


def cmd_clan(args) -> None:
    cfg = load_config(args.config)
    frame = _frame_for(cfg, args.variant, args.outcome)
    forest = _load_matching_forest(args.forest, frame)
    centered = _centered_from_forest(forest)
    with stage("clan"):
        cate = predict(forest)
        res = clan(frame, cate, cfg.clan_features, centered.e_hat)
    write_clan_csv(res, args.out)


def cmd_mincer(args) -> None:
    if args.config:
        cfg = load_config(args.config)
        if cfg.panel_path is None:
            raise ConfigError("config has no [data].panel")
        panel = load_panel(cfg.panel_path, cfg.mincer.controls)
        degree, variant = cfg.mincer.poly_degree, cfg.mincer.variant
    else:
        if not args.panel:
            raise ConfigError("mincer needs --panel or --config")
        panel = load_panel(args.panel, args.controls or ())
        degree, variant = args.degree, args.variant
    with stage("mincer"):
        est = fit_mincer(panel, degree, variant)
    write_ability_csv(est, args.out)
    print(f"workers {est.worker_id.shape[0]}; excluded {est.excluded_workers}; dropped terms {est.dropped_terms}")


def cmd_report(args) -> None:
    df = pd.read_csv(args.input, comment="#")
    if args.correlation:
        cols = args.correlation.split(",")
        missing = [c for c in cols if c not in df.columns]
        if missing:
            raise ConfigError(f"unknown column(s): {', '.join(missing)}")
        write_correlation_csv(correlation(df[cols].to_numpy(dtype=np.float64)), cols, args.out)
        return
    if args.column not in df.columns:
        raise ConfigError(f"unknown column {args.column!r}")
    v = df[args.column].to_numpy(dtype=np.float64)
    marker = None
    if args.marker == "mean":
        marker = float(np.mean(v))
    elif args.marker is not None:
        try:
            marker = float(args.marker)
        except ValueError:
            raise ConfigError("--marker must be a number or 'mean'") from None
    emit_histogram(v, args.bins, args.out, marker=marker, title=args.column)


def cmd_pipeline(args) -> None:
    cfg = load_config(args.config)
    out = run_pipeline(cfg, args.threads, args.out)
    print(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetfx", description="Honest causal forests for clustered close-election data.")
    p.add_argument("--version", action="version", version=f"hetfx {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $HETFX_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw a synthetic frame, panel and truth")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-frame", required=True)
    s.add_argument("--out-panel")
    s.add_argument("--out-truth")
    s.set_defaults(fn=cmd_simulate)

    for name, fn, helptext in (
        ("train", cmd_train, "fit nuisance models and the causal forest"),
        ("diagnose", cmd_diagnose, "propensity and bias diagnostics"),
        ("blp", cmd_blp, "best linear predictor table from a trained forest"),
        ("clan", cmd_clan, "quartile classification table from a trained forest"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--variant")
        s.add_argument("--outcome")
        if name == "train":
            s.add_argument("--out", required=True)
        elif name == "diagnose":
            s.add_argument("--out-dir", required=True)
        else:
            s.add_argument("--forest", required=True)
            s.add_argument("--out", required=True)
        s.set_defaults(fn=fn)

    s = sub.add_parser("mincer", help="worker ability from a wage panel")
    s.add_argument("--config")
    s.add_argument("--panel")
    s.add_argument("--controls", nargs="*")
    s.add_argument("--degree", type=int, default=3)
    s.add_argument("--variant", default="full")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_mincer)

    s = sub.add_parser("report", help="histogram or correlation matrix from a CSV")
    s.add_argument("--input", required=True)
    s.add_argument("--column")
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--marker")
    s.add_argument("--correlation", help="comma-separated columns")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("pipeline", help="run the full analysis for every configured variant")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="hetfx: %(message)s")
    args.threads = thread_count(args.threads)
    try:
        args.fn(args)
    except HetfxError as exc:
        print(f"hetfx: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hetfx: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
