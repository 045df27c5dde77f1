import csv
import json

import numpy as np
import pytest

from hetfx.cli import main
from hetfx.config import parse_config
from hetfx.errors import ConfigError
from hetfx.report import correlation, histogram, render_svg

SIM = """
seed = 11
[simulate]
n_municipalities = 30
n_workers = 1500
tau = "threshold"
tau_params = [0.05, 0.10]
[nuisance]
num_trees = 30
min_leaf = 10
[forest]
num_trees = 60
min_leaf = 20
[mincer]
enabled = true
"""


def _cfg(tmp_path, extra="", body=SIM):
    path = tmp_path / "cfg.toml"
    path.write_text(body + extra)
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_missing_seed_is_config_error(tmp_path):
    assert main(["pipeline", "--config", str(_cfg(tmp_path, body="[simulate]\n"))]) == 2


@pytest.mark.parametrize(
    "raw, msg",
    [
        ({"seed": 1}, "frame"),
        ({"seed": -1, "simulate": {}}, "seed"),
        ({"seed": 1, "simulate": {}, "sample": {"bandwidths": [0]}}, "bandwidth"),
        ({"seed": 1, "simulate": {}, "sample": {"subsamples": {"s": "nope == 1"}}}, "nope"),
        ({"seed": 1, "simulate": {}, "blp": {"weights": "odd"}}, "weights"),
        ({"seed": 1, "simulate": {}, "forest": {"mystery": 3}}, "mystery"),
        ({"seed": 1, "simulate": {}, "mincer": {"poly_degree": 7}}, "poly_degree"),
    ],
)
def test_config_validation(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(raw)


def test_exit_codes(tmp_path):
    assert main(["pipeline", "--config", str(tmp_path / "absent.toml")]) == 2
    missing = _cfg(tmp_path, body='seed = 1\n[data]\nframe = "missing.csv"\n')
    assert main(["pipeline", "--config", str(missing)]) == 3
    impossible = _cfg(tmp_path, extra="")
    text = impossible.read_text().replace("min_leaf = 20", "min_leaf = 50000")
    impossible.write_text(text)
    assert main(["pipeline", "--config", str(impossible), "--out", str(tmp_path / "o")]) == 4
    assert not (tmp_path / "o").exists()


def test_simulate_train_blp_clan(tmp_path):
    cfg = _cfg(tmp_path)
    dgp = tmp_path / "dgp.toml"
    dgp.write_text("n_municipalities = 20\nn_workers = 800\n")
    frame = tmp_path / "f.csv"
    assert main(["simulate", "--config", str(dgp), "--seed", "3", "--out-frame", str(frame),
                 "--out-panel", str(tmp_path / "p.csv"), "--out-truth", str(tmp_path / "t.csv")]) == 0
    assert len(_rows(frame)) == 801
    forest = tmp_path / "forest.npz"
    assert main(["train", "--config", str(cfg), "--out", str(forest)]) == 0
    assert main(["blp", "--config", str(cfg), "--forest", str(forest), "--out", str(tmp_path / "blp.csv")]) == 0
    names = [r[0] for r in _rows(tmp_path / "blp.csv")]
    assert names[0] == "term" and "mean_forest_prediction" in names and names[-1] == "N"
    assert main(["clan", "--config", str(cfg), "--forest", str(forest), "--out", str(tmp_path / "clan.csv")]) == 0
    assert main(["diagnose", "--config", str(cfg), "--out-dir", str(tmp_path / "diag")]) == 0
    summary = json.loads((tmp_path / "diag" / "diagnostics.json").read_text())
    assert 0 < summary["propensity_mean"] < 1
    assert main(["mincer", "--panel", str(tmp_path / "p.csv"), "--out", str(tmp_path / "ab.csv")]) == 0
    assert len(_rows(tmp_path / "ab.csv")) == 801


def test_forest_from_other_data_rejected(tmp_path):
    cfg = _cfg(tmp_path)
    forest = tmp_path / "forest.npz"
    assert main(["train", "--config", str(cfg), "--out", str(forest)]) == 0
    other = _cfg(tmp_path, body=SIM.replace("seed = 11", "seed = 12").replace("n_workers = 1500", "n_workers = 1600"))
    assert main(["blp", "--config", str(other), "--forest", str(forest), "--out", str(tmp_path / "b.csv")]) == 2


def test_report_histogram_and_marker(tmp_path):
    data = tmp_path / "d.csv"
    rng = np.random.default_rng(0)
    data.write_text("a,b\n" + "\n".join(f"{u},{-u}" for u in rng.uniform(size=200)) + "\n")
    out = tmp_path / "h"
    assert main(["report", "--input", str(data), "--column", "a", "--bins", "12", "--marker", "mean", "--out", str(out)]) == 0
    svg = (tmp_path / "h.svg").read_text()
    assert svg.count('class="bar"') == 12 and svg.count('class="marker"') == 1
    assert sum(int(r[2]) for r in _rows(tmp_path / "h.csv")[1:]) == 200
    assert main(["report", "--input", str(data), "--correlation", "a,b", "--out", str(tmp_path / "c.csv")]) == 0
    assert float(_rows(tmp_path / "c.csv")[1][2]) == pytest.approx(-1.0)
    assert main(["report", "--input", str(data), "--column", "zzz", "--out", str(out)]) == 2


def test_histogram_and_correlation_examples():
    counts, _ = histogram(np.full(50, 2.0), 10)
    assert np.count_nonzero(counts) == 1
    assert 'class="marker"' not in render_svg(counts, np.linspace(0, 1, 11))
    x = np.random.default_rng(1).normal(size=100_000)
    y = np.random.default_rng(2).normal(size=100_000)
    r = correlation(np.column_stack([x, x, -x, y]))
    assert r[0, 1] == 1.0 and r[0, 2] == pytest.approx(-1.0) and abs(r[0, 3]) < 0.02
    assert np.array_equal(r, r.T)
    with pytest.raises(ConfigError):
        histogram([], 10)


def test_pipeline_bundle(tmp_path):
    cfg = _cfg(tmp_path, extra='[sample]\nbandwidths = [5.0, 2.5, 1.0]\n')
    out = tmp_path / "out"
    assert main(["pipeline", "--config", str(cfg), "--out", str(out)]) == 0
    tables = sorted(out.glob("*/*/blp.csv"))
    assert len(tables) == 3
    for blp_path in tables:
        rows = {r[0]: r for r in _rows(blp_path)}
        summary = json.loads((blp_path.parent / "forest.json").read_text())
        assert float(rows["(intercept)"][1]) == pytest.approx(summary["tau_bar"], abs=1e-8)
        svg = (blp_path.parent / "tau_hist.svg").read_text()
        assert svg.count('class="marker"') == 1
        for name in ("clan.csv", "propensity_hist.csv", "propensity_hist.svg", "bias_hist.csv", "correlation.csv"):
            assert (blp_path.parent / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 11 and "ability.csv" in manifest["outputs"]
    first = (out / "manifest.json").read_bytes()
    again = tmp_path / "again"
    assert main(["pipeline", "--config", str(cfg), "--out", str(again)]) == 0
    assert (again / "manifest.json").read_bytes() == first


def test_subsample_and_multiple_outcomes(tmp_path):
    extra = (
        '[schema]\noutcome = "municipal_worker"\noutcomes = ["municipal_worker", "wage"]\n'
        'treatment = "treated"\ncluster = "municipality"\nmargin = "margin"\n'
        'features = ["age", "male", "years_affiliated", "employed_lag", "government_lag", "tenure_lag"]\n'
        'keep = ["worker_id", "wage"]\n'
        '[sample.subsamples]\nprivate = "employed_lag == 1 && government_lag == 0"\n'
    )
    out = tmp_path / "out"
    assert main(["pipeline", "--config", str(_cfg(tmp_path, extra=extra)), "--out", str(out)]) == 0
    dirs = sorted(p.parent.relative_to(out).as_posix() for p in out.glob("*/*/blp.csv"))
    assert dirs == ["h5_private/municipal_worker", "h5_private/wage"]
    summary = json.loads((out / "h5_private" / "wage" / "forest.json").read_text())
    assert set(summary["dropped_features"]) == {"employed_lag", "government_lag"}
