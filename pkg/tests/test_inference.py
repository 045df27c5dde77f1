import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_frame
from hetfx.causal_forest import CateEstimate
from hetfx.dataset import Schema, build_frame, standardize
from hetfx.errors import ConfigError, DomainError, EstimationError
from hetfx.inference import blp, clan, quartiles, rescale_dummy, weighted_mean_tau, write_blp_csv, write_clan_csv
from hetfx.linreg import wls
from hetfx.synth import oracle_ols


def _cate(tau):
    tau = np.asarray(tau, dtype=np.float64)
    return CateEstimate(tau, np.full(tau.shape, 0.01), float(tau.mean()), np.full(tau.shape, 1e-4))


def test_rescale_dummy_examples():
    assert rescale_dummy(0.1, 0.05, 0.5) == (0.2, 0.1)
    b, se = rescale_dummy(0.3, 0.07, 0.5)
    assert se / 0.07 == 2.0
    for p in (0.0, 1.0, 1.5):
        with pytest.raises(DomainError):
            rescale_dummy(0.1, 0.1, p)


@settings(max_examples=300)
@given(st.floats(-10, 10, allow_nan=False), st.floats(0.001, 0.999))
def test_rescale_round_trip(beta, p):
    back = rescale_dummy(beta, 1.0, p)[0] * np.sqrt(p * (1 - p))
    assert abs(back - beta) <= 1e-15 * max(1.0, abs(beta))


def test_constant_tau_blp(small_frame):
    res = blp(small_frame, _cate(np.full(200, 0.7)), np.full(200, 0.5))
    assert res.ate == pytest.approx(0.7, abs=1e-10)
    assert all(abs(t.estimate) <= 1e-10 for t in res.terms)


@pytest.mark.parametrize("seed", range(5))
def test_unweighted_blp_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    frame = make_frame(n=50, d=3, clusters=10, seed=seed)
    tau = rng.normal(size=50)
    res = blp(frame, _cate(tau), weights="none")
    ref = oracle_ols(np.column_stack([np.ones(50), frame.x - frame.x.mean(axis=0)]), tau)
    assert np.allclose([res.ate, *(t.estimate for t in res.terms)], ref, atol=1e-9)


def test_weighted_blp_matches_oracle():
    rng = np.random.default_rng(3)
    frame = make_frame(n=80, d=2, clusters=10, seed=3)
    tau = rng.normal(size=80)
    e = rng.uniform(0.2, 0.8, size=80)
    w = e * (1 - e)
    res = blp(frame, _cate(tau), e, weights="balanced")
    X = frame.x - (w @ frame.x) / w.sum()
    ref = oracle_ols(np.column_stack([np.ones(80), X]), tau, w)
    assert np.allclose([res.ate, *(t.estimate for t in res.terms)], ref, atol=1e-9)
    assert res.ate == pytest.approx(weighted_mean_tau(_cate(tau), e, "balanced"), abs=1e-12)


def test_known_linear_recovery():
    frame = make_frame(n=60, d=2, clusters=12, seed=1)
    tau = 0.3 + 2.0 * frame.x[:, 0] - 1.0 * frame.x[:, 1]
    res = blp(frame, _cate(tau), weights="none")
    assert res.term("x1").estimate == pytest.approx(2.0, abs=1e-10)
    assert res.term("x2").estimate == pytest.approx(-1.0, abs=1e-10)


def test_identity_design():
    fit = wls(np.eye(4), np.array([1.0, 2.0, 3.0, 4.0]))
    assert np.allclose(fit.coef, [1, 2, 3, 4], atol=1e-12)


def test_singleton_clusters_equal_hc1():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(40), rng.normal(size=40)])
    y = rng.normal(size=40)
    a = wls(X, y, clusters=np.arange(40))
    b = wls(X, y)
    assert np.allclose(a.se, b.se, rtol=1e-12)


def test_rank_deficient_names_columns():
    X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(EstimationError, match=r"column\(s\): c$"):
        wls(X, np.arange(10.0), names=["a", "b", "c"])


def test_dummy_terms_rescaled_after_standardizing():
    rng = np.random.default_rng(4)
    n = 400
    d = (rng.uniform(size=n) < 0.3).astype(float)
    data = {"y": rng.normal(size=n), "w": np.arange(n) % 2, "g": np.arange(n) % 20, "m": (np.arange(n) % 20).astype(float),
            "d": d, "c": rng.normal(size=n)}
    frame = standardize(build_frame(data, Schema("y", "w", "g", "m", ("d", "c"))))
    tau = 0.1 + 0.2 * d
    res = blp(frame, _cate(tau), weights="none")
    term = res.term("d")
    assert term.is_dummy and term.rescaled
    assert term.estimate == pytest.approx(0.2, abs=1e-10)
    assert res.standardized["d"][0] == pytest.approx(0.2 * frame.meta("d").sd, abs=1e-10)


def test_fixed_effects_absorb(small_frame):
    tau = np.asarray(small_frame.cluster, dtype=float) * 0.1 + small_frame.x[:, 0]
    res = blp(small_frame, _cate(tau), weights="none", absorb=small_frame.cluster)
    assert res.fixed_effects
    assert res.term("x1").estimate == pytest.approx(1.0, abs=1e-10)


def test_unknown_weight_mode(small_frame):
    with pytest.raises(ConfigError):
        blp(small_frame, _cate(np.zeros(200)), weights="bogus")


def test_quartiles_of_one_to_eight():
    q = quartiles(np.arange(1, 9))
    assert np.flatnonzero(q == 4).tolist() == [6, 7]
    assert np.flatnonzero(q == 1).tolist() == [0, 1]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=8, max_size=80), st.floats(0.1, 10))
def test_quartiles_invariant_to_increasing_maps(tau, scale):
    tau = np.asarray(tau)
    mapped = np.exp(tau / 100) * scale
    if np.unique(mapped).size == np.unique(tau).size:
        assert np.array_equal(quartiles(tau), quartiles(mapped))


def test_all_equal_tau_gives_equal_groups():
    rng = np.random.default_rng(5)
    x = np.repeat(rng.normal(size=(1, 2)), 40, axis=0)
    frame = make_frame(n=40, d=2, clusters=5, features=x)
    perm = rng.permutation(40)
    shuffled = frame.take(perm)
    order = np.argsort(np.zeros(40), kind="stable")
    res = clan(shuffled.take(order), _cate(np.zeros(40)))
    for name, (m4, _, m1, _) in res.table.items():
        assert abs(m4 - m1) <= 1e-10, name
    # brute force: stable sort of equal keys keeps row order
    assert res.rows(1).tolist() == list(range(10)) and res.rows(4).tolist() == list(range(30, 40))


def test_clan_extra_rows_and_raw_units(small_frame):
    frame = standardize(small_frame)
    tau = frame.column("x1")
    res = clan(frame, _cate(tau), e_hat=np.full(200, 0.5), y_hat=np.zeros(200), bias=np.zeros(200))
    assert {"propensity_score", "predicted_outcome", "treatment_effect", "bias"} <= set(res.table)
    raw = small_frame.column("x1")
    top = raw[res.rows(4)]
    assert res.table["x1"][0] == pytest.approx(top.mean())
    assert res.tau_q4[0] > res.tau_q1[0]
    with pytest.raises(EstimationError):
        clan(make_frame(n=6, clusters=3), _cate(np.zeros(6)))


def test_table_writers(tmp_path, small_frame):
    res = blp(small_frame, _cate(small_frame.x[:, 0]), np.full(200, 0.5))
    write_blp_csv(res, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0].startswith("term,estimate,se") and lines[1].startswith("(intercept),")
    assert lines[-1].startswith("N,200")
    write_clan_csv(clan(small_frame, _cate(small_frame.x[:, 0])), tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == (
        "variable,most_affected_mean,most_affected_sd,least_affected_mean,least_affected_sd"
    )
