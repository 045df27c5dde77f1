import numpy as np
import pytest

from conftest import make_frame
from hetfx.ensemble import ForestParams
from hetfx.errors import EstimationError
from hetfx.nuisance import (
    bias,
    bias_formula,
    center,
    fit_conditional_means,
    fit_regression_forest,
    predict_oob,
    propensity_histogram,
)

FAST = ForestParams(num_trees=50, min_leaf=5)


def test_constant_target():
    frame = make_frame(n=300, y=np.full(300, 3.0))
    model = fit_regression_forest(frame, "y", FAST, seed=1)
    assert np.all(model.predict(frame.x) == 3.0)
    assert np.all(predict_oob(model, frame) == 3.0)


def test_threshold_rule_oob_accuracy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5000, 3))
    frame = make_frame(n=5000, clusters=200, features=x, y=(x[:, 0] > 0).astype(float))
    model = fit_regression_forest(frame, "y", ForestParams(num_trees=200), seed=3)
    miss = np.mean((predict_oob(model, frame) > 0.5) != (x[:, 0] > 0))
    assert miss < 0.05


def test_seed_determinism(small_frame):
    a = fit_regression_forest(small_frame, "y", FAST, seed=42)
    b = fit_regression_forest(small_frame, "y", FAST, seed=42)
    assert np.array_equal(predict_oob(a, small_frame), predict_oob(b, small_frame))
    assert np.array_equal(a.predict(small_frame.x), b.predict(small_frame.x))


def test_two_tree_hand_trace():
    rng = np.random.default_rng(4)
    y = np.r_[rng.normal(0, 1, 20), rng.normal(5, 1, 20)]
    frame = make_frame(n=40, clusters=2, y=y)
    params = ForestParams(num_trees=2, min_leaf=40, subsample_rate=0.5)
    for seed in range(50):
        try:
            model = fit_regression_forest(frame, "y", params, seed=seed)
            break
        except EstimationError:
            continue
    oob = predict_oob(model, frame)
    codes = frame.cluster_codes
    for c in (0, 1):
        other = frame.y[codes == 1 - c].mean()
        assert np.allclose(oob[codes == c], other, atol=1e-12)


def test_fewer_than_two_clusters():
    frame = make_frame(n=20, clusters=1)
    with pytest.raises(EstimationError):
        fit_regression_forest(frame, "y", FAST)


def test_oob_error_not_below_in_sample(small_frame):
    model = fit_regression_forest(small_frame, "y", FAST, seed=2)
    mse_in = np.mean((model.predict(small_frame.x) - small_frame.y) ** 2)
    mse_oob = np.mean((predict_oob(model, small_frame) - small_frame.y) ** 2)
    assert mse_oob >= mse_in


def test_perfect_fit_gives_zero_residual():
    frame = make_frame(n=200, y=np.full(200, 1.5))
    cs = center(frame, fit_regression_forest(frame, "y", FAST), fit_regression_forest(frame, "w", FAST))
    assert np.max(np.abs(cs.y_tilde)) < 1e-12


def test_independent_treatment_propensity_mean():
    rng = np.random.default_rng(9)
    n = 100_000
    frame = make_frame(n=n, clusters=500, w=rng.integers(0, 2, size=n), seed=9)
    model = fit_regression_forest(frame, "w", ForestParams(num_trees=30, min_leaf=200), seed=1)
    assert abs(np.mean(predict_oob(model, frame)) - 0.5) <= 0.01


def test_bias_formula_examples():
    assert bias_formula(0.5, 0.5, 3.0, -2.0) == 0.0
    assert bias_formula(0.6, 0.5, 1.0, 2.0) == pytest.approx(0.15, abs=1e-12)


def test_bias_scaled_needs_outcome_variance():
    frame = make_frame(n=200, y=np.zeros(200))
    means = fit_conditional_means(frame, FAST)
    with pytest.raises(EstimationError):
        bias(frame, means, np.full(200, 0.5))
    assert np.all(bias(frame, means, np.full(200, 0.5), scale=False).b == 0)


def test_histogram_single_bin():
    h = propensity_histogram(np.full(1000, 0.5), bins=10)
    assert h.counts.sum() == 1000 and np.count_nonzero(h.counts) == 1


def test_histogram_uniform_bounds():
    n = 100_000
    h = propensity_histogram(np.random.default_rng(1).uniform(size=n), bins=10)
    assert np.all(np.abs(h.counts - n / 10) <= 3 * np.sqrt(n * 0.1 * 0.9))
    assert np.allclose(h.bin_lo, np.arange(10) / 10)
