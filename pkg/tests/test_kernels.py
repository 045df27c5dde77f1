import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import make_frame
from hetfx import kernels
from hetfx.causal_forest import fit_causal_forest, predict
from hetfx.ensemble import ForestParams
from hetfx.nuisance import center, fit_regression_forest, predict_oob

NAMES = ("grow_tree", "route", "prune_tree", "compact_tree", "predict_regression", "predict_causal")
jit = kernels.backend_module("numba")
ref = kernels.backend_module("numpy")


def _data(n=600, d=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    x[:, 1] = np.round(x[:, 1])  # ties
    w = rng.integers(0, 2, size=n)
    y = x[:, 0] * w + rng.normal(size=n)
    return x, w, y


@pytest.mark.parametrize("causal", [False, True])
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_grow_tree_parity(causal, seed):
    x, w, y = _data(seed=seed)
    rows = np.arange(0, x.shape[0], 2, dtype=np.int64)
    args = (x, rows, causal, y, (w - 0.5).astype(float), w.astype(np.int64), 5, 0.05, -1, 2, np.uint64(seed * 977))
    a = jit.grow_tree(*args)
    b = ref.grow_tree(*args)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
    assert np.array_equal(jit.route(x, rows, *a), ref.route(x, rows, *b))


def test_prune_and_compact_parity():
    x, w, y = _data(seed=5)
    rows = np.arange(x.shape[0], dtype=np.int64)
    tree = jit.grow_tree(x, rows, True, y, (w - 0.5).astype(float), w.astype(np.int64), 2, 0.0, -1, 4, np.uint64(5))
    leaf = jit.route(x, rows, *tree)
    wr = w.astype(np.int64)
    pa = jit.prune_tree(tree[2], tree[3], leaf, wr, 30)
    pb = ref.prune_tree(tree[2], tree[3], leaf, wr, 30)
    assert pa[0] == pb[0] and np.array_equal(pa[1], pb[1])
    ca = jit.compact_tree(*tree, pa[1])
    cb = ref.compact_tree(*tree, pb[1])
    for u, v in zip(ca, cb):
        assert np.array_equal(u, v)


def _fit_all():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(800, 3))
    w = rng.integers(0, 2, size=800)
    frame = make_frame(n=800, clusters=40, features=x, w=w, y=x[:, 0] * w + rng.normal(size=800))
    params = ForestParams(num_trees=20, min_leaf=10)
    ym = fit_regression_forest(frame, "y", params, seed=3)
    wm = fit_regression_forest(frame, "w", params, seed=3)
    cs = center(frame, ym, wm)
    forest = fit_causal_forest(frame, cs, ForestParams(num_trees=40, min_leaf=10, alpha=0.05), seed=3)
    est = predict(forest, x[:50])
    return predict_oob(ym, frame), predict(forest).tau, est.tau, est.variance


def test_forest_parity_across_backends(monkeypatch):
    compiled = _fit_all()
    for name in NAMES:
        monkeypatch.setattr(kernels, name, getattr(ref, name))
    fallback = _fit_all()
    for a, b in zip(compiled, fallback):
        assert np.array_equal(a, b, equal_nan=True)


def test_env_flag_selects_fallback():
    env = dict(os.environ, HETFX_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "import hetfx.kernels as k; print(k.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.backend_module("cuda")
