import numpy as np
import pytest

from hetfx.dataset import Schema, build_frame

RESULTS: list[tuple[str, bool, str]] = []


def record(label: str, ok: bool, detail: str) -> None:
    line = f"{label}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    RESULTS.append((label, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(RESULTS, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'} ({detail})")


def make_frame(n=200, d=3, clusters=20, seed=0, y=None, w=None, features=None, binary=False):
    """Small random frame with continuous features and one margin per cluster."""
    rng = np.random.default_rng(seed)
    cl = np.arange(n) % clusters
    margin = rng.uniform(-10, 10, size=clusters)[cl]
    x = rng.normal(size=(n, d)) if features is None else np.asarray(features, dtype=np.float64)
    d = x.shape[1]
    if w is None:
        w = rng.integers(0, 2, size=n)
        w[0], w[1] = 0, 1
    if y is None:
        y = rng.integers(0, 2, size=n).astype(float) if binary else rng.normal(size=n)
    names = [f"x{j + 1}" for j in range(d)]
    data = {"y": np.asarray(y, dtype=np.float64), "w": np.asarray(w), "g": cl, "m": margin}
    data.update({nm: x[:, j] for j, nm in enumerate(names)})
    return build_frame(data, Schema("y", "w", "g", "m", tuple(names)))


@pytest.fixture
def small_frame():
    return make_frame()
