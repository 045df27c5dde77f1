"""Synthetic close-election panels with known effects, plus brute-force oracles.

Workers live in municipalities that each carry one vote margin and one
fixed effect. Covariates follow a Gaussian copula with realistic marginals.
Treatment is Bernoulli(e(x)) row by row, so it is independent of the potential
outcomes given x. Binary outcomes are thresholded linear probabilities:

    y = 1{U < clip(mu0(x) + tau(x) * w + fe_m, 0, 1)}.

The effect surface tau(x) is evaluated on the latent standard-normal score of
its driver feature, which for ``age`` is exactly the standardized age.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .dataset import AnalysisFrame, Schema, build_frame
from .ensemble import tree_rng
from .errors import ConfigError, EstimationError
from .mincer import WagePanel

TAU_KINDS = ("constant", "threshold", "linear", "interaction")
PROPENSITY_KINDS = ("constant", "logistic")
Z_BOUND = 4.0
_STREAM = 31

# latent order of the copula
LATENTS = ("age", "education", "male", "years_affiliated", "newly_affiliated", "employed")
CORRELATION = np.array([
    [1.00, -0.20, 0.00, 0.40, -0.10, 0.10],
    [-0.20, 1.00, -0.05, 0.00, 0.00, 0.15],
    [0.00, -0.05, 1.00, 0.00, 0.00, 0.10],
    [0.40, 0.00, 0.00, 1.00, -0.30, 0.05],
    [-0.10, 0.00, 0.00, -0.30, 1.00, 0.00],
    [0.10, 0.15, 0.10, 0.05, 0.00, 1.00],
])

FEATURES = (
    "age",
    "high_school_incomplete",
    "university",
    "male",
    "years_affiliated",
    "newly_affiliated",
    "employed_lag",
    "government_lag",
    "blue_collar_lag",
    "manager_lag",
    "tenure_lag",
    "estab_size_lag",
)
OUTCOMES = ("municipal_worker", "blue_collar", "white_collar", "manager", "wage")
# outcome baselines and effect multipliers relative to municipal employment
BASELINE = {"municipal_worker": 0.239, "blue_collar": 0.096, "white_collar": 0.107, "manager": 0.035}
EFFECT_SHARE = {"municipal_worker": 1.0, "blue_collar": 0.11, "white_collar": 0.41, "manager": 0.49}


@dataclass(frozen=True)
class DgpConfig:
    n_municipalities: int = 200
    workers_per_municipality: tuple[int, int] = (50, 150)
    n_workers: int | None = None
    margin_support: float = 10.0
    propensity: str = "constant"
    propensity_value: float = 0.5
    propensity_slope: float = 0.0
    propensity_feature: str = "years_affiliated"
    tau: str = "constant"
    tau_params: tuple[float, ...] = (0.1,)
    tau_feature: str = "age"
    tau_feature2: str = "years_affiliated"
    baseline_slopes: bool = True
    municipality_fe_sd: float = 0.05
    worker_fe_sd: float = 0.7
    wage_noise_sd: float = 0.3
    wage_level: float = 7.4
    wage_effect: float = 0.3
    panel_years: int = 10
    first_year: int = 2003
    election_offset: int = 7
    treated_period_shift: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_municipalities < 1:
            raise ConfigError("n_municipalities must be >= 1")
        lo, hi = self.workers_per_municipality
        if not 1 <= lo <= hi:
            raise ConfigError("workers_per_municipality must satisfy 1 <= lo <= hi")
        if self.n_workers is not None and self.n_workers < self.n_municipalities:
            raise ConfigError("n_workers must be >= n_municipalities")
        if not self.margin_support > 0:
            raise ConfigError("margin_support must be positive")
        if self.propensity not in PROPENSITY_KINDS:
            raise ConfigError(f"propensity must be one of {', '.join(PROPENSITY_KINDS)}")
        if self.tau not in TAU_KINDS:
            raise ConfigError(f"tau must be one of {', '.join(TAU_KINDS)}")
        for name in (self.tau_feature, self.tau_feature2, self.propensity_feature):
            if name not in ("age", "years_affiliated"):
                raise ConfigError(f"surface driver must be a continuous latent feature, got {name!r}")
        grid = np.linspace(-Z_BOUND, Z_BOUND, 801)
        e = self.propensity_surface(grid)
        if not (e.min() >= 0.05 and e.max() <= 0.95):
            raise ConfigError(f"propensity leaves [0.05, 0.95] over the feature support ({e.min():.3f}, {e.max():.3f})")
        t = self.tau_surface(grid, grid)
        if not np.all(np.isfinite(t)):
            raise ConfigError("tau surface is not finite")
        if min(self.municipality_fe_sd, self.worker_fe_sd, self.wage_noise_sd) < 0:
            raise ConfigError("standard deviations must be non-negative")
        if self.panel_years < 2 or not 0 < self.election_offset < self.panel_years:
            raise ConfigError("election_offset must fall strictly inside the panel years")

    def propensity_surface(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.propensity == "constant":
            return np.full(z.shape, self.propensity_value)
        p = self.propensity_value
        if not 0 < p < 1:
            return np.full(z.shape, np.nan)
        return 1.0 / (1.0 + np.exp(-(math.log(p / (1 - p)) + self.propensity_slope * z)))

    def tau_surface(self, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
        z1 = np.asarray(z1, dtype=np.float64)
        p = tuple(self.tau_params) + (0.0, 0.0)
        if self.tau == "constant":
            return np.full(z1.shape, float(p[0]))
        if self.tau == "threshold":
            return p[0] + p[1] * (z1 > 0)
        if self.tau == "linear":
            return p[0] + p[1] * z1
        return p[0] + p[1] * ((z1 > 0) & (np.asarray(z2) > 0))


@dataclass
class SynthTruth:
    tau: np.ndarray
    mu0: np.ndarray
    e: np.ndarray
    municipality_margin: np.ndarray
    municipality_fe: np.ndarray
    worker_ability: np.ndarray
    latent: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, len(LATENTS))))

    def take(self, idx: np.ndarray) -> "SynthTruth":
        return replace(
            self,
            tau=self.tau[idx],
            mu0=self.mu0[idx],
            e=self.e[idx],
            worker_ability=self.worker_ability[idx],
            latent=self.latent[idx],
        )


def default_schema(outcome: str = "municipal_worker") -> Schema:
    keep = ("worker_id", *(o for o in OUTCOMES if o != outcome))
    return Schema(outcome, "treated", "municipality", "margin", FEATURES, keep=keep)


def _municipality_sizes(cfg: DgpConfig, rng: np.random.Generator) -> np.ndarray:
    G = cfg.n_municipalities
    if cfg.n_workers is not None:
        sizes = np.full(G, cfg.n_workers // G, dtype=np.int64)
        sizes[: cfg.n_workers % G] += 1
        return sizes
    lo, hi = cfg.workers_per_municipality
    return rng.integers(lo, hi + 1, size=G)


def _features(z: np.ndarray, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n = z.shape[0]
    u = stats.norm.cdf(z)
    age = 41.275 + 11.347 * z[:, 0]
    q_hs = stats.norm.ppf(0.420)
    q_uni = stats.norm.ppf(1 - 0.192)
    years = stats.gamma.ppf(u[:, 3], a=(8.458 / 6.388) ** 2, scale=6.388**2 / 8.458)
    employed = (z[:, 5] < stats.norm.ppf(0.473)).astype(np.float64)
    v = rng.uniform(size=(n, 4))
    # roles within the lagged employment block
    gov = employed * (v[:, 0] < 0.234 / 0.473)
    blue = employed * (v[:, 1] < 0.269 / 0.473)
    manager = employed * (1 - blue) * (v[:, 1] > 1 - 0.045 / 0.473)
    tenure = employed * rng.gamma(shape=0.6, scale=3.474 / 0.473 / 0.6, size=n)
    size = employed * rng.gamma(shape=1.2, scale=2.797 / 0.473 / 1.2, size=n)
    return {
        "age": age,
        "high_school_incomplete": (z[:, 1] < q_hs).astype(np.float64),
        "university": (z[:, 1] > q_uni).astype(np.float64),
        "male": (z[:, 2] < stats.norm.ppf(0.654)).astype(np.float64),
        "years_affiliated": years,
        "newly_affiliated": (z[:, 4] > stats.norm.ppf(1 - 0.056)).astype(np.float64),
        "employed_lag": employed,
        "government_lag": gov,
        "blue_collar_lag": blue,
        "manager_lag": manager,
        "tenure_lag": tenure,
        "estab_size_lag": size,
    }


def _baseline(cfg: DgpConfig, outcome: str, feats: dict[str, np.ndarray], z: np.ndarray) -> np.ndarray:
    base = np.full(z.shape[0], BASELINE[outcome])
    if cfg.baseline_slopes:
        share = BASELINE[outcome] / BASELINE["municipal_worker"]
        base = base + share * (0.08 * (feats["government_lag"] - 0.234) - 0.03 * z[:, 0] + 0.02 * z[:, 3])
    return np.clip(base, 0.0, 1.0)


def generate(cfg: DgpConfig) -> tuple[AnalysisFrame, WagePanel, SynthTruth]:
    """Draw one synthetic sample; bit-identical for a fixed config."""
    rng_m = tree_rng(cfg.seed, _STREAM, 0)
    rng_x = tree_rng(cfg.seed, _STREAM, 1)
    rng_w = tree_rng(cfg.seed, _STREAM, 2)
    rng_y = tree_rng(cfg.seed, _STREAM, 3)
    rng_p = tree_rng(cfg.seed, _STREAM, 4)

    G = cfg.n_municipalities
    sizes = _municipality_sizes(cfg, rng_m)
    margin_m = rng_m.uniform(-cfg.margin_support, cfg.margin_support, size=G)
    fe_m = rng_m.normal(0.0, cfg.municipality_fe_sd, size=G)
    muni = np.repeat(np.arange(G), sizes)
    n = muni.shape[0]

    chol = np.linalg.cholesky(CORRELATION)
    z = np.clip(rng_x.standard_normal((n, len(LATENTS))) @ chol.T, -Z_BOUND, Z_BOUND)
    feats = _features(z, rng_x)
    ability = rng_x.normal(0.0, cfg.worker_fe_sd, size=n)

    zi = {"age": z[:, 0], "years_affiliated": z[:, 3]}
    e = cfg.propensity_surface(zi[cfg.propensity_feature])
    w = (rng_w.uniform(size=n) < e).astype(np.int64)
    tau = cfg.tau_surface(zi[cfg.tau_feature], zi[cfg.tau_feature2])

    outcomes = {}
    mu0_main = None
    for name in ("municipal_worker", "blue_collar", "white_collar", "manager"):
        mu0 = _baseline(cfg, name, feats, z)
        if name == "municipal_worker":
            mu0_main = mu0
        p = np.clip(mu0 + EFFECT_SHARE[name] * tau * w + fe_m[muni], 0.0, 1.0)
        outcomes[name] = (rng_y.uniform(size=n) < p).astype(np.float64)
    log_wage = cfg.wage_level + ability + cfg.wage_effect * w + rng_y.normal(0.0, cfg.wage_noise_sd, size=n)
    outcomes["wage"] = np.arcsinh(outcomes["municipal_worker"] * np.exp(log_wage))

    data = {
        "worker_id": np.arange(n, dtype=np.int64),
        "municipality": muni,
        "margin": margin_m[muni],
        "treated": w,
        **outcomes,
        **feats,
    }
    frame = build_frame(data, default_schema())
    panel = _panel(cfg, feats["age"], ability, w, rng_p)
    truth = SynthTruth(tau=tau, mu0=mu0_main, e=e, municipality_margin=margin_m, municipality_fe=fe_m,
                       worker_ability=ability, latent=z)
    return frame, panel, truth


def _panel(cfg: DgpConfig, age: np.ndarray, ability: np.ndarray, w: np.ndarray, rng: np.random.Generator) -> WagePanel:
    n = age.shape[0]
    T = cfg.panel_years
    t = np.tile(np.arange(T), n)
    wid = np.repeat(np.arange(n, dtype=np.int64), T)
    # the frame records age in the election year
    a = np.repeat(age, T) + (t - cfg.election_offset)
    za = (a - 40.0) / 10.0
    year_fe = rng.normal(0.0, 0.05, size=T)
    treated = (np.repeat(w, T) == 1) & (t >= cfg.election_offset)
    log_wage = (
        cfg.wage_level
        + np.repeat(ability, T)
        + year_fe[t]
        + 0.15 * za
        - 0.06 * za**2
        + cfg.treated_period_shift * treated
        + rng.normal(0.0, cfg.wage_noise_sd, size=n * T)
    )
    return WagePanel(
        worker_id=wid,
        year=cfg.first_year + t,
        log_wage=log_wage,
        age=a,
        controls=np.zeros((n * T, 0)),
        control_names=(),
        treated_period=treated.astype(np.int64),
        in_pretreatment=(t < cfg.election_offset).astype(np.int64),
    )


def write_truth(truth: SynthTruth, path) -> None:
    import pandas as pd

    df = pd.DataFrame({
        "worker_id": np.arange(truth.tau.shape[0]),
        "tau": truth.tau,
        "mu0": truth.mu0,
        "e": truth.e,
        "ability": truth.worker_ability,
    })
    df.to_csv(path, index=False, lineterminator="\n")


def oracle_cate_small(
    frame: AnalysisFrame,
    partition: np.ndarray,
    y_tilde: np.ndarray,
    w_tilde: np.ndarray,
) -> dict[int, float]:
    """Per-leaf sum(Yt*Wt) / sum(Wt^2) by plain summation."""
    if frame.rows > 500:
        raise ConfigError("oracle_cate_small is limited to 500 rows")
    num: dict[int, float] = {}
    den: dict[int, float] = {}
    for leaf, yt, wt in zip(np.asarray(partition).tolist(), list(y_tilde), list(w_tilde)):
        num[leaf] = num.get(leaf, 0.0) + float(yt) * float(wt)
        den[leaf] = den.get(leaf, 0.0) + float(wt) * float(wt)
    out = {}
    for leaf in sorted(num):
        if den[leaf] < 1e-12:
            raise EstimationError(f"leaf {leaf} has no treatment variation")
        out[leaf] = num[leaf] / den[leaf]
    return out


def oracle_ols(X, y, weights=None) -> list[float]:
    """Weighted normal equations solved by Gauss-Jordan elimination with partial pivoting."""
    X = [[float(v) for v in row] for row in np.asarray(X)]
    y = [float(v) for v in np.asarray(y)]
    n, k = len(X), len(X[0])
    if n > 200 or k > 5:
        raise ConfigError("oracle_ols is limited to 200 x 5 designs")
    w = [1.0] * n if weights is None else [float(v) for v in np.asarray(weights)]
    A = [[sum(w[i] * X[i][a] * X[i][b] for i in range(n)) for b in range(k)] for a in range(k)]
    c = [sum(w[i] * X[i][a] * y[i] for i in range(n)) for a in range(k)]
    M = [A[r] + [c[r]] for r in range(k)]
    for col in range(k):
        piv = max(range(col, k), key=lambda r: abs(M[r][col]))
        if abs(M[piv][col]) < 1e-14:
            raise EstimationError("design is not of full column rank")
        M[col], M[piv] = M[piv], M[col]
        for r in range(k):
            if r != col:
                f = M[r][col] / M[col][col]
                M[r] = [a - f * b for a, b in zip(M[r], M[col])]
    return [M[r][k] / M[r][r] for r in range(k)]
