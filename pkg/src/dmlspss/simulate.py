"""Data-generating processes and the Monte Carlo replication harness.

Two synthetic scenarios share the partially linear structure
Y = T*beta0 + g(X) + U, T = m(X) + V with AR(1)-correlated Gaussian
covariates; they differ in the correlation decay (0.7 vs 0.5) and in
whether the disturbances U, V are correlated (0 vs 0.3).  The harness
replicates draw -> split -> cross-fit -> estimate over seeded
replications and aggregates bias, spread, mse, and coverage for one
(scenario, p, n) cell.

Reported metrics: bias = mean(beta_hat) - beta0, se = sample standard
deviation of beta_hat across replications, se_adjusted = se / sqrt(n),
mse = bias^2 + se^2.  The model-based standard error is averaged
separately as mean_model_se.
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import Dataset
from .dml import (
    ALG_DML1,
    ALG_DML2,
    SCORE_PARTIALLING_OUT,
    dml1_estimate,
    dml2_estimate,
    fit_nuisances_crossfit,
)
from .errors import InvalidConfig, InvalidRho
from .learners import (
    KernelMachine,
    Lasso,
    Mlp,
    Oracle,
    Ridge,
    SuperLearner,
)
from .support_points import SpConfig, random_kfold, spss_kfold

SCENARIO_1 = "s1"
SCENARIO_2 = "s2"
SPLIT_SPSS = "spss"
SPLIT_RANDOM = "random"

_MASK64 = (1 << 64) - 1

REPORT_COLUMNS = (
    "scenario", "p", "n", "method", "splitter", "bias", "se", "se_adjusted",
    "mse", "coverage", "mean_model_se", "wall_time_s", "reps", "master_seed",
)
_FLOAT_COLUMNS = {
    "bias", "se", "se_adjusted", "mse", "coverage", "mean_model_se",
    "wall_time_s",
}


@dataclass(frozen=True)
class ScenarioConfig:
    """One synthetic-data cell: scenario variant plus dimensions.

    ``rho`` and ``uv_corr`` default from the scenario (0.7/0.0 for s1,
    0.5/0.3 for s2).  The linear and logistic coordinates of the
    nuisance functions are 1-based; the logistic one is clamped to p.
    """

    scenario: str
    p: int
    n: int
    beta0: float = 0.5
    rho: Optional[float] = None
    uv_corr: Optional[float] = None
    linear_coord: int = 1
    logistic_coord: int = 3

    def __post_init__(self):
        if self.scenario not in (SCENARIO_1, SCENARIO_2):
            raise InvalidConfig(f"unknown scenario {self.scenario!r}")
        if self.p < 1 or self.n < 2:
            raise InvalidConfig(f"need p >= 1 and n >= 2, got p={self.p}, n={self.n}")
        if self.rho is None:
            object.__setattr__(
                self, "rho", 0.7 if self.scenario == SCENARIO_1 else 0.5
            )
        if self.uv_corr is None:
            object.__setattr__(
                self, "uv_corr", 0.0 if self.scenario == SCENARIO_1 else 0.3
            )
        if not -1.0 < self.rho < 1.0:
            raise InvalidRho(f"rho must be in (-1, 1), got {self.rho}")
        if not -1.0 < self.uv_corr < 1.0:
            raise InvalidConfig(f"uv_corr must be in (-1, 1), got {self.uv_corr}")
        object.__setattr__(
            self, "logistic_coord", min(self.logistic_coord, self.p)
        )
        if not 1 <= self.linear_coord <= self.p:
            raise InvalidConfig(f"linear_coord out of range [1, {self.p}]")
        if self.logistic_coord < 1:
            raise InvalidConfig("logistic_coord must be >= 1")


@dataclass(frozen=True)
class McConfig:
    """Full recipe for one Monte Carlo cell."""

    scenario: ScenarioConfig
    learner_m: object
    learner_ell: object
    reps: int = 500
    k: int = 2
    splitter: str = SPLIT_SPSS
    score: str = SCORE_PARTIALLING_OUT
    algorithm: str = ALG_DML2
    master_seed: int = 0
    alpha: float = 0.05
    # solver knobs for the SPSS splitter; defaults keep cells desk-scale
    sp_max_iter: int = 100
    sp_tol: float = 1e-7
    include_y: bool = True
    method_label: Optional[str] = None


@dataclass(frozen=True)
class SimulationRow:
    scenario: str
    p: int
    n: int
    method: str
    splitter: str
    bias: float
    se: float
    se_adjusted: float
    mse: float
    coverage: float
    mean_model_se: float
    wall_time_s: float
    reps: int
    master_seed: int


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix_seed(master_seed: int, index: int) -> int:
    """Avalanche mix of (master seed, index): distinct across indices."""
    return _splitmix64((master_seed & _MASK64) ^ _splitmix64(index & _MASK64))


def ar1_covariance(rho: float, p: int) -> np.ndarray:
    """AR(1) covariance with entries rho^|j-k| (unit diagonal)."""
    if not -1.0 < rho < 1.0:
        raise InvalidRho(f"rho must be in (-1, 1), got {rho}")
    if p < 1:
        raise InvalidConfig(f"p must be >= 1, got {p}")
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _truth_arrays(x: np.ndarray, cfg: ScenarioConfig):
    lin = x[:, cfg.linear_coord - 1]
    logistic = expit(x[:, cfg.logistic_coord - 1])
    g0 = logistic + 0.25 * lin
    m0 = lin + 0.25 * logistic
    return g0, m0


def nuisance_truth(x_row: np.ndarray, cfg: ScenarioConfig) -> tuple[float, float]:
    """True (g0, m0) at one covariate row."""
    x_row = np.asarray(x_row, dtype=float).reshape(1, -1)
    if x_row.shape[1] != cfg.p:
        raise InvalidConfig(f"x_row has {x_row.shape[1]} entries, expected {cfg.p}")
    g0, m0 = _truth_arrays(x_row, cfg)
    return float(g0[0]), float(m0[0])


@dataclass(frozen=True)
class TruthRecord:
    beta0: float
    g0: np.ndarray
    m0: np.ndarray


def draw_dataset(
    cfg: ScenarioConfig, seed: int, noise_scale=1.0
) -> tuple[Dataset, TruthRecord]:
    """Draw one dataset from the scenario; deterministic given the seed.

    ``noise_scale`` scales the disturbances, either one factor for both
    or a (u_scale, v_scale) pair; 0 gives the noiseless identity
    Y - g0(X) = beta0 * T used by exactness tests.
    """
    rng = np.random.default_rng(seed)
    sigma = ar1_covariance(cfg.rho, cfg.p)
    chol = np.linalg.cholesky(sigma)
    x = rng.standard_normal((cfg.n, cfg.p)) @ chol.T

    uv_cov = np.array([[1.0, cfg.uv_corr], [cfg.uv_corr, 1.0]])
    uv = rng.standard_normal((cfg.n, 2)) @ np.linalg.cholesky(uv_cov).T
    uv = uv * np.broadcast_to(np.asarray(noise_scale, dtype=float), (2,))

    g0, m0 = _truth_arrays(x, cfg)
    t = m0 + uv[:, 1]
    y = t * cfg.beta0 + g0 + uv[:, 0]
    return Dataset(y=y, t=t, x=x), TruthRecord(beta0=cfg.beta0, g0=g0, m0=m0)


def oracle_learner_specs(cfg: ScenarioConfig) -> tuple[Oracle, Oracle]:
    """Learner specs that return the true m0 and ell0 = beta0*m0 + g0.

    Plugging these into the cross-fitting harness isolates the estimator
    itself from nuisance-estimation error.
    """

    def m_fn(x):
        g0, m0 = _truth_arrays(np.asarray(x, dtype=float), cfg)
        return m0

    def ell_fn(x):
        g0, m0 = _truth_arrays(np.asarray(x, dtype=float), cfg)
        return cfg.beta0 * m0 + g0

    return Oracle(fn=m_fn), Oracle(fn=ell_fn)


def spec_label(spec) -> str:
    """Short human-readable tag for a learner spec, used in reports."""
    if isinstance(spec, Ridge):
        return "ridge"
    if isinstance(spec, Lasso):
        return "lasso"
    if isinstance(spec, KernelMachine):
        return "kernel"
    if isinstance(spec, Mlp):
        return "mlp"
    if isinstance(spec, SuperLearner):
        inner = "+".join(spec_label(c) for c in spec.candidates)
        return f"sl({inner})"
    if isinstance(spec, Oracle):
        return "oracle"
    return type(spec).__name__.lower()


def _iter_specs(spec):
    yield spec
    if isinstance(spec, SuperLearner):
        for cand in spec.candidates:
            yield cand


def _check_regularized(mc: McConfig) -> None:
    """High-dimensional cells (p >= n) must use penalized learners."""
    if mc.scenario.p < mc.scenario.n:
        return
    for spec in (*_iter_specs(mc.learner_m), *_iter_specs(mc.learner_ell)):
        if isinstance(spec, (Ridge, Lasso)) and spec.lam == 0.0:
            raise InvalidConfig(
                f"{spec_label(spec)} with lambda=0 is not allowed when "
                f"p={mc.scenario.p} >= n={mc.scenario.n}"
            )


def _run_one_rep(mc: McConfig, rep: int):
    rep_seed = mix_seed(mc.master_seed, rep)
    data_seed = mix_seed(rep_seed, 1)
    split_seed = mix_seed(rep_seed, 2)
    d, truth = draw_dataset(mc.scenario, data_seed)

    if mc.splitter == SPLIT_SPSS:
        plan = spss_kfold(
            d, mc.k,
            SpConfig(seed=split_seed, max_iter=mc.sp_max_iter, tol=mc.sp_tol),
            include_y=mc.include_y,
        )
    elif mc.splitter == SPLIT_RANDOM:
        plan = random_kfold(d.n, mc.k, split_seed)
    else:
        raise InvalidConfig(f"unknown splitter {mc.splitter!r}")

    nuis = fit_nuisances_crossfit(d, plan, mc.learner_m, mc.learner_ell, mc.score)
    estimate = dml1_estimate if mc.algorithm == ALG_DML1 else dml2_estimate
    if mc.algorithm not in (ALG_DML1, ALG_DML2):
        raise InvalidConfig(f"unknown algorithm {mc.algorithm!r}")
    est = estimate(d, plan, nuis, mc.score, alpha=mc.alpha)
    lo, hi, _ = est.ci
    covered = lo <= mc.scenario.beta0 <= hi
    return est.beta, est.se, covered


def run_monte_carlo(mc: McConfig, threads: int = 1) -> SimulationRow:
    """Replicate one cell and aggregate; bitwise independent of thread count.

    Per-replication seeds are avalanche-mixed from (master_seed, rep), so
    replications are independent tasks; the aggregation folds them in rep
    order regardless of which worker finished first.
    """
    if mc.reps < 2:
        raise InvalidConfig(f"reps must be >= 2, got {mc.reps}")
    _check_regularized(mc)
    start = time.perf_counter()

    def guarded(rep):
        try:
            return _run_one_rep(mc, rep)
        except Exception as exc:
            raise type(exc)(
                f"replication {rep} (seed {mix_seed(mc.master_seed, rep)}): {exc}"
            ) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(guarded, range(mc.reps)))
    else:
        results = [guarded(rep) for rep in range(mc.reps)]

    betas = np.array([r[0] for r in results])
    model_ses = np.array([r[1] for r in results])
    covered = np.array([r[2] for r in results], dtype=float)

    bias = float(betas.mean() - mc.scenario.beta0)
    se = float(betas.std(ddof=1))
    label = mc.method_label or (
        f"{spec_label(mc.learner_m)}|{spec_label(mc.learner_ell)}"
    )
    return SimulationRow(
        scenario=mc.scenario.scenario,
        p=mc.scenario.p,
        n=mc.scenario.n,
        method=label,
        splitter=mc.splitter,
        bias=bias,
        se=se,
        se_adjusted=float(se / np.sqrt(mc.scenario.n)),
        mse=bias * bias + se * se,
        coverage=float(covered.mean()),
        mean_model_se=float(model_ses.mean()),
        wall_time_s=time.perf_counter() - start,
        reps=mc.reps,
        master_seed=mc.master_seed,
    )


def emit_report(rows, fmt: str = "csv") -> bytes:
    """Serialize simulation rows with a stable column order.

    CSV rounds reals to 4 decimals for table reconciliation; JSON keeps
    full precision and round-trips exactly.
    """
    rows = list(rows)
    if not rows:
        raise InvalidConfig("report needs at least one row")
    if fmt == "json":
        payload = [
            {col: getattr(r, col) for col in REPORT_COLUMNS} for r in rows
        ]
        return json.dumps(payload, indent=2).encode()
    if fmt != "csv":
        raise InvalidConfig(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        record = []
        for col in REPORT_COLUMNS:
            value = getattr(r, col)
            record.append(f"{value:.4f}" if col in _FLOAT_COLUMNS else value)
        writer.writerow(record)
    return buf.getvalue().encode()
