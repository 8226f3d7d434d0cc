"""Orthogonal-score estimation of the treatment coefficient.

The partially linear model Y = T*beta + g(X) + U, T = m(X) + V is
estimated by cross-fitting: nuisance regressions are trained on each
fold's complement, scores are evaluated on the fold, and the estimating
equation mean(psi) = 0 is solved either per fold and averaged (DML1) or
pooled (DML2).  Scores are linear in beta, psi = psi_a*beta + psi_b, so
every solve is a ratio of means.  The variance estimator is the
sandwich mean(psi^2) / j_hat^2 with j_hat the pooled mean of psi_a.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .errors import (
    DegenerateAggregate,
    DegenerateFold,
    DegenerateJacobian,
    DimensionMismatch,
    FoldTooSmall,
    InvalidAlpha,
    InvalidConfig,
)
from .learners import fit
from .support_points import FoldPlan

SCORE_PARTIALLING_OUT = "partialling_out"
SCORE_IV_TYPE = "iv_type"
ALG_DML1 = "dml1"
ALG_DML2 = "dml2"

DEGENERACY_EPS = 1e-12


@dataclass(frozen=True)
class NuisanceFit:
    """Out-of-fold nuisance predictions for one evaluation fold.

    ``ell_hat`` holds E[Y|X] predictions for the partialling-out score;
    ``g_hat`` holds g(X) predictions for the IV-type score.
    """

    m_hat: np.ndarray
    fold_id: int
    ell_hat: Optional[np.ndarray] = None
    g_hat: Optional[np.ndarray] = None


@dataclass(frozen=True)
class DmlEstimate:
    beta: float
    sigma_hat: float
    n_total: int
    k: int
    algorithm: str
    score: str
    ci: tuple  # (lo, hi, alpha)
    j_hat: float
    per_fold_beta: Optional[np.ndarray] = None

    @property
    def se(self) -> float:
        return self.sigma_hat / np.sqrt(self.n_total)


def score_components(y, t, nuis: NuisanceFit, kind: str, beta: float):
    """Evaluate (psi_a, psi_b, psi) elementwise; psi = psi_a*beta + psi_b."""
    y = np.asarray(y, dtype=float).reshape(-1)
    t = np.asarray(t, dtype=float).reshape(-1)
    m_hat = np.asarray(nuis.m_hat, dtype=float).reshape(-1)
    if not len(y) == len(t) == len(m_hat):
        raise DimensionMismatch("y, t, and nuisance predictions must align")
    t_res = t - m_hat
    if kind == SCORE_PARTIALLING_OUT:
        if nuis.ell_hat is None:
            raise InvalidConfig("partialling-out score needs ell_hat")
        y_res = y - np.asarray(nuis.ell_hat, dtype=float).reshape(-1)
        if len(y_res) != len(y):
            raise DimensionMismatch("ell_hat length mismatch")
        psi_a = -t_res ** 2
        psi_b = y_res * t_res
    elif kind == SCORE_IV_TYPE:
        if nuis.g_hat is None:
            raise InvalidConfig("iv-type score needs g_hat")
        g_hat = np.asarray(nuis.g_hat, dtype=float).reshape(-1)
        if len(g_hat) != len(y):
            raise DimensionMismatch("g_hat length mismatch")
        psi_a = -t * t_res
        psi_b = (y - g_hat) * t_res
    else:
        raise InvalidConfig(f"unknown score kind {kind!r}")
    psi = psi_a * beta + psi_b
    return psi_a, psi_b, psi


def fit_nuisances_crossfit(
    d: Dataset, plan: FoldPlan, spec_m, spec_ell, kind: str
) -> List[NuisanceFit]:
    """Train nuisance learners on each fold's complement, predict the fold.

    The IV-type score needs g(X) = E[Y - T*beta | X], which itself
    involves beta, so it is built in two passes: partialling-out
    nuisances first, a preliminary pooled beta from them, then
    g_hat = ell_hat - beta_prelim * m_hat on every fold.
    """
    if kind not in (SCORE_PARTIALLING_OUT, SCORE_IV_TYPE):
        raise InvalidConfig(f"unknown score kind {kind!r}")
    fits = []
    for k, fold in enumerate(plan.folds):
        comp = plan.complement(k)
        if len(comp) < 2:
            raise FoldTooSmall(
                f"fold {k}: complement has {len(comp)} rows, need at least 2"
            )
        m_model = fit(spec_m, d.x[comp], d.t[comp])
        ell_model = fit(spec_ell, d.x[comp], d.y[comp])
        m_hat = m_model.predict(d.x[fold])
        ell_hat = ell_model.predict(d.x[fold])
        fits.append(NuisanceFit(m_hat=m_hat, ell_hat=ell_hat, fold_id=k))
    if kind == SCORE_PARTIALLING_OUT:
        return fits
    means_a, means_b = _per_fold_means(d, plan, fits, SCORE_PARTIALLING_OUT)
    pooled_a = means_a.mean()
    if abs(pooled_a) <= DEGENERACY_EPS:
        raise DegenerateAggregate("no treatment variation after residualization")
    beta_prelim = -means_b.mean() / pooled_a
    return [
        NuisanceFit(
            m_hat=f.m_hat,
            g_hat=f.ell_hat - beta_prelim * f.m_hat,
            fold_id=f.fold_id,
        )
        for f in fits
    ]


def _check_plan_nuisances(d: Dataset, plan: FoldPlan, nuis: List[NuisanceFit]):
    if len(nuis) != plan.k:
        raise DimensionMismatch(
            f"plan has {plan.k} folds but {len(nuis)} nuisance fits"
        )
    for k, (fold, f) in enumerate(zip(plan.folds, nuis)):
        if f.fold_id != k:
            raise DimensionMismatch(f"nuisance fit {k} has fold_id {f.fold_id}")
        if len(f.m_hat) != len(fold):
            raise DimensionMismatch(f"fold {k}: prediction length mismatch")


def _per_fold_means(d, plan, nuis, kind):
    """Fold means of psi_a and psi_b (psi at beta=0 gives psi_b)."""
    _check_plan_nuisances(d, plan, nuis)
    means_a = np.empty(plan.k)
    means_b = np.empty(plan.k)
    for k, fold in enumerate(plan.folds):
        psi_a, psi_b, _ = score_components(
            d.y[fold], d.t[fold], nuis[k], kind, beta=0.0
        )
        means_a[k] = psi_a.mean()
        means_b[k] = psi_b.mean()
    return means_a, means_b


def dml1_estimate(
    d: Dataset, plan: FoldPlan, nuis: List[NuisanceFit], kind: str,
    alpha: float = 0.05,
) -> DmlEstimate:
    """Solve the estimating equation per fold and average the solutions."""
    means_a, means_b = _per_fold_means(d, plan, nuis, kind)
    if np.any(np.abs(means_a) <= DEGENERACY_EPS):
        bad = int(np.argmin(np.abs(means_a)))
        raise DegenerateFold(
            f"fold {bad}: mean psi_a ~ 0, no treatment variation after "
            "residualization"
        )
    per_fold = -means_b / means_a
    beta = float(per_fold.mean())
    return _attach_inference(
        beta, d, plan, nuis, kind, ALG_DML1, alpha, per_fold_beta=per_fold
    )


def dml2_estimate(
    d: Dataset, plan: FoldPlan, nuis: List[NuisanceFit], kind: str,
    alpha: float = 0.05,
) -> DmlEstimate:
    """Solve the pooled estimating equation across folds."""
    means_a, means_b = _per_fold_means(d, plan, nuis, kind)
    pooled_a = means_a.mean()
    if abs(pooled_a) <= DEGENERACY_EPS:
        raise DegenerateAggregate(
            "pooled mean psi_a ~ 0, no treatment variation after residualization"
        )
    beta = float(-means_b.mean() / pooled_a)
    return _attach_inference(beta, d, plan, nuis, kind, ALG_DML2, alpha)


def _attach_inference(beta, d, plan, nuis, kind, algorithm, alpha,
                      per_fold_beta=None) -> DmlEstimate:
    sigma2_hat, j_hat = variance_estimate(beta, d, plan, nuis, kind)
    lo, hi = confidence_interval(beta, sigma2_hat, d.n, alpha)
    return DmlEstimate(
        beta=beta,
        sigma_hat=float(np.sqrt(sigma2_hat)),
        n_total=d.n,
        k=plan.k,
        algorithm=algorithm,
        score=kind,
        ci=(lo, hi, alpha),
        j_hat=float(j_hat),
        per_fold_beta=per_fold_beta,
    )


def variance_estimate(
    est_beta: float, d: Dataset, plan: FoldPlan, nuis: List[NuisanceFit],
    kind: str,
) -> tuple[float, float]:
    """Sandwich variance at the reported beta.

    sigma2_hat = (1/K) sum_k mean_k(psi^2) / j_hat^2 with
    j_hat = (1/K) sum_k mean_k(psi_a); scalar-parameter case.
    """
    _check_plan_nuisances(d, plan, nuis)
    mean_sq = np.empty(plan.k)
    mean_a = np.empty(plan.k)
    for k, fold in enumerate(plan.folds):
        psi_a, _, psi = score_components(
            d.y[fold], d.t[fold], nuis[k], kind, beta=est_beta
        )
        mean_sq[k] = (psi ** 2).mean()
        mean_a[k] = psi_a.mean()
    j_hat = mean_a.mean()
    if abs(j_hat) <= DEGENERACY_EPS:
        raise DegenerateJacobian("pooled mean psi_a ~ 0")
    sigma2_hat = float(mean_sq.mean() / j_hat ** 2)
    return sigma2_hat, float(j_hat)


def confidence_interval(
    beta: float, sigma2_hat: float, n_total: int, alpha: float
) -> tuple[float, float]:
    """Two-sided normal interval beta +- z_{1-alpha/2} * sqrt(sigma2/N)."""
    if not 0.0 < alpha < 1.0:
        raise InvalidAlpha(f"alpha must be in (0, 1), got {alpha}")
    if sigma2_hat < 0:
        raise InvalidConfig(f"sigma2_hat must be >= 0, got {sigma2_hat}")
    if n_total < 1:
        raise InvalidConfig(f"n_total must be >= 1, got {n_total}")
    z = norm.ppf(1.0 - alpha / 2.0)
    half = z * np.sqrt(sigma2_hat / n_total)
    return float(beta - half), float(beta + half)


def orthogonality_diagnostic(
    d: Dataset, plan: FoldPlan, nuis: List[NuisanceFit], kind: str,
    eps: float, beta: Optional[float] = None,
    direction: Optional[np.ndarray] = None,
) -> float:
    """Numerical check of first-order insensitivity to the treatment model.

    Central-difference derivative of the pooled mean score at the fitted
    beta when every fold's m_hat is shifted by r * direction; near zero
    for orthogonal scores with good nuisances, bounded away from zero for
    a naive unresidualized score on confounded data.
    """
    if not 0.0 < eps <= 0.1:
        raise InvalidConfig(f"eps must be in (0, 0.1], got {eps}")
    _check_plan_nuisances(d, plan, nuis)
    if beta is None:
        beta = dml2_estimate(d, plan, nuis, kind).beta
    if direction is None:
        direction = np.ones(d.n)
    direction = np.asarray(direction, dtype=float).reshape(-1)
    if len(direction) != d.n:
        raise DimensionMismatch("direction must have one entry per row")

    def mean_score(r: float) -> float:
        total = 0.0
        for k, fold in enumerate(plan.folds):
            f = nuis[k]
            shifted = NuisanceFit(
                m_hat=f.m_hat + r * direction[fold],
                ell_hat=f.ell_hat,
                g_hat=f.g_hat,
                fold_id=f.fold_id,
            )
            _, _, psi = score_components(
                d.y[fold], d.t[fold], shifted, kind, beta=beta
            )
            total += psi.mean()
        return total / plan.k

    return abs((mean_score(eps) - mean_score(-eps)) / (2.0 * eps))
