"""Nuisance-function regressors behind a uniform fit/predict interface.

Four base learners (ridge, lasso, RBF kernel machine, multilayer
perceptron) plus a cross-validated super learner that either selects the
minimum-risk candidate or blends candidates with simplex-constrained
weights.  Every fit is deterministic given the spec (including its seed)
and the data; randomness never leaks from the OS or the clock.

``fit`` dispatches on the spec type via ``functools.singledispatch``, so
test code can register additional learner kinds without touching this
module.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import singledispatch
from typing import Callable, Union

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (
    DimensionMismatch,
    DmlSpssError,
    InvalidSpec,
    NonConvergence,
    SingularSystem,
)
from .data import standardize
from .support_points import SpConfig, random_kfold, spss_kfold_cloud

ACT_RELU = "relu"
ACT_TANH = "tanh"
MODE_SELECTOR = "selector"
MODE_CONVEX_WEIGHTS = "convex_weights"


# --------------------------------------------------------------------------
# specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Ridge:
    lam: float = 1.0


@dataclass(frozen=True)
class Lasso:
    lam: float = 0.1
    max_iter: int = 1000
    tol: float = 1e-7


@dataclass(frozen=True)
class SquaredLoss:
    pass


@dataclass(frozen=True)
class EpsilonInsensitiveLoss:
    epsilon: float = 0.1
    c: float = 1.0
    max_iter: int = 500


@dataclass(frozen=True)
class KernelMachine:
    """RBF kernel regressor: k(x, z) = exp(-bandwidth * ||x - z||^2)."""

    bandwidth: float = 1.0
    lam: float = 1.0
    loss: Union[SquaredLoss, EpsilonInsensitiveLoss] = SquaredLoss()


@dataclass(frozen=True)
class Mlp:
    hidden: tuple = (32, 32)
    activation: str = ACT_RELU
    step_size: float = 1e-3
    epochs: int = 200
    batch: int = 32
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))


@dataclass(frozen=True)
class SuperLearner:
    candidates: tuple = ()
    v_blocks: int = 5
    mode: str = MODE_SELECTOR
    seed: int = 0
    cv_splitter: str = "random"  # "spss" peels blocks by support points

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))


@dataclass(frozen=True)
class Oracle:
    """Known-truth regressor: predictions come from a fixed function of x.

    Used to inject true nuisance functions in simulation studies and tests.
    """

    fn: Callable[[np.ndarray], np.ndarray] = None


LearnerSpec = Union[Ridge, Lasso, KernelMachine, Mlp, SuperLearner, Oracle]


def _validate_spec(spec) -> None:
    if isinstance(spec, Ridge):
        if spec.lam < 0:
            raise InvalidSpec(f"ridge lambda must be >= 0, got {spec.lam}")
    elif isinstance(spec, Lasso):
        if spec.lam < 0 or spec.max_iter < 1 or spec.tol <= 0:
            raise InvalidSpec(f"bad lasso spec {spec}")
    elif isinstance(spec, KernelMachine):
        if spec.bandwidth <= 0 or spec.lam <= 0:
            raise InvalidSpec(f"kernel bandwidth and lambda must be > 0, got {spec}")
        if isinstance(spec.loss, EpsilonInsensitiveLoss):
            if spec.loss.epsilon < 0 or spec.loss.c <= 0 or spec.loss.max_iter < 1:
                raise InvalidSpec(f"bad epsilon-insensitive loss {spec.loss}")
        elif not isinstance(spec.loss, SquaredLoss):
            raise InvalidSpec(f"unknown kernel loss {spec.loss!r}")
    elif isinstance(spec, Mlp):
        if any(h < 1 for h in spec.hidden):
            raise InvalidSpec(f"hidden sizes must be positive, got {spec.hidden}")
        if spec.activation not in (ACT_RELU, ACT_TANH):
            raise InvalidSpec(f"unknown activation {spec.activation!r}")
        if spec.step_size <= 0 or spec.epochs < 1 or spec.batch < 1 or spec.l2 < 0:
            raise InvalidSpec(f"bad mlp spec {spec}")
    elif isinstance(spec, SuperLearner):
        if not spec.candidates:
            raise InvalidSpec("super learner needs at least one candidate")
        if any(isinstance(c, SuperLearner) for c in spec.candidates):
            raise InvalidSpec("super learner candidates may not be nested")
        if spec.v_blocks < 2:
            raise InvalidSpec(f"v_blocks must be >= 2, got {spec.v_blocks}")
        if spec.mode not in (MODE_SELECTOR, MODE_CONVEX_WEIGHTS):
            raise InvalidSpec(f"unknown super learner mode {spec.mode!r}")
        if spec.cv_splitter not in ("random", "spss"):
            raise InvalidSpec(f"unknown cv splitter {spec.cv_splitter!r}")
    elif isinstance(spec, Oracle):
        if not callable(spec.fn):
            raise InvalidSpec("oracle spec needs a callable")


def _check_xy(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.ndim != 2:
        raise DimensionMismatch("x must be a 2-d matrix")
    if x.shape[0] != len(y):
        raise DimensionMismatch(f"x has {x.shape[0]} rows, y has {len(y)}")
    if x.shape[0] < 1:
        raise InvalidSpec("need at least one training row")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidSpec("training data must be finite")
    return x, y


# --------------------------------------------------------------------------
# fitted models
# --------------------------------------------------------------------------

class FittedModel:
    """Immutable fitted predictor; subclasses implement ``_predict``."""

    spec = None
    training_dims = None  # (n, p)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise DimensionMismatch("x must be a 2-d matrix")
        if x.shape[1] != self.training_dims[1]:
            raise DimensionMismatch(
                f"model was trained with p={self.training_dims[1]}, "
                f"got p={x.shape[1]}"
            )
        return self._predict(x)

    def _predict(self, x):  # pragma: no cover - abstract
        raise NotImplementedError


def predict(model: FittedModel, x: np.ndarray) -> np.ndarray:
    """Evaluate a fitted model on new rows (p must match training)."""
    return model.predict(x)


class LinearModel(FittedModel):
    def __init__(self, spec, coef, intercept, dims):
        self.spec = spec
        self.coef = coef
        self.intercept = intercept
        self.training_dims = dims

    def _predict(self, x):
        return x @ self.coef + self.intercept


class KernelModel(FittedModel):
    def __init__(self, spec, x_train, dual_coef, dims):
        self.spec = spec
        self.x_train = x_train
        self.dual_coef = dual_coef
        self.training_dims = dims

    def _predict(self, x):
        k = _rbf_kernel(x, self.x_train, self.spec.bandwidth)
        return k @ self.dual_coef


class MlpModel(FittedModel):
    def __init__(self, spec, weights, dims, loss_trace):
        self.spec = spec
        self.weights = weights
        self.training_dims = dims
        self.loss_trace = loss_trace

    def _predict(self, x):
        return mlp_forward(self.weights, x, self.spec.activation)


class OracleModel(FittedModel):
    def __init__(self, spec, dims):
        self.spec = spec
        self.training_dims = dims

    def _predict(self, x):
        out = np.asarray(self.spec.fn(x), dtype=float).reshape(-1)
        if len(out) != x.shape[0]:
            raise DimensionMismatch("oracle function returned wrong length")
        return out


@dataclass(frozen=True)
class CvRiskReport:
    """Cross-validated risks per candidate plus the resulting weights."""

    risks: np.ndarray
    chosen: int
    weights: np.ndarray


class SuperLearnerModel(FittedModel):
    def __init__(self, spec, models, report, dims):
        self.spec = spec
        self.models = models  # fitted candidate models; None where weight is 0
        self.report = report
        self.training_dims = dims

    def _predict(self, x):
        out = np.zeros(x.shape[0])
        for w, m in zip(self.report.weights, self.models):
            if w != 0.0 and m is not None:
                out += w * m.predict(x)
        return out


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

@singledispatch
def fit(spec, x, y) -> FittedModel:
    """Fit a learner spec on (x, y) and return an immutable FittedModel."""
    raise InvalidSpec(f"unknown learner spec {spec!r}")


@fit.register
def _fit_ridge(spec: Ridge, x, y) -> LinearModel:
    _validate_spec(spec)
    x, y = _check_xy(x, y)
    n, p = x.shape
    x_mean = x.mean(axis=0)
    y_mean = y.mean()
    xc = x - x_mean
    yc = y - y_mean
    gram = xc.T @ xc
    if spec.lam == 0.0 and np.linalg.matrix_rank(xc) < p:
        raise SingularSystem("ridge with lambda=0 on a rank-deficient design")
    coef = np.linalg.solve(gram + spec.lam * np.eye(p), xc.T @ yc)
    intercept = y_mean - x_mean @ coef
    return LinearModel(spec, coef, intercept, (n, p))


def _soft_threshold(z: float, gamma: float) -> float:
    return np.sign(z) * max(abs(z) - gamma, 0.0)


@fit.register
def _fit_lasso(spec: Lasso, x, y) -> LinearModel:
    """Coordinate descent on (1/(2n))||y - Xb||^2 + lam*||b||_1.

    The intercept is unpenalized (handled by centering).  Raises
    NonConvergence, carrying the partial model, if the sweep-to-sweep
    coefficient change has not dropped below tol within max_iter sweeps.
    """
    _validate_spec(spec)
    x, y = _check_xy(x, y)
    n, p = x.shape
    x_mean = x.mean(axis=0)
    y_mean = y.mean()
    xc = x - x_mean
    yc = y - y_mean
    col_sq = (xc ** 2).sum(axis=0) / n

    coef = np.zeros(p)
    resid = yc.copy()
    converged = False
    for _ in range(spec.max_iter):
        max_delta = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            old = coef[j]
            rho = xc[:, j] @ resid / n + col_sq[j] * old
            new = _soft_threshold(rho, spec.lam) / col_sq[j]
            if new != old:
                resid -= xc[:, j] * (new - old)
                coef[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < spec.tol:
            converged = True
            break
    intercept = y_mean - x_mean @ coef
    model = LinearModel(spec, coef, intercept, (n, p))
    if not converged:
        raise NonConvergence(
            f"lasso did not converge in {spec.max_iter} sweeps", partial=model
        )
    return model


def _rbf_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-bandwidth * cdist(a, b, "sqeuclidean"))


@fit.register
def _fit_kernel(spec: KernelMachine, x, y) -> KernelModel:
    _validate_spec(spec)
    x, y = _check_xy(x, y)
    n, p = x.shape
    gram = _rbf_kernel(x, x, spec.bandwidth)
    if isinstance(spec.loss, SquaredLoss):
        # kernel ridge dual solve: alpha = (K + lam*I)^-1 y
        dual = np.linalg.solve(gram + spec.lam * np.eye(n), y)
        return KernelModel(spec, x.copy(), dual, (n, p))
    # epsilon-insensitive SVR dual in beta = alpha - alpha*:
    # min 0.5 b'Kb - y'b + eps*||b||_1 over the box [-C, C]^n,
    # solved by proximal gradient with step 1/L.
    loss = spec.loss
    lip = max(float(np.linalg.eigvalsh(gram)[-1]), 1e-12)
    beta = np.zeros(n)
    for _ in range(loss.max_iter):
        grad = gram @ beta - y
        z = beta - grad / lip
        new = np.sign(z) * np.maximum(np.abs(z) - loss.epsilon / lip, 0.0)
        new = np.clip(new, -loss.c, loss.c)
        if np.max(np.abs(new - beta)) < 1e-12:
            beta = new
            break
        beta = new
    return KernelModel(spec, x.copy(), beta, (n, p))


# --- multilayer perceptron -------------------------------------------------

def _activation(name: str):
    if name == ACT_RELU:
        return lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(float)
    if name == ACT_TANH:
        return np.tanh, lambda z: 1.0 - np.tanh(z) ** 2
    raise InvalidSpec(f"unknown activation {name!r}")


def mlp_init_weights(p: int, hidden, seed: int) -> list:
    """Seeded layer weights [(W, b), ...] with 1/sqrt(fan_in) scaling."""
    rng = np.random.default_rng(seed)
    sizes = [p, *hidden, 1]
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        weights.append((w, np.zeros(fan_out)))
    return weights


def mlp_forward(weights: list, x: np.ndarray, activation: str) -> np.ndarray:
    act, _ = _activation(activation)
    a = x
    for w, b in weights[:-1]:
        a = act(a @ w + b)
    w, b = weights[-1]
    return (a @ w + b).reshape(-1)


def mlp_loss_and_grad(weights: list, x: np.ndarray, y: np.ndarray,
                      l2: float, activation: str):
    """Batch squared loss (1/(2m))||out - y||^2 + (l2/(2m))*sum||W||^2
    and its gradient by backpropagation, in the same [(W, b), ...] layout.
    Bias terms are unpenalized.
    """
    act, act_deriv = _activation(activation)
    m = x.shape[0]
    acts = [x]
    zs = []
    a = x
    for w, b in weights[:-1]:
        z = a @ w + b
        zs.append(z)
        a = act(z)
        acts.append(a)
    w_last, b_last = weights[-1]
    out = (a @ w_last + b_last).reshape(-1)

    resid = out - y
    loss = (resid @ resid) / (2.0 * m)
    loss += l2 / (2.0 * m) * sum(float((w ** 2).sum()) for w, _ in weights)

    grads = [None] * len(weights)
    delta = resid[:, None] / m
    grads[-1] = (acts[-1].T @ delta + (l2 / m) * w_last, delta.sum(axis=0))
    for layer in range(len(weights) - 2, -1, -1):
        w_next = weights[layer + 1][0]
        delta = (delta @ w_next.T) * act_deriv(zs[layer])
        grads[layer] = (
            acts[layer].T @ delta + (l2 / m) * weights[layer][0],
            delta.sum(axis=0),
        )
    return loss, grads


@fit.register
def _fit_mlp(spec: Mlp, x, y) -> MlpModel:
    """Mini-batch SGD on the squared loss; fully determined by spec.seed."""
    _validate_spec(spec)
    x, y = _check_xy(x, y)
    n, p = x.shape
    rng = np.random.default_rng(spec.seed)
    weights = mlp_init_weights(p, spec.hidden, spec.seed + 1)

    loss_trace = []
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch):
            batch = order[start:start + spec.batch]
            _, grads = mlp_loss_and_grad(
                weights, x[batch], y[batch], spec.l2, spec.activation
            )
            weights = [
                (w - spec.step_size * gw, b - spec.step_size * gb)
                for (w, b), (gw, gb) in zip(weights, grads)
            ]
        epoch_loss, _ = mlp_loss_and_grad(weights, x, y, spec.l2, spec.activation)
        if not np.isfinite(epoch_loss):
            raise NonConvergence(
                "mlp training diverged (non-finite loss)",
                partial=MlpModel(spec, weights, (n, p), np.array(loss_trace)),
            )
        loss_trace.append(epoch_loss)
    return MlpModel(spec, weights, (n, p), np.array(loss_trace))


@fit.register
def _fit_oracle(spec: Oracle, x, y) -> OracleModel:
    _validate_spec(spec)
    x, y = _check_xy(x, y)
    return OracleModel(spec, x.shape)


# --- super learner ---------------------------------------------------------

def _oof_predictions(spec, x, y, plan):
    """Out-of-fold predictions and per-block MSEs for one candidate."""
    n = x.shape[0]
    preds = np.empty(n)
    block_mses = []
    for k, fold in enumerate(plan.folds):
        comp = plan.complement(k)
        model = fit(spec, x[comp], y[comp])
        p_k = model.predict(x[fold])
        preds[fold] = p_k
        block_mses.append(float(np.mean((p_k - y[fold]) ** 2)))
    return preds, block_mses


def cv_risk(spec, x, y, v_blocks: int, seed: int) -> float:
    """Cross-validated risk: mean over blocks of the validation MSE,
    each block's model trained on the block's complement."""
    x, y = _check_xy(x, y)
    n = x.shape[0]
    if not 2 <= v_blocks <= n:
        raise InvalidSpec(f"need 2 <= v_blocks <= n, got {v_blocks} with n={n}")
    plan = random_kfold(n, v_blocks, seed)
    _, block_mses = _oof_predictions(spec, x, y, plan)
    return float(np.mean(block_mses))


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, len(v) + 1)
    rho = np.nonzero(u * idx > (css - 1.0))[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _simplex_least_squares(p_mat: np.ndarray, y: np.ndarray,
                           tol: float = 1e-8, max_iter: int = 20000) -> np.ndarray:
    """Projected gradient for min ||y - Pw||^2 over the probability simplex.

    Starts at the best single column, so the solution is never worse than
    any individual candidate.
    """
    k = p_mat.shape[1]
    sses = ((y[:, None] - p_mat) ** 2).sum(axis=0)
    w = np.zeros(k)
    w[int(np.argmin(sses))] = 1.0
    gram = p_mat.T @ p_mat
    lip = max(float(np.linalg.eigvalsh(gram)[-1]), 1e-12)
    pty = p_mat.T @ y
    for _ in range(max_iter):
        grad = gram @ w - pty
        new = _project_simplex(w - grad / lip)
        if np.max(np.abs(new - w)) < tol:
            return new
        w = new
    return w


@fit.register
def _fit_super_learner(spec: SuperLearner, x, y) -> SuperLearnerModel:
    """Cross-validated ensemble over the candidate specs.

    Selector mode refits the minimum-risk candidate on all data (ties go
    to the lowest index).  Convex-weights mode solves the simplex-
    constrained least squares of y on out-of-fold candidate predictions
    and blends full-data refits.  A candidate whose fit raises is assigned
    infinite risk instead of aborting the ensemble.
    """
    _validate_spec(spec)
    x, y = _check_xy(x, y)
    n = x.shape[0]
    if n < spec.v_blocks:
        raise InvalidSpec(f"need n >= v_blocks, got n={n}, v_blocks={spec.v_blocks}")
    if spec.cv_splitter == "spss":
        cloud, _ = standardize(np.hstack([x, y[:, None]]))
        plan = spss_kfold_cloud(cloud, spec.v_blocks, SpConfig(seed=spec.seed))
    else:
        plan = random_kfold(n, spec.v_blocks, spec.seed)

    n_cand = len(spec.candidates)
    risks = np.full(n_cand, np.inf)
    oof = [None] * n_cand
    for i, cand in enumerate(spec.candidates):
        try:
            preds, block_mses = _oof_predictions(cand, x, y, plan)
        except (DmlSpssError, np.linalg.LinAlgError):
            continue
        oof[i] = preds
        risks[i] = float(np.mean(block_mses))

    if not np.any(np.isfinite(risks)):
        raise InvalidSpec("every super learner candidate failed to fit")

    if spec.mode == MODE_SELECTOR:
        chosen = int(np.argmin(risks))
        weights = np.zeros(n_cand)
        weights[chosen] = 1.0
    else:
        valid = [i for i in range(n_cand) if oof[i] is not None]
        p_mat = np.column_stack([oof[i] for i in valid])
        w_valid = _simplex_least_squares(p_mat, y)
        weights = np.zeros(n_cand)
        weights[valid] = w_valid
        chosen = int(np.argmin(risks))

    models = [
        fit(spec.candidates[i], x, y) if weights[i] != 0.0 else None
        for i in range(n_cand)
    ]
    report = CvRiskReport(risks=risks, chosen=chosen, weights=weights)
    return SuperLearnerModel(spec, models, report, x.shape)


def generalization_error(model: FittedModel, x_test, y_test) -> float:
    """Mean squared prediction error on a held-out set."""
    x_test = np.asarray(x_test, dtype=float)
    y_test = np.asarray(y_test, dtype=float).reshape(-1)
    if x_test.shape[0] != len(y_test):
        raise DimensionMismatch(
            f"x_test has {x_test.shape[0]} rows, y_test has {len(y_test)}"
        )
    resid = model.predict(x_test) - y_test
    return float(resid @ resid / len(y_test))
