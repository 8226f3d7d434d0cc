"""Energy distance, support-points optimization, and sample splitting.

Support points are the point set minimizing the empirical energy distance
to a data cloud.  They are found here by majorization-minimization (MM):
each sweep replaces every point with the minimizer of a separable convex
surrogate (quadratic majorant for the attraction term, tangent plane for
the concave repulsion term), which guarantees a non-increasing objective.
Snapping the converged points to their nearest data rows produces a
representative subsample used as the test set or as cross-fitting folds.

All randomness is confined to seeds in :class:`SpConfig`; every operation
is a pure, deterministic function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .data import Dataset, standardize
from .errors import DimensionMismatch, InvalidConfig, InvalidFraction

INIT_RANDOM_ROWS = "random_rows"
INIT_KMEANSPP_ROWS = "kmeanspp_rows"


@dataclass(frozen=True)
class SpConfig:
    """Solver configuration for support-points computation.

    ``n_points=0`` means "derived by the caller" (the splitting helpers
    fill it in from the requested test size or fold size).
    ``polish_passes`` bounds the greedy row-exchange refinement applied
    after snapping inside the splitting operations; 0 disables it.
    """

    n_points: int = 0
    max_iter: int = 200
    tol: float = 1e-8  # relative objective change
    seed: int = 0
    init: str = INIT_RANDOM_ROWS
    zero_dist_eps: float = 1e-10
    polish_passes: int = 30


@dataclass(frozen=True)
class SpResult:
    """Converged support points plus the per-iteration objective trace."""

    points: np.ndarray
    objective_trace: np.ndarray
    iterations: int
    converged: bool


@dataclass(frozen=True)
class SplitResult:
    """Disjoint test/train row indices covering the whole sample."""

    test_idx: np.ndarray
    train_idx: np.ndarray
    sp: Optional[SpResult] = field(default=None, compare=False)


@dataclass(frozen=True)
class FoldPlan:
    """A partition of row indices {0..n-1} into K folds of near-equal size."""

    folds: tuple

    def __post_init__(self):
        folds = tuple(np.asarray(f, dtype=int) for f in self.folds)
        object.__setattr__(self, "folds", folds)
        if len(folds) < 1:
            raise InvalidConfig("fold plan needs at least one fold")
        all_idx = np.concatenate(folds)
        n = len(all_idx)
        if len(np.unique(all_idx)) != n or all_idx.min() != 0 or all_idx.max() != n - 1:
            raise InvalidConfig("folds must partition 0..n-1 without overlap")
        sizes = [len(f) for f in folds]
        if max(sizes) - min(sizes) > 1:
            raise InvalidConfig(f"fold sizes may differ by at most 1, got {sizes}")

    @property
    def n_total(self) -> int:
        return sum(len(f) for f in self.folds)

    @property
    def k(self) -> int:
        return len(self.folds)

    def complement(self, k: int) -> np.ndarray:
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != k]))


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(
            f"point sets have dimensions {a.shape[1]} and {b.shape[1]}"
        )
    return a, b


def energy_two_sample(a: np.ndarray, b: np.ndarray) -> float:
    """Empirical two-sample energy distance between point sets.

    2 * mean cross-distance - mean within-a distance - mean within-b
    distance, with 1/(m*N), 1/m^2, 1/N^2 conventions (self-distances
    included in the denominators).  Zero exactly on identical multisets.
    """
    a, b = _check_same_dim(a, b)
    cross = cdist(a, b).mean()
    within_a = cdist(a, a).sum() / (a.shape[0] ** 2)
    within_b = cdist(b, b).sum() / (b.shape[0] ** 2)
    return float(2.0 * cross - within_a - within_b)


def sp_objective(candidate: np.ndarray, full: np.ndarray) -> float:
    """Two-term support-points criterion (energy distance up to a constant).

    (2/(n*N)) * sum of candidate-to-data distances minus (1/n^2) * sum of
    within-candidate distances; differs from :func:`energy_two_sample` by
    the within-data mean, which is constant in the candidate.
    """
    candidate, full = _check_same_dim(candidate, full)
    n = candidate.shape[0]
    big_n = full.shape[0]
    attract = cdist(candidate, full).sum() * 2.0 / (n * big_n)
    repel = cdist(candidate, candidate).sum() / (n * n)
    return float(attract - repel)


def _objective_from_dists(d_xf: np.ndarray, d_pp: np.ndarray) -> float:
    n, big_n = d_xf.shape
    return d_xf.sum() * 2.0 / (n * big_n) - d_pp.sum() / (n * n)


def _init_points(full: np.ndarray, cfg: SpConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    big_n = full.shape[0]
    if cfg.init == INIT_RANDOM_ROWS:
        idx = rng.choice(big_n, size=cfg.n_points, replace=False)
        return full[idx].copy()
    if cfg.init == INIT_KMEANSPP_ROWS:
        chosen = [int(rng.integers(big_n))]
        d2 = ((full - full[chosen[0]]) ** 2).sum(axis=1)
        for _ in range(1, cfg.n_points):
            d2[chosen] = 0.0
            total = d2.sum()
            if total <= 0.0:
                pool = np.setdiff1d(np.arange(big_n), chosen)
                nxt = int(pool[rng.integers(len(pool))])
            else:
                nxt = int(rng.choice(big_n, p=d2 / total))
            chosen.append(nxt)
            d2 = np.minimum(d2, ((full - full[nxt]) ** 2).sum(axis=1))
        return full[np.array(chosen)].copy()
    raise InvalidConfig(f"unknown init {cfg.init!r}")


def compute_support_points(full: np.ndarray, cfg: SpConfig) -> SpResult:
    """Minimize the support-points criterion over point sets of fixed size.

    Parallel MM sweep: every point moves to the weighted combination of
    data attractions (1/distance weights) and a repulsion displacement
    from the other current points.  Pairs closer than
    ``cfg.zero_dist_eps`` are omitted from the update so it stays finite;
    a revert-and-stop safeguard makes the recorded objective trace
    non-increasing unconditionally.
    """
    full = np.atleast_2d(np.asarray(full, dtype=float))
    big_n = full.shape[0]
    if cfg.n_points < 1:
        raise InvalidConfig(f"n_points must be positive, got {cfg.n_points}")
    if cfg.n_points > big_n:
        raise InvalidConfig(f"n_points={cfg.n_points} exceeds data size {big_n}")
    if cfg.tol <= 0:
        raise InvalidConfig(f"tol must be positive, got {cfg.tol}")
    if cfg.max_iter < 1:
        raise InvalidConfig(f"max_iter must be positive, got {cfg.max_iter}")

    eps = cfg.zero_dist_eps
    n = cfg.n_points
    ratio = big_n / n

    pts = _init_points(full, cfg)
    d_xf = cdist(pts, full)
    d_pp = cdist(pts, pts)
    obj = _objective_from_dists(d_xf, d_pp)
    trace = [obj]
    converged = False
    iterations = 0

    for _ in range(cfg.max_iter):
        inv_xf = np.where(d_xf >= eps, 1.0 / np.maximum(d_xf, eps), 0.0)
        inv_pp = np.where(d_pp >= eps, 1.0 / np.maximum(d_pp, eps), 0.0)
        collided = (d_xf < eps).sum(axis=1).astype(float)
        denom = inv_xf.sum(axis=1)
        attract = inv_xf @ full
        repel = pts * inv_pp.sum(axis=1)[:, None] - inv_pp @ pts
        safe = denom > 0
        target = pts.copy()
        target[safe] = (ratio * repel[safe] + attract[safe]) / denom[safe, None]
        # Collided data terms (distance < eps, i.e. the point sits on a
        # data row) equal ||y - y0|| exactly, so keeping them in the
        # surrogate turns the update into a soft-thresholded move: the
        # point leaves its row only when the pull of the remaining terms
        # exceeds the kink's resistance.  This preserves the exact MM
        # descent guarantee from a rows-as-initialization start.
        move = target - pts
        dist = np.linalg.norm(move, axis=1)
        factor = np.ones(n)
        kinked = (collided > 0) & (dist > 0) & safe
        factor[kinked] = np.clip(
            1.0 - collided[kinked] / (denom[kinked] * dist[kinked]), 0.0, 1.0
        )
        new_pts = pts + factor[:, None] * move

        new_d_xf = cdist(new_pts, full)
        new_d_pp = cdist(new_pts, new_pts)
        new_obj = _objective_from_dists(new_d_xf, new_d_pp)
        if new_obj > obj:
            converged = True
            break

        pts, d_xf, d_pp = new_pts, new_d_xf, new_d_pp
        iterations += 1
        trace.append(new_obj)
        rel_change = abs(obj - new_obj) / max(abs(obj), 1e-12)
        obj = new_obj
        if rel_change < cfg.tol:
            converged = True
            break

    return SpResult(
        points=pts,
        objective_trace=np.array(trace),
        iterations=iterations,
        converged=converged,
    )


def snap_to_rows(points: np.ndarray, full: np.ndarray) -> np.ndarray:
    """Assign each point to a distinct data row by sequential nearest neighbor.

    Points are processed in index order; each takes its nearest still-unused
    row, ties broken by lowest row index.
    """
    points, full = _check_same_dim(points, full)
    n, big_n = points.shape[0], full.shape[0]
    if n > big_n:
        raise InvalidConfig(f"cannot snap {n} points to {big_n} rows")
    dists = cdist(points, full)
    used = np.zeros(big_n, dtype=bool)
    out = np.empty(n, dtype=int)
    for i in range(n):
        row = np.where(used, np.inf, dists[i])
        j = int(np.argmin(row))  # argmin returns the first (lowest) index on ties
        out[i] = j
        used[j] = True
    return out


def _exchange_polish(full: np.ndarray, idx: np.ndarray, max_passes: int) -> np.ndarray:
    """Greedy row swaps that strictly lower the subset's energy distance.

    The free support points lose much of their advantage in the
    nearest-row projection when the dimension is not small, so the
    snapped set is refined directly: each pass offers every selected row
    its best replacement and accepts strict improvements.  Deterministic
    (ascending row order, lowest-index ties) and monotone in the subset
    energy; costs one N x N distance matrix.
    """
    if max_passes < 1:
        return idx
    big_n = full.shape[0]
    m = len(idx)
    if m >= big_n:
        return idx
    dists = cdist(full, full)
    a = dists.sum(axis=1)
    selected = np.zeros(big_n, dtype=bool)
    selected[idx] = True
    b = dists[:, selected].sum(axis=1)
    attract_w = 2.0 / (m * big_n)
    within_w = 2.0 / (m * m)
    for _ in range(max_passes):
        improved = False
        for u in np.sort(np.flatnonzero(selected)):
            delta = attract_w * (a - a[u]) - within_w * (b - dists[u] - b[u])
            delta[selected] = np.inf
            v = int(np.argmin(delta))
            if delta[v] < -1e-12:
                selected[u] = False
                selected[v] = True
                b += dists[v] - dists[u]
                improved = True
        if not improved:
            break
    return np.flatnonzero(selected)


def _joint_cloud(d: Dataset, include_y: bool) -> np.ndarray:
    cols = [d.t[:, None], d.x]
    if include_y:
        cols.append(d.y[:, None])
    cloud, _ = standardize(np.hstack(cols))
    return cloud


def spss_split(
    d: Dataset, test_fraction: float, cfg: SpConfig, include_y: bool = True
) -> SplitResult:
    """Split a dataset into train/test via support points.

    The joint (treatment, covariates, outcome) cloud is standardized,
    support points of the requested test size are computed and snapped to
    rows; those rows form the test set, the rest the training set.
    """
    n = d.n
    n_test = int(np.floor(test_fraction * n + 0.5))
    if not 1 <= n_test <= n - 1:
        raise InvalidFraction(
            f"test_fraction={test_fraction} gives test size {n_test} "
            f"outside [1, {n - 1}]"
        )
    cloud = _joint_cloud(d, include_y)
    sp = compute_support_points(cloud, replace(cfg, n_points=n_test))
    test_idx = np.sort(snap_to_rows(sp.points, cloud))
    test_idx = _exchange_polish(cloud, test_idx, cfg.polish_passes)
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    return SplitResult(test_idx=test_idx, train_idx=train_idx, sp=sp)


def spss_kfold_cloud(cloud: np.ndarray, k: int, cfg: SpConfig) -> FoldPlan:
    """K folds peeled from an already-standardized point cloud.

    Each fold is the polished support-point subset of the rows not yet
    assigned; the last fold takes the remainder.  Fold k uses seed
    ``cfg.seed + k`` so the whole plan is deterministic.
    """
    n = cloud.shape[0]
    if k < 2 or k > n // 2:
        raise InvalidConfig(f"need 2 <= K <= n/2, got K={k} with n={n}")
    base, rem = divmod(n, k)
    sizes = [base + 1 if i < rem else base for i in range(k)]

    remaining = np.arange(n)
    folds = []
    for fold_id in range(k - 1):
        pool = cloud[remaining]
        sp = compute_support_points(
            pool, replace(cfg, n_points=sizes[fold_id], seed=cfg.seed + fold_id)
        )
        local = np.sort(snap_to_rows(sp.points, pool))
        local = _exchange_polish(pool, local, cfg.polish_passes)
        fold = np.sort(remaining[local])
        folds.append(fold)
        remaining = np.setdiff1d(remaining, fold)
    folds.append(np.sort(remaining))
    return FoldPlan(folds=tuple(folds))


def spss_kfold(
    d: Dataset, k: int, cfg: SpConfig, include_y: bool = True
) -> FoldPlan:
    """Build K cross-fitting folds by sequentially peeling support points
    from the standardized joint (treatment, covariates, outcome) cloud."""
    return spss_kfold_cloud(_joint_cloud(d, include_y), k, cfg)


def random_kfold(n: int, k: int, seed: int) -> FoldPlan:
    """Uniformly shuffled K-fold partition of 0..n-1 (the usual baseline)."""
    if k < 2 or k > n:
        raise InvalidConfig(f"need 2 <= K <= n, got K={k} with n={n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = tuple(np.sort(f) for f in np.array_split(perm, k))
    return FoldPlan(folds=folds)


def random_subset(n: int, size: int, seed: int) -> np.ndarray:
    """Uniform random subset of row indices, for baseline comparisons."""
    if not 1 <= size <= n:
        raise InvalidConfig(f"subset size {size} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))
