"""Univariate multiple imputation of x2 from (y, x1).

Six engines, T1..T6:

====  ====================  ==================================================
T1    norm-predict          OLS point prediction, no noise (deterministic)
T2    lasso-select-norm     lasso selection, then Bayesian normal regression
T3    norm-boot             OLS on a bootstrap sample plus normal residuals
T4    pmm                   predictive mean matching, type-1, ``d_pool`` donors
T5    rf                    random-forest leaf donors
T6    midastouch            inverse-distance weighted donor draw
====  ====================  ==================================================

All internals that the published descriptions leave open (donor pool size,
tree settings, the distance kernel) are collected in :class:`ImputerParams`.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Callable, Optional

import numpy as np

from .linmod import SingularDesignError, cv_lambda_select, fit_elastic_net, fit_ols
from .rngkit import Stream
from .synthdata import Dataset, assign_folds

log = logging.getLogger(__name__)

METHODS = ("T1", "T2", "T3", "T4", "T5", "T6")
METHOD_NAMES = {
    "T1": "norm-predict",
    "T2": "lasso-select-norm",
    "T3": "norm-boot",
    "T4": "pmm",
    "T5": "rf",
    "T6": "midastouch",
}
PREDICTORS = ("y", "x1")
MIN_OBSERVED = 4


@dataclass(frozen=True)
class ImputerParams:
    d_pool: int = 5
    n_trees: int = 10
    min_leaf: int = 5
    max_depth: int = 10
    midas_delta: float = 1e-6
    lasso_folds: int = 5
    boot_attempts: int = 10

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImputationModelFrame:
    """Observed and missing rows of the x2 imputation model.

    ``X_obs``/``X_mis`` hold the predictor columns named in ``predictors``
    (never x2); the intercept is implicit.
    """

    X_obs: np.ndarray
    x2_obs: np.ndarray
    X_mis: np.ndarray
    obs_rows: np.ndarray
    mis_rows: np.ndarray
    predictors: tuple[str, ...] = PREDICTORS

    def __post_init__(self):
        assert "x2" not in self.predictors, "x2 must not predict itself"
        if len(self.x2_obs) < MIN_OBSERVED:
            raise ValueError(f"need at least {MIN_OBSERVED} observed x2 values")

    @classmethod
    def from_dataset(cls, d: Dataset) -> "ImputationModelFrame":
        mask = d.x2_mask
        X = np.column_stack([d.y, d.x1])
        return cls(
            X_obs=X[~mask],
            x2_obs=d.x2[~mask],
            X_mis=X[mask],
            obs_rows=np.flatnonzero(~mask),
            mis_rows=np.flatnonzero(mask),
        )

    @property
    def n_obs(self) -> int:
        return len(self.x2_obs)

    @property
    def n_mis(self) -> int:
        return self.X_mis.shape[0]


@dataclass
class CompletedDataset:
    data: Dataset
    method: str
    m: int  # 1-based imputation index


def _mean_fill(f: ImputationModelFrame, method: str) -> np.ndarray:
    log.warning("%s: singular imputation design, filling with observed mean", method)
    return np.full(f.n_mis, f.x2_obs.mean())


def _donor_fill(f: ImputationModelFrame, s: Stream, method: str) -> np.ndarray:
    # Donor methods keep fills inside the observed values even on fallback.
    log.warning("%s: singular imputation design, drawing random observed donors", method)
    return f.x2_obs[s.below(f.n_obs, f.n_mis)]


def _bayes_draw(fit, s: Stream) -> tuple[np.ndarray, float]:
    """Posterior draw ``(beta*, sigma*)`` for a normal linear model.

    ``sigma*^2 = RSS / chi2(df)`` and ``beta* ~ N(beta_hat, sigma*^2 (A'A)^-1)``.
    """
    sigma = float(np.sqrt(fit.rss / s.chisquare(fit.df_resid, 1)[0]))
    chol = np.linalg.cholesky(fit.cov_unscaled)
    beta = fit.coef + sigma * (chol @ s.normal(len(fit.coef)))
    return beta, sigma


def _predict(coef: np.ndarray, X: np.ndarray) -> np.ndarray:
    return coef[0] + X @ coef[1:]


# -- T1 ---------------------------------------------------------------------


def impute_t1_norm_predict(f: ImputationModelFrame, s: Stream | None = None, params=None) -> np.ndarray:
    try:
        fit = fit_ols(f.X_obs, f.x2_obs)
    except SingularDesignError:
        return _mean_fill(f, "T1")
    return fit.predict(f.X_mis)


# -- T2 ---------------------------------------------------------------------


def lasso_select(f: ImputationModelFrame, s: Stream, n_folds: int = 5) -> tuple[int, ...]:
    """Predictors with a nonzero lasso slope at the CV-minimizing penalty.

    Falls back to keeping every predictor when the observed rows are too
    few for ``n_folds``-fold CV with at least four training rows per fold.
    """
    K = min(n_folds, f.n_obs)
    if K < 2 or f.n_obs - int(np.ceil(f.n_obs / K)) < 4:
        return tuple(range(f.X_obs.shape[1]))
    folds = assign_folds(f.n_obs, K, s)
    cv = cv_lambda_select(f.X_obs, f.x2_obs, 1.0, folds)
    return fit_elastic_net(f.X_obs, f.x2_obs, 1.0, cv.lambda_min).selected


def impute_t2_lasso_select_norm(f: ImputationModelFrame, s: Stream, params: ImputerParams = ImputerParams()) -> np.ndarray:
    keep = list(lasso_select(f, s.child("stage", "select"), params.lasso_folds))
    try:
        fit = fit_ols(f.X_obs[:, keep], f.x2_obs)
    except SingularDesignError:
        return _mean_fill(f, "T2")
    draw = s.child("stage", "draw")
    beta, sigma = _bayes_draw(fit, draw)
    return _predict(beta, f.X_mis[:, keep]) + sigma * draw.normal(f.n_mis)


# -- T3 ---------------------------------------------------------------------


def _bootstrap_ols(f: ImputationModelFrame, s: Stream, attempts: int):
    for _ in range(attempts):
        rows = s.below(f.n_obs, f.n_obs)
        try:
            return fit_ols(f.X_obs[rows], f.x2_obs[rows])
        except SingularDesignError:
            continue
    return None


def impute_t3_norm_boot(f: ImputationModelFrame, s: Stream, params: ImputerParams = ImputerParams()) -> np.ndarray:
    fit = _bootstrap_ols(f, s, params.boot_attempts)
    if fit is None:
        return _mean_fill(f, "T3")
    sigma = np.sqrt(fit.sigma2)
    return fit.predict(f.X_mis) + sigma * s.normal(f.n_mis)


# -- T4 ---------------------------------------------------------------------


def pmm_donors(eta_obs: np.ndarray, eta_mis: np.ndarray, d_pool: int, s: Stream) -> np.ndarray:
    """Index into the observed rows of one donor per missing row.

    The pool is the ``d_pool`` observed rows with the smallest
    ``|eta_obs - eta_mis|``; ties keep ascending observed-row order.
    """
    if len(eta_obs) < d_pool:
        raise ValueError(f"need at least {d_pool} observed rows for the donor pool")
    picks = s.below(d_pool, len(eta_mis))
    donors = np.empty(len(eta_mis), dtype=np.int64)
    for i, target in enumerate(eta_mis):
        order = np.argsort(np.abs(eta_obs - target), kind="stable")
        donors[i] = order[picks[i]]
    return donors


def impute_t4_pmm(
    f: ImputationModelFrame,
    s: Stream,
    params: ImputerParams = ImputerParams(),
    *,
    draw_beta: bool = True,
) -> np.ndarray:
    try:
        fit = fit_ols(f.X_obs, f.x2_obs)
    except SingularDesignError:
        return _donor_fill(f, s.child("stage", "fallback"), "T4")
    beta_star = _bayes_draw(fit, s.child("stage", "draw"))[0] if draw_beta else fit.coef
    eta_obs = fit.predict(f.X_obs)
    eta_mis = _predict(beta_star, f.X_mis)
    donors = pmm_donors(eta_obs, eta_mis, params.d_pool, s.child("stage", "match"))
    return f.x2_obs[donors]


# -- T5 ---------------------------------------------------------------------


@dataclass
class _Node:
    rows: np.ndarray  # training-row indices (into the observed frame)
    feature: int = -1
    threshold: float = 0.0
    left: Optional["_Node"] = None
    right: Optional["_Node"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _best_split(x: np.ndarray, t: np.ndarray, min_leaf: int):
    """Best SSE-reducing midpoint split of ``t`` on ``x``, or None."""
    order = np.argsort(x, kind="stable")
    xs, ts = x[order], t[order]
    n = len(ts)
    csum = np.cumsum(ts)
    total = csum[-1]
    n_left = np.arange(1, n)
    # candidate i splits after position i-1 (left size i)
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not valid.any():
        return None
    s_left = csum[:-1]
    gain = s_left**2 / n_left + (total - s_left) ** 2 / (n - n_left)
    gain = np.where(valid, gain, -np.inf)
    i = int(np.argmax(gain))
    return 0.5 * (xs[i] + xs[i + 1])


def grow_tree(
    X: np.ndarray,
    t: np.ndarray,
    rows: np.ndarray,
    s: Stream,
    min_leaf: int = 5,
    max_depth: int = 10,
) -> _Node:
    """Regression tree on ``X[rows], t[rows]``.

    At each node the features are visited in a random order and the first
    one that admits a valid split is used (one candidate per node when it
    splits).  Nodes stop at ``max_depth``, when smaller than ``2*min_leaf``,
    or when the target is constant.
    """
    root = _Node(rows=rows)
    stack = [(root, 0)]
    p = X.shape[1]
    while stack:
        node, depth = stack.pop()
        r = node.rows
        if depth >= max_depth or len(r) < 2 * min_leaf or np.ptp(t[r]) == 0:
            continue
        for feat in s.permutation(p):
            thr = _best_split(X[r, feat], t[r], min_leaf)
            if thr is None:
                continue
            go_left = X[r, feat] <= thr
            node.feature, node.threshold = int(feat), float(thr)
            node.left = _Node(rows=r[go_left])
            node.right = _Node(rows=r[~go_left])
            stack.append((node.right, depth + 1))
            stack.append((node.left, depth + 1))
            break
    return root


def route(node: _Node, x: np.ndarray) -> _Node:
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node


def impute_t5_rf(f: ImputationModelFrame, s: Stream, params: ImputerParams = ImputerParams()) -> np.ndarray:
    if f.n_obs < 8:
        raise ValueError("random-forest imputation needs at least 8 observed rows")
    trees = []
    for b in range(params.n_trees):
        ts = s.child("tree", b)
        rows = ts.below(f.n_obs, f.n_obs)
        trees.append(grow_tree(f.X_obs, f.x2_obs, rows, ts, params.min_leaf, params.max_depth))
    pick = s.child("stage", "donor")
    tree_idx = pick.below(params.n_trees, f.n_mis)
    u = pick.uniform(f.n_mis)
    fills = np.empty(f.n_mis)
    for i in range(f.n_mis):
        leaf = route(trees[tree_idx[i]], f.X_mis[i])
        j = min(int(u[i] * len(leaf.rows)), len(leaf.rows) - 1)
        fills[i] = f.x2_obs[leaf.rows[j]]
    return fills


# -- T6 ---------------------------------------------------------------------


def midas_weights(eta_obs: np.ndarray, target: float, delta_rel: float = 1e-6) -> np.ndarray:
    """Donor probabilities proportional to ``1 / (|eta_j - target| + delta)``."""
    spread = np.ptp(eta_obs)
    delta = delta_rel * spread if spread > 0 else 1.0
    w = 1.0 / (np.abs(eta_obs - target) + delta)
    return w / w.sum()


def midas_donors(eta_obs: np.ndarray, eta_mis: np.ndarray, s: Stream, delta_rel: float = 1e-6) -> np.ndarray:
    """One donor index per missing row, drawn with :func:`midas_weights`."""
    u = s.uniform(len(eta_mis))
    donors = np.empty(len(eta_mis), dtype=np.int64)
    for i, target in enumerate(eta_mis):
        cdf = np.cumsum(midas_weights(eta_obs, target, delta_rel))
        donors[i] = min(int(np.searchsorted(cdf, u[i] * cdf[-1], side="right")), len(eta_obs) - 1)
    return donors


def impute_t6_midastouch(f: ImputationModelFrame, s: Stream, params: ImputerParams = ImputerParams()) -> np.ndarray:
    if f.n_obs < 3:
        raise ValueError("midastouch needs at least 3 observed rows")
    fit = _bootstrap_ols(f, s.child("stage", "boot"), params.boot_attempts)
    if fit is None:
        return _donor_fill(f, s.child("stage", "fallback"), "T6")
    donors = midas_donors(
        fit.predict(f.X_obs), fit.predict(f.X_mis), s.child("stage", "donor"), params.midas_delta
    )
    return f.x2_obs[donors]


ENGINES: dict[str, Callable] = {
    "T1": impute_t1_norm_predict,
    "T2": impute_t2_lasso_select_norm,
    "T3": impute_t3_norm_boot,
    "T4": impute_t4_pmm,
    "T5": impute_t5_rf,
    "T6": impute_t6_midastouch,
}


def complete(d: Dataset, fills: np.ndarray) -> Dataset:
    fills = np.asarray(fills, dtype=float)
    if not np.isfinite(fills).all():
        raise ValueError("imputation produced non-finite values")
    x2 = d.x2.copy()
    x2[d.x2_mask] = fills
    return replace(d, x2=x2)


def impute(
    method: str,
    d: Dataset,
    M: int,
    s: Stream,
    params: ImputerParams = ImputerParams(),
) -> list[CompletedDataset]:
    """``M`` completed copies of ``d``; imputation ``m`` draws from ``s/imp=m``."""
    if method not in ENGINES:
        raise ValueError(f"unknown imputation method {method!r}")
    if d.n_missing < 1:
        raise ValueError("dataset has no missing x2 values")
    if M < 1:
        raise ValueError("M must be >= 1")
    frame = ImputationModelFrame.from_dataset(d)
    engine = ENGINES[method]
    if method == "T1":
        filled = complete(d, engine(frame))
        return [CompletedDataset(filled, method, m) for m in range(1, M + 1)]
    out = []
    for m in range(1, M + 1):
        fills = engine(frame, s.child("imp", m), params)
        out.append(CompletedDataset(complete(d, fills), method, m))
    return out
