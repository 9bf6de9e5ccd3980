"""OLS by pivoted QR, elastic net by coordinate descent, fixed-fold CV.

Predictor matrices passed to this module never include the intercept; it is
added (OLS) or handled by centering (elastic net) internally.  Coefficient
vectors returned are always ``(intercept, slope_1, ..., slope_p)`` on the
original data scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .synthdata import FoldMap

RANK_TOL = 1e-10
N_LAMBDA = 100
LAMBDA_RATIO = 1e-4
CD_TOL = 1e-7
CD_MAX_SWEEPS = 100_000
MIN_TRAIN_ROWS = 4


class SingularDesignError(ValueError):
    """Design matrix is rank deficient."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} (after {iterations} sweeps)")
        self.iterations = iterations


def _as_predictors(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def add_intercept(X) -> np.ndarray:
    X = _as_predictors(X)
    return np.column_stack([np.ones(X.shape[0]), X])


@dataclass
class OlsFit:
    coef: np.ndarray
    sigma2: float
    cov_unscaled: np.ndarray  # (A'A)^-1 for A = [1, X]
    df_resid: int
    rss: float

    @property
    def cov(self) -> np.ndarray:
        return self.sigma2 * self.cov_unscaled

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def predict(self, X) -> np.ndarray:
        X = _as_predictors(X)
        return self.coef[0] + X @ self.coef[1:]


def fit_ols(X, y) -> OlsFit:
    """Least squares of ``y`` on ``[1, X]`` through Householder QR with pivoting.

    Raises SingularDesignError when a diagonal of R falls below
    ``1e-10 * ||A||_F``.
    """
    A = add_intercept(X)
    y = np.asarray(y, dtype=float)
    n, p = A.shape
    if n <= p:
        raise SingularDesignError(f"need more rows than columns ({n} <= {p})")
    Q, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.min() <= RANK_TOL * np.linalg.norm(A):
        raise SingularDesignError("design matrix is rank deficient")
    coef = np.empty(p)
    coef[piv] = linalg.solve_triangular(R, Q.T @ y)
    resid = y - A @ coef
    rss = float(resid @ resid)
    r_inv = linalg.solve_triangular(R, np.eye(p))
    cov_unscaled = np.empty((p, p))
    cov_unscaled[np.ix_(piv, piv)] = r_inv @ r_inv.T
    df = n - p
    return OlsFit(coef=coef, sigma2=rss / df, cov_unscaled=cov_unscaled, df_resid=df, rss=rss)


# -- elastic net -----------------------------------------------------------


@dataclass
class _Standardized:
    n: int
    x_mean: np.ndarray
    x_scale: np.ndarray  # 1/n standard deviation; 0 marks a constant column
    y_mean: float
    gram: list  # G = X~'X~/n, nested lists for the scalar inner loop
    xty: list  # c = X~'(y - ybar)/n
    yty: float

    @classmethod
    def from_data(cls, X: np.ndarray, y: np.ndarray) -> "_Standardized":
        n = X.shape[0]
        x_mean = X.mean(axis=0)
        x_scale = X.std(axis=0)
        Xc = X - x_mean
        active = x_scale > 0
        Xt = np.zeros_like(Xc)
        Xt[:, active] = Xc[:, active] / x_scale[active]
        y_mean = float(y.mean())
        yc = y - y_mean
        return cls(
            n=n,
            x_mean=x_mean,
            x_scale=x_scale,
            y_mean=y_mean,
            gram=(Xt.T @ Xt / n).tolist(),
            xty=(Xt.T @ yc / n).tolist(),
            yty=float(yc @ yc) / n,
        )

    def lambda_max(self, alpha: float) -> float:
        top = max((abs(c) for c in self.xty), default=0.0)
        return top / max(alpha, 1e-3)

    def objective(self, b, alpha: float, lam: float) -> float:
        """Penalized objective in standardized space (constant-free)."""
        p = len(b)
        quad = sum(self.gram[j][k] * b[j] * b[k] for j in range(p) for k in range(p))
        loss = 0.5 * (self.yty - 2.0 * sum(c * v for c, v in zip(self.xty, b)) + quad)
        pen = lam * (alpha * sum(abs(v) for v in b) + 0.5 * (1 - alpha) * sum(v * v for v in b))
        return loss + pen

    def to_original(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        slopes = np.zeros_like(b)
        active = self.x_scale > 0
        slopes[active] = b[active] / self.x_scale[active]
        return np.concatenate([[self.y_mean - slopes @ self.x_mean], slopes])


def _soft(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def _coordinate_descent(
    st: _Standardized,
    alpha: float,
    lam: float,
    start=None,
    tol: float = CD_TOL,
    max_sweeps: int = CD_MAX_SWEEPS,
    trace: Optional[list] = None,
):
    G, c = st.gram, st.xty
    p = len(c)
    b = [0.0] * p if start is None else list(start)
    l1 = lam * alpha
    l2 = lam * (1.0 - alpha)
    active = [G[j][j] > 0 for j in range(p)]
    if trace is not None:
        trace.append(st.objective(b, alpha, lam))
    for sweep in range(1, max_sweeps + 1):
        max_delta = 0.0
        for j in range(p):
            if not active[j]:
                b[j] = 0.0
                continue
            Gj = G[j]
            z = c[j]
            for k in range(p):
                if k != j:
                    z -= Gj[k] * b[k]
            new = _soft(z, l1) / (Gj[j] + l2)
            delta = abs(new - b[j])
            if delta > max_delta:
                max_delta = delta
            b[j] = new
        if trace is not None:
            trace.append(st.objective(b, alpha, lam))
        if max_delta < tol:
            return b, sweep
    raise ConvergenceError("coordinate descent did not converge", max_sweeps)


@dataclass
class EnFit:
    coef: np.ndarray
    alpha: float
    lam: float
    std_coef: np.ndarray
    n_sweeps: int
    objective_trace: Optional[list] = None

    @property
    def selected(self) -> tuple[int, ...]:
        """Indices (0-based, among predictors) of nonzero slopes."""
        return tuple(int(j) for j in np.flatnonzero(self.coef[1:] != 0.0))

    def predict(self, X) -> np.ndarray:
        X = _as_predictors(X)
        return self.coef[0] + X @ self.coef[1:]


def _check_en_args(alpha: float, lam: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")


def fit_elastic_net(
    X,
    y,
    alpha: float,
    lam: float,
    *,
    tol: float = CD_TOL,
    max_sweeps: int = CD_MAX_SWEEPS,
    trace: bool = False,
) -> EnFit:
    """Elastic net with standardized predictors and an unpenalized intercept.

    Minimizes ``(1/2n)||yc - X~ b||^2 + lam * (alpha*|b|_1 + (1-alpha)/2*|b|^2)``
    where ``X~`` has unit (1/n) standard deviation columns and ``yc`` is the
    centered response, then maps ``b`` back to the original scale.
    """
    _check_en_args(alpha, lam)
    X = _as_predictors(X)
    st = _Standardized.from_data(X, np.asarray(y, dtype=float))
    tr = [] if trace else None
    b, sweeps = _coordinate_descent(st, alpha, lam, tol=tol, max_sweeps=max_sweeps, trace=tr)
    return EnFit(
        coef=st.to_original(b),
        alpha=alpha,
        lam=lam,
        std_coef=np.array(b),
        n_sweeps=sweeps,
        objective_trace=tr,
    )


def en_objective(coef, X, y, alpha: float, lam: float) -> float:
    """Objective on original-scale coefficients, penalty on standardized slopes."""
    X = _as_predictors(X)
    y = np.asarray(y, dtype=float)
    coef = np.asarray(coef, dtype=float)
    scale = X.std(axis=0)
    r = y - coef[0] - X @ coef[1:]
    b = coef[1:] * scale
    return float(r @ r) / (2 * len(y)) + lam * (
        alpha * np.abs(b).sum() + 0.5 * (1 - alpha) * (b @ b)
    )


def lambda_max(X, y, alpha: float) -> float:
    X = _as_predictors(X)
    return _Standardized.from_data(X, np.asarray(y, dtype=float)).lambda_max(alpha)


def lambda_grid(lam_max: float, n_lambda: int = N_LAMBDA, ratio: float = LAMBDA_RATIO) -> np.ndarray:
    # A flat response gives lam_max == 0; keep the grid strictly positive.
    top = lam_max if lam_max > 0 else 1e-12
    return top * np.logspace(0.0, np.log10(ratio), n_lambda)


@dataclass
class CvResult:
    lambda_grid: np.ndarray
    cv_mse: np.ndarray
    lambda_min: float
    cv_mse_at_min: float
    index_min: int


def _check_folds(folds: FoldMap, n: int) -> None:
    if folds.n != n:
        raise ValueError(f"fold map covers {folds.n} rows, data has {n}")
    for k in range(folds.K):
        n_test = int((folds.assignment == k).sum())
        if n_test == 0 or n - n_test < MIN_TRAIN_ROWS:
            raise ValueError(f"fold {k} is degenerate ({n - n_test} training rows)")


def _en_path(st: _Standardized, alpha: float, grid: np.ndarray) -> np.ndarray:
    """Warm-started coefficients (standardized) for each lambda in ``grid``."""
    out = np.empty((len(grid), len(st.xty)))
    b = None
    for i, lam in enumerate(grid):
        b, _ = _coordinate_descent(st, alpha, float(lam), start=b)
        out[i] = b
    return out


def cv_lambda_select(
    X,
    y,
    alpha: float,
    folds: FoldMap,
    n_lambda: int = N_LAMBDA,
    ratio: float = LAMBDA_RATIO,
) -> CvResult:
    """Choose lambda by K-fold CV on a supplied fold map.

    The grid runs from ``lambda_max`` of the full data down to
    ``ratio * lambda_max`` on a log scale.  ``cv_mse`` is the mean over folds
    of the held-out MSE; ties go to the larger lambda.
    """
    X = _as_predictors(X)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    _check_folds(folds, n)
    grid = lambda_grid(lambda_max(X, y, alpha), n_lambda, ratio)
    fold_mse = np.empty((folds.K, len(grid)))
    for k in range(folds.K):
        train, test = folds.train_rows(k), folds.test_rows(k)
        st = _Standardized.from_data(X[train], y[train])
        path = _en_path(st, alpha, grid)
        slopes = np.zeros_like(path)
        active = st.x_scale > 0
        slopes[:, active] = path[:, active] / st.x_scale[active]
        pred = st.y_mean + (X[test] - st.x_mean) @ slopes.T
        fold_mse[k] = np.mean((y[test, None] - pred) ** 2, axis=0)
    cv = fold_mse.mean(axis=0)
    i = int(np.argmin(cv))
    return CvResult(
        lambda_grid=grid,
        cv_mse=cv,
        lambda_min=float(grid[i]),
        cv_mse_at_min=float(cv[i]),
        index_min=i,
    )


def cv_predictions(
    model: str,
    X,
    y,
    folds: FoldMap,
    *,
    alpha: float = 0.5,
    lam: Optional[float] = None,
) -> np.ndarray:
    """Out-of-fold predictions for every row.

    ``model`` is ``"ols"`` or ``"en"``.  For ``"en"`` the penalty is held at
    ``lam`` in every fold; when omitted it is chosen by
    :func:`cv_lambda_select` on the same folds.
    """
    X = _as_predictors(X)
    y = np.asarray(y, dtype=float)
    _check_folds(folds, X.shape[0])
    if model == "en" and lam is None:
        lam = cv_lambda_select(X, y, alpha, folds).lambda_min
    elif model not in ("ols", "en"):
        raise ValueError(f"unknown model {model!r}")
    pred = np.empty(len(y))
    for k in range(folds.K):
        train, test = folds.train_rows(k), folds.test_rows(k)
        if model == "ols":
            fit = fit_ols(X[train], y[train])
        else:
            fit = fit_elastic_net(X[train], y[train], alpha, lam)
        pred[test] = fit.predict(X[test])
    return pred


def cv_mse(model: str, X, y, folds: FoldMap, *, alpha: float = 0.5, lam: Optional[float] = None) -> float:
    """Grand mean of squared out-of-fold prediction errors over all rows."""
    y = np.asarray(y, dtype=float)
    pred = cv_predictions(model, X, y, folds, alpha=alpha, lam=lam)
    return float(np.mean((y - pred) ** 2))
