"""Rubin's rules, post-selection pooling, and across-replicate summaries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .linmod import fit_ols

PREDICTOR_NAMES = ("x1", "x2")
TRUE_BETA = (1.0, 0.5, 1.5)
QQ_PROBS = np.arange(1, 100) / 100.0


@dataclass
class PooledEstimate:
    qbar: np.ndarray
    ubar: np.ndarray
    b: np.ndarray
    t: np.ndarray
    df: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    M: int
    dropped: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.dropped is None:
            self.dropped = np.zeros(len(self.qbar), dtype=bool)

    def covers(self, truth) -> np.ndarray:
        """Per-coefficient interval membership; dropped coefficients never cover."""
        truth = np.asarray(truth, dtype=float)
        inside = (self.ci_low <= truth) & (truth <= self.ci_high)
        return inside & ~self.dropped


def barnard_rubin_df(ubar, b, M: int, df_com: float) -> np.ndarray:
    """Small-sample degrees of freedom for pooled MI estimates.

    With no between-imputation variance the complete-data ``df_com`` is
    returned unchanged.
    """
    ubar = np.asarray(ubar, dtype=float)
    b = np.asarray(b, dtype=float)
    t = ubar + (1.0 + 1.0 / M) * b
    out = np.full(t.shape, float(df_com))
    mask = (b > 0) & (t > 0)
    if M > 1 and mask.any():
        lam = (1.0 + 1.0 / M) * b[mask] / t[mask]
        df_obs = (df_com + 1.0) / (df_com + 3.0) * df_com * (1.0 - lam)
        # Harmonic form; df_old = (M - 1) / lam^2 overflows for tiny b.
        with np.errstate(divide="ignore"):
            out[mask] = 1.0 / (lam**2 / (M - 1) + 1.0 / df_obs)
    return out


def rubin_pool(estimates, covs, df_com: float, level: float = 0.95) -> PooledEstimate:
    """Combine ``M`` coefficient vectors and their covariance matrices."""
    Q = np.atleast_2d(np.asarray(estimates, dtype=float))
    U = np.asarray(covs, dtype=float)
    if U.ndim == 2:
        U = U[None]
    M, p = Q.shape
    if M < 1 or U.shape != (M, p, p):
        raise ValueError(f"expected {M} covariance matrices of shape {(p, p)}, got {U.shape}")
    # Centre on the first fit so identical imputations give exact qbar and b = 0.
    shift = Q - Q[0]
    qbar = Q[0] + shift.mean(axis=0)
    ubar = np.diagonal(U, axis1=1, axis2=2).mean(axis=0)
    b = shift.var(axis=0, ddof=1) if M > 1 else np.zeros(p)
    t = ubar + (1.0 + 1.0 / M) * b
    df = barnard_rubin_df(ubar, b, M, df_com)
    half = stats.t.ppf(0.5 + level / 2.0, df) * np.sqrt(t)
    return PooledEstimate(
        qbar=qbar, ubar=ubar, b=b, t=t, df=df, ci_low=qbar - half, ci_high=qbar + half, M=M
    )


@dataclass(frozen=True)
class SelectionOutcome:
    selected: tuple[str, ...]
    stage: str  # threshold | union-fallback | full-fallback


def select_support(selections: Sequence[Sequence[str]], threshold: float = 0.5) -> SelectionOutcome:
    """Keep predictors chosen in at least ``threshold`` of the fits.

    ``selections`` holds, per fit, the names of predictors with nonzero
    slopes.  If nothing passes, the union of all selections is used; if that
    is empty too, both predictors are kept.
    """
    M = len(selections)
    if M < 1:
        raise ValueError("need at least one fit")
    counts = {name: sum(name in sel for sel in selections) for name in PREDICTOR_NAMES}
    kept = tuple(name for name in PREDICTOR_NAMES if counts[name] >= threshold * M)
    if kept:
        return SelectionOutcome(kept, "threshold")
    union = tuple(name for name in PREDICTOR_NAMES if counts[name] > 0)
    if union:
        return SelectionOutcome(union, "union-fallback")
    return SelectionOutcome(PREDICTOR_NAMES, "full-fallback")


def post_selection_pool(datasets, sel: SelectionOutcome, level: float = 0.95) -> PooledEstimate:
    """OLS of y on the selected predictors in each completed set, then Rubin.

    Dropped predictors are reported as 0 with NaN interval bounds and
    ``dropped`` set.
    """
    if not sel.selected:
        raise ValueError("selection is empty")
    cols = [PREDICTOR_NAMES.index(name) + 1 for name in sel.selected]
    keep = [0] + cols
    ests, covs = [], []
    n = None
    for d in datasets:
        X = np.column_stack([d.x1, d.x2])[:, [c - 1 for c in cols]]
        fit = fit_ols(X, d.y)
        ests.append(fit.coef)
        covs.append(fit.cov)
        n = len(d.y)
    sub = rubin_pool(ests, covs, df_com=n - len(keep), level=level)
    p = len(PREDICTOR_NAMES) + 1
    full = {}
    for name in ("qbar", "ubar", "b", "t", "df", "ci_low", "ci_high"):
        fill = 0.0 if name in ("qbar", "ubar", "b", "t") else np.nan
        arr = np.full(p, fill)
        arr[keep] = getattr(sub, name)
        full[name] = arr
    dropped = np.ones(p, dtype=bool)
    dropped[keep] = False
    return PooledEstimate(**full, M=sub.M, dropped=dropped)


@dataclass
class CoefMetrics:
    bias: np.ndarray
    rmse: np.ndarray
    coverage: np.ndarray


def coefficient_metrics(pooled: Sequence[PooledEstimate], truth=TRUE_BETA) -> CoefMetrics:
    if not pooled:
        raise ValueError("need at least one replicate")
    truth = np.asarray(truth, dtype=float)
    q = np.array([p.qbar for p in pooled])
    err = q - truth
    covered = np.array([p.covers(truth) for p in pooled])
    return CoefMetrics(
        bias=err.mean(axis=0),
        rmse=np.sqrt((err**2).mean(axis=0)),
        coverage=covered.mean(axis=0),
    )


@dataclass
class CvMseSummary:
    mean: float
    var: float
    q025: float
    q50: float
    q975: float
    var_defined: bool = True


def aggregate_cvmse(values) -> CvMseSummary:
    """Mean, variance (n - 1), and type-7 quantiles at 2.5%, 50%, 97.5%.

    A single value gets variance 0 with ``var_defined=False``.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 1:
        raise ValueError("need at least one value")
    q025, q50, q975 = np.quantile(v, [0.025, 0.5, 0.975], method="linear")
    single = v.size == 1
    return CvMseSummary(
        mean=float(v.mean()),
        var=0.0 if single else float(v.var(ddof=1)),
        q025=float(q025),
        q50=float(q50),
        q975=float(q975),
        var_defined=not single,
    )


@dataclass
class QQCurve:
    probs: np.ndarray
    true_q: np.ndarray
    pred_q: np.ndarray


def replicate_quantiles(values, probs=QQ_PROBS) -> np.ndarray:
    return np.quantile(np.asarray(values, dtype=float), np.asarray(probs, dtype=float))


def qq_reduce(predicted: Sequence[np.ndarray], truths: Sequence[np.ndarray], probs=QQ_PROBS) -> QQCurve:
    """Predicted-vs-true y quantile curve.

    Each replicate contributes its own quantiles at ``probs`` for both the
    predictions (median over imputations) and the true responses; the curve
    is the mean over replicates of each.
    """
    if len(predicted) < 1 or len(predicted) != len(truths):
        raise ValueError("need matching, non-empty replicate lists")
    probs = np.asarray(probs, dtype=float)
    pred_q = np.mean([replicate_quantiles(p, probs) for p in predicted], axis=0)
    true_q = np.mean([replicate_quantiles(t, probs) for t in truths], axis=0)
    return QQCurve(probs=probs, true_q=true_q, pred_q=pred_q)


def qq_from_quantiles(pred_q: Sequence[np.ndarray], true_q: Sequence[np.ndarray], probs=QQ_PROBS) -> QQCurve:
    """Same reduction as :func:`qq_reduce` from precomputed replicate quantiles."""
    return QQCurve(
        probs=np.asarray(probs, dtype=float),
        true_q=np.mean(np.asarray(true_q, dtype=float), axis=0),
        pred_q=np.mean(np.asarray(pred_q, dtype=float), axis=0),
    )
