"""Baseline generator, casewise three-sigma contamination, MCAR masks, folds."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .rngkit import Stream, sample_without_replacement

VARIABLES = ("y", "x1", "x2")
MIN_OBSERVED = 4


def round_count(n: int, p: float) -> int:
    """``round(n * p)`` with halves rounded away from zero.

    Uses the decimal literal of ``p`` so that 20 * 0.25 or 50 * 0.05 round
    as written instead of as their binary approximations.
    """
    value = Decimal(int(n)) * Decimal(repr(float(p)))
    return int(value.to_integral_value(rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class GenParams:
    beta0: float = 1.0
    beta1: float = 0.5
    beta2: float = 1.5
    sigma_y: float = 1.5
    mu1: float = 10.0
    sigma1: float = 2.0
    mu2: float = 5.0
    sigma2: float = 1.5
    rho: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [-1, 1], got {self.rho}")
        if min(self.sigma_y, self.sigma1, self.sigma2) <= 0:
            raise ValueError("standard deviations must be positive")

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2])

    @property
    def covariance(self) -> np.ndarray:
        c = self.rho * self.sigma1 * self.sigma2
        return np.array([[self.sigma1**2, c], [c, self.sigma2**2]])


@dataclass
class Dataset:
    """Aligned columns ``y, x1, x2`` with a missingness mask on ``x2``.

    Masked ``x2`` entries are stored as NaN so downstream code cannot read
    the hidden value.
    """

    y: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x2_mask: np.ndarray
    provenance: str = "clean"
    contaminated_idx: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.int64)
    )

    def __post_init__(self):
        n = len(self.y)
        if not (len(self.x1) == len(self.x2) == len(self.x2_mask) == n):
            raise ValueError("columns must have equal length")
        observed = ~self.x2_mask
        if not (
            np.isfinite(self.y).all()
            and np.isfinite(self.x1).all()
            and np.isfinite(self.x2[observed]).all()
        ):
            raise ValueError("non-finite value among unmasked entries")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_missing(self) -> int:
        return int(self.x2_mask.sum())

    @property
    def contaminated_flags(self) -> np.ndarray:
        flags = np.zeros(self.n, dtype=bool)
        flags[self.contaminated_idx] = True
        return flags

    def columns(self) -> np.ndarray:
        return np.column_stack([self.y, self.x1, self.x2])

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        contaminated = self.contaminated_flags
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["y", "x1", "x2", "x2_missing", "contaminated"])
            for i in range(self.n):
                x2 = "" if self.x2_mask[i] else repr(float(self.x2[i]))
                writer.writerow(
                    [
                        repr(float(self.y[i])),
                        repr(float(self.x1[i])),
                        x2,
                        int(self.x2_mask[i]),
                        int(contaminated[i]),
                    ]
                )


@dataclass(frozen=True)
class FoldMap:
    assignment: np.ndarray
    K: int

    def __post_init__(self):
        sizes = np.bincount(self.assignment, minlength=self.K)
        if len(sizes) != self.K or sizes.min() < 1 or sizes.max() - sizes.min() > 1:
            raise ValueError("fold map must be balanced and use every fold id")

    @property
    def n(self) -> int:
        return len(self.assignment)

    def test_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def train_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def digest(self) -> str:
        return hashlib.sha256(self.assignment.astype("<i8").tobytes()).hexdigest()


def generate_baseline(n: int, params: GenParams, s: Stream) -> Dataset:
    """Draw ``n`` clean rows: x1, then x2 given x1, then y given both."""
    if n < 4:
        raise ValueError(f"n must be >= 4, got {n}")
    p = params
    x1 = p.mu1 + p.sigma1 * s.normal(n)
    z = s.normal(n)
    x2 = (
        p.mu2
        + (p.rho * p.sigma2 / p.sigma1) * (x1 - p.mu1)
        + p.sigma2 * math.sqrt(1.0 - p.rho**2) * z
    )
    eps = s.normal(n)
    y = p.beta0 + p.beta1 * x1 + p.beta2 * x2 + p.sigma_y * eps
    return Dataset(y=y, x1=x1, x2=x2, x2_mask=np.zeros(n, dtype=bool))


def contaminate(d: Dataset, p_ext: float, s: Stream) -> Dataset:
    """Replace ``round(n * p_ext)`` whole rows by ``mean +/- 3 sd`` per variable.

    Rows are chosen uniformly without replacement and taken in ascending
    index order; the j-th chosen row (1-based) gets ``+3 sd`` for odd j and
    ``-3 sd`` for even j.  Means and SDs (n - 1 denominator) come from the
    input sample.
    """
    if d.provenance != "clean" or len(d.contaminated_idx):
        raise ValueError("dataset is already contaminated")
    if not 0.0 < p_ext < 1.0:
        raise ValueError(f"p_ext must lie in (0, 1), got {p_ext}")
    if d.n_missing:
        raise ValueError("contaminate expects a dataset without masked values")
    k = round_count(d.n, p_ext)
    idx = sample_without_replacement(s, d.n, k)
    signs = np.where(np.arange(1, k + 1) % 2 == 1, 3.0, -3.0)
    cols = {}
    for name in VARIABLES:
        v = getattr(d, name)
        mean = v.mean()
        sd = v.std(ddof=1)
        out = v.copy()
        out[idx] = mean + signs * sd
        cols[name] = out
    return replace(d, **cols, provenance="contaminated", contaminated_idx=idx)


def apply_mcar_mask(d: Dataset, p_miss: float, s: Stream) -> Dataset:
    """Hide ``round(n * p_miss)`` uniformly chosen entries of ``x2``."""
    if not 0.0 < p_miss < 1.0:
        raise ValueError(f"p_miss must lie in (0, 1), got {p_miss}")
    k = round_count(d.n, p_miss)
    if k > d.n - MIN_OBSERVED:
        raise ValueError(
            f"masking {k} of {d.n} rows leaves fewer than {MIN_OBSERVED} observed"
        )
    idx = sample_without_replacement(s, d.n, k)
    mask = np.zeros(d.n, dtype=bool)
    mask[idx] = True
    x2 = d.x2.copy()
    x2[mask] = np.nan
    return replace(d, x2=x2, x2_mask=mask)


def assign_folds(n: int, K: int, s: Stream) -> FoldMap:
    """Balanced random partition of ``range(n)`` into ``K`` folds."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if n < K:
        raise ValueError(f"cannot split {n} rows into {K} folds")
    ids = np.arange(n) % K
    return FoldMap(assignment=ids[s.permutation(n)], K=K)
