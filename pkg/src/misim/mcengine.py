"""Scenario grid expansion and the per-replicate Monte Carlo protocol.

Stream layout for replicate ``r`` of a scenario (``base`` is
``scenario=<key>/rep=r``, plus ``retry=1`` on the single retry):

==========================================  ================================
``base/task=data``                          clean baseline draw
``base/task=contaminate``                   contaminated row selection
``base/task=folds``                         K-fold map shared by all fits
``base/task=mask-clean``                    MCAR mask, clean copy
``base/task=mask-contaminated``             MCAR mask, contaminated copy
``base/task=impute/branch=b/method=t``      imputation engine (``/imp=m``)
==========================================  ================================
"""

from __future__ import annotations

import itertools
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .imputers import METHODS, ImputerParams, impute
from .linmod import (
    ConvergenceError,
    SingularDesignError,
    cv_lambda_select,
    cv_predictions,
    fit_elastic_net,
    fit_ols,
)
from .pooling import (
    PREDICTOR_NAMES,
    TRUE_BETA,
    CoefMetrics,
    CvMseSummary,
    PooledEstimate,
    QQCurve,
    SelectionOutcome,
    aggregate_cvmse,
    coefficient_metrics,
    post_selection_pool,
    qq_from_quantiles,
    replicate_quantiles,
    rubin_pool,
    select_support,
)
from .rngkit import DEFAULT_SEED, Stream, StreamPath
from .synthdata import (
    Dataset,
    FoldMap,
    GenParams,
    apply_mcar_mask,
    assign_folds,
    contaminate,
    generate_baseline,
    round_count,
)

log = logging.getLogger(__name__)

BRANCHES = ("clean-ols", "contaminated-en")
FACTORS = ("n", "p_ext", "p_miss", "rho", "M", "n_sim")
TABLE1_LEVELS = {
    "n": (20, 40, 80, 200, 500),
    "p_miss": (0.05, 0.10, 0.25, 0.30),
    "p_ext": (0.03, 0.04, 0.05, 0.10, 0.15, 0.30),
    "rho": (0.0, 0.6),
    "M": (5, 10),
    "n_sim": (50, 300, 1000, 3000),
}


class ReplicateFailure(RuntimeError):
    """A replicate failed on both attempts; carries its coordinates."""


@dataclass(frozen=True)
class Scenario:
    n: int
    p_miss: float
    p_ext: float
    rho: float
    M: int
    n_sim: int
    methods: tuple[str, ...] = METHODS
    branches: tuple[str, ...] = BRANCHES

    @property
    def key(self) -> str:
        return (
            f"n={self.n},p_miss={self.p_miss!r},p_ext={self.p_ext!r},"
            f"rho={self.rho!r},M={self.M},n_sim={self.n_sim}"
        )

    def validate(self, allow_custom: bool = False) -> None:
        if not allow_custom:
            for name in FACTORS:
                value = getattr(self, name)
                if value not in TABLE1_LEVELS[name]:
                    raise ValueError(
                        f"{name}={value!r} is not a design level "
                        f"{list(TABLE1_LEVELS[name])}; pass --allow-custom to override"
                    )
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
        bad = [b for b in self.branches if b not in BRANCHES]
        if bad or not self.branches:
            raise ValueError(f"branches must be a non-empty subset of {BRANCHES}")
        if self.n < 4 or self.M < 1 or self.n_sim < 1:
            raise ValueError("need n >= 4, M >= 1, n_sim >= 1")
        if not (0 < self.p_miss < 1 and 0 < self.p_ext < 1 and -1 <= self.rho <= 1):
            raise ValueError("p_miss and p_ext must lie in (0, 1), rho in [-1, 1]")
        k_miss = round_count(self.n, self.p_miss)
        if k_miss < 1:
            raise ValueError(f"round({self.n} * {self.p_miss}) = 0 masked values")
        if k_miss > self.n - 4:
            raise ValueError(f"masking {k_miss} of {self.n} rows leaves fewer than 4 observed")
        if self.n - k_miss < 8 and "T5" in self.methods:
            raise ValueError("T5 needs at least 8 observed rows")


@dataclass(frozen=True)
class Settings:
    """Analysis constants shared by every scenario in a run."""

    K: int = 5
    alpha: float = 0.5
    threshold: float = 0.5
    imputer: ImputerParams = field(default_factory=ImputerParams)

    def to_dict(self) -> dict:
        return asdict(self)


def expand_grid(cfg) -> list[Scenario]:
    """Cartesian product of the factor levels on ``cfg``, deduplicated and sorted."""
    levels = {}
    for name in FACTORS:
        values = list(getattr(cfg, name))
        if not values:
            raise ValueError(f"factor {name} has no levels")
        unique = sorted(set(values))
        if len(unique) < len(values):
            log.warning("duplicate levels for %s removed: %s", name, values)
        levels[name] = unique
    methods = tuple(m for m in METHODS if m in set(cfg.methods))
    branches = tuple(b for b in BRANCHES if b in set(cfg.branches))
    out = []
    for combo in itertools.product(*(levels[f] for f in FACTORS)):
        kw = dict(zip(FACTORS, combo))
        out.append(Scenario(methods=methods, branches=branches, **kw))
    return out


# -- one replicate ------------------------------------------------------------


@dataclass
class CellResult:
    """One (branch, method) slot of a replicate."""

    cv_mse: float  # mean over the M completions
    cv_mse_each: list
    pooled: PooledEstimate
    selection: Optional[SelectionOutcome]
    pred_median: np.ndarray
    fits: Optional[list] = None


@dataclass
class ReplicateRecord:
    scenario_key: str
    r: int
    attempt: int
    cells: dict  # (branch, method) -> CellResult
    y_true: dict  # branch -> response vector
    fold_digest: str
    datasets: Optional[dict] = None


def replicate_path(sc: Scenario, r: int, attempt: int = 0) -> StreamPath:
    base = StreamPath.of(("scenario", sc.key), ("rep", r))
    return base.child("retry", attempt) if attempt else base


def _analyse_completion(branch: str, d: Dataset, folds: FoldMap, settings: Settings):
    X = np.column_stack([d.x1, d.x2])
    if branch == "clean-ols":
        fit = fit_ols(X, d.y)
        pred = cv_predictions("ols", X, d.y, folds)
        info = {"coef": fit.coef.tolist()}
        return fit, pred, None, info
    cv = cv_lambda_select(X, d.y, settings.alpha, folds)
    fit = fit_elastic_net(X, d.y, settings.alpha, cv.lambda_min)
    pred = cv_predictions("en", X, d.y, folds, alpha=settings.alpha, lam=cv.lambda_min)
    selected = tuple(PREDICTOR_NAMES[j] for j in fit.selected)
    info = {"coef": fit.coef.tolist(), "lambda_min": cv.lambda_min, "selected": list(selected)}
    return fit, pred, selected, info


def _run_cell(branch, method, data, folds, sc, settings, stream, keep_fits) -> CellResult:
    completions = impute(method, data, sc.M, stream, settings.imputer)
    errors, preds, fits, selections, infos = [], [], [], [], []
    for c in completions:
        fit, pred, selected, info = _analyse_completion(branch, c.data, folds, settings)
        errors.append(float(np.mean((c.data.y - pred) ** 2)))
        preds.append(pred)
        fits.append(fit)
        selections.append(selected)
        infos.append(info)
    if branch == "clean-ols":
        pooled = rubin_pool(
            [f.coef for f in fits], [f.cov for f in fits], df_com=sc.n - 3
        )
        selection = None
    else:
        selection = select_support(selections, settings.threshold)
        pooled = post_selection_pool([c.data for c in completions], selection)
    return CellResult(
        cv_mse=float(np.mean(errors)),
        cv_mse_each=errors,
        pooled=pooled,
        selection=selection,
        pred_median=np.median(np.array(preds), axis=0),
        fits=infos if keep_fits else None,
    )


def _replicate_once(sc, r, seed, settings, attempt, keep_data, keep_fits) -> ReplicateRecord:
    base = replicate_path(sc, r, attempt)

    def stream(task: str) -> Stream:
        return Stream(seed, base.child("task", task))

    clean = generate_baseline(sc.n, GenParams(rho=sc.rho), stream("data"))
    dirty = contaminate(clean, sc.p_ext, stream("contaminate"))
    untouched = np.setdiff1d(np.arange(sc.n), dirty.contaminated_idx)
    assert np.array_equal(clean.columns()[untouched], dirty.columns()[untouched])
    folds = assign_folds(sc.n, settings.K, stream("folds"))
    digest = folds.digest()
    masked = {
        "clean-ols": apply_mcar_mask(clean, sc.p_miss, stream("mask-clean")),
        "contaminated-en": apply_mcar_mask(dirty, sc.p_miss, stream("mask-contaminated")),
    }
    cells = {}
    for branch in sc.branches:
        for method in sc.methods:
            s = Stream(
                seed,
                base.child("task", "impute").child("branch", branch).child("method", method),
            )
            cells[(branch, method)] = _run_cell(
                branch, method, masked[branch], folds, sc, settings, s, keep_fits
            )
    assert folds.digest() == digest, "fold map mutated during replicate"
    return ReplicateRecord(
        scenario_key=sc.key,
        r=r,
        attempt=attempt,
        cells=cells,
        y_true={b: masked[b].y for b in sc.branches},
        fold_digest=digest,
        datasets={b: masked[b] for b in sc.branches} if keep_data else None,
    )


_NUMERIC_FAILURES = (SingularDesignError, ConvergenceError, np.linalg.LinAlgError, FloatingPointError)


def run_replicate(
    sc: Scenario,
    r: int,
    seed: int = DEFAULT_SEED,
    settings: Settings = Settings(),
    *,
    keep_data: bool = False,
    keep_fits: bool = False,
) -> ReplicateRecord:
    """Run replicate ``r``; one retry on a fresh ``retry=1`` substream."""
    try:
        return _replicate_once(sc, r, seed, settings, 0, keep_data, keep_fits)
    except _NUMERIC_FAILURES as first:
        log.warning("replicate %d of %s failed (%s); retrying", r, sc.key, first)
        try:
            return _replicate_once(sc, r, seed, settings, 1, keep_data, keep_fits)
        except _NUMERIC_FAILURES as second:
            raise ReplicateFailure(
                f"scenario {sc.key} replicate {r} failed twice: {second!r}"
            ) from second


# -- scenario -----------------------------------------------------------------


@dataclass
class CellSummary:
    metrics: CoefMetrics
    cvmse: CvMseSummary
    qq: QQCurve
    selection_stages: dict
    dropped_rate: np.ndarray


@dataclass
class ReplicateTrace:
    """Per-replicate values retained for plotting."""

    cv_mse: dict  # (branch, method) -> array over replicates
    pred_q: dict  # (branch, method) -> (n_sim, 99)
    true_q: dict  # branch -> (n_sim, 99)


@dataclass
class ScenarioSummary:
    scenario: Scenario
    cells: dict  # (branch, method) -> CellSummary
    trace: Optional[ReplicateTrace] = None

    def ordered_cells(self):
        for branch in BRANCHES:
            for method in METHODS:
                if (branch, method) in self.cells:
                    yield branch, method, self.cells[(branch, method)]


class _Accumulator:
    """Folds replicate records in replicate order."""

    def __init__(self, sc: Scenario):
        self.sc = sc
        self.slots = [(b, m) for b in sc.branches for m in sc.methods]
        self.pooled = {k: [] for k in self.slots}
        self.cv = {k: [] for k in self.slots}
        self.pred_q = {k: [] for k in self.slots}
        self.true_q = {b: [] for b in sc.branches}
        self.stages = {k: {} for k in self.slots}

    def add(self, rec: ReplicateRecord) -> None:
        missing = [k for k in self.slots if k not in rec.cells]
        if missing:
            raise ReplicateFailure(f"replicate {rec.r} lacks cells {missing}")
        for b in self.sc.branches:
            self.true_q[b].append(replicate_quantiles(rec.y_true[b]))
        for k in self.slots:
            cell = rec.cells[k]
            self.pooled[k].append(cell.pooled)
            self.cv[k].append(cell.cv_mse)
            self.pred_q[k].append(replicate_quantiles(cell.pred_median))
            if cell.selection is not None:
                st = self.stages[k]
                st[cell.selection.stage] = st.get(cell.selection.stage, 0) + 1

    def summary(self, keep_trace: bool) -> ScenarioSummary:
        cells = {}
        for k in self.slots:
            b = k[0]
            cells[k] = CellSummary(
                metrics=coefficient_metrics(self.pooled[k], TRUE_BETA),
                cvmse=aggregate_cvmse(self.cv[k]),
                qq=qq_from_quantiles(self.pred_q[k], self.true_q[b]),
                selection_stages=dict(sorted(self.stages[k].items())),
                dropped_rate=np.mean([p.dropped for p in self.pooled[k]], axis=0),
            )
        trace = None
        if keep_trace:
            trace = ReplicateTrace(
                cv_mse={k: np.array(v) for k, v in self.cv.items()},
                pred_q={k: np.array(v) for k, v in self.pred_q.items()},
                true_q={b: np.array(v) for b, v in self.true_q.items()},
            )
        return ScenarioSummary(scenario=self.sc, cells=cells, trace=trace)


def _replicate_task(args):
    sc, r, seed, settings, keep_data, keep_fits = args
    return run_replicate(sc, r, seed, settings, keep_data=keep_data, keep_fits=keep_fits)


class _Progress:
    def __init__(self, label: str, total: int, enabled: bool):
        self.label, self.total, self.enabled = label, total, enabled
        self.start = time.monotonic()
        self.every = max(1, total // 20)

    def update(self, done: int) -> None:
        if not self.enabled or (done % self.every and done != self.total):
            return
        elapsed = time.monotonic() - self.start
        rate = done / elapsed if elapsed > 0 else float("inf")
        eta = (self.total - done) / rate if rate > 0 else 0.0
        print(
            f"[{self.label}] {done}/{self.total} replicates, {rate:.2f} rep/s, ETA {eta:.0f}s",
            file=sys.stderr,
            flush=True,
        )


def iter_replicates(sc, seed, settings, workers=1, keep_data=False, keep_fits=False):
    """Replicate records in replicate order, computed on ``workers`` processes."""
    tasks = ((sc, r, seed, settings, keep_data, keep_fits) for r in range(sc.n_sim))
    if workers <= 1:
        yield from map(_replicate_task, tasks)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        chunk = max(1, sc.n_sim // (4 * workers))
        yield from pool.map(_replicate_task, tasks, chunksize=chunk)


def run_scenario(
    sc: Scenario,
    seed: int = DEFAULT_SEED,
    settings: Settings = Settings(),
    workers: int = 1,
    *,
    keep_replicates: bool = False,
    on_record=None,
    progress: bool = False,
) -> ScenarioSummary:
    """Run all replicates of ``sc`` and reduce them to a summary.

    Records are folded in replicate order, so the result does not depend on
    ``workers``.  ``on_record`` sees each record before it is discarded.
    """
    acc = _Accumulator(sc)
    bar = _Progress(sc.key, sc.n_sim, progress)
    keep_data = keep_fits = on_record is not None
    for i, rec in enumerate(
        iter_replicates(sc, seed, settings, workers, keep_data, keep_fits), start=1
    ):
        acc.add(rec)
        if on_record is not None:
            on_record(rec)
        bar.update(i)
    return acc.summary(keep_replicates)


@dataclass
class RunManifest:
    seed: int
    scenarios: list
    settings: dict
    version: str = __version__
    timestamp: str = ""

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "scenarios": [asdict(s) for s in self.scenarios],
            "settings": self.settings,
            "version": self.version,
            "numpy": np.__version__,
            "timestamp": self.timestamp,
        }
