from __future__ import annotations

import logging
from types import SimpleNamespace

import numpy as np
import pytest

from misim import mcengine
from misim.imputers import METHODS
from misim.linmod import SingularDesignError
from misim.mcengine import (
    BRANCHES,
    TABLE1_LEVELS,
    ReplicateFailure,
    Scenario,
    expand_grid,
    replicate_path,
    run_replicate,
    run_scenario,
)
from misim.rngkit import Stream
from misim.synthdata import GenParams, apply_mcar_mask, contaminate, generate_baseline

SEED = 99


def grid(**levels):
    base = dict(n=[20], p_miss=[0.3], p_ext=[0.05], rho=[0.6], M=[5], n_sim=[50], methods=METHODS, branches=BRANCHES)
    base.update(levels)
    return SimpleNamespace(**base)


def small(n=20, M=2, n_sim=3, methods=("T1", "T4"), **kw):
    return Scenario(n=n, p_miss=kw.pop("p_miss", 0.3), p_ext=kw.pop("p_ext", 0.1), rho=0.6, M=M, n_sim=n_sim, methods=methods, **kw)


def test_grid_counts():
    assert len(expand_grid(grid(n=[20, 40], p_miss=[0.05, 0.3]))) == 4
    assert len(expand_grid(grid(**{k: list(v) for k, v in TABLE1_LEVELS.items()}))) == 1920


def test_grid_dedup_warns(caplog):
    with caplog.at_level(logging.WARNING):
        out = expand_grid(grid(n=[40, 20, 40]))
    assert [s.n for s in out] == [20, 40]
    assert "duplicate" in caplog.text


def test_grid_keeps_method_order():
    (sc,) = expand_grid(grid(methods=["T6", "T1"], branches=["contaminated-en"]))
    assert sc.methods == ("T1", "T6") and sc.branches == ("contaminated-en",)


def test_zero_mask_rejected():
    with pytest.raises(ValueError, match="0 masked"):
        Scenario(n=20, p_miss=0.01, p_ext=0.05, rho=0.6, M=5, n_sim=1).validate(allow_custom=True)


def test_design_levels_enforced():
    with pytest.raises(ValueError, match="design level"):
        Scenario(n=33, p_miss=0.3, p_ext=0.05, rho=0.6, M=5, n_sim=50).validate()
    Scenario(n=40, p_miss=0.3, p_ext=0.05, rho=0.6, M=5, n_sim=50).validate()


def test_t5_needs_eight_observed_rows():
    with pytest.raises(ValueError, match="T5"):
        Scenario(n=10, p_miss=0.3, p_ext=0.1, rho=0.6, M=2, n_sim=1).validate(allow_custom=True)


def test_record_shape_all_methods():
    sc = Scenario(n=20, p_miss=0.3, p_ext=0.05, rho=0.6, M=5, n_sim=1)
    rec = run_replicate(sc, 0, SEED)
    assert len(rec.cells) == 12
    assert {k for k in rec.cells} == {(b, m) for b in BRANCHES for m in METHODS}
    for cell in rec.cells.values():
        assert len(cell.cv_mse_each) == 5 and np.isfinite(cell.cv_mse)
        assert cell.pooled.qbar.shape == (3,)
    assert rec.cells[("clean-ols", "T1")].selection is None
    assert rec.cells[("contaminated-en", "T1")].selection is not None


def test_replicate_deterministic():
    sc = small()
    a, b = run_replicate(sc, 1, SEED), run_replicate(sc, 1, SEED)
    for k in a.cells:
        assert a.cells[k].cv_mse == b.cells[k].cv_mse
        assert np.array_equal(a.cells[k].pooled.qbar, b.cells[k].pooled.qbar)
        assert np.array_equal(a.cells[k].pred_median, b.cells[k].pred_median)
    assert a.fold_digest == b.fold_digest


def test_replicates_differ():
    sc = small()
    a, b = run_replicate(sc, 0, SEED), run_replicate(sc, 1, SEED)
    assert a.fold_digest != b.fold_digest


def test_stream_layout_rederivable():
    sc = small()
    rec = run_replicate(sc, 2, SEED, keep_data=True)
    base = replicate_path(sc, 2)

    def s(task):
        return Stream(SEED, base.child("task", task))

    clean = generate_baseline(sc.n, GenParams(rho=sc.rho), s("data"))
    dirty = contaminate(clean, sc.p_ext, s("contaminate"))
    want_clean = apply_mcar_mask(clean, sc.p_miss, s("mask-clean"))
    want_dirty = apply_mcar_mask(dirty, sc.p_miss, s("mask-contaminated"))
    got = rec.datasets
    assert np.array_equal(got["clean-ols"].x2_mask, want_clean.x2_mask)
    assert np.array_equal(got["clean-ols"].y, want_clean.y)
    assert np.array_equal(got["contaminated-en"].y, want_dirty.y)
    assert np.array_equal(got["contaminated-en"].contaminated_idx, dirty.contaminated_idx)


def test_retry_on_numeric_failure(monkeypatch):
    real = mcengine._replicate_once

    def flaky(sc, r, seed, settings, attempt, keep_data, keep_fits):
        if attempt == 0:
            raise SingularDesignError("forced")
        return real(sc, r, seed, settings, attempt, keep_data, keep_fits)

    monkeypatch.setattr(mcengine, "_replicate_once", flaky)
    rec = run_replicate(small(), 0, SEED)
    assert rec.attempt == 1


def test_double_failure_raises(monkeypatch):
    def broken(*args):
        raise SingularDesignError("forced")

    monkeypatch.setattr(mcengine, "_replicate_once", broken)
    with pytest.raises(ReplicateFailure, match="replicate 0"):
        run_replicate(small(), 0, SEED)


def test_single_replicate_variance_flag():
    summary = run_scenario(small(n_sim=1), SEED)
    for _, _, cell in summary.ordered_cells():
        assert cell.cvmse.var == 0.0 and not cell.cvmse.var_defined


def test_workers_do_not_change_summary():
    sc = small(n_sim=4)
    one = run_scenario(sc, SEED, workers=1, keep_replicates=True)
    two = run_scenario(sc, SEED, workers=2, keep_replicates=True)
    for (b, m, c1), (_, _, c2) in zip(one.ordered_cells(), two.ordered_cells()):
        assert np.array_equal(c1.metrics.bias, c2.metrics.bias)
        assert np.array_equal(c1.metrics.coverage, c2.metrics.coverage)
        assert c1.cvmse == c2.cvmse
        assert np.array_equal(one.trace.cv_mse[(b, m)], two.trace.cv_mse[(b, m)])


def test_on_record_sees_every_replicate():
    seen = []
    run_scenario(small(n_sim=3), SEED, on_record=lambda rec: seen.append(rec.r))
    assert seen == [0, 1, 2]


def test_en_branch_selection_stages_counted():
    summary = run_scenario(small(n_sim=3, methods=("T1",), branches=("contaminated-en",)), SEED)
    cell = summary.cells[("contaminated-en", "T1")]
    assert sum(cell.selection_stages.values()) == 3


@pytest.mark.slow
def test_desk_scenario_populated():
    sc = Scenario(n=40, p_miss=0.30, p_ext=0.05, rho=0.6, M=5, n_sim=50)
    sc.validate()
    summary = run_scenario(sc, SEED)
    cells = list(summary.ordered_cells())
    assert [(b, m) for b, m, _ in cells] == [(b, m) for b in BRANCHES for m in METHODS]
    for _, _, c in cells:
        assert np.all(np.isfinite(c.metrics.bias)) and np.all(np.isfinite(c.metrics.rmse))
        assert np.all((0 <= c.metrics.coverage) & (c.metrics.coverage <= 1))
        assert c.cvmse.var_defined and c.cvmse.q025 <= c.cvmse.q50 <= c.cvmse.q975
        assert c.qq.pred_q.shape == (99,)
