"""Result files: the summary CSV, JSON summaries, replicate traces, and dumps."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

from .mcengine import ReplicateRecord, ScenarioSummary

CSV_COLUMNS = (
    "n", "n_sim", "iter", "p_ext", "p_miss", "rho", "branch", "method",
    "bias_b0", "bias_b1", "bias_b2",
    "rmse_b0", "rmse_b1", "rmse_b2",
    "cov_b0", "cov_b1", "cov_b2",
    "mse_mean", "mse_var", "mse_q025", "mse_q50", "mse_q975",
)
FLOAT_FORMAT = "%.6f"


class OutputError(OSError):
    pass


def _num(x: float) -> str:
    return FLOAT_FORMAT % x


def csv_rows(summaries: Sequence[ScenarioSummary]) -> list[list[str]]:
    rows = []
    for s in summaries:
        sc = s.scenario
        head = [str(sc.n), str(sc.n_sim), str(sc.M), repr(sc.p_ext), repr(sc.p_miss), repr(sc.rho)]
        for branch, method, cell in s.ordered_cells():
            m, c = cell.metrics, cell.cvmse
            values = [*m.bias, *m.rmse, *m.coverage, c.mean, c.var, c.q025, c.q50, c.q975]
            rows.append(head + [branch, method] + [_num(v) for v in values])
    return rows


def render_csv(summaries: Sequence[ScenarioSummary]) -> str:
    if not summaries:
        raise ValueError("need at least one scenario summary")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(csv_rows(summaries))
    return buf.getvalue()


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def emit_csv(summaries: Sequence[ScenarioSummary], out_dir: str | Path, name: str = "summary.csv") -> Path:
    return _write(Path(out_dir) / name, render_csv(summaries))


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def summary_to_dict(s: ScenarioSummary) -> dict:
    sc = s.scenario
    cells = []
    for branch, method, cell in s.ordered_cells():
        cells.append(
            {
                "branch": branch,
                "method": method,
                "bias": cell.metrics.bias.tolist(),
                "rmse": cell.metrics.rmse.tolist(),
                "coverage": cell.metrics.coverage.tolist(),
                "cvmse": {
                    "mean": cell.cvmse.mean,
                    "var": cell.cvmse.var,
                    "q025": cell.cvmse.q025,
                    "q50": cell.cvmse.q50,
                    "q975": cell.cvmse.q975,
                    "var_defined": cell.cvmse.var_defined,
                },
                "qq": {
                    "probs": cell.qq.probs.tolist(),
                    "true_q": cell.qq.true_q.tolist(),
                    "pred_q": cell.qq.pred_q.tolist(),
                },
                "selection_stages": cell.selection_stages,
                "dropped_rate": cell.dropped_rate.tolist(),
            }
        )
    return {"key": sc.key, "scenario": _scenario_dict(sc), "cells": cells}


def _scenario_dict(sc) -> dict:
    return {
        "n": sc.n, "p_miss": sc.p_miss, "p_ext": sc.p_ext, "rho": sc.rho,
        "M": sc.M, "n_sim": sc.n_sim,
        "methods": list(sc.methods), "branches": list(sc.branches),
    }


def emit_summary_json(summaries: Sequence[ScenarioSummary], out_dir) -> Path:
    return _write(Path(out_dir) / "summary.json", _dumps([summary_to_dict(s) for s in summaries]))


def trace_to_dict(s: ScenarioSummary) -> dict:
    t = s.trace
    if t is None:
        raise ValueError(f"scenario {s.scenario.key} has no replicate trace")
    return {
        "key": s.scenario.key,
        "scenario": _scenario_dict(s.scenario),
        "cv_mse": [
            {"branch": b, "method": m, "values": t.cv_mse[(b, m)].tolist()}
            for b, m, _ in s.ordered_cells()
        ],
    }


def emit_replicates_json(summaries: Sequence[ScenarioSummary], out_dir) -> Path:
    return _write(Path(out_dir) / "replicates.json", _dumps([trace_to_dict(s) for s in summaries]))


def emit_manifest(manifest: dict, out_dir) -> Path:
    return _write(Path(out_dir) / "manifest.json", _dumps(manifest))


def emit_config(text: str, out_dir) -> Path:
    return _write(Path(out_dir) / "config.txt", text)


class RecordDumper:
    """``on_record`` hook writing audit CSVs and fit JSONL for one scenario."""

    def __init__(self, out_dir, index: int, data: bool, fits: bool):
        self.root = Path(out_dir)
        self.index, self.data, self.fits = index, data, fits
        self._fit_lines: list[str] = []

    def __call__(self, rec: ReplicateRecord) -> None:
        if self.data and rec.datasets:
            for branch, d in rec.datasets.items():
                path = self.root / "data" / f"scenario{self.index:03d}" / f"rep{rec.r:05d}_{branch}.csv"
                try:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    d.to_csv(path)
                except OSError as exc:
                    raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc
        if self.fits:
            for (branch, method), cell in rec.cells.items():
                line = {
                    "scenario": rec.scenario_key, "r": rec.r, "attempt": rec.attempt,
                    "branch": branch, "method": method, "fits": cell.fits,
                    "selection": list(cell.selection.selected) if cell.selection else None,
                    "pooled_qbar": cell.pooled.qbar.tolist(),
                }
                self._fit_lines.append(json.dumps(line, sort_keys=True))

    def close(self) -> None:
        if self.fits:
            path = self.root / "fits" / f"scenario{self.index:03d}.jsonl"
            _write(path, "".join(line + "\n" for line in self._fit_lines))


def load_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc.strerror or exc}") from exc

