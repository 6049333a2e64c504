"""Regression metrics, per-phase evaluation, multi-run aggregation,
paired-bootstrap significance, and report emission.

All metric functions are pure and operate on plain vectors. Reports keep
per-run values so a multi-seed comparison can quote mean and spread; rows
where a metric is undefined (fewer than two samples, constant vector)
carry None and render as "NA".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataFormatError, UndefinedMetricError

METRICS = ("mae", "rmse", "r2", "pearson")

REPORT_FORMAT = "tdreport-v1"


def _check_pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1 or y.size == 0:
        raise ValueError(f"need equal non-empty vectors, got {y.shape} vs {yhat.shape}")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rmse(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    diff = y - yhat
    return float(np.sqrt(np.mean(diff * diff)))


def r2(y, yhat) -> float:
    """Coefficient of determination, 1 - SS_res / SS_total.

    Exactly 1 for a perfect prediction and exactly 0 for a predictor that
    always answers mean(y); can go negative for worse-than-mean models.
    """
    y, yhat = _check_pair(y, yhat)
    if y.size < 2:
        raise UndefinedMetricError("r2 needs at least 2 samples")
    ss_total = float(np.sum((y - y.mean()) ** 2))
    if ss_total == 0.0:
        raise UndefinedMetricError("r2 is undefined for a constant ground truth")
    ss_res = float(np.sum((y - yhat) ** 2))
    return 1.0 - ss_res / ss_total


def pearson(y, yhat) -> float:
    """Sample Pearson correlation: covariance over the product of std devs."""
    y, yhat = _check_pair(y, yhat)
    if y.size < 2:
        raise UndefinedMetricError("pearson needs at least 2 samples")
    yc = y - y.mean()
    pc = yhat - yhat.mean()
    denom = np.sqrt(float(yc @ yc)) * np.sqrt(float(pc @ pc))
    if denom == 0.0:
        raise UndefinedMetricError("pearson is undefined when either vector is constant")
    return float(yc @ pc) / denom


# --- per-phase evaluation ----------------------------------------------------


@dataclass
class PhaseRow:
    phase: str  # "All" or "1".."4"
    n: int
    metrics: dict[str, list[Optional[float]]]  # metric -> one value per run


@dataclass
class EvalReport:
    model: str
    rows: list[PhaseRow]

    def row(self, phase: str) -> PhaseRow:
        for row in self.rows:
            if row.phase == phase:
                return row
        raise KeyError(f"no row for phase {phase!r} in report for {self.model}")


def _metric_cell(y, yhat) -> dict[str, Optional[float]]:
    cell: dict[str, Optional[float]] = {"mae": mae(y, yhat), "rmse": rmse(y, yhat)}
    for name, fn in (("r2", r2), ("pearson", pearson)):
        try:
            cell[name] = fn(y, yhat)
        except UndefinedMetricError:
            cell[name] = None
    return cell


def evaluate(model_name: str, y, yhat, phases) -> EvalReport:
    """One "All" row plus one row per phase present in the test set."""
    y, yhat = _check_pair(y, yhat)
    phases = np.asarray(phases, dtype=int)
    if phases.shape != y.shape:
        raise ValueError("phases must align with y")
    rows = [PhaseRow(phase="All", n=int(y.size),
                     metrics={k: [v] for k, v in _metric_cell(y, yhat).items()})]
    for phase in (1, 2, 3, 4):
        sel = phases == phase
        if not sel.any():
            continue
        cell = _metric_cell(y[sel], yhat[sel])
        rows.append(PhaseRow(phase=str(phase), n=int(sel.sum()),
                             metrics={k: [v] for k, v in cell.items()}))
    return EvalReport(model=model_name, rows=rows)


def merge_runs(reports: list[EvalReport]) -> EvalReport:
    """Combine per-seed reports of the same model into per-run metric lists."""
    if not reports:
        raise ValueError("no reports to merge")
    first = reports[0]
    merged = EvalReport(
        model=first.model,
        rows=[PhaseRow(phase=r.phase, n=r.n, metrics={m: list(r.metrics[m]) for m in METRICS})
              for r in first.rows],
    )
    for report in reports[1:]:
        if report.model != first.model:
            raise ValueError("cannot merge runs of different models")
        for row in merged.rows:
            other = report.row(row.phase)
            if other.n != row.n:
                raise ValueError(f"run disagreement on n for phase {row.phase}")
            for m in METRICS:
                row.metrics[m].extend(other.metrics[m])
    return merged


def summary(values: list[Optional[float]]) -> tuple[Optional[float], Optional[float]]:
    """(mean, std) over the defined run values; (None, None) if all undefined."""
    defined = [v for v in values if v is not None]
    if not defined:
        return None, None
    arr = np.asarray(defined, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


# --- significance -------------------------------------------------------------


def significance(errors_a, errors_b, n_boot: int = 10000, seed: int = 0) -> float:
    """Two-sided paired bootstrap p-value for mean(errors_a - errors_b) vs 0.

    Resamples trial indices with replacement and measures how often the
    mean paired difference lands on either side of zero. Identical error
    vectors give p = 1 by definition.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired errors must have equal shape, got {a.shape} vs {b.shape}")
    if a.size < 10:
        raise ValueError("significance needs at least 10 paired errors")
    diffs = a - b
    if np.all(diffs == 0.0):
        return 1.0
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, diffs.size, size=(n_boot, diffs.size))
    means = diffs[idx].mean(axis=1)
    p_low = float(np.mean(means <= 0.0))
    p_high = float(np.mean(means >= 0.0))
    return min(1.0, 2.0 * min(p_low, p_high))


# --- comparative report ---------------------------------------------------------


@dataclass
class ComparisonReport:
    models: list[EvalReport]
    reference: Optional[str] = None
    p_values: dict[str, Optional[float]] = field(default_factory=dict)
    n_boot: int = 10000
    seed: int = 0


def compare_errors(abs_errors: dict[str, np.ndarray], reference: str,
                   n_boot: int = 10000, seed: int = 0) -> dict[str, Optional[float]]:
    """p-value per model for its paired absolute errors against the reference."""
    if reference not in abs_errors:
        raise ValueError(f"reference model {reference!r} has no error vector")
    out: dict[str, Optional[float]] = {}
    for name, errors in abs_errors.items():
        if name == reference:
            out[name] = None
            continue
        out[name] = significance(errors, abs_errors[reference], n_boot=n_boot, seed=seed)
    return out


def report_to_dict(report: ComparisonReport) -> dict:
    models = []
    for er in report.models:
        rows = []
        for row in er.rows:
            metrics = {}
            for m in METRICS:
                mean_v, std_v = summary(row.metrics[m])
                metrics[m] = {"runs": row.metrics[m], "mean": mean_v, "std": std_v}
            rows.append({"phase": row.phase, "n": row.n, "metrics": metrics})
        models.append({"model": er.model, "rows": rows})
    return {
        "format": REPORT_FORMAT,
        "models": models,
        "significance": {
            "reference": report.reference,
            "n_boot": report.n_boot,
            "seed": report.seed,
            "p_values": report.p_values,
        },
    }


def report_from_dict(doc: dict) -> ComparisonReport:
    if doc.get("format") != REPORT_FORMAT:
        raise DataFormatError(f"unknown report format {doc.get('format')!r}")
    models = []
    for entry in doc["models"]:
        rows = [PhaseRow(phase=r["phase"], n=int(r["n"]),
                         metrics={m: list(r["metrics"][m]["runs"]) for m in METRICS})
                for r in entry["rows"]]
        models.append(EvalReport(model=entry["model"], rows=rows))
    sig = doc.get("significance", {})
    return ComparisonReport(
        models=models,
        reference=sig.get("reference"),
        p_values=dict(sig.get("p_values", {})),
        n_boot=int(sig.get("n_boot", 10000)),
        seed=int(sig.get("seed", 0)),
    )


def emit_report(report: ComparisonReport, base_path: str | Path) -> tuple[Path, Path]:
    """Write <base>.json (full) and <base>.csv (model,phase,metric,mean,std,n)."""
    base = Path(base_path)
    json_path = base.with_suffix(".json")
    csv_path = base.with_suffix(".csv")
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report_to_dict(report), fh, indent=2)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("model,phase,metric,mean,std,n\n")
        for er in report.models:
            for row in er.rows:
                for m in METRICS:
                    mean_v, std_v = summary(row.metrics[m])
                    mean_s = "NA" if mean_v is None else repr(mean_v)
                    std_s = "NA" if std_v is None else repr(std_v)
                    fh.write(f"{er.model},{row.phase},{m},{mean_s},{std_s},{row.n}\n")
    return json_path, csv_path
