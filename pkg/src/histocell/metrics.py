"""Evaluation metrics: per-cell-type correlation (CC) and L1 error.

CC for a cell type is the Pearson correlation across spots between the
predicted and true columns; types where either column is constant are
undefined and excluded from the mean.  L1 is the mean absolute error over
every (spot, type) entry, optionally after row-normalizing both matrices
to proportions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import AbundanceMatrix, fmt_float

__all__ = [
    "EvalReport",
    "REPORT_COLUMNS",
    "cc_score",
    "l1_score",
    "evaluate",
    "write_report",
]

REPORT_COLUMNS = ("split", "sample_id", "cell_type", "n_spots",
                  "cc", "l1", "coloc_cosine", "coloc_correlation")


@dataclass
class EvalReport:
    """Scores for one evaluated sample (or a pooled set of spots)."""

    sample_id: str
    cell_types: tuple[str, ...]
    per_cell_type_cc: np.ndarray   # NaN where undefined
    mean_cc: float
    per_cell_type_l1: np.ndarray
    l1: float
    n_spots: int
    undefined_cc_types: tuple[str, ...] = ()


def _aligned(pred: AbundanceMatrix, truth: AbundanceMatrix) -> None:
    if pred.spot_ids != truth.spot_ids:
        raise ValueError("spot_ids differ between prediction and truth")
    if pred.cell_types != truth.cell_types:
        raise ValueError("cell_types differ between prediction and truth")


def cc_score(pred: AbundanceMatrix, truth: AbundanceMatrix):
    """Per-type Pearson correlation across spots plus the mean over the
    defined types.  Returns (per_type, mean) with NaN marking undefined."""
    _aligned(pred, truth)
    if pred.n < 2:
        raise ValueError(f"correlation needs at least 2 spots, got {pred.n}")
    a = pred.values - pred.values.mean(axis=0)
    b = truth.values - truth.values.mean(axis=0)
    ssa = (a * a).sum(axis=0)
    ssb = (b * b).sum(axis=0)
    defined = (ssa > 0.0) & (ssb > 0.0)
    per_type = np.full(len(pred.cell_types), np.nan)
    if defined.any():
        num = (a[:, defined] * b[:, defined]).sum(axis=0)
        per_type[defined] = num / np.sqrt(ssa[defined] * ssb[defined])
    else:
        raise ValueError("no defined correlations (every cell type is constant)")
    return per_type, float(per_type[defined].mean())


def _row_normalize(values: np.ndarray) -> np.ndarray:
    # proportions per spot; rows without positive mass stay all zero
    sums = values.sum(axis=1, keepdims=True)
    safe = np.where(sums > 0.0, sums, 1.0)
    return np.where(sums > 0.0, values / safe, 0.0)


def l1_score(pred: AbundanceMatrix, truth: AbundanceMatrix, normalize: bool = False) -> float:
    """Mean |pred - truth| over all entries; `normalize` compares
    per-spot proportions instead of raw abundances."""
    _aligned(pred, truth)
    p, t = pred.values, truth.values
    if normalize:
        p, t = _row_normalize(p), _row_normalize(t)
    return float(np.abs(p - t).mean())


def evaluate(pred: AbundanceMatrix, truth: AbundanceMatrix, sample_id: str,
             normalize: bool = False) -> EvalReport:
    per_cc, mean_cc = cc_score(pred, truth)
    p, t = pred.values, truth.values
    if normalize:
        p, t = _row_normalize(p), _row_normalize(t)
    per_l1 = np.abs(p - t).mean(axis=0)
    undefined = tuple(ct for ct, v in zip(pred.cell_types, per_cc) if np.isnan(v))
    return EvalReport(
        sample_id=sample_id,
        cell_types=pred.cell_types,
        per_cell_type_cc=per_cc,
        mean_cc=mean_cc,
        per_cell_type_l1=per_l1,
        l1=float(per_l1.mean()),
        n_spots=pred.n,
        undefined_cc_types=undefined,
    )


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if np.isnan(value) else fmt_float(value)
    return str(value)


def write_report(path, rows) -> None:
    """report.csv: one dict per row keyed by REPORT_COLUMNS; None/NaN
    serialize as empty cells."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row.get(col)) for col in REPORT_COLUMNS])


def report_rows(split: str, report: EvalReport, coloc_cosine=None,
                coloc_correlation=None) -> list[dict]:
    """Rows for one evaluated sample: one per cell type plus an ALL row
    carrying the means and the colocalization comparison."""
    rows = []
    for i, ct in enumerate(report.cell_types):
        rows.append({
            "split": split,
            "sample_id": report.sample_id,
            "cell_type": ct,
            "n_spots": report.n_spots,
            "cc": float(report.per_cell_type_cc[i]),
            "l1": float(report.per_cell_type_l1[i]),
        })
    rows.append({
        "split": split,
        "sample_id": report.sample_id,
        "cell_type": "ALL",
        "n_spots": report.n_spots,
        "cc": report.mean_cc,
        "l1": report.l1,
        "coloc_cosine": coloc_cosine,
        "coloc_correlation": coloc_correlation,
    })
    return rows
