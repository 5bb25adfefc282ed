"""Composite regression loss and its analytic gradient.

The training objective combines three terms on a batch of predictions:
squared error, absolute error, and a negated Pearson correlation computed
per output column and averaged across columns.  The correlation term uses
an epsilon-padded denominator, so columns without variance contribute zero
instead of NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["LossBreakdown", "mse", "mae", "pearson_loss", "composite_loss"]

DEFAULT_EPSILON = 1e-8


@dataclass
class LossBreakdown:
    """All loss terms for one batch plus d(total)/d(pred)."""

    mse: float
    mae: float
    pearson: float
    total: float
    grad: np.ndarray  # (n, C)


def _as_matrix(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[:, None]
    if truth.ndim == 1:
        truth = truth[:, None]
    if pred.ndim != 2 or truth.ndim != 2:
        raise ValueError("pred and truth must be 1-D or 2-D arrays")
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    return pred, truth


def mse(pred, truth) -> float:
    """Mean squared error over all n*C entries."""
    pred, truth = _as_matrix(pred, truth)
    if pred.size == 0:
        raise ValueError("mse of empty input")
    d = pred - truth
    return float(np.mean(d * d))


def mae(pred, truth) -> float:
    """Mean absolute error over all n*C entries."""
    pred, truth = _as_matrix(pred, truth)
    if pred.size == 0:
        raise ValueError("mae of empty input")
    return float(np.mean(np.abs(pred - truth)))


def _pearson_columns(pred: np.ndarray, truth: np.ndarray, epsilon: float):
    """Per-column centered sums used by both the value and the gradient."""
    a = pred - pred.mean(axis=0, keepdims=True)
    b = truth - truth.mean(axis=0, keepdims=True)
    num = np.sum(a * b, axis=0)
    sa = np.sqrt(np.sum(a * a, axis=0))
    sb = np.sqrt(np.sum(b * b, axis=0))
    den = sa * sb + epsilon
    defined = (sa > 0.0) & (sb > 0.0)
    return a, b, num, sa, sb, den, defined


def pearson_loss(pred, truth, epsilon: float = DEFAULT_EPSILON) -> float:
    """Negated Pearson correlation per column, averaged over columns.

    Each column's value is -sum(a*b) / (sqrt(sum a^2)*sqrt(sum b^2) + epsilon)
    with a, b the column-centered prediction and truth.  A column where
    either side has zero variance contributes exactly 0.
    """
    pred, truth = _as_matrix(pred, truth)
    if pred.shape[0] < 2:
        raise ValueError(f"pearson_loss needs at least 2 rows, got {pred.shape[0]}")
    if epsilon <= 0.0:
        raise ValueError("epsilon must be > 0")
    _, _, num, _, _, den, defined = _pearson_columns(pred, truth, epsilon)
    values = np.zeros(pred.shape[1])
    values[defined] = -(num[defined] / den[defined])
    return float(values.mean())


def composite_loss(
    pred,
    truth,
    lambda1: float = 0.5,
    lambda2: float = 0.5,
    epsilon: float = DEFAULT_EPSILON,
) -> LossBreakdown:
    """Total loss  mse + lambda1*mae + lambda2*pearson  and its gradient.

    The gradient is analytic: the MAE subgradient at exact zero error is 0,
    and columns excluded from the Pearson term (zero variance on either
    side) contribute zero gradient as well.
    """
    pred, truth = _as_matrix(pred, truth)
    if pred.shape[0] < 2:
        raise ValueError(f"composite_loss needs at least 2 rows, got {pred.shape[0]}")
    if lambda1 < 0.0 or lambda2 < 0.0:
        raise ValueError("lambda1 and lambda2 must be >= 0")
    if epsilon <= 0.0:
        raise ValueError("epsilon must be > 0")

    n, c = pred.shape
    diff = pred - truth

    mse_value = float(np.mean(diff * diff))
    mae_value = float(np.mean(np.abs(diff)))

    a, b, num, sa, sb, den, defined = _pearson_columns(pred, truth, epsilon)
    col_values = np.zeros(c)
    col_values[defined] = -(num[defined] / den[defined])
    pearson_value = float(col_values.mean())

    grad = (2.0 / (n * c)) * diff + (lambda1 / (n * c)) * np.sign(diff)
    if lambda2 > 0.0 and defined.any():
        # d(-num/den)/d pred_k = -b_k/den + num*sb*a_k/(sa*den^2), per column.
        coeff = np.zeros(c)
        coeff[defined] = num[defined] * sb[defined] / (sa[defined] * den[defined] ** 2)
        gp = np.zeros_like(pred)
        gp[:, defined] = -b[:, defined] / den[defined] + coeff[defined] * a[:, defined]
        grad = grad + (lambda2 / c) * gp

    total = mse_value + lambda1 * mae_value + lambda2 * pearson_value
    return LossBreakdown(mse=mse_value, mae=mae_value, pearson=pearson_value, total=total, grad=grad)
