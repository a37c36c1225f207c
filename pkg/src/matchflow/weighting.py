"""Covariate weight estimation from accrued responses.

The matching designs weight each covariate by how much of the response it
explains. Both procedures operate on standardized covariates and
variance-adjusted responses:

  naive     w_j  proportional to  R^2 of the response on covariate j alone
  stepwise  w_j  proportional to  the R^2 increment covariate j contributed
                 when it was selected by forward stepwise regression

The stepwise increment is the squared semi-partial correlation between the
response and the covariate residualized on the already-selected set; the two
procedures therefore agree exactly when the covariates are orthogonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InsufficientHistory

# residual variance below this fraction of the original marks a covariate as
# collinear with the selected set; its recorded increment is zero
_COLLINEAR_TOL = 1e-10
# response sum of squares below this is treated as "no signal at all"
_NO_SIGNAL_TOL = 1e-12


@dataclass
class HistoryView:
    """Rows for previously assigned subjects whose responses are known."""

    X: np.ndarray  # (h, p) covariates
    y: np.ndarray  # (h,) responses
    w: np.ndarray  # (h,) assignments in {0, 1}

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        self.w = np.asarray(self.w)
        if self.X.shape[0] != self.y.shape[0] or self.y.shape[0] != self.w.shape[0]:
            raise ValueError("history rows disagree between X, y and w")


def adjust_responses(history: HistoryView) -> np.ndarray:
    """Residuals of the responses on {intercept, assignment}.

    Removes the average treatment effect so weight estimation sees outcome
    variation, not arm membership. With an all-equal assignment vector the
    fit degenerates to centering. Requires at least 3 rows.
    """
    y, w = history.y, np.asarray(history.w, dtype=float)
    if y.shape[0] < 3:
        raise InsufficientHistory(f"need >= 3 responded subjects, have {y.shape[0]}")
    if np.all(w == w[0]):
        return y - y.mean()
    A = np.column_stack([np.ones_like(y), w])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return y - A @ coef


def standardize_columns(M: np.ndarray):
    """Center and scale columns to sample sd 1 (ddof=1).

    Returns (Z, means, sds, degenerate_mask). Zero-variance columns cannot be
    scaled; they come back as all-zeros with their mask bit set so callers can
    exclude them instead of dividing by zero.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] < 2:
        raise ValueError("standardization needs at least 2 rows")
    means = M.mean(axis=0)
    sds = M.std(axis=0, ddof=1)
    degenerate = sds <= 1e-12 * np.maximum(1.0, np.abs(means))
    Z = np.zeros_like(M)
    ok = ~degenerate
    Z[:, ok] = (M[:, ok] - means[ok]) / sds[ok]
    return Z, means, sds, degenerate


def _prepared(history: HistoryView, treatment_adjust: bool):
    if treatment_adjust:
        r = adjust_responses(history)
    else:
        # the allocation engine adjusts by centering only, so that weights
        # (and hence the match structure) never depend on the realized
        # assignments; the conditional randomization test needs exactly this
        r = history.y - history.y.mean()
    Z, _, _, degenerate = standardize_columns(history.X)
    return r, Z, degenerate


def naive_weights(history: HistoryView, treatment_adjust: bool = True) -> np.ndarray:
    """Normalized univariate R^2 of the adjusted response on each covariate."""
    h, p = history.X.shape
    if h < 4:
        raise InsufficientHistory(f"naive weights need >= 4 rows, have {h}")
    r, Z, degenerate = _prepared(history, treatment_adjust)
    sst = float(r @ r)
    if sst < _NO_SIGNAL_TOL:
        return np.full(p, 1.0 / p)
    r2 = np.zeros(p)
    for j in range(p):
        if degenerate[j]:
            continue
        zj = Z[:, j]
        r2[j] = (zj @ r) ** 2 / ((zj @ zj) * sst)
    total = r2.sum()
    if total < _NO_SIGNAL_TOL:
        return np.full(p, 1.0 / p)
    return r2 / total


def stepwise_weights(history: HistoryView, treatment_adjust: bool = True) -> np.ndarray:
    """Normalized R^2 increments from forward stepwise selection.

    At each of p steps the unselected covariate with the largest squared
    semi-partial correlation is added (ties to the lowest index) and its
    increment recorded. Covariates collinear with the selected set record 0.
    Requires p + 3 responded rows; callers fall back to equal weights below
    that.
    """
    h, p = history.X.shape
    if h < p + 3:
        raise InsufficientHistory(f"stepwise weights need >= {p + 3} rows, have {h}")
    r, Z, _ = _prepared(history, treatment_adjust)
    sst = float(r @ r)
    if sst < _NO_SIGNAL_TOL:
        return np.full(p, 1.0 / p)

    ry = r.copy()
    rx = Z.copy()
    recorded = np.zeros(p)
    unselected = list(range(p))
    for _ in range(p):
        best_j, best_score = -1, -np.inf
        for j in unselected:
            v = float(rx[:, j] @ rx[:, j])
            if v / (h - 1) < _COLLINEAR_TOL:
                continue
            score = (float(rx[:, j] @ ry)) ** 2 / (v * sst)
            if score > best_score:
                best_j, best_score = j, score
        if best_j < 0:
            # everything left is collinear with the selected set: record zeros
            unselected.pop(0)
            continue
        recorded[best_j] = best_score
        unselected.remove(best_j)
        sel = rx[:, best_j].copy()
        norm = float(sel @ sel)
        ry -= (float(sel @ ry) / norm) * sel
        for j in unselected:
            rx[:, j] -= (float(sel @ rx[:, j]) / norm) * sel

    total = recorded.sum()
    if total < _NO_SIGNAL_TOL:
        return np.full(p, 1.0 / p)
    return recorded / total
