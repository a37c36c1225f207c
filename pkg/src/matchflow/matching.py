"""Distances between covariate vectors and match-threshold rules.

A new entrant is matched to its nearest reservoir subject when that distance
falls at or below a threshold calibrated so roughly a lam-fraction of random
pairs would qualify: an F quantile under the scaled Mahalanobis distance, or
an empirical bootstrap quantile under the covariate-weighted distance.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg
import scipy.stats

from .core import DegenerateCovariance

_RIDGE = 1e-8


def weighted_distance(a: np.ndarray, b: np.ndarray, alpha: np.ndarray) -> float:
    """Covariate-weighted squared distance sum_j alpha_j * (a_j - b_j)^2."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if a.shape != b.shape or a.shape != alpha.shape:
        raise ValueError(
            f"dimension mismatch: a{a.shape}, b{b.shape}, alpha{alpha.shape}"
        )
    diff = a - b
    return float(alpha @ (diff * diff))


def _mahalanobis_solver(X: np.ndarray):
    """Cholesky factor of the sample covariance of X, with one ridge retry.

    Returns (scale, cho_factor) where scale = (t - p) / (2 p (t - 1)).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t, p = X.shape
    if t <= p:
        raise ValueError(f"need more rows than covariates, have t={t}, p={p}")
    S = np.cov(X.T, ddof=1).reshape(p, p)
    scale = (t - p) / (2.0 * p * (t - 1.0))
    try:
        factor = scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError:
        ridge = _RIDGE * np.trace(S) / p
        try:
            factor = scipy.linalg.cho_factor(S + ridge * np.eye(p))
        except np.linalg.LinAlgError as exc:
            raise DegenerateCovariance(
                "sample covariance singular even after ridge retry"
            ) from exc
    return scale, factor


def mahalanobis_distance(a: np.ndarray, b: np.ndarray, X: np.ndarray) -> float:
    """Scaled Mahalanobis distance between a and b.

    d = ((t - p) / (2 p (t - 1))) * (a - b)' S^{-1} (a - b), with S the sample
    covariance of the t covariate rows seen so far. Under multivariate normal
    covariates d is an F(p, t - p) draw for a random pair, which is what the
    F-quantile threshold exploits.
    """
    scale, factor = _mahalanobis_solver(X)
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(scale * (diff @ scipy.linalg.cho_solve(factor, diff)))


def mahalanobis_distances(
    entrant: np.ndarray, candidates: np.ndarray, X: np.ndarray
) -> np.ndarray:
    """Scaled Mahalanobis distance from one entrant to every candidate row."""
    scale, factor = _mahalanobis_solver(X)
    diffs = np.atleast_2d(np.asarray(candidates, dtype=float)) - np.asarray(
        entrant, dtype=float
    )
    solved = scipy.linalg.cho_solve(factor, diffs.T)
    return scale * np.einsum("ij,ji->i", diffs, solved)


def f_quantile_threshold(lam: float, p: int, n: int) -> float:
    """lam quantile of the F(p, n - p) distribution."""
    if not (0.0 < lam < 1.0):
        raise ValueError("lam must lie in (0, 1)")
    if p < 1 or n <= p:
        raise ValueError(f"need n > p >= 1, have p={p}, n={n}")
    return float(scipy.stats.f.ppf(lam, p, n - p))


def bootstrap_threshold(
    X: np.ndarray, alpha: np.ndarray, lam: float, resamples: int, seed: int
) -> float:
    """Empirical lam quantile of weighted distances over random row pairs.

    Draws `resamples` ordered pairs (i, j), i != j, each uniform and
    independent across resamples: i uniform on [0, t), j uniform on the
    remaining t - 1 rows. The threshold is the ceil(lam * resamples)-th
    smallest pair distance, so it always equals one of the sampled distances.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t, p = X.shape
    if t < 2:
        raise ValueError("need at least 2 rows to draw a pair")
    if not (0.0 < lam < 1.0):
        raise ValueError("lam must lie in (0, 1)")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (p,):
        raise ValueError(f"alpha has shape {alpha.shape}, expected ({p},)")
    rng = np.random.default_rng(seed)
    i = rng.integers(0, t, size=resamples)
    j = rng.integers(0, t - 1, size=resamples)
    j = j + (j >= i)  # uniform over rows distinct from i
    diffs = X[i] - X[j]
    dists = np.sort((diffs * diffs) @ alpha)
    k = math.ceil(lam * resamples)
    return float(dists[k - 1])
