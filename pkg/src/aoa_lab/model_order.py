"""
Source-count estimation with the MDL and AIC information criteria.

Both criteria measure how far the trailing covariance eigenvalues are from
being equal (the log ratio of their geometric to arithmetic mean) and add a
complexity penalty. With a single snapshot they are applied to the spatially
smoothed covariance, whose subarray count serves as the snapshot count.
"""

from dataclasses import dataclass

import numpy as np

from .classical import SmoothedCovariance
from .errors import DomainError, NumericalError
from .numerics import hermitian_eig

EIGEN_FLOOR = 1e-15
MIN_ORDER, MAX_ORDER = 1, 4


@dataclass(frozen=True)
class OrderCriterionTrace:
    criterion: str
    values: np.ndarray
    selected: int
    clamped: int


def sphericity_log_ratio(eigenvalues: np.ndarray, k: int) -> float:
    """``log(geometric_mean / arithmetic_mean)`` of ``eigenvalues[k:]`` (always <= 0)."""
    tail = np.asarray(eigenvalues[k:], dtype=float)
    return float(np.mean(np.log(tail)) - np.log(np.mean(tail)))


def _penalty(criterion: str, k: int, q: int, snapshots: int) -> float:
    free = k * (2 * q - k)
    if criterion == "mdl":
        return 0.5 * free * np.log(snapshots)
    if criterion == "aic":
        return 2.0 * free
    raise DomainError(f"unknown criterion {criterion!r}")


def information_criterion(eigenvalues, snapshots: int, criterion: str = "mdl") -> OrderCriterionTrace:
    """
    Evaluate MDL or AIC for candidate orders ``k = 0 .. Q-1``.

    ``eigenvalues`` may be in any order; they are sorted descending and
    clamped below at 1e-15. The selected order is the first argmin (ties go to
    the smaller order) and ``clamped`` restricts it to 1..4.
    """
    criterion = criterion.lower()
    lam = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    if lam.ndim != 1 or lam.size < 1:
        raise DomainError("need at least one eigenvalue")
    if snapshots < 1:
        raise DomainError("snapshot count must be positive")
    if np.all(lam < EIGEN_FLOOR):
        raise NumericalError("all eigenvalues are below the clamp floor; covariance is degenerate")
    lam = np.maximum(lam, EIGEN_FLOOR)
    q = lam.size
    scale = 1.0 if criterion == "mdl" else 2.0
    values = np.array(
        [
            -scale * snapshots * (q - k) * sphericity_log_ratio(lam, k)
            + _penalty(criterion, k, q, snapshots)
            for k in range(q)
        ]
    )
    selected = int(np.argmin(values))
    return OrderCriterionTrace(
        criterion, values, selected, min(max(selected, MIN_ORDER), MAX_ORDER)
    )


def _eigenvalues(cov: SmoothedCovariance) -> np.ndarray:
    return hermitian_eig(cov.matrix).eigenvalues


def mdl_order(cov: SmoothedCovariance) -> OrderCriterionTrace:
    return information_criterion(_eigenvalues(cov), cov.subarray_count, "mdl")


def aic_order(cov: SmoothedCovariance) -> OrderCriterionTrace:
    return information_criterion(_eigenvalues(cov), cov.subarray_count, "aic")
