"""
Grid-based classical AOA estimators for a single snapshot.

Bartlett beamformer, exhaustive deterministic ML, alternating projections
(AP), orthogonal matching pursuit (OMP) and spatially smoothed MUSIC. The ML
and AP estimators maximise the same objective, the energy of ``y`` captured
by the span of the candidate steering vectors::

    J(theta) = || P_A(theta) y ||^2
"""

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .array_model import ArrayGeometry, Snapshot, steering_matrix
from .errors import (
    BudgetError,
    ConditioningError,
    DomainError,
    EstimationError,
    StructuralError,
)
from .numerics import hermitian_eig, least_squares, projector

DEFAULT_ML_BUDGET = 1e10
_SPAN_TOL = 1e-10


@dataclass(frozen=True)
class GridSpec:
    fov_deg: tuple = (-25.0, 25.0)
    step_deg: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "fov_deg", tuple(float(v) for v in self.fov_deg))
        lo, hi = self.fov_deg
        if not self.step_deg > 0:
            raise DomainError("grid step must be positive")
        if not lo < hi:
            raise DomainError(f"grid FOV must be ordered, got {self.fov_deg}")
        if lo <= -90 or hi >= 90:
            raise DomainError("grid must lie strictly inside (-90, 90) degrees")

    @property
    def size(self) -> int:
        lo, hi = self.fov_deg
        return int(math.floor((hi - lo) / self.step_deg + 1e-9)) + 1

    def angles(self) -> np.ndarray:
        return self.fov_deg[0] + self.step_deg * np.arange(self.size)


@dataclass
class EstimateResult:
    method: str
    order: int
    angles_deg: np.ndarray
    objective: float = float("nan")
    iterations: int = 0
    runtime_seconds: float = 0.0
    trace: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.angles_deg = np.sort(np.asarray(self.angles_deg, dtype=float))
        if self.angles_deg.size != self.order:
            raise StructuralError("number of angles must equal the estimated order")


@dataclass(frozen=True, eq=False)
class SmoothedCovariance:
    matrix: np.ndarray
    subarray_size: int
    subarray_count: int


_dictionary_cache: dict = {}


def grid_dictionary(geometry: ArrayGeometry, grid: GridSpec) -> np.ndarray:
    """Steering vectors for every grid angle (N x P), cached per geometry/grid."""
    key = (geometry.key(), grid)
    a = _dictionary_cache.get(key)
    if a is None:
        if len(_dictionary_cache) > 32:
            _dictionary_cache.clear()
        a = steering_matrix(geometry, grid.angles())
        a.setflags(write=False)
        _dictionary_cache[key] = a
    return a


def _observation(y: Union[Snapshot, np.ndarray]) -> np.ndarray:
    vec = y.y if isinstance(y, Snapshot) else np.asarray(y, dtype=complex)
    if vec.ndim != 1:
        raise StructuralError("observation must be a 1-D vector")
    return vec


def _geometry(geometry: Optional[ArrayGeometry], n: int) -> ArrayGeometry:
    if geometry is None:
        return ArrayGeometry.ula(n)
    if geometry.element_count != n:
        raise StructuralError(
            f"geometry has {geometry.element_count} elements but observation has {n}"
        )
    return geometry


def ml_objective(y, columns) -> float:
    """``||P_A y||^2`` for an explicit steering matrix ``columns``."""
    vec = _observation(y)
    return float(np.real(np.vdot(vec, projector(columns) @ vec)))


def bartlett_spectrum(y, grid: GridSpec, geometry: Optional[ArrayGeometry] = None) -> np.ndarray:
    """``|a(theta)^H y|^2 / N`` over the grid."""
    vec = _observation(y)
    a = grid_dictionary(_geometry(geometry, vec.size), grid)
    return np.abs(a.conj().T @ vec) ** 2 / vec.size


def pick_peaks(spectrum: np.ndarray, count: int) -> np.ndarray:
    """
    Indices of the ``count`` largest strict local maxima of a 1-D spectrum.

    A point is a peak if it exceeds both neighbours; boundary points only need
    to exceed their single neighbour. When there are fewer than ``count`` peaks
    the remainder is filled with the largest non-peak points.
    """
    s = np.asarray(spectrum, dtype=float)
    p = s.size
    if count > p:
        raise EstimationError(f"cannot pick {count} peaks from {p} grid points")
    if p == 1:
        return np.array([0])
    left = np.concatenate(([True], s[1:] > s[:-1]))
    right = np.concatenate((s[:-1] > s[1:], [True]))
    peaks = np.flatnonzero(left & right)
    peaks = peaks[np.argsort(-s[peaks], kind="stable")][:count]
    if peaks.size < count:
        rest = np.setdiff1d(np.argsort(-s, kind="stable"), peaks, assume_unique=True)
        rest = rest[np.argsort(-s[rest], kind="stable")]
        peaks = np.concatenate((peaks, rest[: count - peaks.size]))
    return np.sort(peaks)


def bartlett_estimate(
    y, m: int, grid: GridSpec, geometry: Optional[ArrayGeometry] = None
) -> EstimateResult:
    t0 = time.perf_counter()
    spec = bartlett_spectrum(y, grid, geometry)
    idx = pick_peaks(spec, m)
    return EstimateResult(
        "bartlett",
        m,
        grid.angles()[idx],
        objective=float(np.sum(spec[idx])),
        iterations=1,
        runtime_seconds=time.perf_counter() - t0,
    )


def ml_operation_count(n: int, m: int, points: int) -> float:
    """Operation count ``(N^2 + M^3) * P^M`` of exhaustive ML."""
    return float((n * n + m**3) * float(points) ** m)


def _ml_search_1(a, b):
    energy = np.real(np.einsum("np,np->p", a.conj(), a))
    j = np.abs(b) ** 2 / energy
    best = int(np.argmax(j))
    return (best,), float(j[best])


def _ml_search_2(a, b):
    gram = a.conj().T @ a
    energy = np.real(np.diag(gram))
    i, k = np.triu_indices(a.shape[1], 1)
    c = gram[i, k]
    det = energy[i] * energy[k] - np.abs(c) ** 2
    num = (
        energy[k] * np.abs(b[i]) ** 2
        + energy[i] * np.abs(b[k]) ** 2
        - 2 * np.real(c * np.conj(b[i]) * b[k])
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        j = np.where(det > _SPAN_TOL * energy[i] * energy[k], num / det, -np.inf)
    best = int(np.argmax(j))
    return (int(i[best]), int(k[best])), float(j[best])


def _ml_search_general(a, b, m):
    p = a.shape[1]
    gram = a.conj().T @ a
    best_val, best_idx = -np.inf, None
    # lexicographic chunks: fix the leading m-2 indices, vectorise the last two
    for head in itertools.combinations(range(p), m - 2):
        start = head[-1] + 1 if head else 0
        if p - start < 2:
            continue
        ii, kk = np.triu_indices(p - start, 1)
        ii = ii + start
        kk = kk + start
        combos = np.column_stack([np.broadcast_to(head, (ii.size, len(head))), ii, kk])
        g = gram[combos[:, :, None], combos[:, None, :]]
        rhs = b[combos]
        try:
            sol = np.linalg.solve(g, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            sol = np.stack([np.linalg.lstsq(gi, ri, rcond=None)[0] for gi, ri in zip(g, rhs)])
        j = np.real(np.einsum("cm,cm->c", rhs.conj(), sol))
        cond_ok = np.abs(np.linalg.det(g)) > _SPAN_TOL * np.prod(
            np.real(np.diagonal(g, axis1=1, axis2=2)), axis=1
        )
        j = np.where(cond_ok, j, -np.inf)
        c = int(np.argmax(j))
        if j[c] > best_val:
            best_val, best_idx = float(j[c]), tuple(int(v) for v in combos[c])
    return best_idx, best_val


def ml_estimate(
    y,
    m: int,
    grid: GridSpec,
    geometry: Optional[ArrayGeometry] = None,
    max_operations: float = DEFAULT_ML_BUDGET,
) -> EstimateResult:
    """
    Exhaustive deterministic ML over unordered grid-angle combinations.

    Every combination of ``m`` distinct grid angles is scored with
    ``||P_A y||^2`` and the best is returned; ties go to the lexicographically
    smallest angle tuple. Searches with ``m > 3`` or with an estimated
    operation count above ``max_operations`` are refused.
    """
    vec = _observation(y)
    n = vec.size
    geometry = _geometry(geometry, n)
    p = grid.size
    ops = ml_operation_count(n, m, p)
    if m < 1 or m > n:
        raise DomainError(f"source count must be in 1..{n}")
    if m > 3 or ops > max_operations:
        raise BudgetError(
            f"exhaustive ML with M={m}, P={p}, N={n} needs about {ops:.3g} operations "
            f"(budget {max_operations:.3g}, M <= 3)",
            ops,
        )
    if m > p:
        raise EstimationError("grid has fewer points than sources")
    t0 = time.perf_counter()
    a = grid_dictionary(geometry, grid)
    b = a.conj().T @ vec
    if m == 1:
        idx, val = _ml_search_1(a, b)
    elif m == 2:
        idx, val = _ml_search_2(a, b)
    else:
        idx, val = _ml_search_general(a, b, m)
    if idx is None or not np.isfinite(val):
        raise EstimationError("no admissible angle combination on the grid")
    return EstimateResult(
        "ml",
        m,
        grid.angles()[list(idx)],
        objective=val,
        iterations=1,
        runtime_seconds=time.perf_counter() - t0,
    )


def _orthonormal_basis(columns: np.ndarray) -> np.ndarray:
    if columns.shape[1] == 0:
        return columns
    q, _ = np.linalg.qr(columns)
    return q


def _conditional_scores(a: np.ndarray, vec: np.ndarray, fixed: Sequence[int]) -> tuple:
    """
    Gain in ``J`` from adding each grid column to the fixed set.

    Returns ``(scores, base)`` where ``base = ||P_fixed y||^2`` so that
    ``J(fixed + [p]) = base + scores[p]``. Columns (numerically) inside the
    fixed span score ``-inf``.
    """
    q = _orthonormal_basis(a[:, list(fixed)])
    coef_y = q.conj().T @ vec
    y_perp = vec - q @ coef_y
    a_perp = a - q @ (q.conj().T @ a)
    energy = np.real(np.einsum("np,np->p", a_perp.conj(), a_perp))
    corr = np.abs(a_perp.conj().T @ y_perp) ** 2
    full = np.real(np.einsum("np,np->p", a.conj(), a))
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(energy > _SPAN_TOL * full, corr / energy, -np.inf)
    base = float(np.real(np.vdot(coef_y, coef_y)))
    return scores, base


def ap_estimate(
    y,
    m: int,
    grid: GridSpec,
    max_iters: int = 10,
    geometry: Optional[ArrayGeometry] = None,
) -> EstimateResult:
    """
    Alternating projections: coordinate ascent on ``||P_A y||^2``.

    Sources are initialised one at a time, each maximising ``J`` with the
    earlier ones held fixed. Each refinement pass then re-optimises every
    angle with the others fixed. A move is taken only if it strictly raises
    ``J``, so the objective trace never decreases. Iteration stops after
    ``max_iters`` passes or a pass with no change.
    """
    vec = _observation(y)
    n = vec.size
    if not 1 <= m <= n:
        raise DomainError(f"source count must be in 1..{n}")
    if max_iters < 1:
        raise DomainError("AP needs at least one iteration")
    t0 = time.perf_counter()
    a = grid_dictionary(_geometry(geometry, n), grid)

    chosen: list = []
    trace = []
    for _ in range(m):
        scores, base = _conditional_scores(a, vec, chosen)
        best = int(np.argmax(scores))
        if not np.isfinite(scores[best]):
            raise EstimationError("grid exhausted during AP initialisation")
        chosen.append(best)
        trace.append(base + float(scores[best]))

    passes = 0
    for passes in range(1, max_iters + 1):
        changed = False
        for i in range(m):
            others = chosen[:i] + chosen[i + 1 :]
            scores, base = _conditional_scores(a, vec, others)
            best = int(np.argmax(scores))
            if scores[best] > scores[chosen[i]]:
                chosen[i] = best
                changed = True
            trace.append(base + float(scores[chosen[i]]))
        if not changed:
            break

    return EstimateResult(
        "ap",
        m,
        grid.angles()[chosen],
        objective=trace[-1],
        iterations=passes,
        runtime_seconds=time.perf_counter() - t0,
        trace=tuple(trace),
    )


def omp_estimate(
    y, m: int, grid: GridSpec, geometry: Optional[ArrayGeometry] = None
) -> EstimateResult:
    """
    Orthogonal matching pursuit over the grid dictionary.

    At each step the atom most correlated with the residual is added, all
    selected gains are re-fitted by least squares and the residual updated.
    Atoms that would make the selection rank deficient are skipped.
    ``trace`` holds the residual norm after each step.
    """
    vec = _observation(y)
    n = vec.size
    if not 1 <= m <= n:
        raise DomainError(f"source count must be in 1..{n}")
    t0 = time.perf_counter()
    a = grid_dictionary(_geometry(geometry, n), grid)
    residual = vec.copy()
    chosen: list = []
    excluded = np.zeros(a.shape[1], dtype=bool)
    norms = [float(np.linalg.norm(residual))]
    while len(chosen) < m:
        corr = np.abs(a.conj().T @ residual)
        corr[excluded] = -np.inf
        for idx in np.argsort(-corr, kind="stable"):
            if excluded[idx]:
                raise EstimationError("OMP exhausted the grid")
            try:
                gains = least_squares(a[:, chosen + [int(idx)]], vec)
            except ConditioningError:
                excluded[idx] = True
                continue
            break
        else:
            raise EstimationError("OMP exhausted the grid")
        chosen.append(int(idx))
        excluded[idx] = True
        residual = vec - a[:, chosen] @ gains
        norms.append(float(np.linalg.norm(residual)))
    return EstimateResult(
        "omp",
        m,
        grid.angles()[chosen],
        objective=float(np.linalg.norm(vec) ** 2 - norms[-1] ** 2),
        iterations=m,
        runtime_seconds=time.perf_counter() - t0,
        trace=tuple(norms),
    )


def spatial_smooth(y, subarray_size: int = 8) -> SmoothedCovariance:
    """Forward spatial smoothing: average of the ``L = N - Q + 1`` window outer products."""
    vec = _observation(y)
    n = vec.size
    q = int(subarray_size)
    if not 1 <= q <= n:
        raise DomainError(f"subarray size must be in 1..{n}, got {q}")
    count = n - q + 1
    windows = np.lib.stride_tricks.sliding_window_view(vec, q)
    r = windows.T @ windows.conj() / count
    r = 0.5 * (r + r.conj().T)
    return SmoothedCovariance(r, q, count)


def music_spectrum(
    cov: SmoothedCovariance, m: int, grid: GridSpec, geometry: Optional[ArrayGeometry] = None
) -> np.ndarray:
    q = cov.subarray_size
    if not 1 <= m < q:
        raise DomainError(f"MUSIC needs 1 <= M < Q (got M={m}, Q={q}): no noise subspace")
    if geometry is None:
        geometry = ArrayGeometry.ula(q)
    elif geometry.element_count != q:
        geometry = geometry.subarray(q)
    eig = hermitian_eig(cov.matrix)
    noise = eig.eigenvectors[:, m:]
    a = grid_dictionary(geometry, grid)
    proj = noise.conj().T @ a
    den = np.real(np.einsum("kp,kp->p", proj.conj(), proj))
    return 1.0 / np.maximum(den, 1e-300)


def music_estimate(
    cov: SmoothedCovariance, m: int, grid: GridSpec, geometry: Optional[ArrayGeometry] = None
) -> EstimateResult:
    """
    MUSIC on a smoothed covariance.

    ``geometry`` may be the full array (its first Q elements are used) or the
    Q-element subarray itself; by default a half-wavelength ULA of Q elements.
    """
    t0 = time.perf_counter()
    spec = music_spectrum(cov, m, grid, geometry)
    idx = pick_peaks(spec, m)
    return EstimateResult(
        "music",
        m,
        grid.angles()[idx],
        objective=float(np.sum(spec[idx])),
        iterations=1,
        runtime_seconds=time.perf_counter() - t0,
    )


def beamwidth_3db(geometry: ArrayGeometry, resolution_deg: float = 1e-3) -> float:
    """Measured broadside half-power width of the Bartlett beam, in degrees."""
    theta = np.arange(0.0, 89.0, resolution_deg)
    a0 = np.ones(geometry.element_count)
    gain = np.abs(steering_matrix(geometry, theta).conj().T @ a0) ** 2
    gain = gain / gain[0]
    below = np.flatnonzero(gain < 0.5)
    if below.size == 0:
        return float("inf")
    i = below[0]
    # linear interpolation between the last point above and the first below
    t = (gain[i - 1] - 0.5) / (gain[i - 1] - gain[i])
    return float(2 * (theta[i - 1] + t * resolution_deg))
