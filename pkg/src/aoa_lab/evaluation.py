"""
Monte-Carlo benchmark harness.

Every method at a given (SNR point, trial) sees the same snapshot: trial
``t`` of point ``i`` is drawn from a generator seeded with ``(seed, i, t)``.
Results are one row per (method, SNR) and serialise to a plot-ready CSV.
"""

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import classical, net
from .array_model import (
    ArrayGeometry,
    SceneBatch,
    SceneDistribution,
    SourceScene,
    Snapshot,
    apply_impairment,
    noise_variance,
    realize_impairment,
    sample_scene,
    steering_derivative,
    steering_matrix,
    synthesize_snapshot,
)
from .classical import GridSpec
from .errors import AoaLabError, ConditioningError, ConfigurationError, SweepError
from .model_order import aic_order, mdl_order
from .numerics import projector

AOA_METHODS = ("bartlett", "ml", "ap", "omp", "music", "dnn")
ORDER_METHODS = ("dnn", "mdl", "aic")
CSV_HEADER = ["method", "snr_db", "rmse_deg", "rmse_stderr", "accuracy", "mean_runtime_s", "trials"]
MAX_FAILURE_FRACTION = 0.01


@dataclass(frozen=True)
class SweepConfig:
    methods: tuple = ("ap", "omp", "music")
    snr_points_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    trials_per_point: int = 100
    scene_distribution: SceneDistribution = field(
        default_factory=lambda: SceneDistribution(source_counts=(4,))
    )
    impairment: Optional[tuple] = None  # (phase_sigma_deg, crosstalk_gamma_db)
    grid: GridSpec = field(default_factory=GridSpec)
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry.ula)
    seed: int = 0
    subarray_size: int = 8
    ap_iterations: int = 10
    ml_budget: float = classical.DEFAULT_ML_BUDGET
    timing: bool = True
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "snr_points_db", tuple(float(s) for s in self.snr_points_db))
        if not self.methods:
            raise ConfigurationError("at least one method is required")
        if self.trials_per_point < 1:
            raise ConfigurationError("trials_per_point must be at least 1")
        if not self.snr_points_db:
            raise ConfigurationError("at least one SNR point is required")
        if self.impairment is not None:
            object.__setattr__(self, "impairment", tuple(float(v) for v in self.impairment))

    def summary(self) -> dict:
        return {
            "methods": list(self.methods),
            "snr_points_db": list(self.snr_points_db),
            "trials_per_point": self.trials_per_point,
            "scene_distribution": self.scene_distribution.to_dict(),
            "impairment": None if self.impairment is None else list(self.impairment),
            "grid": {"fov_deg": list(self.grid.fov_deg), "step_deg": self.grid.step_deg},
            "geometry": self.geometry.to_dict(),
            "seed": self.seed,
            "subarray_size": self.subarray_size,
            "ap_iterations": self.ap_iterations,
            "ml_budget": self.ml_budget,
            "timing": self.timing,
        }


@dataclass
class SweepRow:
    method: str
    snr_db: float
    rmse_deg: float = float("nan")
    rmse_stderr: float = float("nan")
    accuracy: float = float("nan")
    accuracy_stderr: float = float("nan")
    mean_runtime_s: float = float("nan")
    trials: int = 0
    failures: int = 0


@dataclass
class SweepResult:
    rows: list
    metadata: dict = field(default_factory=dict)

    def row(self, method: str, snr_db: float) -> SweepRow:
        for r in self.rows:
            if r.method == method and r.snr_db == float(snr_db):
                return r
        raise KeyError((method, snr_db))

    def curve(self, method: str, column: str = "rmse_deg") -> np.ndarray:
        return np.array([getattr(r, column) for r in self.rows if r.method == method])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.method, _fmt(r.snr_db), _fmt(r.rmse_deg), _fmt(r.rmse_stderr),
                        _fmt(r.accuracy), _fmt(r.mean_runtime_s), r.trials])
        return buf.getvalue()

    def write(self, csv_path) -> None:
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        csv_path.with_suffix(".json").write_text(
            json.dumps(self.metadata, indent=2, sort_keys=True, default=_json_default) + "\n"
        )


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def read_sweep_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# Metrics and bounds
# --------------------------------------------------------------------------


def squared_errors(true_scenes: Sequence, estimates: Sequence) -> np.ndarray:
    """Per-trial ``mean_m min_k (est_k - true_m)^2`` in degrees squared."""
    out = []
    for scene, est in zip(true_scenes, estimates, strict=True):
        t = scene.angles_deg if isinstance(scene, SourceScene) else scene
        e = getattr(est, "angles_deg", est)
        out.append(net.chamfer_rmse(t, e) ** 2)
    return np.asarray(out, dtype=float)


def rmse_metric(true_scenes: Sequence, estimates: Sequence) -> float:
    """Monte-Carlo RMSE: square root of the trial average of per-trial mean squared nearest errors."""
    sq = squared_errors(true_scenes, estimates)
    if sq.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean(sq)))


def rmse_with_stderr(sq: np.ndarray) -> tuple:
    """RMSE and its delta-method standard error from per-trial squared errors."""
    sq = np.asarray(sq, dtype=float)
    if sq.size == 0:
        return float("nan"), float("nan")
    rmse = float(np.sqrt(np.mean(sq)))
    if sq.size < 2 or rmse == 0.0:
        return rmse, 0.0 if sq.size >= 2 else float("nan")
    se_mean = float(np.std(sq, ddof=1) / np.sqrt(sq.size))
    return rmse, se_mean / (2.0 * rmse)


def crlb(scene: SourceScene, geometry: ArrayGeometry, snr_db: float) -> np.ndarray:
    """
    Deterministic single-snapshot Cramer-Rao bound, per source, in degrees.

    ``CRB = sigma^2 / 2 * inv(Re[(D^H Pperp D) * (s s^H)^T])`` where ``D``
    holds the steering derivatives with respect to angle (radians) and
    ``Pperp`` projects onto the complement of the steering span.

    Raises
    ------
    ConditioningError
        If the steering matrix or the Fisher information is singular
        (merged sources).
    """
    a = steering_matrix(geometry, scene.angles_deg)
    d = steering_derivative(geometry, scene.angles_deg)
    p_perp = np.eye(geometry.element_count) - projector(a)
    s = scene.gains
    fim = np.real((d.conj().T @ p_perp @ d) * np.outer(s, s.conj()).T)
    cond = np.linalg.cond(fim)
    if not cond < 1e12:
        raise ConditioningError(f"Fisher information is singular (condition {cond:.3e})", cond)
    crb = noise_variance(snr_db) / 2.0 * np.linalg.inv(fim)
    return np.rad2deg(np.sqrt(np.diag(crb)))


def crlb_rmse(scenes: Sequence, geometry: ArrayGeometry, snr_db: float) -> float:
    """CRLB expressed as an RMSE over a set of scenes (sqrt of mean per-source variance)."""
    var = []
    for sc in scenes:
        try:
            var.append(np.mean(crlb(sc, geometry, snr_db) ** 2))
        except ConditioningError:
            continue
    return float(np.sqrt(np.mean(var))) if var else float("nan")


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


def _impairment(config: SweepConfig):
    if config.impairment is None:
        return None
    sigma, gamma = config.impairment
    return realize_impairment(sigma, gamma, config.geometry.element_count,
                              np.random.default_rng([config.seed, 0x1A]))


def sweep_snapshots(config: SweepConfig, point: int, impairment=None) -> list:
    """The shared trial snapshots for SNR point index ``point``."""
    snr = config.snr_points_db[point]
    snaps = []
    for trial in range(config.trials_per_point):
        rng = np.random.default_rng([config.seed, point, trial])
        scene = sample_scene(config.scene_distribution, rng)
        snap = synthesize_snapshot(config.geometry, scene, snr, rng)
        if impairment is not None:
            snap = apply_impairment(impairment, snap)
        snaps.append(snap)
    return snaps


def snapshot_digest(snapshots: Sequence[Snapshot]) -> str:
    h = hashlib.sha256()
    for s in snapshots:
        h.update(np.ascontiguousarray(s.y).tobytes())
        h.update(np.ascontiguousarray(s.scene.angles_deg).tobytes())
    return h.hexdigest()


def _estimator(method: str, config: SweepConfig) -> Callable:
    grid, geo = config.grid, config.geometry
    if method == "bartlett":
        return lambda s, m: classical.bartlett_estimate(s, m, grid, geo)
    if method == "ml":
        return lambda s, m: classical.ml_estimate(s, m, grid, geo, config.ml_budget)
    if method == "ap":
        return lambda s, m: classical.ap_estimate(s, m, grid, config.ap_iterations, geo)
    if method == "omp":
        return lambda s, m: classical.omp_estimate(s, m, grid, geo)
    if method == "music":
        return lambda s, m: classical.music_estimate(
            classical.spatial_smooth(s, config.subarray_size), m, grid, geo
        )
    raise ConfigurationError(f"unknown AOA method {method!r}")


def _check_failures(method: str, failures: int, trials: int, first_error) -> None:
    if failures > MAX_FAILURE_FRACTION * trials:
        raise SweepError(
            f"method {method!r} failed on {failures}/{trials} trials (first error: {first_error})"
        )


def _aoa_point(config: SweepConfig, point: int, dnn: Optional[net.NetworkParameters]) -> tuple:
    impairment = _impairment(config)
    snaps = sweep_snapshots(config, point, impairment)
    snr = config.snr_points_db[point]
    scenes = [s.scene for s in snaps]
    rows = []
    for method in config.methods:
        row = SweepRow(method, snr)
        if method == "dnn":
            if dnn is None:
                raise ConfigurationError("method 'dnn' requires trained network parameters")
            batch = SceneBatch.from_snapshots(snaps)
            t0 = time.perf_counter()
            decided, angles = net.predict_batch(dnn, batch.y, orders=batch.orders)
            elapsed = time.perf_counter() - t0
            row.accuracy = float(np.mean(decided == batch.orders))
            row.accuracy_stderr = _binomial_stderr(row.accuracy, len(snaps))
            sq = squared_errors(scenes, angles)
            runtime = elapsed / len(snaps)
        else:
            fn = _estimator(method, config)
            sq_list, times, first_error = [], [], None
            for snap in snaps:
                try:
                    est = fn(snap, snap.scene.order)
                except AoaLabError as exc:
                    row.failures += 1
                    first_error = first_error or exc
                    continue
                sq_list.append(net.chamfer_rmse(snap.scene.angles_deg, est.angles_deg) ** 2)
                times.append(est.runtime_seconds)
            _check_failures(method, row.failures, len(snaps), first_error)
            sq = np.asarray(sq_list)
            runtime = float(np.mean(times)) if times else float("nan")
        row.rmse_deg, row.rmse_stderr = rmse_with_stderr(sq)
        row.trials = int(sq.size)
        row.mean_runtime_s = runtime if config.timing else float("nan")
        rows.append(row)
    info = {
        "snr_db": snr,
        "snapshot_digest": snapshot_digest(snaps),
        "crlb_rmse_deg": crlb_rmse(scenes, config.geometry, snr),
    }
    return rows, info


def _binomial_stderr(p: float, n: int) -> float:
    return float(np.sqrt(max(p * (1 - p), 0.0) / n)) if n else float("nan")


def _order_point(config: SweepConfig, point: int, dnn: Optional[net.NetworkParameters]) -> tuple:
    impairment = _impairment(config)
    snaps = sweep_snapshots(config, point, impairment)
    snr = config.snr_points_db[point]
    truth = np.array([s.scene.order for s in snaps])
    rows = []
    for method in config.methods:
        row = SweepRow(method, snr)
        if method == "dnn":
            if dnn is None:
                raise ConfigurationError("method 'dnn' requires trained network parameters")
            t0 = time.perf_counter()
            decided, _ = net.predict_batch(dnn, np.stack([s.y for s in snaps]))
            runtime = (time.perf_counter() - t0) / len(snaps)
            correct = decided == truth
        elif method in ("mdl", "aic"):
            rule = mdl_order if method == "mdl" else aic_order
            correct, times, first_error = [], [], None
            for snap, m in zip(snaps, truth):
                t0 = time.perf_counter()
                try:
                    trace = rule(classical.spatial_smooth(snap, config.subarray_size))
                except AoaLabError as exc:
                    row.failures += 1
                    first_error = first_error or exc
                    continue
                times.append(time.perf_counter() - t0)
                correct.append(trace.clamped == m)
            _check_failures(method, row.failures, len(snaps), first_error)
            correct = np.asarray(correct, dtype=bool)
            runtime = float(np.mean(times)) if times else float("nan")
        else:
            raise ConfigurationError(f"unknown order method {method!r}")
        row.trials = int(correct.size)
        row.accuracy = float(np.mean(correct)) if correct.size else float("nan")
        row.accuracy_stderr = _binomial_stderr(row.accuracy, row.trials)
        row.mean_runtime_s = runtime if config.timing else float("nan")
        rows.append(row)
    return rows, {"snr_db": snr, "snapshot_digest": snapshot_digest(snaps)}


def _run(config: SweepConfig, worker: Callable, dnn, kind: str) -> SweepResult:
    points = range(len(config.snr_points_db))
    workers = max(1, int(config.workers))
    if workers > 1 and len(config.snr_points_db) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(worker, [config] * len(points), points, [dnn] * len(points)))
    else:
        outs = [worker(config, i, dnn) for i in points]
    by_method = {m: [] for m in config.methods}
    for rows, _ in outs:
        for r in rows:
            by_method[r.method].append(r)
    rows = [r for m in config.methods for r in by_method[m]]
    metadata = {
        "kind": kind,
        "config": config.summary(),
        "points": [info for _, info in outs],
        "dnn": None if dnn is None else dnn.spec.to_dict(),
    }
    if kind == "aoa":
        metadata["crlb_violations"] = crlb_flags(rows, metadata["points"])
    return SweepResult(rows, metadata)


def run_sweep(config: SweepConfig, dnn: Optional[net.NetworkParameters] = None) -> SweepResult:
    """
    RMSE-versus-SNR sweep for known-order AOA methods.

    Each method receives the true source count. The DNN, if present, uses the
    head for the true count; its classifier accuracy is reported too.

    Raises
    ------
    SweepError
        If any method fails on more than 1% of the trials at a point.
    """
    for m in config.methods:
        if m not in AOA_METHODS:
            raise ConfigurationError(f"unknown AOA method {m!r}; choose from {AOA_METHODS}")
    return _run(config, _aoa_point, dnn, "aoa")


def order_accuracy_sweep(config: SweepConfig, dnn: Optional[net.NetworkParameters] = None) -> SweepResult:
    """Probability of recovering the exact source count; MDL/AIC are clamped to 1..4."""
    for m in config.methods:
        if m not in ORDER_METHODS:
            raise ConfigurationError(f"unknown order method {m!r}; choose from {ORDER_METHODS}")
    return _run(config, _order_point, dnn, "order")


def crlb_flags(rows: Sequence[SweepRow], points: Sequence[dict]) -> list:
    """Rows whose RMSE sits more than 3 standard errors below the CRLB (flagged, not fatal)."""
    bound = {p["snr_db"]: p["crlb_rmse_deg"] for p in points}
    flags = []
    for r in rows:
        b = bound.get(r.snr_db, float("nan"))
        if np.isfinite(b) and np.isfinite(r.rmse_deg) and r.rmse_deg < b - 3 * r.rmse_stderr:
            flags.append({"method": r.method, "snr_db": r.snr_db, "rmse_deg": r.rmse_deg,
                          "crlb_deg": b})
    return flags


# --------------------------------------------------------------------------
# Complexity accounting
# --------------------------------------------------------------------------


def ml_complexity(n: int, m: int, points: int) -> float:
    return classical.ml_operation_count(n, m, points)


def ap_complexity(n: int, points: int, iterations: int) -> float:
    return float(n * n * points * iterations)


def dnn_complexity(spec: net.NetworkSpec) -> float:
    """Square of the widest hidden layer, the dominant multiply block."""
    return float(max(spec.hidden_widths) ** 2)


def complexity_report(
    methods: Sequence[str] = ("ml", "ap", "dnn"),
    grid=500,
    m: int = 4,
    k: int = 10,
    n: int = 16,
    spec: Optional[net.NetworkSpec] = None,
    measure: bool = False,
    params: Optional[net.NetworkParameters] = None,
    ml_budget: float = classical.DEFAULT_ML_BUDGET,
    seed: int = 0,
) -> list:
    """
    Evaluate the operation-count formulas and optionally time one estimate.

    ``grid`` is a point count or a :class:`GridSpec`. Timings need a
    ``GridSpec``; ML is only timed when its count fits ``ml_budget``.
    Returns a list of dicts with keys ``method``, ``formula``,
    ``operations``, ``dense_multiplies`` and ``measured_seconds``.
    """
    points = grid.size if isinstance(grid, GridSpec) else int(grid)
    spec = spec or (params.spec if params is not None else net.NetworkSpec(input_dim=2 * n))
    rows = []
    snap = None
    if measure:
        if not isinstance(grid, GridSpec):
            raise ConfigurationError("timing needs a GridSpec")
        geo = ArrayGeometry.ula(n)
        dist = SceneDistribution(fov_deg=grid.fov_deg, source_counts=(m,))
        rng = np.random.default_rng([seed, 0xC0])
        snap = synthesize_snapshot(geo, sample_scene(dist, rng), 20.0, rng)
    for method in methods:
        measured = float("nan")
        extra = float("nan")
        if method == "ml":
            ops, formula = ml_complexity(n, m, points), "(N^2+M^3)*P^M"
            if snap is not None and ops <= ml_budget and m <= 3:
                measured = classical.ml_estimate(snap, m, grid, max_operations=ml_budget).runtime_seconds
        elif method == "ap":
            ops, formula = ap_complexity(n, points, k), "N^2*P*K"
            if snap is not None:
                measured = classical.ap_estimate(snap, m, grid, k).runtime_seconds
        elif method == "dnn":
            ops, formula = dnn_complexity(spec), "max_width^2"
            extra = float(sum(net.layer_multiplies(spec)))
            if snap is not None:
                p = params or net.init(spec, seed)
                measured = net.predict(p, snap).runtime_seconds
        else:
            raise ConfigurationError(f"no complexity formula for {method!r}")
        rows.append({"method": method, "formula": formula, "operations": ops,
                     "dense_multiplies": extra, "measured_seconds": measured})
    return rows


def default_workers() -> int:
    env = os.environ.get("AOA_LAB_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"AOA_LAB_WORKERS must be an integer, got {env!r}")
    return os.cpu_count() or 1
