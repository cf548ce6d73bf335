"""
Training loop: fresh synthetic batches every iteration, SGD with momentum.

Iteration ``t`` draws its batch from a generator seeded with
``(seed, 1, t)`` and the validation set comes from ``(seed, 2)``, so a run
is reproducible from its config alone and can be resumed from any saved
state without replaying earlier batches.
"""

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import net
from .array_model import ArrayGeometry, SceneBatch, SceneDistribution, Snapshot, sample_batch
from .errors import ConfigurationError, TrainingDivergedError

log = logging.getLogger(__name__)

_BATCH_STREAM = 1
_VALIDATION_STREAM = 2
_INIT_STREAM = 3


@dataclass(frozen=True)
class TrainConfig:
    network: net.NetworkSpec = field(default_factory=net.NetworkSpec)
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry.ula)
    scene_distribution: SceneDistribution = field(default_factory=SceneDistribution)
    batch_size: int = 4000
    iterations: int = 1000
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: tuple = (0.5, 20_000)
    loss_weight: float = 1.0
    seed: int = 0
    validation_size: int = 1000
    checkpoint_every: int = 1000
    fixed_snapshots: Optional[Sequence[Snapshot]] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be non-negative")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be positive")
        factor, every = self.lr_decay
        if not (0 < factor <= 1 and every >= 1):
            raise ConfigurationError("lr_decay must be (factor in (0, 1], every >= 1)")
        if self.network.input_dim != 2 * self.geometry.element_count:
            raise ConfigurationError("network input_dim must be twice the element count")

    def learning_rate(self, iteration: int) -> float:
        """Rate used for 0-based ``iteration`` (step decay)."""
        factor, every = self.lr_decay
        return self.lr * factor ** (iteration // every)

    def summary(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "geometry": self.geometry.to_dict(),
            "scene_distribution": self.scene_distribution.to_dict(),
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "lr": self.lr,
            "momentum": self.momentum,
            "lr_decay": list(self.lr_decay),
            "loss_weight": self.loss_weight,
            "seed": self.seed,
            "validation_size": self.validation_size,
            "checkpoint_every": self.checkpoint_every,
            "fixed_snapshots": None if self.fixed_snapshots is None else len(self.fixed_snapshots),
        }


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    loss: float
    ce: float
    rmse: float
    lr: float


@dataclass(frozen=True)
class ValidationRecord:
    iteration: int
    accuracy: float
    rmse_deg: tuple  # per true source count 1..4, nan when absent
    loss: float

    @property
    def overall_rmse_deg(self) -> float:
        vals = [r for r in self.rmse_deg if np.isfinite(r)]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    best_iteration: Optional[int] = None
    best_params: Optional[net.NetworkParameters] = None

    def train_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "ce", "rmse", "lr"])
        for r in self.records:
            w.writerow([r.iteration, repr(r.loss), repr(r.ce), repr(r.rmse), repr(r.lr)])
        return buf.getvalue()

    def validation_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "accuracy", "rmse_m1", "rmse_m2", "rmse_m3", "rmse_m4", "loss"])
        for v in self.validation:
            w.writerow([v.iteration, repr(v.accuracy), *[repr(x) for x in v.rmse_deg], repr(v.loss)])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "train_log.csv").write_text(self.train_csv())
        (out / "validation_log.csv").write_text(self.validation_csv())


@dataclass
class ValidationSet:
    features: np.ndarray
    orders: np.ndarray
    angles_deg: np.ndarray

    def __len__(self):
        return int(self.orders.size)

    @classmethod
    def from_batch(cls, batch: SceneBatch) -> "ValidationSet":
        return cls(net.snapshot_features(batch.y), batch.orders.copy(), batch.angles_deg.copy())


def make_validation_set(config: TrainConfig) -> ValidationSet:
    rng = np.random.default_rng([config.seed, _VALIDATION_STREAM])
    if config.fixed_snapshots is not None:
        return ValidationSet.from_batch(SceneBatch.from_snapshots(config.fixed_snapshots))
    batch = sample_batch(config.geometry, config.scene_distribution, config.validation_size, rng)
    return ValidationSet.from_batch(batch)


def evaluate_predictions(pred_orders, pred_angles, vset: ValidationSet, iteration: int = 0,
                         loss_value: float = float("nan")) -> ValidationRecord:
    """
    Score externally produced predictions.

    ``pred_angles[i]`` must be the estimate for the true source count of
    example ``i`` (angles in degrees); accuracy compares ``pred_orders``.
    """
    pred_orders = np.asarray(pred_orders, dtype=int)
    accuracy = float(np.mean(pred_orders == vset.orders)) if len(vset) else float("nan")
    per_m = []
    for m in range(1, net.MAX_SOURCES + 1):
        rows = np.flatnonzero(vset.orders == m)
        if rows.size == 0:
            per_m.append(float("nan"))
            continue
        sq = [net.chamfer_rmse(vset.angles_deg[i, :m], pred_angles[i]) ** 2 for i in rows]
        per_m.append(float(np.sqrt(np.mean(sq))))
    return ValidationRecord(iteration, accuracy, tuple(per_m), float(loss_value))


def validate(params: net.NetworkParameters, vset: ValidationSet, iteration: int = 0,
             loss_weight: float = 1.0) -> ValidationRecord:
    """Classification accuracy and per-count chamfer RMSE (true-count head), infer mode."""
    tr = net.forward(params, vset.features, mode="infer")
    decided = np.argmax(tr.logits, axis=1) + 1
    scale = params.spec.angle_normalization
    angles = [tr.heads[m - 1][i] * scale for i, m in enumerate(vset.orders)]
    lb = net.loss(tr, vset.orders, vset.angles_deg, loss_weight, spec=params.spec)
    return evaluate_predictions(decided, angles, vset, iteration, lb.total)


@dataclass
class TrainState:
    params: net.NetworkParameters
    velocity: dict
    iteration: int
    log: TrainingLog
    best_score: float = float("inf")


def _batch(config: TrainConfig, iteration: int) -> SceneBatch:
    rng = np.random.default_rng([config.seed, _BATCH_STREAM, iteration])
    if config.fixed_snapshots is not None:
        snaps = config.fixed_snapshots
        picks = [snaps[i % len(snaps)] for i in range(max(config.batch_size, 2))]
        return SceneBatch.from_snapshots(picks)
    return sample_batch(config.geometry, config.scene_distribution, config.batch_size, rng)


def initial_state(config: TrainConfig) -> TrainState:
    params = net.init(config.network, np.random.default_rng([config.seed, _INIT_STREAM]))
    return TrainState(params, {}, 0, TrainingLog())


def _metadata(config: TrainConfig, state: TrainState) -> dict:
    return {"train_config": config.summary(), "iteration": state.iteration,
            "best_iteration": state.log.best_iteration}


def save_state(state: TrainState, config: TrainConfig, path) -> None:
    meta = _metadata(config, state)
    meta["records"] = [[r.iteration, r.loss, r.ce, r.rmse, r.lr] for r in state.log.records]
    meta["validation"] = [
        [v.iteration, v.accuracy, list(v.rmse_deg), v.loss] for v in state.log.validation
    ]
    meta["best_score"] = state.best_score
    extra = {f"velocity/{k}": v for k, v in state.velocity.items()}
    if state.log.best_params is not None:
        extra.update({f"best/{k}": v for k, v in state.log.best_params.tensors.items()})
    net.save(state.params, path, seed=config.seed, metadata=meta, extra=extra)


def load_state(path, config: TrainConfig) -> TrainState:
    ckpt = net.load_checkpoint(path, spec=config.network)
    meta = ckpt.metadata
    log_ = TrainingLog(
        records=[IterationRecord(int(r[0]), *map(float, r[1:])) for r in meta.get("records", [])],
        validation=[
            ValidationRecord(int(v[0]), float(v[1]), tuple(float(x) for x in v[2]), float(v[3]))
            for v in meta.get("validation", [])
        ],
        best_iteration=meta.get("best_iteration"),
    )
    velocity = {k[len("velocity/"):]: v for k, v in ckpt.extra.items() if k.startswith("velocity/")}
    best = {k[len("best/"):]: v for k, v in ckpt.extra.items() if k.startswith("best/")}
    if best:
        log_.best_params = net.NetworkParameters(ckpt.params.spec, best)
    return TrainState(ckpt.params, velocity, int(meta["iteration"]), log_,
                      float(meta.get("best_score", float("inf"))))


def train(config: TrainConfig, out_dir=None, state: Optional[TrainState] = None,
          progress_every: int = 0) -> tuple:
    """
    Train (or continue training) to ``config.iterations``.

    Returns ``(final_params, TrainingLog)``; the log also carries the
    parameters with the lowest validation loss. With ``out_dir`` the run
    writes ``state.ckpt`` (resumable), ``final.ckpt``, ``best.ckpt`` and the
    CSV logs there.

    Raises
    ------
    TrainingDivergedError
        On a non-finite loss; files from the last checkpoint are left intact.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = state or initial_state(config)
    vset = make_validation_set(config)
    params = state.params

    def checkpoint():
        record = validate(params, vset, state.iteration, config.loss_weight)
        state.log.validation.append(record)
        if record.loss < state.best_score:
            state.best_score = record.loss
            state.log.best_iteration = state.iteration
            state.log.best_params = params.copy()
        if out is not None:
            save_state(state, config, out / "state.ckpt")
            state.log.write(out)

    while state.iteration < config.iterations:
        t = state.iteration
        batch = _batch(config, t)
        x = net.snapshot_features(batch.y)
        trace = net.forward(params, x, mode="train")
        breakdown, grads = net.backward(trace, batch.orders, batch.angles_deg, params,
                                        config.loss_weight)
        if not np.isfinite(breakdown.total):
            raise TrainingDivergedError(f"non-finite loss at iteration {t}", t)
        lr = config.learning_rate(t)
        net.sgd_momentum_step(params, grads, lr, config.momentum, state.velocity)
        state.iteration = t + 1
        state.log.records.append(
            IterationRecord(t + 1, breakdown.total, breakdown.cross_entropy, breakdown.angle_rmse, lr)
        )
        if progress_every and state.iteration % progress_every == 0:
            log.info("iter %d loss %.5f ce %.5f rmse %.5f", state.iteration, breakdown.total,
                     breakdown.cross_entropy, breakdown.angle_rmse)
        if state.iteration % config.checkpoint_every == 0:
            checkpoint()

    if not state.log.validation or state.log.validation[-1].iteration != state.iteration:
        checkpoint()
    if out is not None:
        meta = _metadata(config, state)
        net.save(params, out / "final.ckpt", seed=config.seed, metadata=meta)
        best = state.log.best_params or params
        net.save(best, out / "best.ckpt", seed=config.seed, metadata=meta)
    return params, state.log
