"""
Fully connected source-count / angle network with hand-written backprop.

Architecture: the 2N real and imaginary parts of the snapshot pass through a
stack of ``Linear -> BatchNorm -> ReLU`` layers. The last hidden activation
feeds five affine heads: 4 class logits for the source count (1..4) and four
angle regressors with 1, 2, 3 and 4 outputs. Angles are regressed in units of
the field-of-view half width.

The training loss per example is ``CE + w * chamfer_rmse`` where only the
head that matches the true source count contributes the angle term.
"""

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .array_model import MAX_SOURCES, Snapshot
from .classical import EstimateResult
from .errors import (
    CorruptCheckpointError,
    DomainError,
    NumericalError,
    SpecMismatchError,
    StructuralError,
    VersionMismatchError,
)

BN_DECAY = 0.99
BN_EPS = 1e-5
DEFAULT_WIDTHS = (256, 512, 1024, 2048, 2048, 1024, 512, 256)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = 32
    hidden_widths: tuple = DEFAULT_WIDTHS
    dense_connectivity: bool = False
    head_classes: int = MAX_SOURCES
    head_regression_sizes: tuple = (1, 2, 3, 4)
    angle_normalization: float = 25.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(
            self, "head_regression_sizes", tuple(int(s) for s in self.head_regression_sizes)
        )
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise StructuralError("hidden_widths must be a non-empty list of positive integers")
        if self.input_dim < 2 or self.input_dim % 2:
            raise StructuralError("input_dim must be 2N")
        if self.head_regression_sizes != tuple(range(1, self.head_classes + 1)):
            raise StructuralError("regression heads must have sizes 1..head_classes")
        if not self.angle_normalization > 0:
            raise DomainError("angle_normalization must be positive")

    @property
    def output_count(self) -> int:
        return self.head_classes + sum(self.head_regression_sizes)

    def layer_fan_in(self, layer: int) -> int:
        if self.dense_connectivity:
            return self.input_dim + sum(self.hidden_widths[:layer])
        return self.input_dim if layer == 0 else self.hidden_widths[layer - 1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        d["head_regression_sizes"] = list(self.head_regression_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)

    # Architecture variants compared against the 8-layer default.
    @classmethod
    def six_layer(cls, **kw) -> "NetworkSpec":
        return cls(hidden_widths=(512, 1024, 2048, 2048, 1024, 512), **kw)

    @classmethod
    def width_capped(cls, cap: int = 400, **kw) -> "NetworkSpec":
        return cls(hidden_widths=tuple(min(w, cap) for w in DEFAULT_WIDTHS), **kw)

    @classmethod
    def dense(cls, **kw) -> "NetworkSpec":
        return cls(dense_connectivity=True, **kw)


def head_names(spec: NetworkSpec) -> list:
    return ["head_class"] + [f"head_angles{m}" for m in spec.head_regression_sizes]


def parameter_names(spec: NetworkSpec) -> list:
    names = []
    for layer in range(len(spec.hidden_widths)):
        for part in ("W", "b", "gamma", "beta", "running_mean", "running_var"):
            names.append(f"hidden{layer}/{part}")
    for head in head_names(spec):
        names += [f"{head}/W", f"{head}/b"]
    return names


def is_trainable(name: str) -> bool:
    return not name.endswith(("running_mean", "running_var"))


def parameter_count(spec: NetworkSpec) -> int:
    """Closed form: sum of fan_in*fan_out + fan_out, plus 4 batch-norm vectors per layer."""
    total = 0
    for layer, width in enumerate(spec.hidden_widths):
        total += spec.layer_fan_in(layer) * width + width + 4 * width
    last = spec.hidden_widths[-1]
    for out in (spec.head_classes, *spec.head_regression_sizes):
        total += last * out + out
    return total


def layer_multiplies(spec: NetworkSpec) -> list:
    """Multiply count of each hidden layer and each head for one input."""
    counts = [spec.layer_fan_in(l) * w for l, w in enumerate(spec.hidden_widths)]
    last = spec.hidden_widths[-1]
    counts += [last * out for out in (spec.head_classes, *spec.head_regression_sizes)]
    return counts


@dataclass
class NetworkParameters:
    spec: NetworkSpec
    tensors: dict

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "NetworkParameters":
        return NetworkParameters(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def trainable(self) -> list:
        return [k for k in self.tensors if is_trainable(k)]


def init(spec: NetworkSpec, rng) -> NetworkParameters:
    """He-normal weights, zero biases, identity batch norm; deterministic given the seed."""
    rng = np.random.default_rng(rng)
    t = {}
    for layer, width in enumerate(spec.hidden_widths):
        fan_in = spec.layer_fan_in(layer)
        t[f"hidden{layer}/W"] = rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
        t[f"hidden{layer}/b"] = np.zeros(width)
        t[f"hidden{layer}/gamma"] = np.ones(width)
        t[f"hidden{layer}/beta"] = np.zeros(width)
        t[f"hidden{layer}/running_mean"] = np.zeros(width)
        t[f"hidden{layer}/running_var"] = np.ones(width)
    last = spec.hidden_widths[-1]
    for head, out in zip(head_names(spec), (spec.head_classes, *spec.head_regression_sizes)):
        t[f"{head}/W"] = rng.standard_normal((last, out)) * np.sqrt(2.0 / last)
        t[f"{head}/b"] = np.zeros(out)
    return NetworkParameters(spec, {k: t[k] for k in parameter_names(spec)})


def snapshot_features(y) -> np.ndarray:
    """Real parts followed by imaginary parts; works on a vector or a batch of rows."""
    y = np.asarray(y, dtype=complex)
    return np.concatenate([y.real, y.imag], axis=-1)


@dataclass
class ForwardTrace:
    mode: str
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    normalized: list = field(default_factory=list)
    inv_std: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    heads: list = field(default_factory=list)

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward(
    params: NetworkParameters, x, mode: str = "infer", update_stats: bool = True
) -> ForwardTrace:
    """
    Run the network on a batch ``x`` of shape (B, 2N) or a single 2N vector.

    In ``train`` mode batch statistics normalise each layer and, when
    ``update_stats`` is set, the running statistics are updated in place by
    exponential averaging. ``infer`` mode uses the running statistics.
    """
    if mode not in ("train", "infer"):
        raise DomainError(f"mode must be 'train' or 'infer', got {mode!r}")
    spec = params.spec
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise StructuralError(f"expected input of width {spec.input_dim}, got {x.shape}")
    if mode == "train" and x.shape[0] < 2:
        raise StructuralError("train mode needs a batch of at least two examples")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite network input")

    tr = ForwardTrace(mode)
    t = params.tensors
    h = x
    outputs = [x]
    for layer in range(len(spec.hidden_widths)):
        name = f"hidden{layer}"
        inp = np.concatenate(outputs, axis=1) if spec.dense_connectivity else h
        z = inp @ t[f"{name}/W"] + t[f"{name}/b"]
        if mode == "train":
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            if update_stats:
                t[f"{name}/running_mean"] *= BN_DECAY
                t[f"{name}/running_mean"] += (1 - BN_DECAY) * mean
                t[f"{name}/running_var"] *= BN_DECAY
                t[f"{name}/running_var"] += (1 - BN_DECAY) * var
        else:
            mean = t[f"{name}/running_mean"]
            var = t[f"{name}/running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mean) * inv_std
        h = np.maximum(xhat * t[f"{name}/gamma"] + t[f"{name}/beta"], 0.0)
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite activations in layer {name}")
        tr.inputs.append(inp)
        tr.pre.append(z)
        tr.normalized.append(xhat)
        tr.inv_std.append(inv_std)
        tr.activations.append(h)
        outputs.append(h)

    tr.logits = h @ t["head_class/W"] + t["head_class/b"]
    tr.heads = [h @ t[f"head_angles{m}/W"] + t[f"head_angles{m}/b"] for m in spec.head_regression_sizes]
    if not (np.all(np.isfinite(tr.logits)) and all(np.all(np.isfinite(o)) for o in tr.heads)):
        raise NumericalError("non-finite activations in output heads")
    return tr


def chamfer_rmse(true_angles, est_angles) -> float:
    """
    ``sqrt(mean_m min_k (est_k - true_m)^2)``.

    Every true angle is matched to its nearest estimate; an unused estimate
    costs nothing, an unmatched true angle costs its distance to the nearest.
    """
    t = np.atleast_1d(np.asarray(true_angles, dtype=float))
    e = np.atleast_1d(np.asarray(est_angles, dtype=float))
    if t.size == 0 or e.size == 0:
        raise StructuralError("chamfer_rmse needs nonempty angle sets")
    d2 = (e[None, :] - t[:, None]) ** 2
    return float(np.sqrt(np.mean(np.min(d2, axis=1))))


@dataclass(frozen=True)
class LossBreakdown:
    cross_entropy: float
    angle_rmse: float
    total: float
    weight: float


@dataclass
class _LossCache:
    probs: np.ndarray
    per_order: dict


def _batch_targets(orders, angles_deg, spec: NetworkSpec):
    orders = np.asarray(orders, dtype=int)
    angles = np.asarray(angles_deg, dtype=float)
    if angles.ndim == 1:
        angles = angles[None, :]
    if np.any(orders < 1) or np.any(orders > spec.head_classes):
        raise DomainError("source counts must lie in 1..4")
    return orders, angles / spec.angle_normalization


def _loss_terms(trace: ForwardTrace, orders, angles_deg, spec: NetworkSpec):
    orders, norm = _batch_targets(orders, angles_deg, spec)
    b = orders.size
    probs = softmax(trace.logits)
    ce = -np.log(np.maximum(probs[np.arange(b), orders - 1], 1e-300))
    rmse = np.zeros(b)
    per_order = {}
    for m in spec.head_regression_sizes:
        rows = np.flatnonzero(orders == m)
        if rows.size == 0:
            continue
        est = trace.heads[m - 1][rows]
        true = norm[rows, :m]
        diff = est[:, None, :] - true[:, :, None]  # (rows, true m, est k)
        nearest = np.argmin(diff**2, axis=2)  # first index wins ties
        chosen = np.take_along_axis(diff, nearest[..., None], axis=2)[..., 0]
        r = np.sqrt(np.mean(chosen**2, axis=1))
        rmse[rows] = r
        per_order[m] = (rows, nearest, chosen, r)
    return ce, rmse, _LossCache(probs, per_order)


def loss(trace: ForwardTrace, orders, angles_deg, w: float = 1.0, spec: Optional[NetworkSpec] = None,
         params: Optional[NetworkParameters] = None) -> LossBreakdown:
    """
    Batch-mean of ``CE + w * chamfer_rmse`` (angle term in normalised units).

    ``orders`` gives the true source count per example and ``angles_deg`` the
    true angles padded to 4 columns. Either ``spec`` or ``params`` supplies the
    angle normalisation.
    """
    spec = spec or params.spec
    ce, rmse, _ = _loss_terms(trace, orders, angles_deg, spec)
    ce_m, rmse_m = float(np.mean(ce)), float(np.mean(rmse))
    return LossBreakdown(ce_m, rmse_m, ce_m + w * rmse_m, float(w))


def backward(
    trace: ForwardTrace,
    orders,
    angles_deg,
    params: NetworkParameters,
    w: float = 1.0,
) -> tuple:
    """
    Gradients of the batch loss with respect to every trainable tensor.

    Returns ``(LossBreakdown, grads)``. The nearest-estimate assignment in the
    chamfer term is treated as locally constant, so each true angle sends its
    gradient to the estimate it was matched with. Examples with zero angle
    error contribute no angle gradient.
    """
    if trace.mode != "train":
        raise DomainError("backward needs a train-mode trace")
    spec = params.spec
    t = params.tensors
    ce, rmse, cache = _loss_terms(trace, orders, angles_deg, spec)
    orders = np.asarray(orders, dtype=int)
    b = orders.size
    grads = {}

    d_logits = cache.probs.copy()
    d_logits[np.arange(b), orders - 1] -= 1.0
    d_logits /= b

    h_last = trace.activations[-1]
    grads["head_class/W"] = h_last.T @ d_logits
    grads["head_class/b"] = d_logits.sum(axis=0)
    dh = d_logits @ t["head_class/W"].T

    for m in spec.head_regression_sizes:
        d_est = np.zeros((b, m))
        if m in cache.per_order:
            rows, nearest, chosen, r = cache.per_order[m]
            safe = r > 1e-12
            coef = np.where(safe, w / (b * m * np.where(safe, r, 1.0)), 0.0)
            contrib = chosen * coef[:, None]  # d loss / d est at matched slot, per true angle
            g = np.zeros((rows.size, m))
            np.add.at(g, (np.repeat(np.arange(rows.size), m), nearest.ravel()), contrib.ravel())
            d_est[rows] = g
        grads[f"head_angles{m}/W"] = h_last.T @ d_est
        grads[f"head_angles{m}/b"] = d_est.sum(axis=0)
        dh += d_est @ t[f"head_angles{m}/W"].T

    layers = len(spec.hidden_widths)
    d_act = [None] * layers
    d_act[-1] = dh
    for layer in reversed(range(layers)):
        name = f"hidden{layer}"
        h = trace.activations[layer]
        xhat = trace.normalized[layer]
        da = d_act[layer]
        dbn = da * (h > 0)
        grads[f"{name}/gamma"] = np.sum(dbn * xhat, axis=0)
        grads[f"{name}/beta"] = dbn.sum(axis=0)
        dxhat = dbn * t[f"{name}/gamma"]
        n = dxhat.shape[0]
        dz = (trace.inv_std[layer] / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
        )
        grads[f"{name}/W"] = trace.inputs[layer].T @ dz
        grads[f"{name}/b"] = dz.sum(axis=0)
        if layer == 0:
            continue
        d_in = dz @ t[f"{name}/W"].T
        if spec.dense_connectivity:
            offset = spec.input_dim
            for j in range(layer):
                width = spec.hidden_widths[j]
                piece = d_in[:, offset : offset + width]
                d_act[j] = piece if d_act[j] is None else d_act[j] + piece
                offset += width
        else:
            d_act[layer - 1] = d_in if d_act[layer - 1] is None else d_act[layer - 1] + d_in

    ordered = {k: grads[k] for k in params.trainable()}
    ce_m, rmse_m = float(np.mean(ce)), float(np.mean(rmse))
    return LossBreakdown(ce_m, rmse_m, ce_m + w * rmse_m, float(w)), ordered


def sgd_momentum_step(
    params: NetworkParameters, grads: dict, lr: float, momentum: float, velocity: dict
) -> NetworkParameters:
    """
    ``v <- momentum * v + g``; ``p <- p - lr * v``.

    Updates ``params`` and ``velocity`` in place (missing velocity entries
    start at zero) and returns ``params``.
    """
    if not lr > 0:
        raise DomainError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise DomainError("momentum must be in [0, 1)")
    for name, g in grads.items():
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(g)
        v *= momentum
        v += g
        params.tensors[name] -= lr * v
    return params


def predict_batch(params: NetworkParameters, y, orders=None) -> tuple:
    """
    Infer-mode predictions for a batch of complex snapshots (B, N).

    Returns ``(class_orders, angle_lists)`` where ``class_orders`` is the
    classifier decision and ``angle_lists[i]`` the sorted angles in degrees
    from the head of ``orders[i]`` if given, else of the classifier decision.
    """
    y = np.asarray(y, dtype=complex)
    if y.ndim == 1:
        y = y[None, :]
    tr = forward(params, snapshot_features(y), mode="infer")
    decided = np.argmax(tr.logits, axis=1) + 1
    use = decided if orders is None else np.asarray(orders, dtype=int)
    scale = params.spec.angle_normalization
    angles = [np.sort(tr.heads[m - 1][i] * scale) for i, m in enumerate(use)]
    return decided, angles


def predict(params: NetworkParameters, y, order: Optional[int] = None) -> EstimateResult:
    """Source count by maximum class probability, angles from that count's head."""
    vec = y.y if isinstance(y, Snapshot) else y
    t0 = time.perf_counter()
    decided, angles = predict_batch(params, vec, None if order is None else [order])
    m = int(order) if order is not None else int(decided[0])
    return EstimateResult(
        "dnn", m, angles[0], iterations=1, runtime_seconds=time.perf_counter() - t0
    )


# --------------------------------------------------------------------------
# Checkpoints
#
# b"AOANET\x00\x01" | u64 manifest length | manifest (UTF-8 JSON) | blob
# The manifest lists every tensor with its shape and byte offset into the
# blob; tensors are little-endian float64. A SHA-256 of the blob guards
# against truncation and corruption.
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AOANET\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: NetworkParameters
    seed: Optional[int] = None
    metadata: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save(
    params: NetworkParameters,
    path,
    seed: Optional[int] = None,
    metadata: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> Path:
    """
    Write a versioned checkpoint. ``extra`` holds additional named float
    tensors (optimizer state) stored alongside the parameters.
    """
    path = Path(path)
    table, chunks, offset = [], [], 0
    items = [(k, params.tensors[k]) for k in parameter_names(params.spec)]
    items += [(f"extra/{k}", v) for k, v in (extra or {}).items()]
    for name, arr in items:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "bytes": len(data)})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = {
        "format": "aoa-lab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": params.spec.to_dict(),
        "seed": seed,
        "metadata": metadata or {},
        "tensors": table,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + blob)
    tmp.replace(path)
    return path


def load_checkpoint(path, spec: Optional[NetworkSpec] = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise CorruptCheckpointError(f"{path}: file too short")
    if raw[: len(CHECKPOINT_MAGIC) - 1] != CHECKPOINT_MAGIC[:-1]:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    if raw[len(CHECKPOINT_MAGIC) - 1] != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint format version {raw[len(CHECKPOINT_MAGIC) - 1]}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    pos = len(CHECKPOINT_MAGIC)
    (head_len,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if pos + head_len > len(raw):
        raise CorruptCheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[pos : pos + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable manifest") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: manifest version {manifest.get('version')}")
    blob = raw[pos + head_len :]
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CorruptCheckpointError(f"{path}: tensor blob is truncated or corrupt")

    stored = NetworkSpec.from_dict(manifest["spec"])
    if spec is not None and spec != stored:
        raise SpecMismatchError(f"{path}: checkpoint spec {stored} differs from requested {spec}")
    tensors, extra = {}, {}
    for entry in manifest["tensors"]:
        arr = np.frombuffer(
            blob, dtype="<f8", count=entry["bytes"] // 8, offset=entry["offset"]
        ).astype(float).reshape(entry["shape"])
        if entry["name"].startswith("extra/"):
            extra[entry["name"][len("extra/") :]] = arr
        else:
            tensors[entry["name"]] = arr
    expected = parameter_names(stored)
    if sorted(tensors) != sorted(expected):
        raise CorruptCheckpointError(f"{path}: tensor set does not match the recorded spec")
    params = NetworkParameters(stored, {k: tensors[k] for k in expected})
    return Checkpoint(params, manifest.get("seed"), manifest.get("metadata", {}), extra)


def load(path, spec: Optional[NetworkSpec] = None) -> NetworkParameters:
    return load_checkpoint(path, spec).params
