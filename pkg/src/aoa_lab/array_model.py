"""
Narrowband far-field signal model for a linear antenna array.

Angles are in degrees everywhere in the public API. Element positions are
measured in wavelengths from the array centre.
"""

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DatasetError, DomainError, StructuralError
from .numerics import sample_complex_gaussian

MAX_SOURCES = 4
MAX_REJECTIONS = 10_000


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    positions: np.ndarray
    wavelength: float = 1.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).copy()
        if pos.ndim != 1 or pos.size == 0:
            raise StructuralError("positions must be a non-empty 1-D vector")
        if np.any(np.diff(pos) <= 0):
            raise StructuralError("positions must be strictly increasing")
        if not self.wavelength > 0:
            raise DomainError("wavelength must be positive")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @classmethod
    def ula(cls, n: int = 16, spacing: float = 0.5) -> "ArrayGeometry":
        """Uniform linear array centred on the origin (spacing in wavelengths)."""
        if n < 1:
            raise DomainError("element count must be positive")
        return cls((np.arange(n) - (n - 1) / 2.0) * spacing)

    @property
    def element_count(self) -> int:
        return int(self.positions.size)

    def subarray(self, size: int) -> "ArrayGeometry":
        return ArrayGeometry(self.positions[:size], self.wavelength)

    def key(self) -> tuple:
        return (self.positions.tobytes(), float(self.wavelength))

    def __eq__(self, other):
        return isinstance(other, ArrayGeometry) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def to_dict(self) -> dict:
        return {"positions": self.positions.tolist(), "wavelength": self.wavelength}


@dataclass(frozen=True, eq=False)
class SourceScene:
    angles_deg: np.ndarray
    gains: np.ndarray

    def __post_init__(self):
        angles = np.atleast_1d(np.asarray(self.angles_deg, dtype=float)).copy()
        gains = np.atleast_1d(np.asarray(self.gains, dtype=complex)).copy()
        if angles.ndim != 1 or angles.shape != gains.shape:
            raise StructuralError("angles and gains must be 1-D vectors of equal length")
        if not 1 <= angles.size <= MAX_SOURCES:
            raise StructuralError(f"source count must be in 1..{MAX_SOURCES}, got {angles.size}")
        if np.any(gains == 0):
            raise DomainError("source gains must be nonzero")
        angles.setflags(write=False)
        gains.setflags(write=False)
        object.__setattr__(self, "angles_deg", angles)
        object.__setattr__(self, "gains", gains)

    @property
    def order(self) -> int:
        return int(self.angles_deg.size)

    def __eq__(self, other):
        return (
            isinstance(other, SourceScene)
            and np.array_equal(self.angles_deg, other.angles_deg)
            and np.array_equal(self.gains, other.gains)
        )


@dataclass(frozen=True, eq=False)
class Snapshot:
    """One array observation with the ground truth that generated it."""

    y: np.ndarray
    scene: SourceScene
    snr_db: float
    seed: Optional[int] = None
    noise_enabled: bool = True
    impairment_id: Optional[str] = None


@dataclass(frozen=True, eq=False)
class ImpairmentSpec:
    phase_sigma_deg: float
    crosstalk_gamma_db: float
    seed: Optional[int]
    matrix: np.ndarray

    @property
    def identifier(self) -> str:
        return (
            f"H(sigma={self.phase_sigma_deg:g}deg,gamma={self.crosstalk_gamma_db:g}dB,"
            f"seed={self.seed})"
        )


@dataclass(frozen=True)
class SceneDistribution:
    """
    Random scene law used for training and benchmarking.

    ``source_counts`` lists the admissible source counts; the count is drawn
    uniformly from it, so ``(4,)`` is a fixed count of four.
    """

    fov_deg: tuple = (-25.0, 25.0)
    source_counts: tuple = (1, 2, 3, 4)
    amplitude_range: tuple = (0.5, 1.5)
    phase_range: tuple = (0.0, 2 * np.pi)
    snr_range_db: tuple = (-10.0, 30.0)
    min_separation_deg: float = 0.0

    def __post_init__(self):
        for name in ("fov_deg", "source_counts", "amplitude_range", "phase_range", "snr_range_db"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.fov_deg
        if not lo < hi:
            raise ConfigurationError(f"FOV minimum must be below maximum, got {self.fov_deg}")
        if lo <= -90 or hi >= 90:
            raise ConfigurationError("FOV must lie strictly inside (-90, 90) degrees")
        if not self.source_counts or any(
            not (1 <= int(m) <= MAX_SOURCES) for m in self.source_counts
        ):
            raise ConfigurationError(f"source counts must lie in 1..{MAX_SOURCES}")
        object.__setattr__(self, "source_counts", tuple(int(m) for m in self.source_counts))
        a_lo, a_hi = self.amplitude_range
        if not 0 < a_lo <= a_hi:
            raise ConfigurationError("amplitude range must be positive and ordered")
        if self.phase_range[0] > self.phase_range[1]:
            raise ConfigurationError("phase range must be ordered")
        if self.snr_range_db[0] > self.snr_range_db[1]:
            raise ConfigurationError("SNR range must be ordered")
        if self.min_separation_deg < 0:
            raise ConfigurationError("minimum separation must be non-negative")

    @property
    def half_width(self) -> float:
        return 0.5 * (self.fov_deg[1] - self.fov_deg[0])

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _check_angles(theta_deg) -> np.ndarray:
    theta = np.asarray(theta_deg, dtype=float)
    if np.any(~np.isfinite(theta)) or np.any(np.abs(theta) >= 90.0):
        raise DomainError("angles must lie strictly inside (-90, 90) degrees")
    return theta


def steering_vector(geometry: ArrayGeometry, theta_deg: float) -> np.ndarray:
    """``exp(j 2 pi x_n sin(theta) / lambda)`` for every element."""
    theta = _check_angles(theta_deg)
    if theta.ndim != 0:
        raise StructuralError("steering_vector takes a scalar angle; use steering_matrix")
    phase = 2 * np.pi * geometry.positions * np.sin(np.deg2rad(theta)) / geometry.wavelength
    return np.exp(1j * phase)


def steering_matrix(geometry: ArrayGeometry, thetas_deg) -> np.ndarray:
    """Columns are steering vectors, shape (N, len(thetas_deg))."""
    theta = np.atleast_1d(_check_angles(thetas_deg))
    phase = np.outer(geometry.positions, np.sin(np.deg2rad(theta))) * (
        2 * np.pi / geometry.wavelength
    )
    return np.exp(1j * phase)


def steering_derivative(geometry: ArrayGeometry, thetas_deg) -> np.ndarray:
    """Derivative of each steering column with respect to the angle in radians."""
    theta = np.atleast_1d(_check_angles(thetas_deg))
    rad = np.deg2rad(theta)
    a = steering_matrix(geometry, theta)
    factor = 1j * 2 * np.pi * np.outer(geometry.positions, np.cos(rad)) / geometry.wavelength
    return factor * a


def noise_variance(snr_db: float) -> float:
    return float(10.0 ** (-snr_db / 10.0))


def synthesize_snapshot(
    geometry: ArrayGeometry,
    scene: SourceScene,
    snr_db: float,
    rng,
    noise: bool = True,
) -> Snapshot:
    """
    Draw ``y = sum_m a(theta_m) s_m + v``.

    ``rng`` may be an integer seed or a ``numpy`` Generator. Noise is skipped
    when ``noise`` is False or ``snr_db`` is ``+inf``.
    """
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    y = steering_matrix(geometry, scene.angles_deg) @ scene.gains
    noise = bool(noise) and np.isfinite(snr_db)
    if noise:
        y = y + sample_complex_gaussian(geometry.element_count, noise_variance(snr_db), rng)
    return Snapshot(y=y, scene=scene, snr_db=float(snr_db), seed=seed, noise_enabled=noise)


def realize_impairment(
    phase_sigma_deg: float, crosstalk_gamma_db: float, n: int, rng
) -> ImpairmentSpec:
    """
    Draw a fixed channel-mismatch matrix H.

    Diagonal: unit-modulus with Gaussian phase (std ``phase_sigma_deg``).
    Off-diagonal: complex Gaussian with per-entry power ``10**(-gamma/10)``;
    ``gamma = inf`` disables cross-talk.
    """
    if phase_sigma_deg < 0:
        raise DomainError("phase sigma must be non-negative")
    if not crosstalk_gamma_db > 0:
        raise DomainError("cross-talk attenuation must be positive (dB)")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    phases = rng.standard_normal(n) * np.deg2rad(phase_sigma_deg)
    h = np.zeros((n, n), dtype=complex)
    if np.isfinite(crosstalk_gamma_db):
        off = sample_complex_gaussian(n * n, 10.0 ** (-crosstalk_gamma_db / 10.0), rng)
        h = off.reshape(n, n)
    np.fill_diagonal(h, np.exp(1j * phases))
    return ImpairmentSpec(float(phase_sigma_deg), float(crosstalk_gamma_db), seed, h)


def apply_impairment(impairment: ImpairmentSpec, snapshot: Snapshot) -> Snapshot:
    h = impairment.matrix
    if h.shape != (snapshot.y.size, snapshot.y.size):
        raise StructuralError(
            f"impairment is {h.shape[0]}x{h.shape[1]} but snapshot has {snapshot.y.size} elements"
        )
    return replace(snapshot, y=h @ snapshot.y, impairment_id=impairment.identifier)


def _draw_angles(dist: SceneDistribution, m: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = dist.fov_deg
    for _ in range(MAX_REJECTIONS):
        angles = rng.uniform(lo, hi, size=m)
        if dist.min_separation_deg <= 0 or m == 1:
            return angles
        if np.min(np.diff(np.sort(angles))) >= dist.min_separation_deg:
            return angles
    raise ConfigurationError(
        f"could not place {m} sources {dist.min_separation_deg} deg apart inside "
        f"{dist.fov_deg} after {MAX_REJECTIONS} attempts"
    )


def sample_scene(dist: SceneDistribution, rng) -> SourceScene:
    rng = np.random.default_rng(rng)
    m = int(rng.choice(dist.source_counts))
    angles = _draw_angles(dist, m, rng)
    amp = rng.uniform(*dist.amplitude_range, size=m)
    phase = rng.uniform(*dist.phase_range, size=m)
    return SourceScene(angles, amp * np.exp(1j * phase))


def sample_snr(dist: SceneDistribution, rng: np.random.Generator) -> float:
    lo, hi = dist.snr_range_db
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


@dataclass
class SceneBatch:
    """
    Vectorised batch of snapshots.

    ``angles_deg`` and ``gains`` are padded to ``MAX_SOURCES`` columns with NaN
    and 0 respectively; ``orders`` gives the live column count per row.
    """

    y: np.ndarray
    orders: np.ndarray
    angles_deg: np.ndarray
    gains: np.ndarray
    snr_db: np.ndarray

    def __len__(self):
        return int(self.orders.size)

    def scene(self, i: int) -> SourceScene:
        m = int(self.orders[i])
        return SourceScene(self.angles_deg[i, :m], self.gains[i, :m])

    def snapshot(self, i: int) -> Snapshot:
        return Snapshot(y=self.y[i], scene=self.scene(i), snr_db=float(self.snr_db[i]))

    @classmethod
    def from_snapshots(cls, snapshots: Sequence[Snapshot]) -> "SceneBatch":
        b = len(snapshots)
        angles = np.full((b, MAX_SOURCES), np.nan)
        gains = np.zeros((b, MAX_SOURCES), dtype=complex)
        orders = np.zeros(b, dtype=int)
        for i, s in enumerate(snapshots):
            m = s.scene.order
            orders[i] = m
            angles[i, :m] = s.scene.angles_deg
            gains[i, :m] = s.scene.gains
        return cls(
            y=np.stack([s.y for s in snapshots]),
            orders=orders,
            angles_deg=angles,
            gains=gains,
            snr_db=np.array([s.snr_db for s in snapshots], dtype=float),
        )


def sample_batch(
    geometry: ArrayGeometry,
    dist: SceneDistribution,
    size: int,
    rng: np.random.Generator,
    noise: bool = True,
) -> SceneBatch:
    """Draw ``size`` independent scenes, SNRs and noisy observations in one shot."""
    lo, hi = dist.fov_deg
    counts = np.asarray(dist.source_counts)
    orders = counts[rng.integers(0, counts.size, size=size)]
    angles = rng.uniform(lo, hi, size=(size, MAX_SOURCES))
    if dist.min_separation_deg > 0:
        for i in range(size):
            m = orders[i]
            if m > 1 and np.min(np.diff(np.sort(angles[i, :m]))) < dist.min_separation_deg:
                angles[i, :m] = _draw_angles(dist, m, rng)
    amp = rng.uniform(*dist.amplitude_range, size=(size, MAX_SOURCES))
    phase = rng.uniform(*dist.phase_range, size=(size, MAX_SOURCES))
    s_lo, s_hi = dist.snr_range_db
    snr = rng.uniform(s_lo, s_hi, size=size) if s_hi > s_lo else np.full(size, float(s_lo))
    live = np.arange(MAX_SOURCES)[None, :] < orders[:, None]
    gains = np.where(live, amp * np.exp(1j * phase), 0.0)
    angles = np.where(live, angles, np.nan)

    sin_t = np.sin(np.deg2rad(np.nan_to_num(angles)))
    k = 2 * np.pi / geometry.wavelength
    steer = np.exp(1j * k * sin_t[:, None, :] * geometry.positions[None, :, None])
    y = np.einsum("bnm,bm->bn", steer, gains)
    if noise:
        sigma = np.sqrt(10.0 ** (-snr / 10.0) / 2.0)[:, None]
        n = geometry.element_count
        y = y + sigma * (rng.standard_normal((size, n)) + 1j * rng.standard_normal((size, n)))
    return SceneBatch(y=y, orders=orders, angles_deg=angles, gains=gains, snr_db=snr)


# --------------------------------------------------------------------------
# Dataset container
#
# header:  b"AOA1" | u16 version | u16 flags (bit0: noise disabled)
#          geometry: u32 N | f64 wavelength | f64*N positions
#          distribution: f64 fov_lo, fov_hi | u8 K | u8*K source counts
#                        f64 amp_lo, amp_hi, phase_lo, phase_hi,
#                            snr_lo, snr_hi, min_separation
#          u64 record count
# record:  u8 M | f64*M angles | f64*2M gains (re, im) | f64 snr_db
#          | f64*2N y (re, im interleaved)
# All fields little-endian.
# --------------------------------------------------------------------------

DATASET_MAGIC = b"AOA1"
DATASET_VERSION = 1
FLAG_NOISE_DISABLED = 0x1


@dataclass
class Dataset:
    geometry: ArrayGeometry
    distribution: SceneDistribution
    noise_enabled: bool
    snapshots: list = field(default_factory=list)


def generate_dataset(
    geometry: ArrayGeometry,
    dist: SceneDistribution,
    count: int,
    seed: int,
    noise: bool = True,
) -> Dataset:
    """Record ``i`` is drawn from a generator seeded with ``(seed, i)``."""
    snapshots = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        scene = sample_scene(dist, rng)
        snr = sample_snr(dist, rng)
        snap = synthesize_snapshot(geometry, scene, snr, rng, noise=noise)
        snapshots.append(replace(snap, seed=seed))
    return Dataset(geometry, dist, noise, snapshots)


def write_dataset(path, dataset: Dataset, sidecar: Optional[dict] = None) -> Path:
    """Write the binary container and, if ``sidecar`` is given, ``<path>.json`` next to it."""
    path = Path(path)
    g, d = dataset.geometry, dataset.distribution
    n = g.element_count
    parts = [
        DATASET_MAGIC,
        struct.pack("<HH", DATASET_VERSION, 0 if dataset.noise_enabled else FLAG_NOISE_DISABLED),
        struct.pack("<Id", n, g.wavelength),
        np.asarray(g.positions, dtype="<f8").tobytes(),
        struct.pack("<ddB", d.fov_deg[0], d.fov_deg[1], len(d.source_counts)),
        bytes(d.source_counts),
        struct.pack(
            "<7d",
            *d.amplitude_range,
            *d.phase_range,
            *d.snr_range_db,
            d.min_separation_deg,
        ),
        struct.pack("<Q", len(dataset.snapshots)),
    ]
    for snap in dataset.snapshots:
        if snap.y.size != n:
            raise StructuralError("snapshot length does not match geometry")
        m = snap.scene.order
        parts.append(struct.pack("<B", m))
        parts.append(np.asarray(snap.scene.angles_deg, dtype="<f8").tobytes())
        parts.append(np.asarray(snap.scene.gains, dtype="<c16").tobytes())
        parts.append(struct.pack("<d", snap.snr_db))
        parts.append(np.asarray(snap.y, dtype="<c16").tobytes())
    path.write_bytes(b"".join(parts))
    if sidecar is not None:
        payload = dict(sidecar)
        payload.setdefault("format_version", DATASET_VERSION)
        payload.setdefault("records", len(dataset.snapshots))
        Path(str(path) + ".json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetError("dataset file is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int, dtype="<f8") -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * width), dtype=dtype).astype(
            complex if "c" in dtype else float
        )


def read_dataset(path) -> Dataset:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != DATASET_MAGIC:
        raise DatasetError("not an AOA1 dataset file")
    version, flags = r.unpack("<HH")
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    n, wavelength = r.unpack("<Id")
    geometry = ArrayGeometry(r.floats(n), wavelength)
    fov_lo, fov_hi, k = r.unpack("<ddB")
    counts = tuple(r.take(k))
    vals = r.unpack("<7d")
    dist = SceneDistribution(
        fov_deg=(fov_lo, fov_hi),
        source_counts=counts,
        amplitude_range=vals[0:2],
        phase_range=vals[2:4],
        snr_range_db=vals[4:6],
        min_separation_deg=vals[6],
    )
    (count,) = r.unpack("<Q")
    noise = not (flags & FLAG_NOISE_DISABLED)
    snapshots = []
    for _ in range(count):
        (m,) = r.unpack("<B")
        angles = r.floats(m)
        gains = r.floats(m, "<c16")
        (snr,) = r.unpack("<d")
        y = r.floats(n, "<c16")
        snapshots.append(Snapshot(y=y, scene=SourceScene(angles, gains), snr_db=snr, noise_enabled=noise))
    if r.pos != len(r.data):
        raise DatasetError("trailing bytes after last record")
    return Dataset(geometry, dist, noise, snapshots)
