"""
JSON run configuration.

A config is one JSON object with optional sections. Every field has a
default; unknown keys anywhere are rejected so typos fail loudly.
"""

import copy
import json
from pathlib import Path
from typing import Optional

from .array_model import ArrayGeometry, SceneDistribution
from .classical import GridSpec
from .errors import AoaLabError, ConfigurationError
from .evaluation import SweepConfig
from .net import DEFAULT_WIDTHS, NetworkSpec
from .train import TrainConfig

DEFAULTS = {
    "seed": 0,
    "geometry": {"elements": 16, "spacing": 0.5, "positions": None, "wavelength": 1.0},
    "scene_distribution": {
        "fov_deg": [-25.0, 25.0],
        "source_counts": [1, 2, 3, 4],
        "amplitude_range": [0.5, 1.5],
        "phase_range": [0.0, 6.283185307179586],
        "snr_range_db": [-10.0, 30.0],
        "min_separation_deg": 0.0,
    },
    "grid": {"fov_deg": None, "step_deg": 0.1},
    "network": {
        "hidden_widths": list(DEFAULT_WIDTHS),
        "dense_connectivity": False,
        "angle_normalization": None,
    },
    "training": {
        "batch_size": 4000,
        "iterations": 1000,
        "lr": 0.01,
        "momentum": 0.9,
        "lr_decay": [0.5, 20000],
        "loss_weight": 1.0,
        "validation_size": 1000,
        "checkpoint_every": 1000,
    },
    "sweep": {
        "methods": ["ap", "omp", "music"],
        "order_methods": ["mdl", "aic"],
        "snr_points_db": [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
        "trials_per_point": 100,
        "impairment": None,
        "subarray_size": 8,
        "ap_iterations": 10,
        "ml_budget": 1e10,
        "timing": True,
    },
    "simulate": {"noise_enabled": True},
}

_IMPAIRMENT_KEYS = {"phase_sigma_deg", "crosstalk_gamma_db"}


def _merge(defaults: dict, given: dict, where: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigurationError(f"{where or 'config'} must be a JSON object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, f"{where}.{key}" if where else key)
        else:
            out[key] = value
    return out


class CliConfig:
    """Validated, fully defaulted configuration with builders for each workflow."""

    def __init__(self, raw: Optional[dict] = None, seed: Optional[int] = None):
        self.data = _merge(DEFAULTS, raw or {}, "")
        if seed is not None:
            self.data["seed"] = int(seed)
        imp = self.data["sweep"]["impairment"]
        if imp is not None:
            if not isinstance(imp, dict) or set(imp) != _IMPAIRMENT_KEYS:
                raise ConfigurationError(
                    "sweep.impairment must be null or {phase_sigma_deg, crosstalk_gamma_db}"
                )
        try:
            # build everything once so schema errors surface before any work
            self.geometry()
            self.scene_distribution()
            self.grid()
            self.network()
            self.training()
            self.sweep()
        except ConfigurationError:
            raise
        except (AoaLabError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid configuration: {exc}") from exc

    @classmethod
    def from_file(cls, path, seed: Optional[int] = None) -> "CliConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        return cls(raw, seed)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def geometry(self) -> ArrayGeometry:
        g = self.data["geometry"]
        if g["positions"] is not None:
            return ArrayGeometry(g["positions"], g["wavelength"])
        geo = ArrayGeometry.ula(int(g["elements"]), float(g["spacing"]))
        return ArrayGeometry(geo.positions, g["wavelength"])

    def scene_distribution(self) -> SceneDistribution:
        d = self.data["scene_distribution"]
        return SceneDistribution(
            fov_deg=tuple(d["fov_deg"]),
            source_counts=tuple(d["source_counts"]),
            amplitude_range=tuple(d["amplitude_range"]),
            phase_range=tuple(d["phase_range"]),
            snr_range_db=tuple(d["snr_range_db"]),
            min_separation_deg=float(d["min_separation_deg"]),
        )

    def grid(self) -> GridSpec:
        g = self.data["grid"]
        fov = g["fov_deg"] if g["fov_deg"] is not None else self.data["scene_distribution"]["fov_deg"]
        return GridSpec(tuple(fov), float(g["step_deg"]))

    def network(self) -> NetworkSpec:
        n = self.data["network"]
        norm = n["angle_normalization"]
        if norm is None:
            norm = self.scene_distribution().half_width
        return NetworkSpec(
            input_dim=2 * self.geometry().element_count,
            hidden_widths=tuple(n["hidden_widths"]),
            dense_connectivity=bool(n["dense_connectivity"]),
            angle_normalization=float(norm),
        )

    def training(self) -> TrainConfig:
        t = self.data["training"]
        return TrainConfig(
            network=self.network(),
            geometry=self.geometry(),
            scene_distribution=self.scene_distribution(),
            batch_size=int(t["batch_size"]),
            iterations=int(t["iterations"]),
            lr=float(t["lr"]),
            momentum=float(t["momentum"]),
            lr_decay=(float(t["lr_decay"][0]), int(t["lr_decay"][1])),
            loss_weight=float(t["loss_weight"]),
            seed=self.seed,
            validation_size=int(t["validation_size"]),
            checkpoint_every=int(t["checkpoint_every"]),
        )

    def sweep(self, order: bool = False, workers: int = 1) -> SweepConfig:
        s = self.data["sweep"]
        imp = s["impairment"]
        return SweepConfig(
            methods=tuple(s["order_methods"] if order else s["methods"]),
            snr_points_db=tuple(s["snr_points_db"]),
            trials_per_point=int(s["trials_per_point"]),
            scene_distribution=self.scene_distribution(),
            impairment=None if imp is None else (imp["phase_sigma_deg"], imp["crosstalk_gamma_db"]),
            grid=self.grid(),
            geometry=self.geometry(),
            seed=self.seed,
            subarray_size=int(s["subarray_size"]),
            ap_iterations=int(s["ap_iterations"]),
            ml_budget=float(s["ml_budget"]),
            timing=bool(s["timing"]),
            workers=workers,
        )

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / "effective_config.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return path
