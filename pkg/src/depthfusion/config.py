"""Run configuration and its flat ``section.key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .icp import IcpParams
from .iekf import CHI2_6DOF_99, Gates
from .simulator import SimConfig


@dataclass
class IcpSettings:
    max_iterations: int = 100
    translation_tolerance: float = 1e-5
    rotation_tolerance: float = 1e-5
    max_correspondence_distance: float = 0.9  # 3 sigma + 0.3 m inter-scan displacement
    min_correspondences: int = 30
    trim_factor: float = 3.0
    depth_smoothing: int = 5  # edge-aware box filter window in pixels, <= 1 disables
    smoothing_edge: float = 0.5
    source_voxel: float = 0.1  # equal to map.voxel: mismatched grids alias in point-to-point matching
    coarse_iterations: int = 10
    jump_threshold: float = 0.8
    vertical_gradients: bool = False

    def params(self) -> IcpParams:
        return IcpParams(
            self.max_iterations,
            self.translation_tolerance,
            self.rotation_tolerance,
            self.max_correspondence_distance,
            self.min_correspondences,
            self.trim_factor,
        )


@dataclass
class IekfSettings:
    sigma_sensor: float = 0.2
    gyro_noise_std: float = 0.02  # rad/s, rotational block of M
    translation_noise_std: tuple = (0.5, 0.5, 0.25)  # m/s, translational block of M
    p0: float = 1e-4
    frame: str = "ground"
    quaternion: bool = False
    quaternion_step: str = "exact"  # or "first_order": q + q * omega dt / 2, then normalise
    renormalize_every: int = 1000
    chi2_gate: float = CHI2_6DOF_99
    residual_gate: Optional[float] = None
    condition_limit: float = 1e12

    def motion_noise(self) -> np.ndarray:
        return np.diag([self.gyro_noise_std**2] * 3 + [s**2 for s in self.translation_noise_std])

    @property
    def exact_quaternion(self) -> bool:
        if self.quaternion_step not in ("exact", "first_order"):
            raise ValueError(f"iekf.quaternion_step must be 'exact' or 'first_order', not {self.quaternion_step!r}")
        return self.quaternion_step == "exact"

    def gates(self) -> Gates:
        return Gates(self.residual_gate, self.chi2_gate, self.condition_limit)


@dataclass
class MapSettings:
    voxel: float = 0.1
    mode: str = "map"  # "map": register against the accumulated map; "scan": against the previous scan
    insert_rejected: bool = False
    overlap_margin: float = 4.0  # pixels; source points outside every mapped view are skipped, < 0 disables


@dataclass
class CovSettings:
    points: str = "matched"  # or "map"
    recenter: bool = False


@dataclass
class BaselineSettings:
    icp_gyro_init: bool = False


@dataclass
class Config:
    icp: IcpSettings = field(default_factory=IcpSettings)
    iekf: IekfSettings = field(default_factory=IekfSettings)
    map: MapSettings = field(default_factory=MapSettings)
    cov: CovSettings = field(default_factory=CovSettings)
    baseline: BaselineSettings = field(default_factory=BaselineSettings)
    sim: SimConfig = field(default_factory=SimConfig)

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        target = getattr(self, section, None) if section in _SECTIONS else None
        if target is None or not name or name not in {f.name for f in dataclasses.fields(target)}:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(target, name)
        setattr(target, name, _coerce(raw, current, key))

    def items(self):
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)


_SECTIONS = ("icp", "iekf", "map", "cov", "baseline", "sim")


def _coerce(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(float(v) for v in raw.split(","))
        if current is None:
            return None if raw.lower() in ("", "none") else float(raw)
        return raw
    except ValueError:
        raise ValueError(f"bad value {raw!r} for {key}") from None


def parse_config(text: str, base: Optional[Config] = None) -> Config:
    cfg = base if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())


def dump_config(cfg: Config) -> str:
    lines = []
    for key, value in cfg.items():
        if isinstance(value, tuple):
            value = ",".join(repr(float(v)) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
