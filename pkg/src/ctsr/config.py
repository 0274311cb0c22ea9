"""Run configuration: YAML documents validated into typed sections."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from dataclasses import field as dc_field
from pathlib import Path

import yaml

from .geometry import ScannerGeometry, default_geometry
from .trainer import TrainConfig


class ValidationError(ValueError):
    pass


def _build(cls, section: str, cfg: dict | None):
    cfg = dict(cfg or {})
    known = {f.name for f in fields(cls)}
    unknown = set(cfg) - known
    if unknown:
        raise ValidationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**cfg)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"[{section}] {exc}") from exc


@dataclass
class VolumeSection:
    path: str | None = None
    dims: int = 64
    contrast: float = 1.0
    clip_window: list[float] | None = None

    def __post_init__(self):
        if self.path is None and self.dims < 8:
            raise ValueError(f"phantom dims must be >= 8, got {self.dims}")
        if self.clip_window is not None and (len(self.clip_window) != 2 or
                                             not self.clip_window[0] < self.clip_window[1]):
            raise ValueError(f"clip_window must be [lo, hi] with lo < hi, got {self.clip_window}")


@dataclass
class DegradationSection:
    factor: int = 4
    sigma: float | None = None

    def __post_init__(self):
        if self.factor not in (2, 4, 8):
            raise ValueError(f"factor must be 2, 4 or 8, got {self.factor}")


@dataclass
class DDNMSection:
    denoiser: str = "shrinkage"
    blur_std: float = 2.0
    noise_gain: float = 2.0
    command: list[str] | None = None
    tau_thr: float | None = None
    sigma_y: float = 0.0015
    seed: int | None = None
    candidates: list[int] = dc_field(default_factory=lambda: [100, 300, 500, 1000])
    norm: str = "total"
    timesteps: int = 1000
    ddim_steps: int = 50
    lr_source: str = "gt"

    def __post_init__(self):
        if self.denoiser not in ("shrinkage", "oracle", "external"):
            raise ValueError(f"unknown denoiser {self.denoiser!r}")
        if self.denoiser == "external" and not self.command:
            raise ValueError("external denoiser needs a command")
        if self.lr_source not in ("gt", "lr_volume"):
            raise ValueError(f"lr_source must be 'gt' or 'lr_volume', got {self.lr_source!r}")
        if self.sigma_y < 0:
            raise ValueError("sigma_y must be non-negative")

    def threshold(self, factor: int) -> float:
        if self.tau_thr is not None:
            return self.tau_thr
        return 7.0 if factor <= 4 else 11.0


@dataclass
class FieldSection:
    n_init: int = 10_000
    density_thresh: float = 0.05
    scale_term: float = 0.15
    mode: str = "residual"
    activation: str = "leaky"
    isotropic: bool = False

    def __post_init__(self):
        if self.mode not in ("residual", "full"):
            raise ValueError(f"field mode must be 'residual' or 'full', got {self.mode!r}")
        if self.activation not in ("leaky", "softplus"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")


@dataclass
class RunConfig:
    volume: VolumeSection = dc_field(default_factory=VolumeSection)
    geometry: dict = dc_field(default_factory=dict)
    degradation: DegradationSection = dc_field(default_factory=DegradationSection)
    ddnm: DDNMSection = dc_field(default_factory=DDNMSection)
    field: FieldSection = dc_field(default_factory=FieldSection)
    trainer: TrainConfig = dc_field(default_factory=TrainConfig)
    output: str | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        doc = dict(doc or {})
        sections = {"volume", "geometry", "degradation", "ddnm", "field", "trainer", "output", "seed"}
        unknown = set(doc) - sections
        if unknown:
            raise ValidationError(f"unknown top-level keys: {sorted(unknown)}")
        trainer = dict(doc.get("trainer") or {})
        if "seed" in trainer:
            raise ValidationError("[trainer] seed is set by the top-level seed key")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ValidationError(f"seed must be an integer, got {seed!r}")
        try:
            trainer_cfg = TrainConfig.from_dict({**trainer, "seed": seed})
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"[trainer] {exc}") from exc
        geometry = dict(doc.get("geometry") or {})
        allowed = {"dso", "dsd", "detector", "spacing", "n_angles", "angle_range", "volume_extent"}
        if set(geometry) - allowed:
            raise ValidationError(f"unknown keys in [geometry]: {sorted(set(geometry) - allowed)}")
        return cls(
            volume=_build(VolumeSection, "volume", doc.get("volume")),
            geometry=geometry,
            degradation=_build(DegradationSection, "degradation", doc.get("degradation")),
            ddnm=_build(DDNMSection, "ddnm", doc.get("ddnm")),
            field=_build(FieldSection, "field", doc.get("field")),
            trainer=trainer_cfg,
            output=doc.get("output"),
            seed=seed,
        )

    def to_dict(self) -> dict:
        doc = asdict(self)
        del doc["trainer"]["seed"]
        return doc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        doc = self.to_dict()
        doc["seed"] = seed
        return RunConfig.from_dict(doc)

    @property
    def ddnm_seed(self) -> int:
        return self.seed if self.ddnm.seed is None else self.ddnm.seed

    def scanner(self, hr_dims: int) -> ScannerGeometry:
        """Explicit geometry when fully specified, otherwise the desk default for ``hr_dims``."""
        g = self.geometry
        try:
            if {"dso", "dsd", "detector", "spacing", "n_angles"} <= set(g):
                return ScannerGeometry.from_config(g)
            base = default_geometry(hr_dims, int(g.get("n_angles", 100))).to_config()
            base.update(g)
            return ScannerGeometry.from_config(base)
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"[geometry] {exc}") from exc


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: not valid YAML ({exc})") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(doc)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
