"""Circular cone-beam scanner geometry.

Convention: right-handed world frame, rotation about +z. At angle 0 the
source sits at ``(-dso, 0, 0)`` looking along +x; the detector u axis runs
along +y and v along +z. World units are those of ``volume_extent`` (the
reconstruction cube is ``[-e, e]`` per axis).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    @property
    def hits(self) -> bool:
        return self.t_near <= self.t_far


@dataclass(frozen=True)
class ScannerGeometry:
    dso: float
    dsd: float
    detector_dims: tuple[int, int]
    detector_spacing: tuple[float, float]
    n_angles: int
    angle_start: float = 0.0
    angle_end: float = math.pi
    volume_extent: tuple[float, float, float] = (1.0, 1.0, 1.0)
    angles: np.ndarray = field(init=False, repr=False, compare=False)
    sources: np.ndarray = field(init=False, repr=False, compare=False)
    frames: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "detector_dims", tuple(int(d) for d in self.detector_dims))
        set_(self, "detector_spacing", tuple(float(s) for s in self.detector_spacing))
        set_(self, "volume_extent", tuple(float(e) for e in self.volume_extent))
        if not 0 < self.dso < self.dsd:
            raise ValueError(f"need 0 < dso < dsd, got dso={self.dso}, dsd={self.dsd}")
        if self.n_angles < 1:
            raise ValueError("n_angles must be >= 1")
        if min(self.detector_dims) < 1 or min(self.detector_spacing) <= 0:
            raise ValueError("detector dims and spacing must be positive")
        if min(self.volume_extent) <= 0:
            raise ValueError("volume_extent must be positive")
        angles = self.angle_start + (self.angle_end - self.angle_start) * np.arange(self.n_angles) / self.n_angles
        c, s = np.cos(angles), np.sin(angles)
        zeros, ones = np.zeros_like(c), np.ones_like(c)
        # rows per angle: e_u, e_v, e_depth
        frames = np.stack([
            np.stack([-s, c, zeros], axis=-1),
            np.stack([zeros, zeros, ones], axis=-1),
            np.stack([c, s, zeros], axis=-1),
        ], axis=1)
        set_(self, "angles", angles)
        set_(self, "sources", -self.dso * frames[:, 2])
        set_(self, "frames", frames)
        self._check_footprint()

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_config(cls, cfg: dict) -> "ScannerGeometry":
        """Build from a config block; the angle range is given in degrees."""
        known = {"dso", "dsd", "detector", "spacing", "n_angles", "angle_range", "volume_extent"}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown geometry keys: {sorted(unknown)}")
        lo, hi = cfg.get("angle_range", (0.0, 180.0))
        return cls(
            dso=float(cfg["dso"]),
            dsd=float(cfg["dsd"]),
            detector_dims=tuple(cfg["detector"]),
            detector_spacing=tuple(cfg["spacing"]),
            n_angles=int(cfg["n_angles"]),
            angle_start=math.radians(lo),
            angle_end=math.radians(hi),
            volume_extent=tuple(cfg.get("volume_extent", (1.0, 1.0, 1.0))),
        )

    def to_config(self) -> dict:
        return {
            "dso": self.dso,
            "dsd": self.dsd,
            "detector": list(self.detector_dims),
            "spacing": list(self.detector_spacing),
            "n_angles": self.n_angles,
            "angle_range": [math.degrees(self.angle_start), math.degrees(self.angle_end)],
            "volume_extent": list(self.volume_extent),
        }

    @classmethod
    def parallel_beam(cls, detector_dims, detector_spacing, n_angles, angle_start=0.0,
                      angle_end=math.pi, volume_extent=(1.0, 1.0, 1.0), distance=1e6):
        """Near-parallel geometry: source pushed far away with unit magnification in the limit."""
        return cls(distance, distance + 1e-3, detector_dims, detector_spacing, n_angles,
                   angle_start, angle_end, volume_extent)

    def scaled_detector(self, factor: int) -> "ScannerGeometry":
        """Same scanner with a detector binned by ``factor`` (coarser pixels, same footprint)."""
        nu, nv = self.detector_dims
        if nu % factor or nv % factor:
            raise ValueError(f"detector {self.detector_dims} not divisible by {factor}")
        su, sv = self.detector_spacing
        return ScannerGeometry(self.dso, self.dsd, (nu // factor, nv // factor), (su * factor, sv * factor),
                               self.n_angles, self.angle_start, self.angle_end, self.volume_extent)

    def digest(self) -> str:
        blob = json.dumps(self.to_config(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- queries --------------------------------------------------------------

    @property
    def angle_step(self) -> float:
        return (self.angle_end - self.angle_start) / self.n_angles

    @property
    def focal(self) -> tuple[float, float]:
        """Detector distance in pixel units along u and v."""
        return self.dsd / self.detector_spacing[0], self.dsd / self.detector_spacing[1]

    @property
    def principal_point(self) -> tuple[float, float]:
        nu, nv = self.detector_dims
        return nu / 2.0 - 0.5, nv / 2.0 - 0.5

    def frame(self, angle_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Source position and the (3, 3) world-to-camera rotation (rows e_u, e_v, e_depth)."""
        if not 0 <= angle_index < self.n_angles:
            raise IndexError(f"angle index {angle_index} out of range [0, {self.n_angles})")
        return self.sources[angle_index], self.frames[angle_index]

    def pixel_positions(self, angle_index: int) -> np.ndarray:
        """World positions of all detector pixel centers, shape (nv, nu, 3)."""
        src, rot = self.frame(angle_index)
        nu, nv = self.detector_dims
        su, sv = self.detector_spacing
        u = (np.arange(nu) + 0.5 - nu / 2.0) * su
        v = (np.arange(nv) + 0.5 - nv / 2.0) * sv
        center = src + self.dsd * rot[2]
        return center + u[None, :, None] * rot[0] + v[:, None, None] * rot[1]

    def rays(self, angle_index: int):
        """Origins (3,), unit directions (nv, nu, 3), t_near and t_far (nv, nu) for all pixels."""
        src, _ = self.frame(angle_index)
        d = self.pixel_positions(angle_index) - src
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        t_near, t_far = slab_intersect(src, d, np.asarray(self.volume_extent))
        return src, d, t_near, t_far

    def _check_footprint(self):
        ext = np.asarray(self.volume_extent)
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * ext
        fu, fv = self.focal
        cu, cv = self.principal_point
        nu, nv = self.detector_dims
        for src, rot in zip(self.sources, self.frames):
            cam = (corners - src) @ rot.T
            if np.any(cam[:, 2] <= 0):
                raise ValueError("volume extends behind the source; increase dso")
            pu = fu * cam[:, 0] / cam[:, 2] + cu
            pv = fv * cam[:, 1] / cam[:, 2] + cv
            if pu.min() < -0.5 or pu.max() > nu - 0.5 or pv.min() < -0.5 or pv.max() > nv - 0.5:
                raise ValueError("detector too small for the projected volume footprint")


def slab_intersect(origin: np.ndarray, direction: np.ndarray, extent: np.ndarray):
    """Entry/exit ray parameters against the box ``[-extent, extent]``; t_near > t_far on a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (-extent - origin) * inv
        t1 = (extent - origin) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    return t_near, t_far


def make_geometry(config: dict) -> ScannerGeometry:
    return ScannerGeometry.from_config(config)


def ray_for_pixel(geom: ScannerGeometry, angle_index: int, u: int, v: int) -> Ray:
    nu, nv = geom.detector_dims
    if not (0 <= u < nu and 0 <= v < nv):
        raise IndexError(f"pixel ({u}, {v}) outside detector {geom.detector_dims}")
    src, rot = geom.frame(angle_index)
    su, sv = geom.detector_spacing
    pix = src + geom.dsd * rot[2] + (u + 0.5 - nu / 2.0) * su * rot[0] + (v + 0.5 - nv / 2.0) * sv * rot[1]
    d = pix - src
    d = d / np.linalg.norm(d)
    t_near, t_far = slab_intersect(src, d[None], np.asarray(geom.volume_extent))
    return Ray(src.copy(), d, float(t_near[0]), float(t_far[0]))


def default_geometry(hr_dims: int = 64, n_angles: int = 100, detector: int | None = None) -> ScannerGeometry:
    """Desk-scale scanner for a volume of ``hr_dims`` voxels per axis on ``[-1, 1]^3``.

    Magnification 1.5 and a detector pitch close to the magnified voxel size.
    """
    dso, dsd = 6.0, 9.0
    n = detector if detector is not None else int(hr_dims * 1.5)
    width = 4.6
    return ScannerGeometry(dso, dsd, (n, n), (width / n, width / n), n_angles, 0.0, math.pi)
