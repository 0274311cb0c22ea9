"""Voxel-grid forward projector and projection containers.

Projections hold raw line integrals (no Beer-Lambert exponentiation). Image
arrays are indexed ``data[v, u]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .geometry import ScannerGeometry
from .volume import VoxelVolume


@dataclass
class Projection:
    data: np.ndarray
    angle_index: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"projection must be 2D, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.data.shape)


@dataclass
class ProjectionSet:
    geometry: ScannerGeometry
    projections: list[Projection]
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.projections) != self.geometry.n_angles:
            raise ValueError(f"{len(self.projections)} projections for {self.geometry.n_angles} angles")
        shapes = {p.dims for p in self.projections}
        if len(shapes) > 1:
            raise ValueError(f"non-uniform projection dims {shapes}")

    def __len__(self):
        return len(self.projections)

    def __getitem__(self, i) -> Projection:
        return self.projections[i]

    def stack(self) -> np.ndarray:
        return np.stack([p.data for p in self.projections])


@numba.njit(cache=True)
def _trilinear(vol, x, y, z):
    nx, ny, nz = vol.shape
    x = min(max(x, 0.0), nx - 1.0)
    y = min(max(y, 0.0), ny - 1.0)
    z = min(max(z, 0.0), nz - 1.0)
    i0 = min(int(x), nx - 2) if nx > 1 else 0
    j0 = min(int(y), ny - 2) if ny > 1 else 0
    k0 = min(int(z), nz - 2) if nz > 1 else 0
    i1 = min(i0 + 1, nx - 1)
    j1 = min(j0 + 1, ny - 1)
    k1 = min(k0 + 1, nz - 1)
    fx, fy, fz = x - i0, y - j0, z - k0
    c00 = vol[i0, j0, k0] * (1 - fx) + vol[i1, j0, k0] * fx
    c10 = vol[i0, j1, k0] * (1 - fx) + vol[i1, j1, k0] * fx
    c01 = vol[i0, j0, k1] * (1 - fx) + vol[i1, j0, k1] * fx
    c11 = vol[i0, j1, k1] * (1 - fx) + vol[i1, j1, k1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@numba.njit(cache=True)
def _march(vol, extent, src, dirs, t_near, t_far, step, out):
    nx, ny, nz = vol.shape
    sx = nx / (2.0 * extent[0])
    sy = ny / (2.0 * extent[1])
    sz = nz / (2.0 * extent[2])
    nv, nu = out.shape
    for iv in range(nv):
        for iu in range(nu):
            tn = t_near[iv, iu]
            tf = t_far[iv, iu]
            if not tn < tf:
                out[iv, iu] = 0.0
                continue
            n = max(1, int(math.ceil((tf - tn) / step)))
            h = (tf - tn) / n
            dx, dy, dz = dirs[iv, iu, 0], dirs[iv, iu, 1], dirs[iv, iu, 2]
            acc = 0.0
            for k in range(n + 1):
                t = tn + k * h
                px = (src[0] + t * dx + extent[0]) * sx - 0.5
                py = (src[1] + t * dy + extent[1]) * sy - 0.5
                pz = (src[2] + t * dz + extent[2]) * sz - 0.5
                val = _trilinear(vol, px, py, pz)
                if k == 0 or k == n:
                    val *= 0.5
                acc += val
            out[iv, iu] = acc * h


def default_step(vol: VoxelVolume, geom: ScannerGeometry) -> float:
    """Half the smallest voxel edge in world units."""
    return 0.5 * min(2.0 * e / n for e, n in zip(geom.volume_extent, vol.dims))


def forward_project(vol: VoxelVolume, geom: ScannerGeometry, angle_index: int,
                    step: float | None = None) -> Projection:
    """Trapezoidal line integrals of the trilinearly interpolated volume along every pixel ray."""
    if step is None:
        step = default_step(vol, geom)
    if step <= 0:
        raise ValueError(f"ray-march step must be positive, got {step}")
    src, dirs, t_near, t_far = geom.rays(angle_index)
    nu, nv = geom.detector_dims
    out = np.zeros((nv, nu))
    _march(vol.data.astype(np.float64), np.asarray(geom.volume_extent, dtype=np.float64),
           src, dirs, t_near, t_far, float(step), out)
    return Projection(out, angle_index)


def project_all(vol: VoxelVolume, geom: ScannerGeometry, step: float | None = None) -> ProjectionSet:
    return ProjectionSet(geom, [forward_project(vol, geom, i, step) for i in range(geom.n_angles)])


def add_noise(pset: ProjectionSet, sigma: float, seed: int = 0) -> ProjectionSet:
    """Additive Gaussian detector noise, one seeded stream per angle."""
    out = []
    for p in pset.projections:
        rng = np.random.default_rng([seed, p.angle_index])
        out.append(Projection(p.data + sigma * rng.standard_normal(p.dims), p.angle_index))
    return ProjectionSet(pset.geometry, out, dict(pset.extra))


# -- I/O ----------------------------------------------------------------------

MANIFEST = "manifest.json"


def write_projection_set(pset: ProjectionSet, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for p in pset.projections:
        name = f"proj_{p.angle_index:04d}.f32raw"
        (directory / name).write_bytes(p.data.astype("<f4").tobytes())
        files.append(name)
    geom = pset.geometry
    manifest = {
        "geometry": geom.to_config(),
        "geometry_hash": geom.digest(),
        "dims": list(pset.projections[0].dims),
        "angles_deg": [round(math.degrees(a), 10) for a in geom.angles],
        "files": files,
        **pset.extra,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def read_projection_set(directory) -> ProjectionSet:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"missing projection manifest {mpath}")
    manifest = json.loads(mpath.read_text())
    geom = ScannerGeometry.from_config(manifest["geometry"])
    if geom.digest() != manifest["geometry_hash"]:
        raise ValueError("projection manifest geometry hash mismatch")
    dims = tuple(manifest["dims"])
    projections = []
    for i, name in enumerate(manifest["files"]):
        raw = np.frombuffer((directory / name).read_bytes(), dtype="<f4")
        if raw.size != dims[0] * dims[1]:
            raise ValueError(f"{name}: {raw.size} floats, expected {dims[0] * dims[1]}")
        projections.append(Projection(raw.reshape(dims).astype(np.float64), i))
    reserved = {"geometry", "geometry_hash", "dims", "angles_deg", "files"}
    extra = {k: v for k, v in manifest.items() if k not in reserved}
    return ProjectionSet(geom, projections, extra)
