"""Gaussian primitive store with signed (leaky-ReLU) or softplus densities."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.spatial import cKDTree

from .volume import VoxelVolume

log = logging.getLogger(__name__)

CUTOFF_SIGMA = 3.0
RESIDUAL_EPS = 1e-4
MIN_SCALE = 1e-4


# -- activations --------------------------------------------------------------

def activate_density(raw, gamma: float):
    """Leaky ReLU: identity for raw >= 0, ``gamma * raw`` otherwise."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.where(raw >= 0, raw, gamma * raw)
    return out if out.ndim else float(out)


def inverse_activate(rho, gamma: float):
    rho = np.asarray(rho, dtype=np.float64)
    out = np.where(rho >= 0, rho, rho / gamma)
    return out if out.ndim else float(out)


def activate_density_softplus(raw):
    raw = np.asarray(raw, dtype=np.float64)
    out = np.maximum(raw, 0.0) + np.log1p(np.exp(-np.abs(raw)))
    return out if out.ndim else float(out)


def inverse_softplus(rho):
    rho = np.asarray(rho, dtype=np.float64)
    out = np.where(rho > 20, rho, np.log(np.expm1(np.maximum(rho, 1e-12))))
    return out if out.ndim else float(out)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- rotations ----------------------------------------------------------------

def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions (w, x, y, z) to (N, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def rot_grad_to_quat(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Backpropagate dL/dR through :func:`quat_to_rot` for unit ``q``."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = d_rot
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


# -- field --------------------------------------------------------------------

@dataclass
class Gaussian3D:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    raw_density: float


@dataclass
class FieldGrads:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    raw_density: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "FieldGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n))

    def __iadd__(self, other: "FieldGrads"):
        self.position += other.position
        self.log_scale += other.log_scale
        self.rotation += other.rotation
        self.raw_density += other.raw_density
        return self

    def arrays(self) -> dict[str, np.ndarray]:
        return {"position": self.position, "log_scale": self.log_scale,
                "rotation": self.rotation, "raw_density": self.raw_density}


PARAM_NAMES = ("position", "log_scale", "rotation", "raw_density")


class GaussianField:
    """Structure-of-arrays store of anisotropic 3D Gaussians.

    ``activation`` is ``"leaky"`` (signed densities, slope ``gamma`` below zero)
    or ``"softplus"`` (non-negative densities).
    """

    def __init__(self, position, log_scale, rotation, raw_density, gamma=0.09,
                 max_count=500_000, activation="leaky", isotropic=False):
        self.position = np.array(position, dtype=np.float64).reshape(-1, 3)
        self.log_scale = np.array(log_scale, dtype=np.float64).reshape(-1, 3)
        self.rotation = np.array(rotation, dtype=np.float64).reshape(-1, 4)
        self.raw_density = np.array(raw_density, dtype=np.float64).reshape(-1)
        n = len(self.position)
        if not (len(self.log_scale) == len(self.rotation) == len(self.raw_density) == n):
            raise ValueError("parameter arrays disagree in length")
        if not gamma > 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        if activation not in ("leaky", "softplus"):
            raise ValueError(f"unknown activation {activation!r}")
        if n > max_count:
            raise ValueError(f"{n} Gaussians exceed max_count {max_count}")
        self.gamma = float(gamma)
        self.max_count = int(max_count)
        self.activation = activation
        self.isotropic = bool(isotropic)
        if n:
            self.normalize_rotations()

    @classmethod
    def empty(cls, **kw) -> "GaussianField":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), **kw)

    def __len__(self):
        return len(self.raw_density)

    def __getitem__(self, i) -> Gaussian3D:
        return Gaussian3D(self.position[i].copy(), self.log_scale[i].copy(),
                          self.rotation[i].copy(), float(self.raw_density[i]))

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def _settings(self) -> dict:
        return dict(gamma=self.gamma, max_count=self.max_count,
                    activation=self.activation, isotropic=self.isotropic)

    def copy(self) -> "GaussianField":
        return GaussianField(self.position, self.log_scale, self.rotation, self.raw_density, **self._settings())

    def subset(self, index) -> "GaussianField":
        return GaussianField(self.position[index], self.log_scale[index], self.rotation[index],
                             self.raw_density[index], **self._settings())

    def normalize_rotations(self):
        self.rotation /= np.linalg.norm(self.rotation, axis=1, keepdims=True)

    # -- derived quantities ---------------------------------------------------

    def density(self) -> np.ndarray:
        if self.activation == "softplus":
            return np.atleast_1d(activate_density_softplus(self.raw_density))
        return np.atleast_1d(activate_density(self.raw_density, self.gamma))

    def density_slope(self) -> np.ndarray:
        if self.activation == "softplus":
            return _sigmoid(self.raw_density)
        return np.where(self.raw_density >= 0, 1.0, self.gamma)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def rotations(self) -> np.ndarray:
        return quat_to_rot(self.rotation / np.linalg.norm(self.rotation, axis=1, keepdims=True))

    def covariances(self) -> np.ndarray:
        rot = self.rotations()
        s2 = self.scales() ** 2
        return np.einsum("nij,nj,nkj->nik", rot, s2, rot)

    def precisions(self) -> np.ndarray:
        rot = self.rotations()
        inv_s2 = np.exp(-2.0 * self.log_scale)
        return np.einsum("nij,nj,nkj->nik", rot, inv_s2, rot)

    def covariance_backward(self, d_cov: np.ndarray, d_prec: np.ndarray | None = None):
        """Map dL/dSigma (and optionally dL/dSigma^-1) to (dL/dlog_scale, dL/dquaternion)."""
        rot = self.rotations()
        s2 = self.scales() ** 2
        d_cov = 0.5 * (d_cov + np.swapaxes(d_cov, 1, 2))
        if d_prec is not None:
            prec = self.precisions()
            d_prec = 0.5 * (d_prec + np.swapaxes(d_prec, 1, 2))
            d_cov = d_cov - prec @ d_prec @ prec
        d_rot = 2.0 * np.einsum("nij,njk,nk->nik", d_cov, rot, s2)
        d_s2 = np.einsum("nji,njk,nki->ni", rot, d_cov, rot)
        d_log_scale = 2.0 * s2 * d_s2
        return d_log_scale, self.quat_backward(d_rot)

    def quat_backward(self, d_rot: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(self.rotation, axis=1, keepdims=True)
        q = self.rotation / norm
        dq_hat = rot_grad_to_quat(q, d_rot)
        return (dq_hat - q * np.sum(q * dq_hat, axis=1, keepdims=True)) / norm

    def cutoff_radius(self) -> np.ndarray:
        """Axis-aligned half-extent of the 3-sigma ellipsoid, (N, 3)."""
        cov = self.covariances()
        return CUTOFF_SIGMA * np.sqrt(np.einsum("nii->ni", cov))


# -- initialization -----------------------------------------------------------

def init_from_volume(vol: VoxelVolume, n_init: int = 50_000, density_thresh: float = 0.05,
                     scale_term: float = 0.15, residual_mode: bool = True, gamma: float = 0.09,
                     seed: int = 0, extent=(1.0, 1.0, 1.0), activation: str = "leaky",
                     max_count: int = 500_000, isotropic: bool = False) -> GaussianField:
    """Seed Gaussians at voxel centers sampled from voxels at or above ``density_thresh``."""
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    data = vol.data.astype(np.float64)
    candidates = np.flatnonzero(data.ravel() >= density_thresh)
    if candidates.size == 0:
        raise ValueError(f"no voxels at or above density threshold {density_thresh}")
    rng = np.random.default_rng(seed)
    replace = n_init > candidates.size
    if replace:
        log.warning("n_init=%d exceeds %d candidate voxels; sampling with replacement", n_init, candidates.size)
    picked = np.sort(rng.choice(candidates, size=n_init, replace=replace))
    idx = np.stack(np.unravel_index(picked, vol.dims), axis=-1)
    ext = np.asarray(extent, dtype=np.float64)
    step = 2.0 * ext / np.asarray(vol.dims)
    position = -ext + (idx + 0.5) * step
    if replace:
        position = position + (rng.random(position.shape) - 0.5) * step
    k = min(4, n_init)
    if k > 1:
        dist, _ = cKDTree(position).query(position, k=k)
        nn = dist[:, 1:].mean(axis=1)
    else:
        nn = np.full(n_init, step.min())
    scale = np.maximum(scale_term * nn, max(MIN_SCALE, scale_term * step.min()))
    log_scale = np.repeat(np.log(scale)[:, None], 3, axis=1)
    rotation = np.tile([1.0, 0.0, 0.0, 0.0], (n_init, 1))
    if residual_mode:
        raw = np.full(n_init, RESIDUAL_EPS)
    else:
        values = data.ravel()[picked]
        raw = inverse_softplus(values) if activation == "softplus" else inverse_activate(values, gamma)
    return GaussianField(position, log_scale, rotation, raw, gamma=gamma, max_count=max_count,
                         activation=activation, isotropic=isotropic)


# -- point queries ------------------------------------------------------------

def query_density(field: GaussianField, points, cutoff: float | None = CUTOFF_SIGMA) -> np.ndarray | float:
    """Density at world ``points`` (3,) or (M, 3); contributions beyond ``cutoff`` sigma are dropped."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = np.zeros(len(pts))
    if len(field):
        prec = field.precisions()
        rho = field.density()
        for m, x in enumerate(pts):
            d = x - field.position
            maha = np.einsum("ni,nij,nj->n", d, prec, d)
            keep = maha <= cutoff * cutoff if cutoff is not None else np.ones(len(d), bool)
            out[m] = np.sum(rho[keep] * np.exp(-0.5 * maha[keep]))
    return float(out[0]) if single else out


# -- voxelization -------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Regular reconstruction grid over ``[-extent, extent]``."""
    dims: tuple[int, int, int]
    extent: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def spacing(self) -> np.ndarray:
        return 2.0 * np.asarray(self.extent) / np.asarray(self.dims)

    def crop_origin_world(self, origin) -> np.ndarray:
        """World position of the center of voxel ``origin``."""
        return -np.asarray(self.extent) + (np.asarray(origin) + 0.5) * self.spacing


@numba.njit(cache=True)
def _splat_volume(pos, prec, rho, radius, x0, h, out, cutoff2):
    nx, ny, nz = out.shape
    for n in range(pos.shape[0]):
        lo = np.empty(3, np.int64)
        hi = np.empty(3, np.int64)
        dims = (nx, ny, nz)
        empty = False
        for a in range(3):
            lo[a] = math.ceil(max(-1.0, (pos[n, a] - radius[n, a] - x0[a]) / h[a]))
            lo[a] = max(lo[a], 0)
            hi[a] = math.floor(min(dims[a] * 1.0, (pos[n, a] + radius[n, a] - x0[a]) / h[a]))
            hi[a] = min(hi[a], dims[a] - 1)
            if hi[a] < lo[a]:
                empty = True
        if empty:
            continue
        m = prec[n]
        for i in range(lo[0], hi[0] + 1):
            dx = x0[0] + i * h[0] - pos[n, 0]
            for j in range(lo[1], hi[1] + 1):
                dy = x0[1] + j * h[1] - pos[n, 1]
                for k in range(lo[2], hi[2] + 1):
                    dz = x0[2] + k * h[2] - pos[n, 2]
                    q = (m[0, 0] * dx * dx + m[1, 1] * dy * dy + m[2, 2] * dz * dz
                         + 2.0 * (m[0, 1] * dx * dy + m[0, 2] * dx * dz + m[1, 2] * dy * dz))
                    if q <= cutoff2:
                        out[i, j, k] += rho[n] * math.exp(-0.5 * q)


@numba.njit(cache=True)
def _splat_volume_backward(pos, prec, rho, radius, x0, h, grad_out, cutoff2, d_rho, d_pos, d_prec):
    nx, ny, nz = grad_out.shape
    dims = (nx, ny, nz)
    for n in range(pos.shape[0]):
        lo = np.empty(3, np.int64)
        hi = np.empty(3, np.int64)
        empty = False
        for a in range(3):
            lo[a] = math.ceil(max(-1.0, (pos[n, a] - radius[n, a] - x0[a]) / h[a]))
            lo[a] = max(lo[a], 0)
            hi[a] = math.floor(min(dims[a] * 1.0, (pos[n, a] + radius[n, a] - x0[a]) / h[a]))
            hi[a] = min(hi[a], dims[a] - 1)
            if hi[a] < lo[a]:
                empty = True
        if empty:
            continue
        m = prec[n]
        for i in range(lo[0], hi[0] + 1):
            dx = x0[0] + i * h[0] - pos[n, 0]
            for j in range(lo[1], hi[1] + 1):
                dy = x0[1] + j * h[1] - pos[n, 1]
                for k in range(lo[2], hi[2] + 1):
                    g_out = grad_out[i, j, k]
                    if g_out == 0.0:
                        continue
                    dz = x0[2] + k * h[2] - pos[n, 2]
                    q = (m[0, 0] * dx * dx + m[1, 1] * dy * dy + m[2, 2] * dz * dz
                         + 2.0 * (m[0, 1] * dx * dy + m[0, 2] * dx * dz + m[1, 2] * dy * dz))
                    if q > cutoff2:
                        continue
                    g = math.exp(-0.5 * q)
                    d_rho[n] += g_out * g
                    c = g_out * rho[n] * g
                    md0 = m[0, 0] * dx + m[0, 1] * dy + m[0, 2] * dz
                    md1 = m[1, 0] * dx + m[1, 1] * dy + m[1, 2] * dz
                    md2 = m[2, 0] * dx + m[2, 1] * dy + m[2, 2] * dz
                    d_pos[n, 0] += c * md0
                    d_pos[n, 1] += c * md1
                    d_pos[n, 2] += c * md2
                    hc = -0.5 * c
                    d_prec[n, 0, 0] += hc * dx * dx
                    d_prec[n, 1, 1] += hc * dy * dy
                    d_prec[n, 2, 2] += hc * dz * dz
                    d_prec[n, 0, 1] += hc * dx * dy
                    d_prec[n, 0, 2] += hc * dx * dz
                    d_prec[n, 1, 2] += hc * dy * dz
    for n in range(pos.shape[0]):
        d_prec[n, 1, 0] = d_prec[n, 0, 1]
        d_prec[n, 2, 0] = d_prec[n, 0, 2]
        d_prec[n, 2, 1] = d_prec[n, 1, 2]


def _crop_args(field: GaussianField, grid: Grid, origin, dims, cutoff):
    origin = np.asarray(origin, dtype=np.int64)
    dims = np.asarray(dims, dtype=np.int64)
    if np.any(origin < 0) or np.any(origin + dims > np.asarray(grid.dims)) or np.any(dims < 1):
        raise ValueError(f"crop origin={origin.tolist()} dims={dims.tolist()} outside grid {grid.dims}")
    x0 = grid.crop_origin_world(origin)
    cut = np.inf if cutoff is None else float(cutoff)
    prec = field.precisions()
    cov = field.covariances()
    radius = cut * np.sqrt(np.einsum("nii->ni", cov)) if cutoff is not None else np.full((len(field), 3), 1e30)
    return x0, grid.spacing.astype(np.float64), prec, radius, cut * cut, tuple(int(d) for d in dims)


def voxelize_array(field: GaussianField, grid: Grid, origin=(0, 0, 0), dims=None,
                   cutoff: float | None = CUTOFF_SIGMA) -> np.ndarray:
    """Float64 field values at voxel centers of a crop of ``grid``."""
    dims = grid.dims if dims is None else dims
    x0, h, prec, radius, cut2, dims = _crop_args(field, grid, origin, dims, cutoff)
    out = np.zeros(dims)
    if len(field):
        _splat_volume(field.position, prec, field.density(), radius, x0, h, out, cut2)
    return out


def voxelize(field: GaussianField, grid: Grid, origin=(0, 0, 0), dims=None,
             cutoff: float | None = CUTOFF_SIGMA) -> VoxelVolume:
    out = voxelize_array(field, grid, origin, dims, cutoff)
    return VoxelVolume(out, tuple(grid.spacing))


def voxelize_backward(field: GaussianField, grid: Grid, grad_out: np.ndarray, origin=(0, 0, 0),
                      cutoff: float | None = CUTOFF_SIGMA) -> FieldGrads:
    """Gradients of ``sum(grad_out * voxelize(...))`` with respect to every Gaussian parameter."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    x0, h, prec, radius, cut2, _ = _crop_args(field, grid, origin, grad_out.shape, cutoff)
    n = len(field)
    grads = FieldGrads.zeros(n)
    if n == 0:
        return grads
    d_rho = np.zeros(n)
    d_prec = np.zeros((n, 3, 3))
    _splat_volume_backward(field.position, prec, field.density(), radius, x0, h, grad_out, cut2,
                           d_rho, grads.position, d_prec)
    grads.raw_density = d_rho * field.density_slope()
    grads.log_scale, grads.rotation = field.covariance_backward(np.zeros((n, 3, 3)), d_prec)
    return grads


# -- checkpoint I/O -----------------------------------------------------------

RECORD = 3 + 3 + 4 + 1


def write_checkpoint(field: GaussianField, path) -> Path:
    path = Path(path).with_suffix(".f32raw")
    path.parent.mkdir(parents=True, exist_ok=True)
    rec = np.concatenate([field.position, field.log_scale, field.rotation, field.raw_density[:, None]], axis=1)
    path.write_bytes(rec.astype("<f4").tobytes())
    header = {"count": len(field), "gamma": field.gamma, "max_count": field.max_count,
              "activation": field.activation, "isotropic": field.isotropic,
              "record": ["px", "py", "pz", "log_sx", "log_sy", "log_sz", "qw", "qx", "qy", "qz", "raw_density"]}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    return path


def read_checkpoint(path) -> GaussianField:
    path = Path(path).with_suffix(".f32raw")
    header = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    n = int(header["count"])
    if raw.size != n * RECORD:
        raise ValueError(f"checkpoint holds {raw.size} floats, header count {n} needs {n * RECORD}")
    rec = raw.reshape(n, RECORD).astype(np.float64)
    f = GaussianField.empty(gamma=header["gamma"], max_count=header["max_count"],
                            activation=header["activation"], isotropic=header["isotropic"])
    # assign directly so stored quaternions are not renormalized (keeps the round trip bit-exact)
    f.position, f.log_scale, f.rotation, f.raw_density = rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10]
    return f
