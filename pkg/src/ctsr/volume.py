"""Voxel volumes: phantoms, degradation, resampling, quality metrics and raw I/O.

Volumes are indexed ``data[x, y, z]`` and cover the normalized cube
``[-1, 1]^3``; voxel ``i`` along an axis of length ``n`` has its center at
``-1 + (i + 0.5) * 2 / n``. On disk the payload is written x-fastest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

AXIS_ORDER = "xyz-x-fastest"
PSNR_CAP = 100.0


@dataclass
class VoxelVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(d < 1 for d in self.data.shape):
            raise ValueError(f"non-positive dims {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        self.intensity_range = tuple(float(v) for v in self.intensity_range)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def like(self, data: np.ndarray, spacing=None) -> "VoxelVolume":
        return VoxelVolume(data, self.spacing if spacing is None else spacing, self.intensity_range)


@dataclass
class EllipsoidSpec:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    density_delta: float = 1.0

    def __post_init__(self):
        if any(a <= 0 for a in self.semi_axes):
            raise ValueError(f"semi_axes must be positive, got {self.semi_axes}")


def euler_zxz(phi: float, theta: float, psi: float) -> np.ndarray:
    """Rotation matrix Rz(phi) @ Rx(theta) @ Rz(psi); columns are the ellipsoid axes."""
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(psi), math.sin(psi)
    return np.array([
        [cf * cp - sf * ct * sp, -cf * sp - sf * ct * cp, sf * st],
        [sf * cp + cf * ct * sp, -sf * sp + cf * ct * cp, -cf * st],
        [st * sp, st * cp, ct],
    ])


# Modified Shepp-Logan (Toft) contrast table: delta, semi-axes, center, Euler angles in degrees.
_SHEPP_LOGAN_3D = [
    (1.0, (0.6900, 0.920, 0.810), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
    (-0.8, (0.6624, 0.874, 0.780), (0.0, -0.0184, 0.0), (0.0, 0.0, 0.0)),
    (-0.2, (0.1100, 0.310, 0.220), (0.22, 0.0, 0.0), (-18.0, 0.0, 10.0)),
    (-0.2, (0.1600, 0.410, 0.280), (-0.22, 0.0, 0.0), (18.0, 0.0, 10.0)),
    (0.1, (0.2100, 0.250, 0.410), (0.0, 0.35, -0.15), (0.0, 0.0, 0.0)),
    (0.1, (0.0460, 0.046, 0.050), (0.0, 0.1, 0.25), (0.0, 0.0, 0.0)),
    (0.1, (0.0460, 0.046, 0.050), (0.0, -0.1, 0.25), (0.0, 0.0, 0.0)),
    (0.1, (0.0460, 0.023, 0.050), (-0.08, -0.605, 0.0), (0.0, 0.0, 0.0)),
    (0.1, (0.0230, 0.023, 0.020), (0.0, -0.606, 0.0), (0.0, 0.0, 0.0)),
    (0.1, (0.0230, 0.046, 0.020), (0.06, -0.605, 0.0), (0.0, 0.0, 0.0)),
]


def shepp_logan_specs(contrast: float = 1.0) -> list[EllipsoidSpec]:
    """3D Shepp-Logan ellipsoids; ``contrast`` scales every inner (non-skull) delta."""
    specs = []
    for i, (delta, axes, center, angles) in enumerate(_SHEPP_LOGAN_3D):
        if i >= 2:
            delta *= contrast
        specs.append(EllipsoidSpec(center, axes, tuple(math.radians(a) for a in angles), delta))
    return specs


def voxel_centers(n: int) -> np.ndarray:
    return -1.0 + (np.arange(n) + 0.5) * (2.0 / n)


def make_phantom(specs: Sequence[EllipsoidSpec], dims, spacing=(1.0, 1.0, 1.0)) -> VoxelVolume:
    if not specs:
        raise ValueError("phantom needs at least one ellipsoid")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 8 for d in dims):
        raise ValueError(f"phantom dims must be >= 8 per axis, got {dims}")
    gx, gy, gz = np.meshgrid(*(voxel_centers(n) for n in dims), indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)
    out = np.zeros(dims, dtype=np.float64)
    for spec in specs:
        rot = euler_zxz(*spec.rotation)
        local = (pts - np.asarray(spec.center)) @ rot
        r2 = np.sum((local / np.asarray(spec.semi_axes)) ** 2, axis=-1)
        out[r2 <= 1.0] += spec.density_delta
    return VoxelVolume(np.clip(out, 0.0, 1.0), spacing)


def clip_normalize(vol: VoxelVolume, lo: float, hi: float) -> VoxelVolume:
    if not lo < hi:
        raise ValueError(f"clip window requires lo < hi, got ({lo}, {hi})")
    data = (np.clip(vol.data.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return VoxelVolume(data, vol.spacing, (lo, hi))


# -- resampling ---------------------------------------------------------------

def lanczos(x: np.ndarray, a: int = 3) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.sinc(x) * np.sinc(x / a)
    out[np.abs(x) >= a] = 0.0
    return out


def lanczos_decimation_matrix(n: int, factor: int, a: int = 3) -> np.ndarray:
    """(n // factor, n) matrix averaging with a Lanczos kernel stretched by ``factor``.

    Taps outside the grid are folded onto the edge sample, so every row sums to one.
    """
    m = n // factor
    mat = np.zeros((m, n))
    half = a * factor
    for j in range(m):
        c = (j + 0.5) * factor - 0.5
        taps = np.arange(math.floor(c - half) + 1, math.ceil(c + half))
        w = lanczos((taps - c) / factor, a)
        np.add.at(mat[j], np.clip(taps, 0, n - 1), w)
        mat[j] /= mat[j].sum()
    return mat


def _apply_axis(data: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, data, axes=([1], [axis])), 0, axis)


def degrade(vol: VoxelVolume, factor: int, smooth_sigma: float | None = None) -> VoxelVolume:
    """Gaussian blur then Lanczos-3 decimation by ``factor`` along every axis."""
    if factor < 2 or factor not in (2, 4, 8):
        raise ValueError(f"degradation factor must be 2, 4 or 8, got {factor}")
    if any(d % factor for d in vol.dims):
        raise ValueError(f"dims {vol.dims} not divisible by factor {factor}")
    sigma = factor / 2.0 if smooth_sigma is None else float(smooth_sigma)
    data = vol.data.astype(np.float64)
    if sigma > 0:
        data = ndimage.gaussian_filter(data, sigma, mode="nearest", truncate=4.0)
    for axis, n in enumerate(vol.dims):
        data = _apply_axis(data, lanczos_decimation_matrix(n, factor), axis)
    spacing = tuple(s * factor for s in vol.spacing)
    return VoxelVolume(np.clip(data, 0.0, 1.0), spacing, vol.intensity_range)


def catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    """Weights for samples at offsets -1, 0, 1, 2 given fractional position t in [0, 1)."""
    t2, t3 = t * t, t * t * t
    return 0.5 * np.stack([
        -t3 + 2 * t2 - t,
        3 * t3 - 5 * t2 + 2,
        -3 * t3 + 4 * t2 + t,
        t3 - t2,
    ], axis=-1)


def upsample_matrix(n: int, factor: int, kind: str = "cubic") -> np.ndarray:
    """(n * factor, n) interpolation matrix sampling at upsampled voxel centers.

    Sample coordinates are clamped to ``[0, n - 1]``. Cubic taps that fall outside
    the grid read linearly extrapolated ghost samples, so linear ramps are
    reproduced exactly up to the border.
    """
    m = n * factor
    c = np.clip((np.arange(m) + 0.5) / factor - 0.5, 0.0, n - 1)
    base = np.minimum(np.floor(c).astype(int), max(n - 2, 0))
    t = c - base
    mat = np.zeros((m, n))
    rows = np.arange(m)
    if n == 1:
        mat[:, 0] = 1.0
        return mat
    if kind == "cubic":
        w = catmull_rom_weights(t)
        for k, off in enumerate((-1, 0, 1, 2)):
            idx = base + off
            lo, hi = idx < 0, idx > n - 1
            inside = ~(lo | hi)
            np.add.at(mat, (rows[inside], idx[inside]), w[inside, k])
            # ghost s[-1] = 2 s[0] - s[1] and s[n] = 2 s[n-1] - s[n-2]
            np.add.at(mat, (rows[lo], 0), 2.0 * w[lo, k])
            np.add.at(mat, (rows[lo], 1), -w[lo, k])
            np.add.at(mat, (rows[hi], n - 1), 2.0 * w[hi, k])
            np.add.at(mat, (rows[hi], n - 2), -w[hi, k])
    elif kind == "linear":
        np.add.at(mat, (rows, base), 1.0 - t)
        np.add.at(mat, (rows, base + 1), t)
    else:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    return mat


def _resample(vol: VoxelVolume, factor: int, kind: str) -> VoxelVolume:
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return vol.like(vol.data.copy())
    data = vol.data.astype(np.float64)
    for axis, n in enumerate(vol.dims):
        data = _apply_axis(data, upsample_matrix(n, factor, kind), axis)
    spacing = tuple(s / factor for s in vol.spacing)
    return VoxelVolume(data, spacing, vol.intensity_range)


def resample_cubic(vol: VoxelVolume, factor: int) -> VoxelVolume:
    """Separable Catmull-Rom upsampling."""
    return _resample(vol, factor, "cubic")


def resample_trilinear(vol: VoxelVolume, factor: int) -> VoxelVolume:
    return _resample(vol, factor, "linear")


# -- metrics ------------------------------------------------------------------

def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    # np.mean uses pairwise summation, so repeated runs agree bit for bit
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    if size % 2 == 0:
        raise ValueError(f"window size must be odd, got {size}")
    k = np.arange(size) - size // 2
    w = np.exp(-(k ** 2) / (2.0 * sigma * sigma))
    return w / w.sum()


def valid_filter(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation with ``w`` along every axis, keeping only full-overlap outputs."""
    r = len(w) // 2
    out = x
    for axis in range(x.ndim):
        out = ndimage.correlate1d(out, w, axis=axis, mode="constant")
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(r, out.shape[axis] - r)
        out = out[tuple(sl)]
    return out


def valid_filter_adjoint(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`valid_filter`: scatters output-space values back to input space."""
    r = len(w) // 2
    out = g
    for axis in range(g.ndim):
        pad = [(0, 0)] * g.ndim
        pad[axis] = (2 * r, 2 * r)
        padded = np.pad(out, pad)
        full = ndimage.correlate1d(padded, w[::-1], axis=axis, mode="constant")
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(r, full.shape[axis] - r)
        out = full[tuple(sl)]
    return out


@dataclass
class _SSIMParts:
    value: float
    smap: np.ndarray
    mu_a: np.ndarray
    mu_b: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    w: np.ndarray = field(repr=False)


def _ssim_parts(a: np.ndarray, b: np.ndarray, window: int, peak: float) -> _SSIMParts:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if any(n < window for n in a.shape):
        raise ValueError(f"inputs {a.shape} smaller than SSIM window {window}")
    w = gaussian_window(window)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = valid_filter(a, w), valid_filter(b, w)
    var_a = valid_filter(a * a, w) - mu_a ** 2
    var_b = valid_filter(b * b, w) - mu_b ** 2
    cov = valid_filter(a * b, w) - mu_a * mu_b
    a1, a2 = 2 * mu_a * mu_b + c1, 2 * cov + c2
    b1, b2 = mu_a ** 2 + mu_b ** 2 + c1, var_a + var_b + c2
    smap = (a1 * a2) / (b1 * b2)
    return _SSIMParts(float(np.mean(smap)), smap, mu_a, mu_b, a1, a2, b1, b2, w)


def ssim(a, b, window: int = 11, peak: float = 1.0) -> float:
    """Mean SSIM over all fully-covered window positions (2D or 3D Gaussian window)."""
    return _ssim_parts(_as_array(a), _as_array(b), window, peak).value


def ssim_with_grad(a, b, window: int = 11, peak: float = 1.0) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``b``."""
    a, b = _as_array(a), _as_array(b)
    p = _ssim_parts(a, b, window, peak)
    s = p.smap / p.smap.size
    # partial derivatives of the map w.r.t. local mean of b, E[b^2] and E[ab]
    d_mu = s * (2 * p.mu_a / p.a1 - 2 * p.mu_a / p.a2 - 2 * p.mu_b / p.b1 + 2 * p.mu_b / p.b2)
    d_bb = -s / p.b2
    d_ab = 2 * s / p.a2
    grad = (valid_filter_adjoint(d_mu, p.w) + 2 * b * valid_filter_adjoint(d_bb, p.w)
            + a * valid_filter_adjoint(d_ab, p.w))
    return p.value, grad


# -- I/O ----------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _payload(path: Path) -> Path:
    return path.with_suffix(".f32raw")


def write_volume(vol: VoxelVolume, path) -> Path:
    path = _payload(Path(path))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(vol.data.astype("<f4").ravel(order="F").tobytes())
    meta = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "intensity_range": list(vol.intensity_range),
        "axis_order": AXIS_ORDER,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def read_volume(path) -> VoxelVolume:
    path = _payload(Path(path))
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"missing volume sidecar {side}")
    meta = json.loads(side.read_text())
    if meta.get("axis_order", AXIS_ORDER) != AXIS_ORDER:
        raise ValueError(f"unsupported axis order {meta['axis_order']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != dims[0] * dims[1] * dims[2]:
        raise ValueError(f"payload holds {raw.size} floats, header dims {dims} need {math.prod(dims)}")
    data = raw.reshape(dims, order="F")
    return VoxelVolume(data, tuple(meta["spacing"]), tuple(meta["intensity_range"]))
