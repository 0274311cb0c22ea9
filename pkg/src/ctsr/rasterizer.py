"""Differentiable X-ray splatting of a Gaussian field with signed alpha blending.

Each Gaussian becomes a 2D splat on the detector. Its peak opacity is the
analytic line integral of the 3D kernel along the central ray,
``rho * mu`` with ``mu = sqrt(2 pi / (r^T Sigma^-1 r))``. Splats are composited
front to back with ``C = sum T_i alpha_i``, ``T_i = prod_{j<i} (1 - alpha_j)``.
Positive alphas are clamped at ``ALPHA_MAX``; negative alphas are left alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .field import CUTOFF_SIGMA, FieldGrads, Gaussian3D, GaussianField, quat_to_rot, rot_grad_to_quat
from .geometry import ScannerGeometry
from .projector import Projection

LOWPASS = 0.3
TILE = 16
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
NEAR = 1e-3
SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass
class Splat2D:
    center: np.ndarray
    cov2d: np.ndarray
    mu: float
    depth: float
    density: float


@dataclass
class Splats:
    """Per-view projected splats (visible subset) plus intermediates kept for the backward pass."""
    index: np.ndarray
    center: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    mu: np.ndarray
    depth: np.ndarray
    rho: np.ndarray
    cam: np.ndarray
    jac: np.ndarray
    cov_cam: np.ndarray
    ray: np.ndarray
    dist: np.ndarray
    local_ray: np.ndarray
    quad: np.ndarray
    world_to_cam: np.ndarray

    def __len__(self):
        return len(self.index)


def project_gaussians(field: GaussianField, geom: ScannerGeometry, angle_index: int,
                      density: np.ndarray | None = None) -> Splats:
    src, rot_w = geom.frame(angle_index)
    fu, fv = geom.focal
    cu, cv = geom.principal_point
    rho_all = field.density() if density is None else np.asarray(density, dtype=np.float64)

    v_all = field.position - src
    cam_all = v_all @ rot_w.T
    keep = np.flatnonzero(cam_all[:, 2] > NEAR * geom.dso)
    v, cam = v_all[keep], cam_all[keep]
    a, b, z = cam[:, 0], cam[:, 1], cam[:, 2]
    center = np.stack([fu * a / z + cu, fv * b / z + cv], axis=-1)
    jac = np.zeros((len(keep), 2, 3))
    jac[:, 0, 0] = fu / z
    jac[:, 0, 2] = -fu * a / z ** 2
    jac[:, 1, 1] = fv / z
    jac[:, 1, 2] = -fv * b / z ** 2

    q = field.rotation[keep]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    rot = quat_to_rot(q)
    s2 = np.exp(2.0 * field.log_scale[keep])
    cov = np.einsum("nij,nj,nkj->nik", rot, s2, rot)
    cov_cam = np.einsum("ij,njk,lk->nil", rot_w, cov, rot_w)
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=-1)

    dist = np.linalg.norm(v, axis=1)
    ray = v / dist[:, None]
    local_ray = np.einsum("nji,nj->ni", rot, ray)
    quad = np.sum(local_ray ** 2 / s2, axis=1)
    mu = np.sqrt(2.0 * math.pi / quad)
    return Splats(keep, center, cov2d, conic, mu, dist, rho_all[keep], cam, jac, cov_cam,
                  ray, dist, local_ray, quad, rot_w)


def project_gaussian(g: Gaussian3D, geom: ScannerGeometry, angle_index: int, gamma: float = 0.09,
                     activation: str = "leaky") -> Splat2D | None:
    """Project one Gaussian; returns None when it lies behind the source (culled)."""
    f = GaussianField([g.position], [g.log_scale], [g.rotation], [g.raw_density],
                      gamma=gamma, activation=activation)
    s = project_gaussians(f, geom, angle_index)
    if len(s) == 0:
        return None
    return Splat2D(s.center[0], s.cov2d[0], float(s.mu[0]), float(s.depth[0]), float(s.rho[0]))


# -- compositing kernels ------------------------------------------------------

@numba.njit(cache=True)
def _blend(color, trans, alpha, over):
    if over:
        return color + trans * alpha, trans * (1.0 - alpha)
    return color + alpha, trans


@numba.njit(cache=True)
def _composite(alphas, over):
    color = 0.0
    trans = 1.0
    for a in alphas:
        color, trans = _blend(color, trans, a, over)
    return color


def composite(alphas, mode: str = "over") -> float:
    """Blend an already depth-sorted sequence of per-pixel alphas."""
    return float(_composite(np.asarray(alphas, dtype=np.float64), mode == "over"))


@numba.njit(cache=True)
def _bin_tiles(center, radius, nu, nv, tile):
    ntx = (nu + tile - 1) // tile
    nty = (nv + tile - 1) // tile
    n = center.shape[0]
    lo = np.empty((n, 2), np.int64)
    hi = np.empty((n, 2), np.int64)
    counts = np.zeros(ntx * nty, np.int64)
    for i in range(n):
        u0 = max(0, math.ceil(max(-1.0, center[i, 0] - radius[i, 0])))
        u1 = min(nu - 1, math.floor(min(nu * 1.0, center[i, 0] + radius[i, 0])))
        v0 = max(0, math.ceil(max(-1.0, center[i, 1] - radius[i, 1])))
        v1 = min(nv - 1, math.floor(min(nv * 1.0, center[i, 1] + radius[i, 1])))
        if u1 < u0 or v1 < v0:
            lo[i, 0] = 1
            hi[i, 0] = 0
            continue
        lo[i, 0] = u0 // tile
        hi[i, 0] = u1 // tile
        lo[i, 1] = v0 // tile
        hi[i, 1] = v1 // tile
        for ty in range(lo[i, 1], hi[i, 1] + 1):
            for tx in range(lo[i, 0], hi[i, 0] + 1):
                counts[ty * ntx + tx] += 1
    ptr = np.zeros(ntx * nty + 1, np.int64)
    for t in range(ntx * nty):
        ptr[t + 1] = ptr[t] + counts[t]
    ids = np.empty(ptr[-1], np.int64)
    fill = ptr[:-1].copy()
    # splats arrive depth-sorted, so every tile list is front to back
    for i in range(n):
        if hi[i, 0] < lo[i, 0]:
            continue
        for ty in range(lo[i, 1], hi[i, 1] + 1):
            for tx in range(lo[i, 0], hi[i, 0] + 1):
                t = ty * ntx + tx
                ids[fill[t]] = i
                fill[t] += 1
    return ptr, ids


@numba.njit(cache=True)
def _pixel_alpha(center, conic, amp, i, px, py, cutoff2, alpha_min):
    dx = px - center[i, 0]
    dy = py - center[i, 1]
    maha = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
    if maha > cutoff2:
        return 0.0, 0.0, dx, dy, False
    g = math.exp(-0.5 * maha)
    alpha = amp[i] * g
    if abs(alpha) < alpha_min:
        return 0.0, 0.0, dx, dy, False
    return alpha, g, dx, dy, True


@numba.njit(cache=True)
def _render_tiles(center, conic, amp, ptr, ids, nu, nv, tile, over, alpha_min, alpha_max, cutoff2, out):
    ntx = (nu + tile - 1) // tile
    nty = (nv + tile - 1) // tile
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            for py in range(ty * tile, min(nv, (ty + 1) * tile)):
                for px in range(tx * tile, min(nu, (tx + 1) * tile)):
                    color = 0.0
                    trans = 1.0
                    for s in range(ptr[t], ptr[t + 1]):
                        i = ids[s]
                        alpha, g, dx, dy, hit = _pixel_alpha(center, conic, amp, i, px, py, cutoff2, alpha_min)
                        if not hit:
                            continue
                        if not math.isfinite(alpha):
                            raise FloatingPointError("non-finite alpha in render")
                        if alpha > alpha_max:
                            alpha = alpha_max
                        color, trans = _blend(color, trans, alpha, over)
                    out[py, px] = color


@numba.njit(cache=True)
def _render_tiles_backward(center, conic, amp, ptr, ids, nu, nv, tile, over, alpha_min, alpha_max,
                           cutoff2, grad_img, d_amp, d_center, d_conic):
    ntx = (nu + tile - 1) // tile
    nty = (nv + tile - 1) // tile
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            m = ptr[t + 1] - ptr[t]
            if m == 0:
                continue
            buf_i = np.empty(m, np.int64)
            buf_a = np.empty(m)
            buf_g = np.empty(m)
            buf_t = np.empty(m)
            buf_dx = np.empty(m)
            buf_dy = np.empty(m)
            buf_c = np.empty(m, np.bool_)
            for py in range(ty * tile, min(nv, (ty + 1) * tile)):
                for px in range(tx * tile, min(nu, (tx + 1) * tile)):
                    dl = grad_img[py, px]
                    if dl == 0.0:
                        continue
                    k = 0
                    trans = 1.0
                    for s in range(ptr[t], ptr[t + 1]):
                        i = ids[s]
                        alpha, g, dx, dy, hit = _pixel_alpha(center, conic, amp, i, px, py, cutoff2, alpha_min)
                        if not hit:
                            continue
                        clamped = alpha > alpha_max
                        if clamped:
                            alpha = alpha_max
                        buf_i[k] = i
                        buf_a[k] = alpha
                        buf_g[k] = g
                        buf_t[k] = trans
                        buf_dx[k] = dx
                        buf_dy[k] = dy
                        buf_c[k] = clamped
                        if over:
                            trans *= 1.0 - alpha
                        k += 1
                    after = 0.0
                    for j in range(k - 1, -1, -1):
                        alpha = buf_a[j]
                        if over:
                            dl_da = dl * buf_t[j] * (1.0 - after)
                            after = alpha + (1.0 - alpha) * after
                        else:
                            dl_da = dl
                        if buf_c[j]:
                            continue
                        i = buf_i[j]
                        dx = buf_dx[j]
                        dy = buf_dy[j]
                        d_amp[i] += dl_da * buf_g[j]
                        w = dl_da * alpha
                        d_center[i, 0] += w * (conic[i, 0] * dx + conic[i, 1] * dy)
                        d_center[i, 1] += w * (conic[i, 1] * dx + conic[i, 2] * dy)
                        d_conic[i, 0, 0] += -0.5 * w * dx * dx
                        d_conic[i, 0, 1] += -0.5 * w * dx * dy
                        d_conic[i, 1, 1] += -0.5 * w * dy * dy
    for i in range(d_conic.shape[0]):
        d_conic[i, 1, 0] = d_conic[i, 0, 1]


# -- public render API --------------------------------------------------------

@dataclass
class RenderSettings:
    mode: str = "over"
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX
    cutoff: float | None = CUTOFF_SIGMA
    tile: int = TILE

    def __post_init__(self):
        if self.mode not in ("over", "additive"):
            raise ValueError(f"unknown compositing mode {self.mode!r}")


def _prepare(field, geom, angle_index, settings, density):
    splats = project_gaussians(field, geom, angle_index, density)
    order = np.lexsort((splats.index, splats.depth))
    cut = np.inf if settings.cutoff is None else settings.cutoff
    if np.isfinite(cut):
        radius = cut * np.sqrt(np.stack([splats.cov2d[:, 0, 0], splats.cov2d[:, 1, 1]], axis=-1))
    else:
        radius = np.full((len(splats), 2), 1e12)
    nu, nv = geom.detector_dims
    ptr, ids = _bin_tiles(splats.center[order], radius[order], nu, nv, settings.tile)
    amp = (splats.rho * splats.mu)[order]
    return splats, order, ptr, ids, amp, cut * cut


def render(field: GaussianField, geom: ScannerGeometry, angle_index: int,
           settings: RenderSettings | None = None, density: np.ndarray | None = None) -> Projection:
    """Composite the field onto the detector at ``angle_index``.

    ``density`` overrides the activated densities (used to compare activation modes).
    """
    settings = settings or RenderSettings()
    nu, nv = geom.detector_dims
    out = np.zeros((nv, nu))
    if len(field):
        splats, order, ptr, ids, amp, cut2 = _prepare(field, geom, angle_index, settings, density)
        _render_tiles(splats.center[order], splats.conic[order], amp, ptr, ids, nu, nv, settings.tile,
                      settings.mode == "over", settings.alpha_min, settings.alpha_max, cut2, out)
    return Projection(out, angle_index)


@dataclass
class RenderGrads:
    grads: FieldGrads
    screen_grad_norm: np.ndarray
    visible: np.ndarray


def render_backward(field: GaussianField, geom: ScannerGeometry, angle_index: int, grad_image,
                    settings: RenderSettings | None = None) -> RenderGrads:
    """Gradients of ``sum(grad_image * render(...))`` with respect to every Gaussian parameter.

    Also returns the per-Gaussian norm of the gradient with respect to the splat center in
    normalized device coordinates, and a mask of Gaussians that touched the detector.
    """
    settings = settings or RenderSettings()
    grad_image = np.asarray(getattr(grad_image, "data", grad_image), dtype=np.float64)
    nu, nv = geom.detector_dims
    if grad_image.shape != (nv, nu):
        raise ValueError(f"gradient image {grad_image.shape} does not match detector {(nv, nu)}")
    n = len(field)
    grads = FieldGrads.zeros(n)
    screen = np.zeros(n)
    visible = np.zeros(n, bool)
    if n == 0:
        return RenderGrads(grads, screen, visible)
    splats, order, ptr, ids, amp, cut2 = _prepare(field, geom, angle_index, settings, None)
    k = len(splats)
    d_amp_s = np.zeros(k)
    d_center_s = np.zeros((k, 2))
    d_conic_s = np.zeros((k, 2, 2))
    _render_tiles_backward(splats.center[order], splats.conic[order], amp, ptr, ids, nu, nv, settings.tile,
                           settings.mode == "over", settings.alpha_min, settings.alpha_max, cut2,
                           grad_image, d_amp_s, d_center_s, d_conic_s)
    # undo the depth sort
    d_amp = np.empty(k)
    d_center = np.empty((k, 2))
    d_conic = np.empty((k, 2, 2))
    d_amp[order], d_center[order], d_conic[order] = d_amp_s, d_center_s, d_conic_s
    in_tiles = np.zeros(k, bool)
    in_tiles[order[np.unique(ids)]] = True

    s = splats
    d_rho = d_amp * s.mu
    d_mu = d_amp * s.rho

    # conic -> 2D covariance -> camera covariance and projection Jacobian
    conic_m = np.stack([np.stack([s.conic[:, 0], s.conic[:, 1]], -1),
                        np.stack([s.conic[:, 1], s.conic[:, 2]], -1)], axis=1)
    d_cov2d = -conic_m @ d_conic @ conic_m
    d_cov_cam = np.swapaxes(s.jac, 1, 2) @ d_cov2d @ s.jac
    d_jac = 2.0 * d_cov2d @ s.jac @ s.cov_cam
    rot_w = s.world_to_cam
    d_cov = np.einsum("ji,njk,kl->nil", rot_w, d_cov_cam, rot_w)

    # mu = sqrt(2 pi / quad), quad = sum(local_ray^2 / s^2), local_ray = R^T ray
    idx = s.index
    s2 = np.exp(2.0 * field.log_scale[idx])
    d_quad = d_mu * (-0.5 * s.mu / s.quad)
    d_local = d_quad[:, None] * 2.0 * s.local_ray / s2
    d_s2_mu = d_quad[:, None] * (-(s.local_ray ** 2) / s2 ** 2)
    q = field.rotation[idx] / np.linalg.norm(field.rotation[idx], axis=1, keepdims=True)
    rot = quat_to_rot(q)
    d_rot_mu = s.ray[:, :, None] * d_local[:, None, :]
    d_ray = np.einsum("nij,nj->ni", rot, d_local)
    d_v = (d_ray - s.ray * np.sum(s.ray * d_ray, axis=1, keepdims=True)) / s.dist[:, None]

    # camera-space position from the center and the Jacobian
    a, b, z = s.cam[:, 0], s.cam[:, 1], s.cam[:, 2]
    fu, fv = geom.focal
    d_cam = np.einsum("nij,ni->nj", s.jac, d_center)
    d_cam[:, 0] += d_jac[:, 0, 2] * (-fu / z ** 2)
    d_cam[:, 1] += d_jac[:, 1, 2] * (-fv / z ** 2)
    d_cam[:, 2] += (d_jac[:, 0, 0] * (-fu / z ** 2) + d_jac[:, 0, 2] * (2 * fu * a / z ** 3)
                    + d_jac[:, 1, 1] * (-fv / z ** 2) + d_jac[:, 1, 2] * (2 * fv * b / z ** 3))
    d_pos = d_cam @ rot_w + d_v

    # covariance -> rotation and log-scale
    d_cov = 0.5 * (d_cov + np.swapaxes(d_cov, 1, 2))
    d_rot = 2.0 * np.einsum("nij,njk,nk->nik", d_cov, rot, s2) + d_rot_mu
    d_s2 = np.einsum("nji,njk,nki->ni", rot, d_cov, rot) + d_s2_mu
    norm = np.linalg.norm(field.rotation[idx], axis=1, keepdims=True)
    dq_hat = rot_grad_to_quat(q, d_rot)
    d_quat = (dq_hat - q * np.sum(q * dq_hat, axis=1, keepdims=True)) / norm

    grads.position[idx] = d_pos
    grads.log_scale[idx] = 2.0 * s2 * d_s2
    grads.rotation[idx] = d_quat
    if field.activation == "softplus":
        slope = 0.5 * (1.0 + np.tanh(0.5 * field.raw_density[idx]))
    else:
        slope = np.where(field.raw_density[idx] >= 0, 1.0, field.gamma)
    grads.raw_density[idx] = d_rho * slope
    screen[idx] = np.hypot(d_center[:, 0] * nu / 2.0, d_center[:, 1] * nv / 2.0)
    visible[idx[in_tiles]] = True
    return RenderGrads(grads, screen, visible)


def tile_counts(field: GaussianField, geom: ScannerGeometry, angle_index: int,
                settings: RenderSettings | None = None) -> np.ndarray:
    """Number of splats binned into each tile, shape (tiles_v, tiles_u)."""
    settings = settings or RenderSettings()
    nu, nv = geom.detector_dims
    ntx = (nu + settings.tile - 1) // settings.tile
    nty = (nv + settings.tile - 1) // settings.tile
    if not len(field):
        return np.zeros((nty, ntx), np.int64)
    _, _, ptr, _, _, _ = _prepare(field, geom, angle_index, settings, None)
    return np.diff(ptr).reshape(nty, ntx)
