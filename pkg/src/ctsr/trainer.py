"""Residual-learning optimization of a Gaussian field against projection targets."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .field import (MIN_SCALE, PARAM_NAMES, FieldGrads, GaussianField, Grid, voxelize_array,
                    voxelize_backward, write_checkpoint)
from .geometry import ScannerGeometry
from .projector import Projection, ProjectionSet
from .rasterizer import RenderSettings, render, render_backward
from .volume import VoxelVolume, ssim_with_grad

log = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 5000
    lambda1: float = 0.5
    lambda2: float = 0.05
    lr_position: float = 0.0002
    lr_density: float = 0.001
    lr_scale: float = 0.005
    lr_rotation: float = 0.001
    lr_final_factor: float = 0.1
    densify_from: int = 500
    densify_until: int = 5000
    densify_interval: int = 100
    grad_threshold: float = 0.00005
    prune_band: float = 0.00001
    gamma: float = 0.09
    max_count: int = 500_000
    dense_scale: float = 0.03
    max_scale: float = 1.0
    tv_crop: int = 32
    alpha_min: float = 0.0
    cutoff: float = 3.0
    mode: str = "over"
    residual: bool = True
    ssim_peak: float = 1.0
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 1000

    def __post_init__(self):
        rates = (self.lr_position, self.lr_density, self.lr_scale, self.lr_rotation, self.lr_final_factor)
        if min(rates) <= 0:
            raise ValueError("learning rates and lr_final_factor must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.iterations > 0 and not 0 <= self.densify_from < self.densify_until <= self.iterations:
            raise ValueError(f"need densify_from < densify_until <= iterations, got "
                             f"{self.densify_from}, {self.densify_until}, {self.iterations}")
        if self.densify_interval < 1 or self.tv_crop < 2:
            raise ValueError("densify_interval must be >= 1 and tv_crop >= 2")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.prune_band < 0:
            raise ValueError("loss weights and prune band must be non-negative")
        if self.mode not in ("over", "additive"):
            raise ValueError(f"unknown compositing mode {self.mode!r}")

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**cfg)

    def to_dict(self) -> dict:
        return asdict(self)

    def base_rates(self) -> dict[str, float]:
        return {"position": self.lr_position, "log_scale": self.lr_scale,
                "rotation": self.lr_rotation, "raw_density": self.lr_density}

    def learning_rates(self, iteration: int) -> dict[str, float]:
        """Exponential decay reaching ``lr_final_factor`` times the base rate at the last iteration."""
        frac = iteration / self.iterations if self.iterations else 1.0
        decay = self.lr_final_factor ** frac
        return {k: v * decay for k, v in self.base_rates().items()}

    def render_settings(self) -> RenderSettings:
        return RenderSettings(mode=self.mode, alpha_min=self.alpha_min, cutoff=self.cutoff)


# -- targets ------------------------------------------------------------------

@dataclass
class ResidualTargets:
    """Projection targets ``y``, LR reprojections and the residual ``y_hat = y - lr_proj``.

    ``y`` is re-derived as ``y_hat + lr_proj`` so the two agree bit for bit.
    """
    y: ProjectionSet
    lr_proj: ProjectionSet
    lr_volume_up: VoxelVolume
    y_hat: ProjectionSet = field(init=False)

    def __post_init__(self):
        if self.y.geometry.digest() != self.lr_proj.geometry.digest():
            raise ValueError("target and LR projection sets use different geometries")
        if self.y[0].dims != self.lr_proj[0].dims:
            raise ValueError(f"target dims {self.y[0].dims} differ from LR projections {self.lr_proj[0].dims}")
        hat, ys = [], []
        for a, b in zip(self.y.projections, self.lr_proj.projections):
            r = a.data - b.data
            hat.append(Projection(r, a.angle_index))
            ys.append(Projection(r + b.data, a.angle_index))
        self.y_hat = ProjectionSet(self.y.geometry, hat)
        self.y = ProjectionSet(self.y.geometry, ys, dict(self.y.extra))

    @property
    def geometry(self) -> ScannerGeometry:
        return self.y.geometry


def compose_prediction(x_hat, lr_proj):
    a = getattr(x_hat, "data", x_hat)
    b = getattr(lr_proj, "data", lr_proj)
    if np.shape(a) != np.shape(b):
        raise ValueError(f"residual {np.shape(a)} and LR projection {np.shape(b)} differ in dims")
    out = np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)
    return Projection(out, x_hat.angle_index) if isinstance(x_hat, Projection) else out


# -- losses -------------------------------------------------------------------

@dataclass
class ReconLoss:
    total: float
    l1: float
    l_res: float
    dssim: float
    grad: np.ndarray


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def loss_recon(y, x, y_hat, x_hat, lambda1: float = 0.5, peak: float = 1.0) -> ReconLoss:
    """L1(y, x) + L1(y_hat, x_hat) + lambda1 * DSSIM(y, x) and its gradient in ``x_hat``.

    The prediction is assumed to be ``x = x_hat + lr_proj`` so ``dx/dx_hat = 1``.
    """
    y, x, y_hat, x_hat = map(_arr, (y, x, y_hat, x_hat))
    if not (y.shape == x.shape == y_hat.shape == x_hat.shape):
        raise ValueError(f"loss inputs disagree in dims: {y.shape}, {x.shape}, {y_hat.shape}, {x_hat.shape}")
    n = x.size
    l1 = float(np.mean(np.abs(y - x)))
    l_res = float(np.mean(np.abs(y_hat - x_hat)))
    grad = (np.sign(x - y) + np.sign(x_hat - y_hat)) / n
    dssim = 0.0
    if lambda1:
        s, ds = ssim_with_grad(y, x, peak=peak)
        dssim = (1.0 - s) / 2.0
        grad = grad - 0.5 * lambda1 * ds
    return ReconLoss(l1 + l_res + lambda1 * dssim, l1, l_res, dssim, grad)


def loss_tv(subvol) -> tuple[float, np.ndarray]:
    """Anisotropic TV: mean over axes of the mean absolute forward difference."""
    v = _arr(subvol)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError(f"TV needs a 3D volume with at least 2 voxels per axis, got {v.shape}")
    total = 0.0
    grad = np.zeros_like(v)
    for axis in range(3):
        d = np.diff(v, axis=axis)
        total += np.mean(np.abs(d)) / 3.0
        g = np.sign(d) / (3.0 * d.size)
        pad_hi = [(0, 0)] * 3
        pad_lo = [(0, 0)] * 3
        pad_hi[axis] = (0, 1)
        pad_lo[axis] = (1, 0)
        grad += np.pad(g, pad_lo) - np.pad(g, pad_hi)
    return float(total), grad


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_field(cls, fld: GaussianField) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in fld.params().items()},
                   {k: np.zeros_like(p) for k, p in fld.params().items()})

    def reindex(self, index: np.ndarray):
        """Keep and reorder moments by source row (duplicate rows copy moments)."""
        for k in self.m:
            self.m[k] = self.m[k][index]
            self.v[k] = self.v[k][index]


def adam_step(fld: GaussianField, grads: FieldGrads, state: AdamState, config: TrainConfig,
              iteration: int) -> GaussianField:
    """One in-place Adam update with per-group decayed learning rates."""
    garr = grads.arrays()
    for name, g in garr.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingError(f"iteration {iteration}: {bad} non-finite {name} gradients")
    if fld.isotropic:
        g = garr["log_scale"].sum(axis=1, keepdims=True)
        garr["log_scale"] = np.repeat(g, 3, axis=1)
    rates = config.learning_rates(iteration)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in PARAM_NAMES:
        g = garr[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        param = getattr(fld, name)
        param -= rates[name] * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if len(fld):
        fld.normalize_rotations()
        np.clip(fld.log_scale, math.log(MIN_SCALE), math.log(config.max_scale), out=fld.log_scale)
    return fld


# -- adaptive control ---------------------------------------------------------

@dataclass
class GradAccumulator:
    screen: np.ndarray
    position: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradAccumulator":
        return cls(np.zeros(n), np.zeros((n, 3)), np.zeros(n, np.int64))

    def add(self, screen_norm: np.ndarray, position_grad: np.ndarray, visible: np.ndarray):
        self.screen[visible] += screen_norm[visible]
        self.position[visible] += position_grad[visible]
        self.count[visible] += 1

    def mean(self) -> np.ndarray:
        return self.screen / np.maximum(self.count, 1)


@dataclass
class DensifyStats:
    split: int = 0
    cloned: int = 0
    pruned: int = 0
    capped: int = 0


def densify_and_prune(fld: GaussianField, accum: GradAccumulator, state: AdamState | None,
                      config: TrainConfig) -> tuple[GaussianField, GradAccumulator, DensifyStats]:
    """Split or clone high-gradient Gaussians, drop near-zero densities, respect the count cap.

    Returns the new field, a fresh accumulator and event counts; ``state`` is reindexed in place.
    """
    n = len(fld)
    stats = DensifyStats()
    if n == 0:
        return fld, GradAccumulator.zeros(0), stats
    keep = np.abs(fld.raw_density) >= config.prune_band
    stats.pruned = int(n - keep.sum())
    mean = accum.mean()
    hot = np.flatnonzero(keep & (mean > config.grad_threshold))
    budget = max(0, min(fld.max_count, config.max_count) - int(keep.sum()))
    if hot.size > budget:
        order = np.argsort(-mean[hot], kind="stable")
        stats.capped = int(hot.size - budget)
        hot = np.sort(hot[order[:budget]])
    scales = fld.scales()
    big = scales[hot].max(axis=1) > config.dense_scale
    split, clone = hot[big], hot[~big]
    stats.split, stats.cloned = int(split.size), int(clone.size)

    position = fld.position.copy()
    log_scale = fld.log_scale.copy()
    rows = np.flatnonzero(keep & ~np.isin(np.arange(n), split))
    new_pos, new_ls, new_rows = [position[rows]], [log_scale[rows]], [rows]

    if split.size:
        rot = fld.rotations()[split]
        axis = np.argmax(scales[split], axis=1)
        direction = rot[np.arange(split.size), :, axis]
        offset = 0.5 * scales[split, axis][:, None] * direction
        child_ls = log_scale[split] - math.log(1.6)
        for sign in (1.0, -1.0):
            new_pos.append(position[split] + sign * offset)
            new_ls.append(child_ls)
            new_rows.append(split)
    if clone.size:
        g = accum.position[clone]
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        unit = np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
        step = 0.5 * scales[clone].max(axis=1, keepdims=True)
        new_pos.append(position[clone] - step * unit)
        new_ls.append(log_scale[clone])
        new_rows.append(clone)

    src = np.concatenate(new_rows)
    out = GaussianField(np.concatenate(new_pos), np.concatenate(new_ls), fld.rotation[src],
                        fld.raw_density[src], gamma=fld.gamma, max_count=fld.max_count,
                        activation=fld.activation, isotropic=fld.isotropic)
    if state is not None:
        state.reindex(src)
    return out, GradAccumulator.zeros(len(out)), stats


# -- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    field: GaussianField
    volume: VoxelVolume
    history: list[dict]


def _random_crop(rng, dims, crop) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    size = tuple(min(crop, d) for d in dims)
    origin = tuple(int(rng.integers(0, d - s + 1)) for d, s in zip(dims, size))
    return origin, size


def final_volume(fld: GaussianField, lr_volume_up: VoxelVolume, grid: Grid, residual: bool = True,
                 cutoff: float | None = 3.0) -> VoxelVolume:
    base = lr_volume_up.data.astype(np.float64) if residual else 0.0
    out = np.clip(voxelize_array(fld, grid, cutoff=cutoff) + base, 0.0, 1.0)
    return VoxelVolume(out, lr_volume_up.spacing)


def train(fld: GaussianField, targets: ResidualTargets, config: TrainConfig,
          log_path=None, checkpoint_dir=None) -> TrainResult:
    """Optimize ``fld`` (a residual field unless ``config.residual`` is off) against ``targets``."""
    geom = targets.geometry
    lr_up = targets.lr_volume_up
    grid = Grid(lr_up.dims, geom.volume_extent)
    lr_data = lr_up.data.astype(np.float64) if config.residual else np.zeros(lr_up.dims)
    settings = config.render_settings()
    rng = np.random.default_rng(config.seed)
    state = AdamState.for_field(fld)
    accum = GradAccumulator.zeros(len(fld))
    history: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    t0 = time.perf_counter()
    try:
        for it in range(1, config.iterations + 1):
            a = int(rng.integers(geom.n_angles))
            x_hat = render(fld, geom, a, settings).data
            if config.residual:
                x = compose_prediction(x_hat, targets.lr_proj[a].data)
                rec = loss_recon(targets.y[a].data, x, targets.y_hat[a].data, x_hat,
                                 config.lambda1, config.ssim_peak)
            else:
                rec = loss_recon(targets.y[a].data, x_hat, targets.y[a].data, x_hat,
                                 config.lambda1, config.ssim_peak)

            origin, size = _random_crop(rng, lr_up.dims, config.tv_crop)
            sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
            tv = 0.0
            grads = FieldGrads.zeros(len(fld))
            if config.lambda2 and len(fld):
                crop = voxelize_array(fld, grid, origin, size, config.cutoff) + lr_data[sl]
                tv, g_tv = loss_tv(crop)
                grads = voxelize_backward(fld, grid, config.lambda2 * g_tv, origin, config.cutoff)
            total = rec.total + config.lambda2 * tv
            if not math.isfinite(total):
                raise TrainingError(f"iteration {it}: non-finite loss")

            rg = render_backward(fld, geom, a, rec.grad, settings)
            grads += rg.grads
            accum.add(rg.screen_grad_norm, rg.grads.position, rg.visible)
            adam_step(fld, grads, state, config, it)

            if (config.densify_from <= it <= config.densify_until and it % config.densify_interval == 0):
                fld, accum, stats = densify_and_prune(fld, accum, state, config)
                log.debug("iter %d densify: %s -> %d Gaussians", it, stats, len(fld))

            if it % config.log_interval == 0 or it == config.iterations:
                entry = {"iter": it, "total": total, "l1": rec.l1, "l_res": rec.l_res, "dssim": rec.dssim,
                         "tv": tv, "count": len(fld),
                         **{f"lr_{k}": v for k, v in config.learning_rates(it).items()}}
                history.append(entry)
                log.info("iter %5d loss %.6f count %d (%.1fs)", it, total, len(fld), time.perf_counter() - t0)
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                    log_file.flush()
            if checkpoint_dir and it % config.checkpoint_interval == 0:
                write_checkpoint(fld, Path(checkpoint_dir) / f"field_{it:06d}")
    finally:
        if log_file:
            log_file.close()
    volume = final_volume(fld, lr_up, grid, config.residual, config.cutoff)
    return TrainResult(fld, volume, history)
