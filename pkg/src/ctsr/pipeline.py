"""File-based pipeline stages.

Every stage reads its inputs from and writes its outputs to one workspace
directory. After a stage finishes it records the sha256 of each output under
``stages/<stage>.json``; downstream stages refuse inputs whose current hash
differs from the recorded one.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from .config import RunConfig, ValidationError, dump_config
from .ddnm import (DegradationOp, NoiseSchedule, OracleDenoiser, PASConfig, make_denoiser,
                   sr_projection_set)
from .field import init_from_volume, write_checkpoint
from .projector import (Projection, ProjectionSet, project_all, read_projection_set,
                        write_projection_set)
from .trainer import ResidualTargets, train
from .volume import (VoxelVolume, clip_normalize, degrade, make_phantom, psnr, read_volume,
                     resample_cubic, resample_trilinear, shepp_logan_specs, ssim, write_volume)

log = logging.getLogger(__name__)

STAGES = ("phantom", "degrade", "project", "sr2d", "reconstruct", "evaluate")


class StaleInputError(ValidationError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Workspace:
    """Named artifact paths inside an output directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _files(self, rel: str) -> list[Path]:
        p = self.path(rel)
        if p.is_dir():
            return sorted(q for q in p.iterdir() if q.is_file())
        if p.suffix == ".f32raw":
            return [p, p.with_suffix(".json")]
        return [p]

    def hashes(self, artifacts: list[str]) -> dict[str, str]:
        out = {}
        for rel in artifacts:
            for f in self._files(rel):
                out[f.relative_to(self.root).as_posix()] = sha256_file(f)
        return out

    def record(self, stage: str, cfg: RunConfig, outputs: list[str]):
        rec = {"stage": stage, "config": cfg.digest(), "outputs": self.hashes(outputs)}
        path = self.path(f"stages/{stage}.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
        dump_config(cfg, self.path("config.resolved.yaml"))

    def require(self, producer: str, artifacts: list[str]):
        """Check that ``artifacts`` exist and match what ``producer`` recorded."""
        rec_path = self.path(f"stages/{producer}.json")
        if not rec_path.exists():
            raise StaleInputError(f"no record of stage '{producer}' in {self.root}; run it first")
        recorded = json.loads(rec_path.read_text())["outputs"]
        for rel in artifacts:
            if not self.path(rel).exists():
                raise StaleInputError(f"missing input {rel} (expected from stage '{producer}')")
            current = self.hashes([rel])
            for name, digest in current.items():
                if recorded.get(name) != digest:
                    raise StaleInputError(f"{name} changed since stage '{producer}' wrote it; rerun '{producer}'")
            missing = [n for n in recorded if n.startswith(rel.rstrip("/") + "/") and n not in current]
            if missing:
                raise StaleInputError(f"{missing[0]} recorded by '{producer}' is missing")


GT, LR, LR_UP, RECON, FIELD = "gt.f32raw", "lr.f32raw", "lr_up.f32raw", "recon.f32raw", "field.f32raw"
P_GT, P_LR, P_LR_UP, P_SR = "proj_gt", "proj_lr", "proj_lr_up", "proj_sr"
TRAIN_LOG, METRICS = "train_log.jsonl", "metrics.csv"


def run_phantom(cfg: RunConfig, ws: Workspace) -> Path:
    v = cfg.volume
    if v.path:
        vol = read_volume(v.path)
        if v.clip_window:
            vol = clip_normalize(vol, *v.clip_window)
    else:
        n = v.dims
        vol = make_phantom(shepp_logan_specs(v.contrast), (n, n, n), (2.0 / n,) * 3)
    if len(set(vol.dims)) != 1 or vol.dims[0] % cfg.degradation.factor:
        raise ValidationError(f"volume dims {vol.dims} must be a cube divisible by {cfg.degradation.factor}")
    out = write_volume(vol, ws.path(GT))
    ws.record("phantom", cfg, [GT])
    return out


def run_degrade(cfg: RunConfig, ws: Workspace):
    ws.require("phantom", [GT])
    gt = read_volume(ws.path(GT))
    lr = degrade(gt, cfg.degradation.factor, cfg.degradation.sigma)
    up = resample_cubic(lr, cfg.degradation.factor)
    write_volume(lr, ws.path(LR))
    write_volume(up, ws.path(LR_UP))
    ws.record("degrade", cfg, [LR, LR_UP])


def run_project(cfg: RunConfig, ws: Workspace):
    ws.require("phantom", [GT])
    ws.require("degrade", [LR, LR_UP])
    gt = read_volume(ws.path(GT))
    f = cfg.degradation.factor
    geom = cfg.scanner(gt.dims[0])
    gt_set = project_all(gt, geom)
    lr_geom = geom.scaled_detector(f)
    if cfg.ddnm.lr_source == "gt":
        nu, nv = geom.detector_dims
        op = DegradationOp(f, (nv, nu))
        lr_set = ProjectionSet(lr_geom, [Projection(op.A(p.data), p.angle_index) for p in gt_set.projections])
    else:
        lr_set = project_all(read_volume(ws.path(LR)), lr_geom)
    write_projection_set(gt_set, ws.path(P_GT))
    write_projection_set(lr_set, ws.path(P_LR))
    write_projection_set(project_all(read_volume(ws.path(LR_UP)), geom), ws.path(P_LR_UP))
    ws.record("project", cfg, [P_GT, P_LR, P_LR_UP])


def run_sr2d(cfg: RunConfig, ws: Workspace) -> ProjectionSet:
    ws.require("project", [P_GT, P_LR])
    d = cfg.ddnm
    f = cfg.degradation.factor
    lr_set = read_projection_set(ws.path(P_LR))
    gt_set = read_projection_set(ws.path(P_GT))
    schedule = NoiseSchedule(T=d.timesteps, ddim_steps=d.ddim_steps)
    nu, nv = lr_set.geometry.detector_dims
    op = DegradationOp(f, (nv * f, nu * f))
    pas = PASConfig(d.threshold(f), tuple(d.candidates), cfg.ddnm_seed, d.norm)
    if d.denoiser == "oracle":
        denoiser = [OracleDenoiser(p.data) for p in gt_set.projections]
    else:
        denoiser = make_denoiser(d.denoiser, schedule, d.blur_std, d.noise_gain, d.command)
    try:
        sr = sr_projection_set(lr_set, op, denoiser, pas, schedule, d.sigma_y, hr_geometry=gt_set.geometry)
    finally:
        if hasattr(denoiser, "close"):
            denoiser.close()
    write_projection_set(sr, ws.path(P_SR))
    ws.record("sr2d", cfg, [P_SR])
    return sr


def run_reconstruct(cfg: RunConfig, ws: Workspace):
    ws.require("degrade", [LR_UP])
    ws.require("project", [P_LR_UP])
    ws.require("sr2d", [P_SR])
    up = read_volume(ws.path(LR_UP))
    y = read_projection_set(ws.path(P_SR))
    lr_proj = read_projection_set(ws.path(P_LR_UP))
    targets = ResidualTargets(y, lr_proj, up)
    fc, tc = cfg.field, cfg.trainer
    residual = fc.mode == "residual"
    fld = init_from_volume(up, fc.n_init, fc.density_thresh, fc.scale_term, residual_mode=residual,
                           gamma=tc.gamma, seed=cfg.seed, extent=targets.geometry.volume_extent,
                           activation=fc.activation, max_count=tc.max_count, isotropic=fc.isotropic)
    tc = replace(tc, residual=residual)
    log_path = ws.path(TRAIN_LOG)
    log_path.unlink(missing_ok=True)
    ckpt_dir = ws.path("checkpoints")
    if ckpt_dir.exists():
        for old in ckpt_dir.iterdir():
            old.unlink()
    result = train(fld, targets, tc, log_path=log_path, checkpoint_dir=ckpt_dir)
    write_checkpoint(result.field, ws.path(FIELD))
    write_volume(result.volume, ws.path(RECON))
    ws.record("reconstruct", cfg, [FIELD, RECON, TRAIN_LOG])
    return result


def evaluate_volumes(gt: VoxelVolume, lr: VoxelVolume, ours: VoxelVolume, factor: int) -> list[dict]:
    ref = gt.data.astype(np.float64)
    candidates = {
        "trilinear": np.clip(resample_trilinear(lr, factor).data, 0.0, 1.0),
        "cubic": np.clip(resample_cubic(lr, factor).data, 0.0, 1.0),
        "ours": ours.data,
    }
    rows = []
    for name, vol in candidates.items():
        vol = np.asarray(vol, dtype=np.float64)
        rows.append({"method": name, "psnr": round(psnr(vol, ref), 4), "ssim": round(ssim(vol, ref), 4)})
    return rows


def format_table(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["method", "psnr", "ssim"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def run_evaluate(cfg: RunConfig, ws: Workspace, volume=None) -> list[dict]:
    ws.require("phantom", [GT])
    ws.require("degrade", [LR])
    if volume is None:
        ws.require("reconstruct", [RECON])
        volume = ws.path(RECON)
    gt, lr, ours = read_volume(ws.path(GT)), read_volume(ws.path(LR)), read_volume(volume)
    if ours.dims != gt.dims:
        raise ValidationError(f"evaluated volume dims {ours.dims} differ from ground truth {gt.dims}")
    f = cfg.degradation.factor
    rows = evaluate_volumes(gt, lr, ours, f)
    ws.path(METRICS).write_text(format_table(rows))

    figs = ws.path("figures")
    vols = {"ground truth": gt.data, "trilinear": resample_trilinear(lr, f).data,
            "cubic": resample_cubic(lr, f).data, "ours": ours.data}
    outputs = [METRICS]
    plotting.slice_grid(vols, figs / "slices.png")
    plotting.error_grid(gt.data, {k: v for k, v in vols.items() if k != "ground truth"}, figs / "errors.png")
    plotting.metric_bars(rows, figs / "metrics.png")
    outputs += ["figures/slices.png", "figures/errors.png", "figures/metrics.png"]
    log_path = ws.path(TRAIN_LOG)
    if log_path.exists() and log_path.stat().st_size:
        history = [json.loads(line) for line in log_path.read_text().splitlines()]
        plotting.training_curve(history, figs / "training.png")
        outputs.append("figures/training.png")
    manifest = ws.path(P_SR) / "manifest.json"
    if manifest.exists():
        pas = json.loads(manifest.read_text()).get("pas")
        if pas:
            plotting.tstart_histogram(pas["t_start"], pas["candidates"], figs / "tstart.png")
            outputs.append("figures/tstart.png")
    ws.record("evaluate", cfg, outputs)
    return rows


def run_all(cfg: RunConfig, ws: Workspace) -> list[dict]:
    run_phantom(cfg, ws)
    run_degrade(cfg, ws)
    run_project(cfg, ws)
    run_sr2d(cfg, ws)
    run_reconstruct(cfg, ws)
    return run_evaluate(cfg, ws)
