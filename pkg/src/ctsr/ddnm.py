"""Zero-shot projection super-resolution with null-space diffusion sampling.

Timesteps are 1-based: ``t`` in ``[1, T]`` indexes ``alphas_cumprod[t - 1]``
and ``t = 0`` denotes the clean image (``alpha_bar(0) == 1``). Images may be
passed either as :class:`~ctsr.projector.Projection` objects or as bare 2D
arrays; outputs match the input kind.
"""

from __future__ import annotations

import logging
import struct
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .geometry import ScannerGeometry
from .projector import Projection, ProjectionSet

log = logging.getLogger(__name__)


class SamplingError(RuntimeError):
    pass


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Projection) else np.asarray(x, dtype=np.float64)


def _wrap(arr: np.ndarray, like):
    return Projection(arr, like.angle_index) if isinstance(like, Projection) else arr


# -- schedule -----------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 50
    ddim_eta: float = 0.0
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas_cumprod: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1 or not 0 < self.ddim_steps <= self.T:
            raise ValueError(f"invalid schedule T={self.T}, ddim_steps={self.ddim_steps}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        if self.ddim_eta != 0.0:
            raise ValueError("only deterministic DDIM (eta = 0) is supported")
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_cumprod", np.cumprod(1.0 - betas))

    def alpha_bar(self, t: int) -> float:
        self.check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alphas_cumprod[t - 1])

    def check_t(self, t: int, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")

    def ddim_timesteps(self) -> list[int]:
        """The strided subsequence T, T - skip, ..., skip (descending)."""
        skip = self.T // self.ddim_steps
        return [self.T - k * skip for k in range(self.ddim_steps)]

    def trajectory(self, t_start: int) -> list[int]:
        """Timesteps visited from ``t_start`` down to 0."""
        self.check_t(t_start)
        return [t_start] + [s for s in self.ddim_timesteps() if s < t_start] + [0]


# -- degradation --------------------------------------------------------------

@dataclass(frozen=True)
class DegradationOp:
    """Non-overlapping ``factor x factor`` mean pooling and its pseudo-inverse."""
    factor: int
    hr_dims: tuple[int, int]
    kind: str = "avg_pool"

    def __post_init__(self):
        object.__setattr__(self, "hr_dims", tuple(int(d) for d in self.hr_dims))
        if self.kind != "avg_pool":
            raise ValueError(f"unsupported degradation kind {self.kind!r}")
        if self.factor < 1 or any(d % self.factor for d in self.hr_dims):
            raise ValueError(f"hr_dims {self.hr_dims} not divisible by factor {self.factor}")
        probe = np.random.default_rng(0).standard_normal(self.lr_dims)
        if np.max(np.abs(self.A(self.A_pinv(probe)) - probe)) > 1e-12:
            raise ValueError("pseudo-inverse probe failed")

    @property
    def lr_dims(self) -> tuple[int, int]:
        return self.hr_dims[0] // self.factor, self.hr_dims[1] // self.factor

    def A(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.hr_dims:
            raise ValueError(f"expected HR dims {self.hr_dims}, got {x.shape}")
        r, c = self.lr_dims
        f = self.factor
        return x.reshape(r, f, c, f).mean(axis=(1, 3))

    def A_pinv(self, y: np.ndarray) -> np.ndarray:
        if y.shape != self.lr_dims:
            raise ValueError(f"expected LR dims {self.lr_dims}, got {y.shape}")
        return np.repeat(np.repeat(y, self.factor, axis=0), self.factor, axis=1)


def apply_A(x, op: DegradationOp):
    return _wrap(op.A(_data(x)), x)


def apply_A_pinv(y, op: DegradationOp):
    return _wrap(op.A_pinv(_data(y)), y)


def bilinear_upsample(y, factor: int):
    arr = zoom(_data(y), factor, order=1, grid_mode=True, mode="nearest")
    return _wrap(arr, y)


# -- data consistency ---------------------------------------------------------

def _project(x0t: np.ndarray, y: np.ndarray, op: DegradationOp) -> np.ndarray:
    return op.A_pinv(y) + x0t - op.A_pinv(op.A(x0t))


def ddnm_project(x0t, y, op: DegradationOp):
    """Replace the range-space component of ``x0t`` with ``A^+ y``."""
    return _wrap(_project(_data(x0t), _data(y), op), x0t)


def ddnm_plus_scale(t: int, sigma_y: float, schedule: NoiseSchedule) -> float:
    """Range-space correction weight ``min(1, sigma_t / (a_t * sigma_y))``."""
    if sigma_y < 0:
        raise ValueError("sigma_y must be non-negative")
    if sigma_y == 0:
        return 1.0
    ab = schedule.alpha_bar(t)
    return min(1.0, np.sqrt(1.0 - ab) / (np.sqrt(ab) * sigma_y))


def ddnm_plus_project(x0t, y, op: DegradationOp, sigma_y: float, t: int, schedule: NoiseSchedule):
    scale = ddnm_plus_scale(t, sigma_y, schedule)
    if scale == 1.0:
        return ddnm_project(x0t, y, op)
    x = _data(x0t)
    out = x - scale * op.A_pinv(op.A(x) - _data(y))
    return _wrap(out, x0t)


# -- denoisers ----------------------------------------------------------------

Denoiser = Callable[[np.ndarray, int], np.ndarray]


class OracleDenoiser:
    """Always predicts the supplied clean image."""

    def __init__(self, clean):
        self.clean = np.array(_data(clean), dtype=np.float64)

    def __call__(self, x_t: np.ndarray, t: int) -> np.ndarray:
        if x_t.shape != self.clean.shape:
            raise ValueError(f"oracle holds {self.clean.shape}, got {x_t.shape}")
        return self.clean.copy()


class ShrinkageDenoiser:
    """Rescale to the clean-signal level, then low-pass with a noise-adaptive Gaussian.

    The blur width is ``blur_std + noise_gain * s_t`` where ``s_t`` is the noise
    std of ``x_t / sqrt(abar_t)``, so strongly noised inputs are smoothed harder.
    """

    def __init__(self, blur_std: float = 2.0, noise_gain: float = 2.0,
                 schedule: NoiseSchedule | None = None):
        if blur_std < 0 or noise_gain < 0:
            raise ValueError("blur_std and noise_gain must be non-negative")
        self.blur_std = float(blur_std)
        self.noise_gain = float(noise_gain)
        self.schedule = schedule or NoiseSchedule()

    def width(self, t: int) -> float:
        ab = self.schedule.alpha_bar(t)
        return self.blur_std + self.noise_gain * np.sqrt((1.0 - ab) / ab)

    def __call__(self, x_t: np.ndarray, t: int) -> np.ndarray:
        x0 = x_t / np.sqrt(self.schedule.alpha_bar(t))
        w = self.width(t)
        return gaussian_filter(x0, w, mode="nearest") if w > 0 else x0


HEADER = struct.Struct("<Iiii")
LENGTH = struct.Struct("<I")


def encode_request(x_t: np.ndarray, t: int) -> bytes:
    rows, cols = x_t.shape
    payload = np.ascontiguousarray(x_t, dtype="<f4").tobytes()
    return HEADER.pack(12 + len(payload), int(t), rows, cols) + payload


def encode_response(x0: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(x0, dtype="<f4").tobytes()
    return LENGTH.pack(len(payload)) + payload


def read_exact(stream, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise EOFError(f"stream closed after {len(buf)} of {n} bytes")
        buf += chunk
    return buf


class ExternalDenoiser:
    """Denoiser living in a child process, spoken to over length-prefixed frames.

    Request: ``uint32 length | int32 t | int32 rows | int32 cols | float32[rows*cols]``.
    Response: ``uint32 length | float32[rows*cols]``. All little-endian, row-major.
    Requests are serialized; one instance owns one process.
    """

    def __init__(self, command: Sequence[str]):
        self.command = list(command)
        self._proc: subprocess.Popen | None = None

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return self._proc

    def __call__(self, x_t: np.ndarray, t: int) -> np.ndarray:
        proc = self._ensure()
        try:
            proc.stdin.write(encode_request(x_t, t))
            proc.stdin.flush()
            (length,) = LENGTH.unpack(read_exact(proc.stdout, 4))
            payload = read_exact(proc.stdout, length)
        except (BrokenPipeError, EOFError) as exc:
            raise SamplingError(f"external denoiser {self.command[0]!r} failed: {exc}") from exc
        if length != 4 * x_t.size:
            raise SamplingError(f"denoiser returned {length} bytes for a {x_t.shape} image")
        return np.frombuffer(payload, dtype="<f4").reshape(x_t.shape).astype(np.float64)

    def close(self):
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_denoiser(kind: str, schedule: NoiseSchedule, blur_std: float = 2.0, noise_gain: float = 2.0,
                  command: Sequence[str] | None = None, clean=None) -> Denoiser:
    if kind == "shrinkage":
        return ShrinkageDenoiser(blur_std, noise_gain, schedule)
    if kind == "oracle":
        if clean is None:
            raise ValueError("oracle denoiser needs the clean image")
        return OracleDenoiser(clean)
    if kind == "external":
        if not command:
            raise ValueError("external denoiser needs a command")
        return ExternalDenoiser(command)
    raise ValueError(f"unknown denoiser kind {kind!r}")


def _denoise(denoiser: Denoiser, x_t: np.ndarray, t: int) -> np.ndarray:
    out = np.asarray(denoiser(x_t, t), dtype=np.float64)
    if out.shape != x_t.shape:
        raise SamplingError(f"denoiser changed dims {x_t.shape} -> {out.shape} at t={t}")
    if not np.all(np.isfinite(out)):
        raise SamplingError(f"denoiser produced non-finite values at t={t}")
    return out


# -- per-projection adaptive start --------------------------------------------

@dataclass(frozen=True)
class PASConfig:
    tau_thr: float = 7.0
    candidates: tuple[int, ...] = (100, 300, 500, 1000)
    seed: int = 0
    norm: str = "total"

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(sorted(int(c) for c in self.candidates)))
        if not self.candidates:
            raise ValueError("PAS needs at least one candidate timestep")
        if self.tau_thr <= 0:
            raise ValueError("tau_thr must be positive")
        if self.norm not in ("total", "rms"):
            raise ValueError(f"unknown PAS norm {self.norm!r}")


def pas_init(y_up, t: int, schedule: NoiseSchedule, seed: int):
    """Noisy start ``z * sqrt(1 - abar_t) + y_up * sqrt(abar_t)`` with seeded ``z``."""
    schedule.check_t(t)
    y = _data(y_up)
    ab = schedule.alpha_bar(t)
    z = np.random.default_rng(seed).standard_normal(y.shape)
    return _wrap(z * np.sqrt(1.0 - ab) + y * np.sqrt(ab), y_up)


def pas_norm(diff: np.ndarray, norm: str = "total") -> float:
    total = float(np.linalg.norm(diff.ravel()))
    return total if norm == "total" else total / np.sqrt(diff.size)


def select_tstart(deltas: dict[int, float], tau_thr: float) -> tuple[int, bool]:
    """Largest candidate within budget, or the smallest candidate flagged when none is."""
    if not deltas:
        raise ValueError("no PAS candidates")
    ok = [t for t, d in deltas.items() if d <= tau_thr]
    if ok:
        return max(ok), False
    return min(deltas), True


def pas_deltas(y, op: DegradationOp, denoiser: Denoiser, pas: PASConfig,
               schedule: NoiseSchedule) -> dict[int, float]:
    y = _data(y)
    y_up = bilinear_upsample(y, op.factor)
    out = {}
    for t in pas.candidates:
        x_t = pas_init(y_up, t, schedule, pas.seed)
        x0 = _project(_denoise(denoiser, x_t, t), y, op)
        out[t] = pas_norm(x0 - y_up, pas.norm)
    return out


def pas_select_tstart(y, op: DegradationOp, denoiser: Denoiser, pas: PASConfig,
                      schedule: NoiseSchedule) -> int:
    deltas = pas_deltas(y, op, denoiser, pas, schedule)
    t, flagged = select_tstart(deltas, pas.tau_thr)
    if flagged:
        log.warning("PAS: no candidate within tau=%g (deltas %s); using t=%d", pas.tau_thr, deltas, t)
    return t


# -- sampling -----------------------------------------------------------------

def ddim_ddnm_sample(y, op: DegradationOp, denoiser: Denoiser, schedule: NoiseSchedule,
                     sigma_y: float, t_start: int, seed: int = 0,
                     clip: tuple[float | None, float | None] | None = (0.0, None)):
    """Deterministic DDIM from ``t_start`` with null-space data consistency at every step.

    ``clip=None`` returns the final estimate unclipped.
    """
    if sigma_y < 0:
        raise ValueError("sigma_y must be non-negative")
    y_arr = _data(y)
    y_up = bilinear_upsample(y_arr, op.factor)
    steps = schedule.trajectory(t_start)
    x = pas_init(y_up, t_start, schedule, seed)
    x0 = x
    for t, t_next in zip(steps[:-1], steps[1:]):
        x0 = _denoise(denoiser, x, t)
        if sigma_y > 0:
            x0 = ddnm_plus_project(x0, y_arr, op, sigma_y, t, schedule)
        else:
            x0 = _project(x0, y_arr, op)
        ab, ab_next = schedule.alpha_bar(t), schedule.alpha_bar(t_next)
        eps = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        x = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite sample at t={t_next}")
    # the last transition lands on t = 0, where the estimate is returned as is
    out = x0
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return _wrap(out, y)


def refine_geometry(geom: ScannerGeometry, factor: int) -> ScannerGeometry:
    nu, nv = geom.detector_dims
    su, sv = geom.detector_spacing
    return ScannerGeometry(geom.dso, geom.dsd, (nu * factor, nv * factor), (su / factor, sv / factor),
                           geom.n_angles, geom.angle_start, geom.angle_end, geom.volume_extent)


def sr_projection_set(lr_set: ProjectionSet, op: DegradationOp, denoiser, pas: PASConfig,
                      schedule: NoiseSchedule, sigma_y: float,
                      hr_geometry: ScannerGeometry | None = None) -> ProjectionSet:
    """Super-resolve every projection; angle ``i`` uses seed ``pas.seed ^ i``.

    ``denoiser`` is one callable shared by all angles or a sequence with one per projection.
    """
    per_angle = isinstance(denoiser, (list, tuple))
    if per_angle and len(denoiser) != len(lr_set):
        raise ValueError(f"{len(denoiser)} denoisers for {len(lr_set)} projections")
    geom = hr_geometry or refine_geometry(lr_set.geometry, op.factor)
    if tuple(reversed(geom.detector_dims)) != op.hr_dims:
        raise ValueError(f"HR geometry detector {geom.detector_dims} does not match operator {op.hr_dims}")
    out, t_starts, flagged, deltas = [], [], [], []
    for k, p in enumerate(lr_set.projections):
        i = p.angle_index
        den = denoiser[k] if per_angle else denoiser
        cfg = PASConfig(pas.tau_thr, pas.candidates, pas.seed ^ i, pas.norm)
        try:
            d = pas_deltas(p.data, op, den, cfg, schedule)
            t, flag = select_tstart(d, cfg.tau_thr)
            hr = ddim_ddnm_sample(p.data, op, den, schedule, sigma_y, t, seed=cfg.seed)
        except Exception as exc:
            raise SamplingError(f"angle {i}: {exc}") from exc
        if flag:
            log.warning("PAS flagged angle %d: no candidate within tau=%g, using t=%d", i, cfg.tau_thr, t)
        out.append(Projection(hr, i))
        t_starts.append(t)
        deltas.append([round(d[c], 6) for c in cfg.candidates])
        if flag:
            flagged.append(i)
    extra = dict(lr_set.extra)
    extra["pas"] = {
        "tau_thr": pas.tau_thr,
        "norm": pas.norm,
        "candidates": list(pas.candidates),
        "t_start": t_starts,
        "flagged": flagged,
        "deltas": deltas,
        "sigma_y": sigma_y,
        "factor": op.factor,
    }
    return ProjectionSet(geom, out, extra)

