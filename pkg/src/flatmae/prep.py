"""Preprocessing of surface runs into normalized flat-map clips.

Order of operations: per-vertex temporal z-score, linear resampling to a
fixed TR, barycentric flat-map resampling, then per-frame z-score over valid
pixels. All standard deviations are population (``ddof=0``); constant signals
normalize to zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, RangeError, ValidationError
from .flatgeo import FlatFrame, ResampleGrid, resample_frames

__all__ = [
    "SurfaceRun",
    "FlatClip",
    "znorm_vertices",
    "resample_time",
    "frame_norm",
    "normalize_frames",
    "extract_clips",
    "preprocess_run",
    "CLIP_LEN",
]

CLIP_LEN = 16
STD_DDOF = 0


@dataclass(frozen=True, eq=False)
class SurfaceRun:
    values: np.ndarray  # (V, T_raw)
    tr: float
    subject_id: str = ""
    run_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValidationError(f"run values must be (V, T), got {values.shape}")
        if values.shape[1] < 2:
            raise ValidationError("a run needs at least 2 time points")
        if not self.tr > 0:
            raise ValidationError("tr must be > 0")
        if np.isnan(values).any():
            raise ValidationError("NaN in run values")
        object.__setattr__(self, "values", values)

    @property
    def n_vertices(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def replace(self, values: np.ndarray, tr: float | None = None) -> "SurfaceRun":
        return SurfaceRun(values, self.tr if tr is None else tr, self.subject_id, self.run_id)


@dataclass(frozen=True, eq=False)
class FlatClip:
    frames: np.ndarray  # (T, H, W)
    start_second: float = 0.0

    @property
    def shape(self):
        return self.frames.shape


def _zscore(x: np.ndarray, axis, mean=None, std=None) -> np.ndarray:
    if mean is None:
        mean = x.mean(axis=axis, keepdims=True)
    if std is None:
        std = x.std(axis=axis, ddof=STD_DDOF, keepdims=True)
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, (x - mean) / safe, 0.0)


def znorm_vertices(run: SurfaceRun, stats: tuple | None = None) -> SurfaceRun:
    """Z-score each vertex time series.

    ``stats`` optionally supplies ``(mean, std)`` column vectors computed from
    another run, which lets a clean reference be mapped into the same units as
    its noisy observation.
    """
    values = np.asarray(run.values, dtype=np.float64)
    if stats is None:
        out = _zscore(values, axis=1)
    else:
        out = _zscore(values, axis=1, mean=stats[0], std=stats[1])
    return run.replace(out)


def vertex_stats(run: SurfaceRun) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(run.values, dtype=np.float64)
    return values.mean(axis=1, keepdims=True), values.std(axis=1, ddof=STD_DDOF, keepdims=True)


def resample_time(run: SurfaceRun, tr_out: float = 1.0) -> SurfaceRun:
    """Linearly interpolate each vertex onto ``0, tr_out, 2 tr_out, ...``.

    The output stops at the last raw sample; nothing is extrapolated.
    """
    if not tr_out > 0:
        raise ValueError("tr_out must be > 0")
    if tr_out == run.tr:
        return run
    n_raw = run.n_frames
    duration = (n_raw - 1) * run.tr
    n_out = int(math.floor(duration / tr_out + 1e-9)) + 1
    pos = np.arange(n_out) * (tr_out / run.tr)
    near = np.round(pos)
    pos = np.where(np.abs(pos - near) < 1e-9, near, pos)
    pos = np.clip(pos, 0.0, n_raw - 1)
    left = np.minimum(np.floor(pos).astype(np.int64), n_raw - 2)
    frac = pos - left
    values = np.asarray(run.values, dtype=np.float64)
    out = values[:, left] * (1.0 - frac) + values[:, left + 1] * frac
    return run.replace(out, tr=tr_out)


def normalize_frames(
    frames: np.ndarray, valid: np.ndarray, stats: tuple | None = None
) -> np.ndarray:
    """Z-score each ``(H, W)`` frame of ``(T, H, W)`` over its valid pixels."""
    frames = np.asarray(frames, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if frames.shape[-2:] != valid.shape:
        raise DimensionError("frame and valid mask shapes differ")
    if int(valid.sum()) < 2:
        raise ValidationError("frame normalization needs at least 2 valid pixels")
    if np.any(frames[..., ~valid] != 0):
        raise ValidationError("background pixels must be exactly 0")
    inner = frames[..., valid]  # (T, n_valid)
    if stats is None:
        z = _zscore(inner, axis=-1)
    else:
        z = _zscore(inner, axis=-1, mean=stats[0], std=stats[1])
    out = np.zeros_like(frames)
    out[..., valid] = z
    return out


def frame_stats(frames: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inner = np.asarray(frames, dtype=np.float64)[..., valid]
    return inner.mean(axis=-1, keepdims=True), inner.std(axis=-1, ddof=STD_DDOF, keepdims=True)


def frame_norm(frame: FlatFrame) -> FlatFrame:
    return FlatFrame(normalize_frames(frame.pixels, frame.valid), frame.valid)


def extract_clips(
    frames: np.ndarray, starts, clip_len: int = CLIP_LEN, tr: float = 1.0
) -> list[FlatClip]:
    """Contiguous ``clip_len`` windows of ``frames`` beginning at each start."""
    total = frames.shape[0]
    clips = []
    for s in starts:
        s = int(s)
        if s < 0 or s + clip_len > total:
            raise RangeError(f"clip [{s}, {s + clip_len}) outside run of length {total}")
        clips.append(FlatClip(frames[s : s + clip_len], start_second=s * tr))
    return clips


def preprocess_run(
    run: SurfaceRun,
    grid: ResampleGrid,
    tr_out: float = 1.0,
    reference: np.ndarray | None = None,
):
    """Full chain from a surface run to normalized ``(T, H, W)`` flat frames.

    With ``reference`` (same shape as ``run.values``), the reference signal is
    pushed through the same chain using the statistics of ``run`` and the pair
    ``(frames, reference_frames)`` is returned. Because every step is affine
    with shared statistics, ``frames - reference_frames`` is exactly the
    contribution of ``run.values - reference``.
    """
    vstats = vertex_stats(run)
    z = znorm_vertices(run)
    z = resample_time(z, tr_out)
    flat = resample_frames(grid, z.values)
    fstats = frame_stats(flat, grid.valid_pixel)
    frames = normalize_frames(flat, grid.valid_pixel)
    if reference is None:
        return frames
    ref = znorm_vertices(run.replace(reference), stats=vstats)
    ref = resample_time(ref, tr_out)
    ref_flat = resample_frames(grid, ref.values)
    ref_frames = normalize_frames(ref_flat, grid.valid_pixel, stats=fstats)
    return frames, ref_frames
