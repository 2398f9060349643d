"""Synthetic flat meshes and surface-fMRI runs for desk-scale experiments.

Runs follow a block design. Each class owns a set of spatial components
(Gaussian bumps on the flat mesh) that switch on during task blocks; shared
components fluctuate slowly in every class. The clean signal is scaled to unit
variance and white noise with standard deviation ``1 / snr`` is added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.spatial import Delaunay

from .flatgeo import FlatMesh, ResampleGrid
from .prep import CLIP_LEN, SurfaceRun, preprocess_run

__all__ = [
    "SynthSpec",
    "make_mesh",
    "make_run",
    "make_parcels",
    "make_clip_dataset",
    "task_clip_starts",
]


@dataclass
class SynthSpec:
    n_vertices: int = 600
    radius_mm: float = 20.0
    hole_frac: float = 0.25
    cut_frac: float = 0.0
    n_components: int = 4
    n_shared: int = 2
    n_classes: int = 2
    profiles: np.ndarray | None = None  # (C, K) amplitudes, default one-hot by k % C
    snr: float = 1.0
    n_frames: int = 120
    tr: float = 1.0
    block_len: int = 20
    bump_width_mm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("need at least one latent component")
        if not self.snr > 0:
            raise ValueError("snr must be > 0")
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if self.n_vertices < 3:
            raise ValueError("mesh needs at least 3 vertices")

    def class_profiles(self) -> np.ndarray:
        if self.profiles is not None:
            prof = np.asarray(self.profiles, dtype=np.float64)
            if prof.shape != (self.n_classes, self.n_components):
                raise ValueError("profiles must be (n_classes, n_components)")
            return prof
        k = np.arange(self.n_components)
        return (k[None, :] % self.n_classes == np.arange(self.n_classes)[:, None]).astype(float)


def make_mesh(spec: SynthSpec) -> FlatMesh:
    """Triangulated annulus ("disc with a hole") in the z = 0 plane.

    With ``cut_frac > 0`` a wedge of vertices is lifted off the plane and so
    becomes invalid, mimicking relaxation cuts.
    """
    rng = np.random.default_rng([spec.seed, 0xF1A7])
    n = spec.n_vertices
    R = spec.radius_mm
    r0 = spec.hole_frac * R
    # boundary rings first so the annulus edges are well covered
    n_outer = min(max(n // 8, 3), n)
    n_inner = min(max(n // 16, 3), n - n_outer) if r0 > 0 else 0
    n_rand = n - n_outer - n_inner
    th_o = np.linspace(0, 2 * np.pi, n_outer, endpoint=False)
    th_i = np.linspace(0, 2 * np.pi, n_inner, endpoint=False) + np.pi / max(n_inner, 1)
    u = rng.uniform(size=n_rand)
    r = np.sqrt(u * (R**2 - r0**2) + r0**2) * 0.995 + 0.0025 * R
    th = rng.uniform(0, 2 * np.pi, size=n_rand)
    radius = np.concatenate([np.full(n_outer, R), np.full(n_inner, r0), r])
    theta = np.concatenate([th_o, th_i, th])
    xy = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    # slight anisotropy so the mesh is wider than tall, like a flat map
    xy[:, 0] *= 1.4

    tri = Delaunay(xy).simplices
    cen = xy[tri].mean(axis=1)
    cr = np.hypot(cen[:, 0] / 1.4, cen[:, 1])
    a, b, c = xy[tri[:, 0]], xy[tri[:, 1]], xy[tri[:, 2]]
    area = 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1]))
    keep = (cr > r0) & (area > 1e-9 * R * R)
    tri = np.sort(tri[keep], axis=1)
    tri = tri[np.lexsort(tri.T[::-1])]

    z = np.zeros(n)
    if spec.cut_frac > 0:
        ang = np.mod(np.arctan2(xy[:, 1], xy[:, 0] / 1.4), 2 * np.pi)
        z[ang < 2 * np.pi * spec.cut_frac] = 1.0
    xyz = np.column_stack([xy, z])
    return FlatMesh(xyz, tri, z == 0.0)


def _bumps(spec: SynthSpec, mesh: FlatMesh, count: int, salt: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, salt])
    candidates = np.flatnonzero(mesh.valid_vertex)
    centers = mesh.vertex_xyz[rng.choice(candidates, size=count, replace=len(candidates) < count), :2]
    d2 = ((mesh.vertex_xyz[None, :, :2] - centers[:, None, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2 * spec.bump_width_mm**2))


def _smooth_noise(rng, n: int, sigma: float) -> np.ndarray:
    x = gaussian_filter1d(rng.standard_normal(n + 8 * int(sigma)), sigma, mode="wrap")
    x = x[4 * int(sigma) : 4 * int(sigma) + n]
    return (x - x.mean()) / (x.std() + 1e-12)


def task_design(spec: SynthSpec, phase: int) -> np.ndarray:
    """On/off block indicator per frame (task blocks of ``block_len`` frames)."""
    t = np.arange(spec.n_frames) + phase
    return (t // spec.block_len) % 2 == 0


def make_run(spec: SynthSpec, class_id: int, mesh: FlatMesh, run_index: int = 0):
    """One synthetic run and its latent record.

    Returns ``(SurfaceRun, latent)`` where ``latent`` holds ``clean`` (V, T),
    ``spatial`` (K, V), ``temporal`` (K, T), ``amplitude`` (K,), ``noise`` and
    the boolean ``task_on`` design.
    """
    if not 0 <= class_id < spec.n_classes:
        raise ValueError(f"class_id {class_id} outside [0, {spec.n_classes})")
    T = spec.n_frames
    K, Ks = spec.n_components, spec.n_shared
    spatial = _bumps(spec, mesh, K + Ks, salt=1)
    rng = np.random.default_rng([spec.seed, 2, class_id, run_index])
    phase = int(rng.integers(0, 2 * spec.block_len))
    on = task_design(spec, phase)
    block = gaussian_filter1d(on.astype(float), 1.5, mode="nearest")
    temporal = np.empty((K + Ks, T))
    for k in range(K):
        temporal[k] = block + 0.2 * _smooth_noise(rng, T, 3.0)
    for k in range(K, K + Ks):
        temporal[k] = _smooth_noise(rng, T, 4.0)
    amplitude = np.concatenate([spec.class_profiles()[class_id], np.ones(Ks)])
    clean = np.einsum("k,kv,kt->vt", amplitude, spatial, temporal)
    clean /= clean.std() + 1e-12
    noise = rng.standard_normal(clean.shape)
    values = clean + noise / spec.snr
    run = SurfaceRun(values, spec.tr, subject_id=f"synth{spec.seed}", run_id=f"c{class_id}r{run_index}")
    latent = {
        "clean": clean,
        "spatial": spatial,
        "temporal": temporal,
        "amplitude": amplitude,
        "noise": noise / spec.snr,
        "task_on": on,
        "class_id": class_id,
    }
    return run, latent


def make_parcels(grid: ResampleGrid, n_parcels: int, seed: int = 0) -> np.ndarray:
    """Voronoi parcellation of the valid pixels; ``(H, W)`` ints, 0 = background."""
    valid = grid.valid_pixel
    coords = np.argwhere(valid)
    if n_parcels > len(coords):
        raise ValueError("more parcels than valid pixels")
    rng = np.random.default_rng(seed)
    seeds = coords[rng.choice(len(coords), size=n_parcels, replace=False)]
    d2 = ((coords[:, None, :] - seeds[None, :, :]) ** 2).sum(-1)
    labels = np.zeros(valid.shape, dtype=np.int32)
    labels[valid] = d2.argmin(axis=1) + 1
    return labels


def task_clip_starts(latent: dict, clip_len: int = CLIP_LEN, tr_out: float = 1.0, tr: float = 1.0):
    """Clip starts (in output frames) lying entirely inside a task block."""
    on = latent["task_on"]
    t_out = np.arange(int(np.floor((len(on) - 1) * tr / tr_out + 1e-9)) + 1) * tr_out
    on_out = on[np.minimum(np.round(t_out / tr).astype(int), len(on) - 1)]
    ok = np.array(
        [on_out[s : s + clip_len].all() for s in range(len(on_out) - clip_len + 1)], dtype=bool
    )
    return np.flatnonzero(ok)


def make_clip_dataset(
    spec: SynthSpec,
    mesh: FlatMesh,
    grid: ResampleGrid,
    runs_per_class: int,
    clips_per_run: int = 2,
    clip_len: int = CLIP_LEN,
    with_clean: bool = False,
    run_offset: int = 0,
):
    """Labeled, preprocessed task clips.

    Returns ``(clips (n, T, H, W) float32, labels (n,))`` and, with
    ``with_clean``, the clean-signal clips in the same units as a third item.
    """
    clips, labels, cleans = [], [], []
    for c in range(spec.n_classes):
        for r in range(runs_per_class):
            run, latent = make_run(spec, c, mesh, run_offset + r)
            frames, ref = preprocess_run(run, grid, reference=latent["clean"])
            starts = task_clip_starts(latent, clip_len, tr=spec.tr)
            if len(starts) == 0:
                raise ValueError("run too short to contain a full task block clip")
            rng = np.random.default_rng([spec.seed, 3, c, run_offset + r])
            for s in rng.choice(starts, size=min(clips_per_run, len(starts)), replace=False):
                clips.append(frames[s : s + clip_len])
                cleans.append(ref[s : s + clip_len])
                labels.append(c)
    out = (np.asarray(clips, dtype=np.float32), np.asarray(labels))
    if with_clean:
        return out + (np.asarray(cleans, dtype=np.float32),)
    return out
