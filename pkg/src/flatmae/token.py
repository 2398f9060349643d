"""Spacetime patchification, empty-patch exclusion and tube masking.

Tokens are ordered time-major: token ``n = t * S + s`` where ``s`` indexes the
non-empty spatial patches in row-major order. Each token vector is the
``(p_t, p, p)`` block flattened in C order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .flatgeo import ResampleGrid

__all__ = [
    "PatchLayout",
    "MaskPlan",
    "PatchTensor",
    "build_layout",
    "patchify",
    "unpatchify",
    "make_mask",
    "mask_rng",
    "num_visible_spatial",
]


@dataclass(frozen=True, eq=False)
class PatchLayout:
    p_t: int
    p: int
    grid_t: int
    grid_h: int
    grid_w: int
    nonempty_spatial: np.ndarray  # (S, 2) (row, col), row-major
    valid_pixel_count: np.ndarray  # (S,)
    valid_pixel: np.ndarray  # (H, W)

    @property
    def n_spatial(self) -> int:
        return len(self.nonempty_spatial)

    @property
    def n_tokens(self) -> int:
        return self.grid_t * self.n_spatial

    @property
    def patch_dim(self) -> int:
        return self.p_t * self.p * self.p

    @property
    def clip_shape(self) -> tuple[int, int, int]:
        return (self.grid_t * self.p_t, self.grid_h * self.p, self.grid_w * self.p)

    @property
    def token_index(self) -> np.ndarray:
        """``(N, 2)`` array of (t_index, spatial_index) per token."""
        t = np.repeat(np.arange(self.grid_t), self.n_spatial)
        s = np.tile(np.arange(self.n_spatial), self.grid_t)
        return np.stack([t, s], axis=1)

    @property
    def pixel_valid(self) -> np.ndarray:
        """``(N, p_t*p*p)`` bool mask of valid pixels for each token."""
        p = self.p
        blocks = self.valid_pixel.reshape(self.grid_h, p, self.grid_w, p).transpose(0, 2, 1, 3)
        rows, cols = self.nonempty_spatial.T
        spatial = blocks[rows, cols].reshape(self.n_spatial, 1, p * p)
        spatial = np.broadcast_to(spatial, (self.n_spatial, self.p_t, p * p))
        spatial = spatial.reshape(self.n_spatial, self.patch_dim)
        return np.tile(spatial, (self.grid_t, 1))


@dataclass(frozen=True, eq=False)
class PatchTensor:
    tokens: np.ndarray  # (..., N, P)
    pixel_valid: np.ndarray  # (N, P)
    index: np.ndarray  # (N, 2)


@dataclass(frozen=True, eq=False)
class MaskPlan:
    """Visible and masked spacetime patches for one sample.

    ``visible_spatial`` and ``masked_spatial`` are sorted spatial indices; the
    tube constraint means each applies to every time index.
    """

    visible_spatial: np.ndarray
    masked_spatial: np.ndarray
    grid_t: int
    ratio: float
    seed: int

    @property
    def visible(self) -> list[tuple[int, int]]:
        return [(t, int(s)) for t in range(self.grid_t) for s in self.visible_spatial]

    @property
    def masked(self) -> list[tuple[int, int]]:
        return [(t, int(s)) for t in range(self.grid_t) for s in self.masked_spatial]

    def visible_tokens(self) -> np.ndarray:
        n_sp = len(self.visible_spatial) + len(self.masked_spatial)
        return (np.arange(self.grid_t)[:, None] * n_sp + self.visible_spatial[None, :]).ravel()

    def masked_tokens(self) -> np.ndarray:
        n_sp = len(self.visible_spatial) + len(self.masked_spatial)
        return (np.arange(self.grid_t)[:, None] * n_sp + self.masked_spatial[None, :]).ravel()


def _valid_of(grid) -> np.ndarray:
    if isinstance(grid, ResampleGrid):
        return grid.valid_pixel
    return np.asarray(grid, dtype=bool)


def build_layout(grid, p_t: int, p: int, T: int) -> PatchLayout:
    """Enumerate the non-empty spatial patches of a grid (or bool mask)."""
    valid = _valid_of(grid)
    H, W = valid.shape
    if p < 1 or p_t < 1:
        raise ConfigurationError("patch sizes must be >= 1")
    if H % p or W % p:
        raise ConfigurationError(f"grid {H}x{W} is not divisible by patch size {p}")
    if T % p_t:
        raise ConfigurationError(f"clip length {T} is not divisible by p_t={p_t}")
    gh, gw = H // p, W // p
    counts = valid.reshape(gh, p, gw, p).sum(axis=(1, 3))
    rows, cols = np.nonzero(counts)  # row-major order
    return PatchLayout(
        p_t=p_t,
        p=p,
        grid_t=T // p_t,
        grid_h=gh,
        grid_w=gw,
        nonempty_spatial=np.stack([rows, cols], axis=1),
        valid_pixel_count=counts[rows, cols],
        valid_pixel=valid,
    )


def patchify(clip, layout: PatchLayout) -> PatchTensor:
    """``(T, H, W)`` or ``(B, T, H, W)`` clip to ``(..., N, P)`` tokens."""
    x = np.asarray(getattr(clip, "frames", clip))
    if x.shape[-3:] != layout.clip_shape:
        raise DimensionError(f"clip shape {x.shape[-3:]} does not match layout {layout.clip_shape}")
    lead = x.shape[:-3]
    pt, p = layout.p_t, layout.p
    x = x.reshape(*lead, layout.grid_t, pt, layout.grid_h, p, layout.grid_w, p)
    nd = len(lead)
    perm = list(range(nd)) + [nd + i for i in (0, 2, 4, 1, 3, 5)]
    x = x.transpose(perm)  # (..., gt, gh, gw, pt, p, p)
    rows, cols = layout.nonempty_spatial.T
    x = x[..., rows, cols, :, :, :]  # (..., gt, S, pt, p, p)
    tokens = x.reshape(*lead, layout.n_tokens, layout.patch_dim)
    pixel_valid = layout.pixel_valid
    tokens = np.where(pixel_valid, tokens, np.zeros((), dtype=tokens.dtype))
    return PatchTensor(tokens=tokens, pixel_valid=pixel_valid, index=layout.token_index)


def unpatchify(tokens: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Inverse of :func:`patchify`; background and empty patches become 0."""
    tokens = np.asarray(getattr(tokens, "tokens", tokens))
    lead = tokens.shape[:-2]
    if tokens.shape[-2:] != (layout.n_tokens, layout.patch_dim):
        raise DimensionError("token array does not match layout")
    pt, p = layout.p_t, layout.p
    tokens = np.where(layout.pixel_valid, tokens, np.zeros((), dtype=tokens.dtype))
    blocks = np.zeros(
        (*lead, layout.grid_t, layout.grid_h, layout.grid_w, pt, p, p), dtype=tokens.dtype
    )
    rows, cols = layout.nonempty_spatial.T
    blocks[..., rows, cols, :, :, :] = tokens.reshape(
        *lead, layout.grid_t, layout.n_spatial, pt, p, p
    )
    nd = len(lead)
    perm = list(range(nd)) + [nd + i for i in (0, 3, 1, 4, 2, 5)]
    return blocks.transpose(perm).reshape(*lead, *layout.clip_shape)


def mask_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(key=int(seed) % (1 << 128)))


def num_visible_spatial(n_spatial: int, ratio: float) -> int:
    # tiny epsilon so that e.g. (1 - 0.75) * 8 = 1.9999999999999998 floors to 2
    return int(math.floor((1.0 - ratio) * n_spatial + 1e-9))


def make_mask(
    layout: PatchLayout, ratio: float = 0.9, seed: int = 0, num_visible: int | None = None
) -> MaskPlan:
    """Tube mask: sample visible spatial patches uniformly without replacement."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError("masking ratio must be in [0, 1)")
    S = layout.n_spatial
    n_vis = num_visible_spatial(S, ratio) if num_visible is None else int(num_visible)
    if not 0 <= n_vis <= S:
        raise ConfigurationError(f"num_visible={n_vis} outside [0, {S}]")
    rng = mask_rng(seed)
    vis = np.sort(rng.permutation(S)[:n_vis])
    keep = np.ones(S, dtype=bool)
    keep[vis] = False
    return MaskPlan(
        visible_spatial=vis,
        masked_spatial=np.flatnonzero(keep),
        grid_t=layout.grid_t,
        ratio=float(ratio),
        seed=int(seed),
    )
