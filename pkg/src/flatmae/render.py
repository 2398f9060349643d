"""PNG triptychs of masked input, prediction and target."""

from __future__ import annotations

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .data import read_shard
from .errors import GridMismatchError, RangeError
from .mae.train import load_model, reconstruct
from .token import make_mask, patchify, unpatchify

__all__ = ["GUTTER", "colorize", "triptych", "render", "panel_frames"]

GUTTER = 4
VMAX = 2.5
CMAP = "RdBu_r"
BACKGROUND = (0, 0, 0)
MASKED = (128, 128, 128)
GUTTER_RGB = (255, 255, 255)
FRAME_SPACING = 4

_LUT = (colormaps[CMAP](np.linspace(0.0, 1.0, 256))[:, :3] * 255).round().astype(np.uint8)


def colorize(frame: np.ndarray, valid: np.ndarray, hidden: np.ndarray | None = None) -> np.ndarray:
    """Map one ``(H, W)`` frame to RGB through a fixed diverging colormap."""
    idx = np.clip((frame + VMAX) / (2 * VMAX) * 255, 0, 255).round().astype(np.int64)
    rgb = _LUT[idx]
    rgb[~valid] = BACKGROUND
    if hidden is not None:
        rgb[hidden & valid] = MASKED
    return rgb


def panel_frames(T: int, spacing: int = FRAME_SPACING) -> list[int]:
    """Three frame indices ``spacing`` apart, centred in the clip."""
    span = 2 * spacing
    if T <= span:
        raise RangeError(f"clip of {T} frames cannot hold 3 frames {spacing} apart")
    t0 = (T - 1 - span) // 2
    return [t0, t0 + spacing, t0 + span]


def triptych(masked_in, prediction, target, valid, hidden) -> Image.Image:
    """3 x 3 grid: rows are frames, columns masked input / prediction / target."""
    T, H, W = target.shape
    g = GUTTER
    img = np.empty((3 * H + 4 * g, 3 * W + 4 * g, 3), dtype=np.uint8)
    img[:] = GUTTER_RGB
    for r, t in enumerate(panel_frames(T)):
        panels = [
            colorize(masked_in[t], valid, hidden[t]),
            colorize(prediction[t], valid),
            colorize(target[t], valid),
        ]
        for c, panel in enumerate(panels):
            y, x = g + r * (H + g), g + c * (W + g)
            img[y : y + H, x : x + W] = panel
    return Image.fromarray(img)


def render(checkpoint, shard_path, sample_index: int, out_path, seed: int = 0, mask_ratio=None, num_visible=None):
    """Render one clip of a shard through a trained checkpoint.

    Sample ``i`` is the clip starting at frame ``i * clip_len``.
    """
    model, _, meta = load_model(checkpoint)
    shard = read_shard(shard_path)
    ckpt_hash = meta.get("grid_hash") or ""
    if ckpt_hash and ckpt_hash != shard.grid_hash.hex():
        raise GridMismatchError("shard grid hash differs from the checkpoint's grid")
    layout = model.layout
    T, H, W = layout.clip_shape
    if shard.frames.shape[1:] != (H, W):
        raise GridMismatchError("shard frame size differs from the checkpoint layout")
    start = sample_index * T
    if sample_index < 0 or start + T > shard.frames.shape[0]:
        raise RangeError(f"sample {sample_index} outside shard of {shard.frames.shape[0]} frames")
    clip = shard.frames[start : start + T]
    train = meta.get("train", {})
    ratio = train.get("mask_ratio", 0.9) if mask_ratio is None else mask_ratio
    nvis = train.get("num_visible") if num_visible is None else num_visible
    plan = make_mask(layout, ratio, seed, nvis)

    pred = reconstruct(model, clip, plan)
    tokens = patchify(clip, layout).tokens.astype(np.float64)
    hidden_tok = np.zeros_like(tokens)
    hidden_tok[plan.masked_tokens()] = 1.0
    hidden = unpatchify(hidden_tok, layout) > 0.5
    masked_in = np.where(hidden, 0.0, clip)
    img = triptych(masked_in, pred, clip, layout.valid_pixel, hidden)
    img.save(out_path, format="PNG", optimize=False)
    return img
