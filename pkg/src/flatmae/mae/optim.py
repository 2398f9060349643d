"""AdamW with decoupled weight decay and a linear-warmup cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from ..errors import NumericFault

__all__ = ["TrainState", "adamw_step", "lr_at", "peak_lr", "decay_mask"]


@dataclass
class TrainState:
    """Optimizer state. ``step`` counts completed updates."""

    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    seed: int = 0
    config: dict = field(default_factory=dict)


def peak_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule: ``base_lr * batch_size / 256``."""
    return base_lr * batch_size / 256


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if not 0 <= warmup < total:
        raise ValueError("warmup must be in [0, total)")
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def decay_mask(named_params) -> dict[str, bool]:
    """Weight decay on 2-D weight matrices only; not on biases, norms,
    position tables or the mask token."""
    return {
        name: p.ndim >= 2 and "pos_" not in name and name != "mask_token"
        for name, p in named_params
    }


@torch.no_grad()
def adamw_step(
    state: TrainState,
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    lr: float,
    wd: float = 0.05,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
    decay: dict[str, bool] | None = None,
) -> TrainState:
    """One in-place AdamW update of ``params``; returns ``state``.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` happens before and
    independently of the moment-based update. Bias correction uses the
    1-based step count.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericFault(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        if wd and (decay is None or decay.get(name, True)):
            p.mul_(1.0 - lr * wd)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state
