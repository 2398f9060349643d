"""Loss/gradient entry points, the pretraining loop and reconstruction."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

from ..errors import ConfigurationError, GridMismatchError, InsufficientDataError
from ..token import MaskPlan, PatchLayout, build_layout, make_mask, patchify, unpatchify
from .checkpoint import read_checkpoint, write_checkpoint
from .model import MaeConfig, MaskedAutoencoder, visible_ids
from .optim import TrainState, adamw_step, decay_mask, lr_at, peak_lr

log = logging.getLogger(__name__)

__all__ = [
    "PretrainConfig",
    "PretrainResult",
    "forward",
    "backward",
    "step_masks",
    "pretrain",
    "reconstruct",
    "save_model",
    "load_model",
]


@dataclass
class PretrainConfig:
    model: MaeConfig = field(default_factory=MaeConfig)
    clip_len: int = 16
    batch_size: int = 32
    base_lr: float = 1e-3
    warmup_steps: int = 31_000
    total_steps: int = 625_000
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    mask_ratio: float = 0.9
    num_visible: int | None = None
    seed: int = 0
    grad_replicas: int = 1

    @property
    def peak_lr(self) -> float:
        return peak_lr(self.base_lr, self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        d["model"] = MaeConfig(**d.get("model", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class PretrainResult:
    model: MaskedAutoencoder
    state: TrainState
    losses: list[float]
    lrs: list[float]


def _as_tensor(x, model: MaskedAutoencoder) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _tokens(batch, layout: PatchLayout) -> np.ndarray:
    return patchify(np.asarray(batch), layout).tokens


def forward(model: MaskedAutoencoder, tokens, plans: list[MaskPlan], target=None):
    """Predictions for masked tokens ``(B, Nm, P)`` and the valid-pixel MSE."""
    x = _as_tensor(tokens, model)
    tgt = None if target is None else _as_tensor(target, model)
    vis = visible_ids(plans)
    pred, loss = model(x, vis, tgt)
    masked = torch.as_tensor(np.stack([pl.masked_tokens() for pl in plans]))
    pred_masked = torch.gather(pred, 1, masked[..., None].expand(-1, -1, pred.shape[-1]))
    return pred_masked, loss


def backward(
    model: MaskedAutoencoder, tokens, plans: list[MaskPlan], target=None, loss_scale: float = 1.0
) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss and gradients of ``loss_scale * loss`` w.r.t. every parameter."""
    model.zero_grad(set_to_none=True)
    _, loss = forward(model, tokens, plans, target)
    (loss * loss_scale).backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    return float(loss.detach()), grads


def mask_seed(seed: int, step: int, index: int) -> int:
    state = np.random.SeedSequence([seed, step, index]).generate_state(2, dtype=np.uint64)
    return int(state[0]) << 64 | int(state[1])


def step_masks(
    layout: PatchLayout, seed: int, step: int, batch: int, ratio: float, num_visible=None
) -> list[MaskPlan]:
    return [
        make_mask(layout, ratio, mask_seed(seed, step, i), num_visible) for i in range(batch)
    ]


def init_model(config: MaeConfig, layout: PatchLayout, seed: int, dtype=torch.float32):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MaskedAutoencoder(config, layout)
    return model.to(dtype)


def _reduce_grads(parts: list[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    # fixed summation order keeps replica averaging deterministic
    out = {k: v.clone() for k, v in parts[0].items()}
    for g in parts[1:]:
        for k in out:
            out[k] += g[k]
    for k in out:
        out[k] /= len(parts)
    return out


def pretrain(
    config: PretrainConfig,
    batches: Iterable,
    valid_pixel: np.ndarray,
    steps: int | None = None,
    resume: str | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
    grid_hash: str = "",
) -> PretrainResult:
    """Train from ``batches`` of ``(B, T, H, W)`` clips.

    Masks are a pure function of ``(seed, step, sample)`` and the model is
    initialized from ``seed``, so a single-producer data stream gives a
    byte-identical loss trace. On ``resume`` the first ``state.step`` batches
    are consumed and discarded to realign the stream.
    """
    steps = config.total_steps if steps is None else steps
    if steps > config.total_steps:
        raise ConfigurationError(f"steps={steps} exceeds schedule length {config.total_steps}")
    layout = build_layout(valid_pixel, config.model.p_t, config.model.p, config.clip_len)
    if resume is not None:
        model, state, meta = load_model(resume)
        if grid_hash and meta.get("grid_hash") and meta["grid_hash"] != grid_hash:
            raise GridMismatchError("checkpoint was trained on a different grid")
    else:
        model = init_model(config.model, layout, config.seed)
        state = TrainState(seed=config.seed, config=config.to_dict())
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    decay = decay_mask(model.named_parameters())
    it = iter(batches)
    for skipped in range(state.step):
        if next(it, None) is None:
            raise InsufficientDataError(f"data source ended while skipping to step {skipped}")

    losses, lrs = [], []
    peak = config.peak_lr
    while state.step < steps:
        batch = next(it, None)
        if batch is None:
            raise InsufficientDataError(
                f"data source exhausted at step {state.step}; {steps} steps requested"
            )
        batch = np.asarray(batch)
        tokens = _tokens(batch, layout)
        plans = step_masks(
            layout, config.seed, state.step, len(batch), config.mask_ratio, config.num_visible
        )
        if config.grad_replicas > 1:
            chunks = np.array_split(np.arange(len(batch)), config.grad_replicas)
            parts, lvals = [], []
            for idx in chunks:
                lv, g = backward(model, tokens[idx], [plans[i] for i in idx])
                parts.append(g)
                lvals.append(lv)
            loss, grads = float(np.mean(lvals)), _reduce_grads(parts)
        else:
            loss, grads = backward(model, tokens, plans)
        lr = lr_at(state.step, peak, config.warmup_steps, config.total_steps)
        adamw_step(
            state,
            {n: params[n].data for n in names},
            grads,
            lr=lr,
            wd=config.weight_decay,
            betas=config.betas,
            eps=config.eps,
            decay=decay,
        )
        losses.append(loss)
        lrs.append(lr)
        if on_step is not None:
            on_step(state.step, loss, lr)
    model.zero_grad(set_to_none=True)
    state.config = config.to_dict()
    state.config["grid_hash"] = grid_hash
    return PretrainResult(model, state, losses, lrs)


@torch.no_grad()
def reconstruct(model: MaskedAutoencoder, clip, plan: MaskPlan) -> np.ndarray:
    """Clip with masked patches replaced by predictions; visible ones pass through."""
    layout = model.layout
    frames = np.asarray(getattr(clip, "frames", clip))
    tokens = patchify(frames, layout).tokens
    x = _as_tensor(tokens[None], model)
    vis = visible_ids([plan])
    pred, _ = model(x, vis)
    out = tokens.astype(np.float64, copy=True)
    masked = plan.masked_tokens()
    out[masked] = pred[0, masked].double().numpy()
    return unpatchify(out, layout)


# ---------------------------------------------------------------- persistence


def save_model(path, model: MaskedAutoencoder, state: TrainState, extra: dict | None = None):
    layout = model.layout
    meta = {
        "format": "FMCKPT1",
        "model": model.config.to_dict(),
        "step": state.step,
        "seed": state.seed,
        "train": state.config,
        "grid_hash": (extra or {}).get("grid_hash", state.config.get("grid_hash", "")),
        "clip_len": layout.clip_shape[0],
    }
    if extra:
        meta.update(extra)
    tensors = {"layout.valid_pixel": layout.valid_pixel.astype(np.float32)}
    for name, p in model.named_parameters():
        tensors[f"param.{name}"] = p.detach().float().numpy()
    for name in state.exp_avg:
        tensors[f"adam.m.{name}"] = state.exp_avg[name].float().numpy()
        tensors[f"adam.v.{name}"] = state.exp_avg_sq[name].float().numpy()
    write_checkpoint(path, meta, tensors)


def load_model(path) -> tuple[MaskedAutoencoder, TrainState, dict]:
    meta, tensors = read_checkpoint(path)
    config = MaeConfig(**meta["model"])
    valid = tensors["layout.valid_pixel"] > 0.5
    layout = build_layout(valid, config.p_t, config.p, meta["clip_len"])
    model = init_model(config, layout, seed=0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(tensors[f"param.{name}"]))
    state = TrainState(step=int(meta["step"]), seed=int(meta["seed"]), config=meta.get("train", {}))
    for name, _ in model.named_parameters():
        if f"adam.m.{name}" in tensors:
            state.exp_avg[name] = torch.from_numpy(tensors[f"adam.m.{name}"])
            state.exp_avg_sq[name] = torch.from_numpy(tensors[f"adam.v.{name}"])
    return model, state, meta
