"""Spatiotemporal masked autoencoder over non-empty flat-map patches."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError, DimensionError, NumericFault
from ..token import MaskPlan, PatchLayout

__all__ = ["MaeConfig", "Block", "MaskedAutoencoder", "masked_mse", "count_params"]


@dataclass
class MaeConfig:
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    p_t: int = 16
    p: int = 16
    mlp_ratio: float = 4.0
    norm_pix_loss: bool = False
    ln_eps: float = 1e-6
    pos_init_std: float = 0.02

    def __post_init__(self):
        if self.enc_depth < 1 or self.dec_depth < 1:
            raise ConfigurationError("depths must be >= 1")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ConfigurationError("model dims must be divisible by head counts")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def vit_b(cls, p_t: int = 2, p: int = 16) -> "MaeConfig":
        """ViT-B/16 encoder with a 6-block, 384-wide decoder."""
        return cls(768, 12, 12, 384, 6, 12, p_t, p)


class Block(nn.Module):
    """Pre-norm transformer block with full (non-causal) self-attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, eps: float = 1e-6):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, C = x.shape
        h = self.heads
        qkv = self.qkv(self.norm1(x)).reshape(B, N, 3, h, C // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (C // h) ** -0.5
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(B, N, C)
        x = x + self.proj(out)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def masked_mse(pred, target, weight) -> torch.Tensor:
    """Mean squared error over the positions where ``weight`` is True."""
    diff = torch.where(weight, pred - target, torch.zeros((), dtype=pred.dtype))
    count = weight.sum()
    if int(count) == 0:
        return diff.sum() * 0.0
    return (diff * diff).sum() / count


class MaskedAutoencoder(nn.Module):
    """Encoder sees only visible tokens; decoder fills masked slots with a
    shared mask token. Position embeddings are factorized as
    ``temporal[t] + spatial[s]`` in both stacks.
    """

    def __init__(self, config: MaeConfig, layout: PatchLayout):
        super().__init__()
        if (layout.p_t, layout.p) != (config.p_t, config.p):
            raise ConfigurationError("layout patch sizes differ from model config")
        self.config = config
        self.layout = layout
        c = config
        P = layout.patch_dim
        self.patch_embed = nn.Linear(P, c.enc_dim)
        self.enc_pos_t = nn.Parameter(torch.zeros(layout.grid_t, c.enc_dim))
        self.enc_pos_s = nn.Parameter(torch.zeros(layout.n_spatial, c.enc_dim))
        self.enc_blocks = nn.ModuleList(
            Block(c.enc_dim, c.enc_heads, c.mlp_ratio, c.ln_eps) for _ in range(c.enc_depth)
        )
        self.enc_norm = nn.LayerNorm(c.enc_dim, eps=c.ln_eps)
        self.dec_embed = nn.Linear(c.enc_dim, c.dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(c.dec_dim))
        self.dec_pos_t = nn.Parameter(torch.zeros(layout.grid_t, c.dec_dim))
        self.dec_pos_s = nn.Parameter(torch.zeros(layout.n_spatial, c.dec_dim))
        self.dec_blocks = nn.ModuleList(
            Block(c.dec_dim, c.dec_heads, c.mlp_ratio, c.ln_eps) for _ in range(c.dec_depth)
        )
        self.dec_norm = nn.LayerNorm(c.dec_dim, eps=c.ln_eps)
        self.dec_pred = nn.Linear(c.dec_dim, P)

        idx = layout.token_index
        self.register_buffer("token_t", torch.as_tensor(idx[:, 0]), persistent=False)
        self.register_buffer("token_s", torch.as_tensor(idx[:, 1]), persistent=False)
        self.register_buffer(
            "pixel_valid", torch.as_tensor(layout.pixel_valid), persistent=False
        )
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        for pos in (self.enc_pos_t, self.enc_pos_s, self.dec_pos_t, self.dec_pos_s):
            nn.init.normal_(pos, std=self.config.pos_init_std)
        nn.init.zeros_(self.mask_token)

    # positions -----------------------------------------------------------

    def enc_pos(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.enc_pos_t[self.token_t[token_ids]] + self.enc_pos_s[self.token_s[token_ids]]

    def dec_pos(self) -> torch.Tensor:
        return self.dec_pos_t[self.token_t] + self.dec_pos_s[self.token_s]

    # passes ---------------------------------------------------------------

    def encode(self, tokens: torch.Tensor, visible: torch.Tensor | None = None) -> torch.Tensor:
        """Encode ``(B, N, P)`` tokens; only ``visible`` ``(B, Nv)`` ids if given."""
        tokens = torch.where(self.pixel_valid, tokens, torch.zeros((), dtype=tokens.dtype))
        B, N, _ = tokens.shape
        if visible is None:
            visible = torch.arange(N, device=tokens.device).expand(B, N)
        x = torch.gather(tokens, 1, visible[..., None].expand(-1, -1, tokens.shape[-1]))
        x = self.patch_embed(x) + self.enc_pos(visible)
        for blk in self.enc_blocks:
            x = blk(x)
        return self.enc_norm(x)

    def decode(self, latent: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        B = latent.shape[0]
        N = self.layout.n_tokens
        y = self.dec_embed(latent)
        full = self.mask_token.to(y.dtype).expand(B, N, -1)
        full = full.scatter(1, visible[..., None].expand(-1, -1, y.shape[-1]), y)
        x = full + self.dec_pos()
        for blk in self.dec_blocks:
            x = blk(x)
        return self.dec_pred(self.dec_norm(x))

    def forward(
        self,
        tokens: torch.Tensor,
        visible: torch.Tensor,
        target: torch.Tensor | None = None,
        step: int | None = None,
    ):
        """Returns ``(pred (B, N, P), loss)``; loss over masked valid pixels only."""
        if tokens.ndim != 3 or tokens.shape[1:] != (self.layout.n_tokens, self.layout.patch_dim):
            raise DimensionError(
                f"tokens {tuple(tokens.shape)} do not match layout "
                f"({self.layout.n_tokens}, {self.layout.patch_dim})"
            )
        pred = self.decode(self.encode(tokens, visible), visible)
        if target is None:
            target = tokens
        if self.config.norm_pix_loss:
            target = self._normalize_target(target)
        masked = torch.ones(pred.shape[:2], dtype=torch.bool, device=pred.device)
        masked.scatter_(1, visible, False)
        loss = masked_mse(pred, target, masked[..., None] & self.pixel_valid)
        if not torch.isfinite(loss):
            where = f" at step {step}" if step is not None else ""
            raise NumericFault(f"non-finite loss{where}")
        return pred, loss

    def _normalize_target(self, target: torch.Tensor) -> torch.Tensor:
        valid = self.pixel_valid
        n = valid.sum(-1, keepdim=True).clamp(min=1)
        t = torch.where(valid, target, torch.zeros((), dtype=target.dtype))
        mean = t.sum(-1, keepdim=True) / n
        var = torch.where(valid, (t - mean) ** 2, torch.zeros((), dtype=t.dtype)).sum(-1, keepdim=True) / n
        return (t - mean) / (var + 1e-6).sqrt()


def visible_ids(plans: list[MaskPlan], device=None) -> torch.Tensor:
    return torch.as_tensor(np.stack([pl.visible_tokens() for pl in plans]), device=device)


def count_params(config: MaeConfig, layout: PatchLayout) -> dict[str, int]:
    """Parameter counts split into encoder and decoder."""
    with torch.device("meta"):
        model = MaskedAutoencoder(config, layout)
    enc = dec = 0
    for name, p in model.named_parameters():
        if name.startswith(("patch_embed", "enc_")):
            enc += p.numel()
        else:
            dec += p.numel()
    return {"encoder": enc, "decoder": dec, "total": enc + dec}


def param_count_text(config: MaeConfig, layout: PatchLayout) -> str:
    c = count_params(config, layout)
    return "encoder {:.1f}M, decoder {:.1f}M, total {:.1f}M".format(
        *(c[k] / 1e6 for k in ("encoder", "decoder", "total"))
    )
