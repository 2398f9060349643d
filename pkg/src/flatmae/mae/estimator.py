"""scikit-learn style wrapper around the masked autoencoder."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..errors import DimensionError
from ..token import make_mask, patchify
from .model import MaeConfig
from .train import PretrainConfig, forward, pretrain, reconstruct, step_masks


def _check_clips(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise DimensionError(f"expected clips shaped (n, T, H, W), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("clips contain NaN or Inf")
    return X


def _batches(X: np.ndarray, batch_size: int, seed: int):
    """Endless stream of shuffled batches drawn from an in-memory clip array."""
    rng = np.random.default_rng(seed)
    n = len(X)
    while True:
        order = rng.permutation(n)
        if n < batch_size:
            order = rng.choice(n, size=batch_size, replace=True)
        for lo in range(0, len(order) - batch_size + 1, batch_size):
            yield X[order[lo : lo + batch_size]]


class FlatMAE(TransformerMixin, BaseEstimator):
    """Masked autoencoder over flat-map clips.

    ``fit`` pretrains on ``(n, T, H, W)`` clips, ``transform`` returns frozen
    encoder token features ``(n, N, enc_dim)`` from fully observed inputs and
    ``reconstruct`` fills masked patches with predictions.
    """

    def __init__(
        self,
        valid_mask=None,
        enc_dim=64,
        enc_depth=4,
        enc_heads=4,
        dec_dim=32,
        dec_depth=2,
        dec_heads=4,
        p_t=16,
        p=16,
        mlp_ratio=4.0,
        norm_pix_loss=False,
        mask_ratio=0.9,
        num_visible=None,
        batch_size=32,
        base_lr=1e-3,
        warmup_steps=100,
        max_steps=1000,
        weight_decay=0.05,
        seed=0,
    ):
        self.valid_mask = valid_mask
        self.enc_dim = enc_dim
        self.enc_depth = enc_depth
        self.enc_heads = enc_heads
        self.dec_dim = dec_dim
        self.dec_depth = dec_depth
        self.dec_heads = dec_heads
        self.p_t = p_t
        self.p = p
        self.mlp_ratio = mlp_ratio
        self.norm_pix_loss = norm_pix_loss
        self.mask_ratio = mask_ratio
        self.num_visible = num_visible
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.max_steps = max_steps
        self.weight_decay = weight_decay
        self.seed = seed

    def _pretrain_config(self, clip_len: int) -> PretrainConfig:
        model = MaeConfig(
            enc_dim=self.enc_dim,
            enc_depth=self.enc_depth,
            enc_heads=self.enc_heads,
            dec_dim=self.dec_dim,
            dec_depth=self.dec_depth,
            dec_heads=self.dec_heads,
            p_t=self.p_t,
            p=self.p,
            mlp_ratio=self.mlp_ratio,
            norm_pix_loss=self.norm_pix_loss,
        )
        return PretrainConfig(
            model=model,
            clip_len=clip_len,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            warmup_steps=self.warmup_steps,
            total_steps=self.max_steps,
            weight_decay=self.weight_decay,
            mask_ratio=self.mask_ratio,
            num_visible=self.num_visible,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        X = _check_clips(X)
        valid = X.any(axis=(0, 1)) if self.valid_mask is None else np.asarray(self.valid_mask, bool)
        if valid.shape != X.shape[2:]:
            raise DimensionError("valid_mask shape does not match clip frames")
        config = self._pretrain_config(X.shape[1])
        result = pretrain(config, _batches(X, self.batch_size, self.seed), valid)
        self.model_ = result.model
        self.layout_ = result.model.layout
        self.loss_curve_ = result.losses
        self.n_iter_ = result.state.step
        return self

    @torch.no_grad()
    def transform(self, X):
        check_is_fitted(self, "model_")
        X = _check_clips(X)
        tokens = torch.as_tensor(patchify(X, self.layout_).tokens)
        return self.model_.encode(tokens).numpy()

    def reconstruct(self, X, seed: int = 0) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _check_clips(X)
        return np.stack(
            [
                reconstruct(self.model_, x, make_mask(self.layout_, self.mask_ratio, seed + i, self.num_visible))
                for i, x in enumerate(X)
            ]
        )

    @torch.no_grad()
    def score(self, X, y=None, seed: int = 0) -> float:
        """Negative masked reconstruction loss (higher is better)."""
        check_is_fitted(self, "model_")
        X = _check_clips(X)
        tokens = patchify(X, self.layout_).tokens
        plans = step_masks(self.layout_, seed, 0, len(X), self.mask_ratio, self.num_visible)
        _, loss = forward(self.model_, tokens, plans)
        return -float(loss)

    @classmethod
    def from_model(cls, model, **params) -> "FlatMAE":
        c = model.config
        est = cls(
            valid_mask=model.layout.valid_pixel,
            enc_dim=c.enc_dim, enc_depth=c.enc_depth, enc_heads=c.enc_heads,
            dec_dim=c.dec_dim, dec_depth=c.dec_depth, dec_heads=c.dec_heads,
            p_t=c.p_t, p=c.p, mlp_ratio=c.mlp_ratio, norm_pix_loss=c.norm_pix_loss,
            **params,
        )
        est.model_ = model
        est.layout_ = model.layout
        return est
