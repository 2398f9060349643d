"""Frozen-feature evaluation: attentive probe, baselines and the sweep protocol."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.model_selection import ParameterGrid
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigurationError, DimensionError, ValidationError
from .mae.optim import TrainState, adamw_step, decay_mask, lr_at
from .token import PatchLayout, patchify

__all__ = [
    "ProbeConfig",
    "ParcelMap",
    "AttentivePooler",
    "PatchEmbedding",
    "attentive_pool",
    "connectome_features",
    "patch_embed_baseline",
    "encoder_features",
    "ProbeClassifier",
    "ConnectomeTransformer",
    "SweepResult",
    "run_sweep",
    "write_results_csv",
]

LR_SCALES = (0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0)
WEIGHT_DECAYS = (3e-4, 0.001, 0.01, 0.03, 0.1, 0.3, 1.0)


@dataclass
class ProbeConfig:
    classes: int = 2
    query_dim: int | None = None
    heads: int = 1
    epochs: int = 20
    batch_size: int = 128
    base_lr: float = 5e-4
    warmup_epochs: int = 2
    betas: tuple[float, float] = (0.9, 0.95)
    lr_scales: tuple[float, ...] = LR_SCALES
    weight_decays: tuple[float, ...] = WEIGHT_DECAYS
    seed: int = 0

    def __post_init__(self):
        if not self.lr_scales or not self.weight_decays:
            raise ConfigurationError("sweep grids must be non-empty")

    def grid(self) -> list[dict]:
        return [
            {"lr_scale": float(s), "weight_decay": float(w)}
            for s in self.lr_scales
            for w in self.weight_decays
        ]

    def effective_lr(self, lr_scale: float) -> float:
        return lr_scale * self.base_lr


@dataclass(frozen=True, eq=False)
class ParcelMap:
    labels: np.ndarray  # (H, W) ints, 0 = background
    n_parcels: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.min() < 0 or labels.max() > self.n_parcels:
            raise ValidationError("parcel labels must lie in 0..P")
        present = np.bincount(labels.ravel(), minlength=self.n_parcels + 1)[1:]
        if np.any(present == 0):
            raise ValidationError(
                f"parcels {np.flatnonzero(present == 0)[:5] + 1}... have no pixels"
            )
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, labels) -> "ParcelMap":
        labels = np.asarray(labels)
        return cls(labels, int(labels.max()))


# ---------------------------------------------------------------- modules


class AttentivePooler(nn.Module):
    """Cross-attention of one learned query over a token sequence."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ConfigurationError("probe dim must be divisible by heads")
        self.heads = heads
        self.query = nn.Parameter(torch.zeros(dim))
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        nn.init.normal_(self.query, std=0.02)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        B, N, D = x.shape
        h, d = self.heads, D // self.heads
        k = self.key(x).reshape(B, N, h, d).transpose(1, 2)  # (B, h, N, d)
        v = self.value(x).reshape(B, N, h, d).transpose(1, 2)
        q = self.query.reshape(1, h, 1, d)
        w = ((q * k).sum(-1) / math.sqrt(d)).softmax(dim=-1)  # (B, h, N)
        pooled = (w[..., None] * v).sum(-2).reshape(B, D)
        return (pooled, w) if return_weights else pooled


class PatchEmbedding(nn.Module):
    """Learned linear patch embedding plus factorized position tables."""

    def __init__(self, layout: PatchLayout, dim: int):
        super().__init__()
        self.layout = layout
        self.proj = nn.Linear(layout.patch_dim, dim)
        self.pos_t = nn.Parameter(torch.zeros(layout.grid_t, dim))
        self.pos_s = nn.Parameter(torch.zeros(layout.n_spatial, dim))
        nn.init.normal_(self.pos_t, std=0.02)
        nn.init.normal_(self.pos_s, std=0.02)
        idx = layout.token_index
        self.register_buffer("token_t", torch.as_tensor(idx[:, 0]), persistent=False)
        self.register_buffer("token_s", torch.as_tensor(idx[:, 1]), persistent=False)
        self.register_buffer("pixel_valid", torch.as_tensor(layout.pixel_valid), persistent=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-2:] != (self.layout.n_tokens, self.layout.patch_dim):
            raise DimensionError("tokens do not match the embedding layout")
        tokens = torch.where(self.pixel_valid, tokens, torch.zeros((), dtype=tokens.dtype))
        return self.proj(tokens) + self.pos_t[self.token_t] + self.pos_s[self.token_s]


class _ProbeNet(nn.Module):
    def __init__(self, kind: str, in_dim: int, classes: int, heads: int, layout=None, embed_dim=None):
        super().__init__()
        self.kind = kind
        self.embed = None
        self.pool = None
        if kind == "patch_embed":
            self.embed = PatchEmbedding(layout, embed_dim)
            in_dim = embed_dim
        if kind in ("attentive", "patch_embed"):
            self.pool = AttentivePooler(in_dim, heads)
        self.head = nn.Linear(in_dim, classes)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        if self.embed is not None:
            x = self.embed(x)
        if self.pool is not None:
            x = self.pool(x)
        return self.head(x)


# ---------------------------------------------------------------- functional ops


@torch.no_grad()
def attentive_pool(embeddings, pooler: AttentivePooler, return_weights: bool = False):
    """Pool ``(N, D)`` or ``(B, N, D)`` token features to ``D`` vectors."""
    x = torch.as_tensor(np.asarray(embeddings), dtype=pooler.query.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1] < 1:
        raise DimensionError("attentive pooling needs at least one token")
    pooled, w = pooler(x, return_weights=True)
    pooled, w = pooled.numpy(), w.numpy()
    if single:
        pooled, w = pooled[0], w[0]
    return (pooled, w) if return_weights else pooled


def _parcel_matrix(parcels: ParcelMap) -> np.ndarray:
    """``(P, H*W)`` averaging operator."""
    lab = parcels.labels.ravel()
    P = parcels.n_parcels
    M = np.zeros((P, lab.size))
    inside = lab > 0
    M[lab[inside] - 1, np.flatnonzero(inside)] = 1.0
    return M / M.sum(axis=1, keepdims=True)


def connectome_features(clip, parcels: ParcelMap) -> np.ndarray:
    """Strict upper triangle of the parcel Pearson correlation matrix.

    Accepts ``(T, H, W)`` or ``(n, T, H, W)``. Parcels with zero temporal
    variance correlate as 0 with everything.
    """
    x = np.asarray(getattr(clip, "frames", clip), dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[-2:] != parcels.labels.shape:
        raise DimensionError("clip frames and parcel map differ in shape")
    if x.shape[1] < 2:
        raise ValueError("connectome features need at least 2 time points")
    if parcels.n_parcels < 2:
        raise ValueError("connectome features need at least 2 parcels")
    M = _parcel_matrix(parcels)
    ts = x.reshape(x.shape[0], x.shape[1], -1) @ M.T  # (n, T, P)
    ts = ts - ts.mean(axis=1, keepdims=True)
    norm = np.sqrt((ts * ts).sum(axis=1, keepdims=True))
    z = np.where(norm > 1e-12 * np.sqrt(x.shape[1]), ts / np.where(norm > 0, norm, 1.0), 0.0)
    corr = np.einsum("ntp,ntq->npq", z, z)
    iu = np.triu_indices(parcels.n_parcels, k=1)
    feats = corr[:, iu[0], iu[1]]
    return feats[0] if single else feats


@torch.no_grad()
def patch_embed_baseline(clip, layout: PatchLayout, embedding: PatchEmbedding) -> np.ndarray:
    """Token features from the learned patch+position embedding (no blocks)."""
    tokens = patchify(clip, layout).tokens
    x = torch.as_tensor(tokens, dtype=embedding.proj.weight.dtype)
    return embedding(x).numpy()


@torch.no_grad()
def encoder_features(model, clips, batch_size: int = 64) -> np.ndarray:
    """Frozen encoder token features of fully observed clips ``(n, N, D)``."""
    clips = np.asarray(clips, dtype=np.float32)
    was_training = model.training
    model.eval()
    out = []
    for lo in range(0, len(clips), batch_size):
        tokens = patchify(clips[lo : lo + batch_size], model.layout).tokens
        out.append(model.encode(torch.as_tensor(tokens)).numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.layout.n_tokens, model.config.enc_dim))


# ---------------------------------------------------------------- estimators


class ProbeClassifier(ClassifierMixin, BaseEstimator):
    """Probe trained with AdamW, linear warmup then cosine decay.

    ``kind`` selects the input: ``"attentive"`` takes token features
    ``(n, N, D)``, ``"linear"`` takes flat features ``(n, F)`` and
    ``"patch_embed"`` takes clips ``(n, T, H, W)`` (requires ``layout``) and
    learns its own patch embedding jointly with the attentive pooler.
    """

    def __init__(
        self,
        kind="attentive",
        lr_scale=1.0,
        weight_decay=0.01,
        base_lr=5e-4,
        epochs=20,
        batch_size=128,
        warmup_epochs=2,
        heads=1,
        embed_dim=32,
        layout=None,
        betas=(0.9, 0.95),
        seed=0,
    ):
        self.kind = kind
        self.lr_scale = lr_scale
        self.weight_decay = weight_decay
        self.base_lr = base_lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.heads = heads
        self.embed_dim = embed_dim
        self.layout = layout
        self.betas = betas
        self.seed = seed

    def _inputs(self, X) -> torch.Tensor:
        X = np.asarray(X, dtype=np.float32)
        if self.kind == "linear":
            if X.ndim != 2:
                X = X.reshape(len(X), -1)
        elif self.kind == "attentive":
            if X.ndim != 3:
                raise DimensionError("attentive probe expects (n, N, D) token features")
        elif self.kind == "patch_embed":
            if self.layout is None:
                raise ConfigurationError("patch_embed probe needs a layout")
            if X.ndim == 4:
                X = patchify(X, self.layout).tokens
        else:
            raise ConfigurationError(f"unknown probe kind {self.kind!r}")
        if not np.isfinite(X).all():
            raise ValueError("probe inputs contain NaN or Inf")
        return torch.as_tensor(X)

    def fit(self, X, y):
        x = self._inputs(X)
        y = np.asarray(y)
        if len(x) == 0 or len(x) != len(y):
            raise ConfigurationError("probe training split is empty or mislabeled")
        self.classes_ = unique_labels(y)
        target = torch.as_tensor(np.searchsorted(self.classes_, y))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            net = _ProbeNet(
                self.kind, x.shape[-1], len(self.classes_), self.heads, self.layout, self.embed_dim
            )
        params = dict(net.named_parameters())
        decay = decay_mask(net.named_parameters())
        state = TrainState(seed=self.seed)
        n = len(x)
        per_epoch = math.ceil(n / self.batch_size)
        total = max(self.epochs * per_epoch, 1)
        warmup = min(self.warmup_epochs * per_epoch, total - 1)
        lr_peak = self.lr_scale * self.base_lr
        rng = np.random.default_rng(self.seed)
        step = 0
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, self.batch_size):
                idx = torch.as_tensor(order[lo : lo + self.batch_size])
                net.zero_grad(set_to_none=True)
                loss = F.cross_entropy(net(x[idx]), target[idx])
                loss.backward()
                grads = {k: p.grad if p.grad is not None else torch.zeros_like(p) for k, p in params.items()}
                lr = lr_at(step, lr_peak, warmup, total)
                adamw_step(
                    state,
                    {k: p.data for k, p in params.items()},
                    grads,
                    lr=lr,
                    wd=self.weight_decay,
                    betas=tuple(self.betas),
                    decay=decay,
                )
                step += 1
        net.zero_grad(set_to_none=True)
        self.net_ = net
        self.n_iter_ = step
        return self

    @torch.no_grad()
    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return self.net_(self._inputs(X)).numpy()

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class ConnectomeTransformer(TransformerMixin, BaseEstimator):
    """Clips ``(n, T, H, W)`` to connectome feature vectors ``(n, P(P-1)/2)``."""

    def __init__(self, parcels=None):
        self.parcels = parcels

    def fit(self, X, y=None):
        if self.parcels is None:
            raise ConfigurationError("ConnectomeTransformer needs a parcel map")
        self.parcel_map_ = (
            self.parcels if isinstance(self.parcels, ParcelMap) else ParcelMap.from_labels(self.parcels)
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "parcel_map_")
        return connectome_features(np.asarray(X), self.parcel_map_)


# ---------------------------------------------------------------- sweep


@dataclass
class SweepResult:
    best_params: dict
    best_val_accuracy: float
    test_accuracy: float
    rows: list[dict] = field(default_factory=list)
    best_estimator: ProbeClassifier | None = None


def _fit_score(estimator, params, train, val):
    est = clone(estimator).set_params(**params)
    est.fit(*train)
    return est, float(est.score(*val))


def run_sweep(estimator: ProbeClassifier, splits: dict, config: ProbeConfig | None = None, n_jobs: int = 1) -> SweepResult:
    """Grid over learning-rate scale x weight decay; select on validation.

    ``splits`` maps ``"train"``, ``"val"`` and ``"test"`` to ``(X, y)``. The
    test split is scored once, for the selected configuration only. Ties on
    validation accuracy go to the earliest grid point.
    """
    config = config or ProbeConfig()
    for name in ("train", "val", "test"):
        if name not in splits or len(splits[name][0]) == 0:
            raise ConfigurationError(f"split {name!r} is missing or empty")
    grid = [
        {"lr_scale": g["lr_scale"], "weight_decay": g["weight_decay"]}
        for g in ParameterGrid({"lr_scale": list(config.lr_scales), "weight_decay": list(config.weight_decays)})
    ]
    base = clone(estimator).set_params(
        base_lr=config.base_lr,
        epochs=config.epochs,
        batch_size=config.batch_size,
        warmup_epochs=config.warmup_epochs,
        heads=config.heads,
        betas=tuple(config.betas),
        seed=config.seed,
    )
    if n_jobs == 1:
        fitted = [_fit_score(base, g, splits["train"], splits["val"]) for g in grid]
    else:
        from joblib import Parallel, delayed

        fitted = Parallel(n_jobs=n_jobs)(
            delayed(_fit_score)(base, g, splits["train"], splits["val"]) for g in grid
        )
    rows = []
    for g, (_, acc) in zip(grid, fitted):
        rows.append({**g, "effective_lr": config.effective_lr(g["lr_scale"]), "val_accuracy": acc, "test_accuracy": None})
    best = int(np.argmax([r["val_accuracy"] for r in rows]))
    best_est = fitted[best][0]
    test_acc = float(best_est.score(*splits["test"]))
    rows[best]["test_accuracy"] = test_acc
    return SweepResult(
        best_params=dict(grid[best]),
        best_val_accuracy=rows[best]["val_accuracy"],
        test_accuracy=test_acc,
        rows=rows,
        best_estimator=best_est,
    )


def write_results_csv(result: SweepResult, path) -> None:
    cols = ["lr_scale", "weight_decay", "effective_lr", "val_accuracy", "test_accuracy"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in result.rows:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in cols})
