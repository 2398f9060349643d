"""Power-law fits of reconstruction loss against dataset size."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .errors import InsufficientDataError, ValidationError

__all__ = [
    "ScalePoint",
    "PowerLawFit",
    "select_points",
    "fit_power_law",
    "predict",
    "relative_residuals",
    "read_runs_csv",
    "PowerLawRegressor",
]


@dataclass(frozen=True)
class ScalePoint:
    n: float
    loss: float
    epoch: int

    def __post_init__(self):
        if not self.n > 0 or not self.loss > 0:
            raise ValidationError("scale points need n > 0 and loss > 0")


@dataclass(frozen=True)
class PowerLawFit:
    """``loss = a * n ** b`` with ``r2`` measured in log-log space."""

    a: float
    b: float
    r2: float
    n_points: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def select_points(traces: dict) -> list[ScalePoint]:
    """Best (lowest) test loss per dataset size; earliest epoch wins ties.

    ``traces`` maps size ``n`` to a sequence of per-epoch test losses, or to a
    mapping ``{epoch: loss}``.
    """
    points = []
    for n in sorted(traces):
        trace = traces[n]
        if isinstance(trace, dict):
            items = sorted(trace.items())
        else:
            items = list(enumerate(trace))
        if not items:
            raise ValidationError(f"empty loss trace for n={n}")
        epoch, loss = min(items, key=lambda kv: (kv[1], kv[0]))
        points.append(ScalePoint(float(n), float(loss), int(epoch)))
    return points


def fit_power_law(points, use_first_k: int | None = None) -> PowerLawFit:
    """Least-squares line through ``(log n, log loss)``.

    ``use_first_k`` keeps only the k smallest dataset sizes.
    """
    pts = sorted(points, key=lambda p: p.n)
    if use_first_k is not None:
        pts = pts[:use_first_k]
    if len(pts) < 2:
        raise InsufficientDataError("a power-law fit needs at least 2 points")
    x = np.log([p.n for p in pts])
    y = np.log([p.loss for p in pts])
    if np.ptp(x) == 0:
        raise InsufficientDataError("all points share the same dataset size")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return PowerLawFit(a=math.exp(intercept), b=float(slope), r2=min(max(r2, 0.0), 1.0), n_points=len(pts))


def predict(fit: PowerLawFit, n):
    n = np.asarray(n, dtype=np.float64)
    if np.any(n <= 0):
        raise ValueError("n must be > 0")
    out = fit.a * n**fit.b
    return float(out) if out.ndim == 0 else out


def relative_residuals(fit: PowerLawFit, points) -> np.ndarray:
    """``(observed - predicted) / predicted``; positive means above the curve."""
    n = np.array([p.n for p in points])
    obs = np.array([p.loss for p in points])
    pred = predict(fit, n)
    return (obs - pred) / pred


def read_runs_csv(path) -> dict:
    """Read ``size,epoch,test_loss`` rows into ``{size: {epoch: loss}}``."""
    traces: dict = defaultdict(dict)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"size", "epoch", "test_loss"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            traces[float(row["size"])][int(row["epoch"])] = float(row["test_loss"])
    return dict(traces)


class PowerLawRegressor(RegressorMixin, BaseEstimator):
    """``fit(n, loss)`` / ``predict(n)`` wrapper; ``score`` is R^2 in log space."""

    def __init__(self, use_first_k=None):
        self.use_first_k = use_first_k

    def fit(self, X, y):
        n = np.asarray(X, dtype=np.float64).reshape(-1)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if n.shape != y.shape:
            raise ValueError("X and y must have the same length")
        self.fit_ = fit_power_law(
            [ScalePoint(a, b, 0) for a, b in zip(n, y)], use_first_k=self.use_first_k
        )
        self.coef_ = self.fit_.a
        self.exponent_ = self.fit_.b
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return np.atleast_1d(predict(self.fit_, np.asarray(X, dtype=np.float64).reshape(-1)))

    def score(self, X, y, sample_weight=None):
        check_is_fitted(self, "fit_")
        ly = np.log(np.asarray(y, dtype=np.float64).reshape(-1))
        lp = np.log(self.predict(X))
        ss_tot = ((ly - ly.mean()) ** 2).sum()
        return 1.0 - ((ly - lp) ** 2).sum() / ss_tot if ss_tot else 1.0
