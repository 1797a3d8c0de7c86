"""Regression scores and min-max property scaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ModelStateError


def r2_score(y_true, y_pred) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot (per column when 2D)."""
    t = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {p.shape}")
    if t.shape[0] < 2:
        raise ValueError("need at least two samples")
    ss_res = np.sum((t - p) ** 2, axis=0)
    ss_tot = np.sum((t - t.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 1.0 - ss_res / ss_tot
    return r2 if np.ndim(r2) else float(r2)


def mse(y_true, y_pred) -> float:
    return float(np.mean((np.asarray(y_true, dtype=np.float64) - np.asarray(y_pred, dtype=np.float64)) ** 2))


@dataclass
class MinMaxScaler:
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def fit(self, y) -> "MinMaxScaler":
        y = np.asarray(y, dtype=np.float64)
        self.lo = y.min(axis=0)
        self.hi = y.max(axis=0)
        return self

    @property
    def fitted(self) -> bool:
        return self.lo is not None and self.hi is not None

    def _span(self):
        if not self.fitted:
            raise ModelStateError("normalization bounds are missing")
        span = np.asarray(self.hi, dtype=np.float64) - self.lo
        # constant columns map to 0
        return np.where(span > 0, span, 1.0)

    def transform(self, y) -> np.ndarray:
        span = self._span()
        return (np.asarray(y, dtype=np.float64) - self.lo) / span

    def inverse(self, y) -> np.ndarray:
        span = self._span()
        return np.asarray(y, dtype=np.float64) * span + self.lo

    def to_dict(self) -> dict:
        self._span()
        return {"lo": [float(v) for v in np.atleast_1d(self.lo)], "hi": [float(v) for v in np.atleast_1d(self.hi)]}

    @classmethod
    def from_dict(cls, d: dict | None) -> "MinMaxScaler":
        if not d:
            return cls()
        return cls(np.asarray(d["lo"], dtype=np.float64), np.asarray(d["hi"], dtype=np.float64))
