"""Z-score normalization fitted on training data only.

Statistics use the population standard deviation (divide by N).  Features
whose training variance is zero are dropped with a warning and recorded, so
a fitted normalizer also fixes the model's input column set.  The fitted
state serializes to JSON with full float precision.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = ["Normalizer", "ZeroVarianceWarning"]


class ZeroVarianceWarning(UserWarning):
    """A feature with zero training variance was dropped."""


@dataclass
class Normalizer:
    feature_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray  # boolean mask over feature_names
    target_mean: float
    target_std: float

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray, feature_names) -> "Normalizer":
        """Fit per-feature and target statistics.

        Args:
            x: (N, D) training feature rows.
            y: training target values (NaN entries are ignored).
        """
        feature_names = tuple(feature_names)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(feature_names):
            raise ValueError("x must be (N, D) matching feature_names")
        if x.shape[0] < 2:
            raise ValueError("need at least 2 rows to fit")
        y = np.asarray(y, dtype=np.float64)
        y = y[~np.isnan(y)]
        if y.size < 2:
            raise ValueError("need at least 2 target values to fit")
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        kept = std > 0.0
        for name, ok in zip(feature_names, kept):
            if not ok:
                warnings.warn(f"feature {name!r} has zero training variance; dropped", ZeroVarianceWarning)
        t_std = float(y.std())
        if t_std == 0.0:
            raise ValueError("target has zero variance on the training data")
        return cls(
            feature_names=feature_names,
            mean=mean,
            std=std,
            kept=kept,
            target_mean=float(y.mean()),
            target_std=t_std,
        )

    @property
    def kept_names(self) -> tuple[str, ...]:
        return tuple(n for n, ok in zip(self.feature_names, self.kept) if ok)

    @property
    def dropped_names(self) -> tuple[str, ...]:
        return tuple(n for n, ok in zip(self.feature_names, self.kept) if not ok)

    def _index(self, feature: str) -> int:
        try:
            return self.feature_names.index(feature)
        except ValueError:
            raise KeyError(f"unknown feature {feature!r}") from None

    def transform(self, value, feature: str):
        """Z-score a value of one named feature."""
        i = self._index(feature)
        if not self.kept[i]:
            raise KeyError(f"feature {feature!r} was dropped (zero variance)")
        return (value - self.mean[i]) / self.std[i]

    def inverse_transform(self, value, feature: str):
        i = self._index(feature)
        if not self.kept[i]:
            raise KeyError(f"feature {feature!r} was dropped (zero variance)")
        return value * self.std[i] + self.mean[i]

    def transform_matrix(self, x: np.ndarray) -> np.ndarray:
        """Normalize an (N, D) raw matrix, returning only the kept columns."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(self.feature_names):
            raise ValueError("matrix width must match the fitted feature set")
        return (x[:, self.kept] - self.mean[self.kept]) / self.std[self.kept]

    def transform_target(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def inverse_transform_target(self, z):
        return np.asarray(z, dtype=np.float64) * self.target_std + self.target_mean

    def to_json(self) -> str:
        return json.dumps(
            {
                "feature_names": list(self.feature_names),
                "mean": self.mean.tolist(),
                "std": self.std.tolist(),
                "kept": [bool(k) for k in self.kept],
                "target_mean": self.target_mean,
                "target_std": self.target_std,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Normalizer":
        raw = json.loads(text)
        return cls(
            feature_names=tuple(raw["feature_names"]),
            mean=np.array(raw["mean"], dtype=np.float64),
            std=np.array(raw["std"], dtype=np.float64),
            kept=np.array(raw["kept"], dtype=bool),
            target_mean=float(raw["target_mean"]),
            target_std=float(raw["target_std"]),
        )

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "Normalizer":
        with open(path) as fh:
            return cls.from_json(fh.read())
