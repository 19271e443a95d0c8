"""Per-channel min-max scaling for the five signals (V_x, V_y, omega_r, T, delta_f)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateChannel

CHANNELS = ("v_x", "v_y", "omega_r", "torque", "steer")
N_STATE = 3
N_INPUT = 2


@dataclass(frozen=True)
class NormalizationSpec:
    mins: tuple
    maxs: tuple

    def __post_init__(self):
        if len(self.mins) != len(CHANNELS) or len(self.maxs) != len(CHANNELS):
            raise ValueError("normalization needs 5 channels")
        for name, lo, hi in zip(CHANNELS, self.mins, self.maxs):
            if not hi > lo:
                raise DegenerateChannel(f"channel {name}: max ({hi}) must exceed min ({lo})")

    @classmethod
    def fit(cls, data) -> "NormalizationSpec":
        """Fit from an ``(N, 5)`` array of raw samples."""
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[1] != len(CHANNELS) or len(data) == 0:
            raise ValueError(f"expected non-empty (N, 5) data, got {data.shape}")
        return cls(tuple(float(v) for v in data.min(axis=0)),
                   tuple(float(v) for v in data.max(axis=0)))

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.mins)

    @property
    def span(self) -> np.ndarray:
        return np.array(self.maxs) - np.array(self.mins)

    def normalize(self, v, channels=slice(None)):
        return (np.asarray(v, dtype=float) - self.lo[channels]) / self.span[channels]

    def denormalize(self, v, channels=slice(None)):
        return np.asarray(v, dtype=float) * self.span[channels] + self.lo[channels]

    def normalize_state(self, x):
        return self.normalize(x, slice(0, N_STATE))

    def denormalize_state(self, x):
        return self.denormalize(x, slice(0, N_STATE))

    def normalize_input(self, u):
        return self.normalize(u, slice(N_STATE, None))

    def denormalize_input(self, u):
        return self.denormalize(u, slice(N_STATE, None))

    def to_dict(self) -> dict:
        return {"mins": list(self.mins), "maxs": list(self.maxs)}

    @classmethod
    def from_dict(cls, d) -> "NormalizationSpec":
        return cls(tuple(float(v) for v in d["mins"]), tuple(float(v) for v in d["maxs"]))
