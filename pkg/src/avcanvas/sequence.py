"""Token sequences with per-token coordinates, timesteps and segment tags."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigError, ShapeError


class Segment(IntEnum):
    GEN_VIDEO = 0
    GEN_AUDIO = 1
    REF_VIDEO = 2
    REF_AUDIO = 3


GEN_SEGMENTS = (Segment.GEN_VIDEO, Segment.GEN_AUDIO)
REF_SEGMENTS = (Segment.REF_VIDEO, Segment.REF_AUDIO)


@dataclass
class TokenSequence:
    features: np.ndarray  # (N, P)
    coords: np.ndarray  # (N, 3) float, target-grid units
    timesteps: np.ndarray  # (N,)
    segments: np.ndarray  # (N,) Segment values

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.timesteps = np.asarray(self.timesteps, dtype=np.float64).reshape(-1)
        self.segments = np.asarray(self.segments, dtype=np.int8).reshape(-1)
        n = self.features.shape[0]
        if not (self.coords.shape[0] == self.timesteps.shape[0] == self.segments.shape[0] == n):
            raise ShapeError(
                f"token fields disagree in length: features {n}, coords {self.coords.shape[0]}, "
                f"timesteps {self.timesteps.shape[0]}, segments {self.segments.shape[0]}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @classmethod
    def empty(cls, dim: int) -> "TokenSequence":
        return cls(np.zeros((0, dim), np.float32), np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int8))

    @property
    def is_ref(self) -> np.ndarray:
        return np.isin(self.segments, [int(s) for s in REF_SEGMENTS])

    @property
    def is_gen(self) -> np.ndarray:
        return ~self.is_ref

    def gen_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_gen)

    def ref_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_ref)

    def gen_timestep(self) -> float | None:
        ts = self.timesteps[self.is_gen]
        return float(ts[0]) if ts.size else None

    def validate(self) -> None:
        if np.any(~np.isfinite(self.coords)):
            raise ConfigError("non-finite token coordinates")
        if np.any((self.timesteps < 0) | (self.timesteps > 1)):
            raise ConfigError("token timesteps must lie in [0, 1]")
        if np.any(self.timesteps[self.is_ref] != 0.0):
            raise ConfigError("reference tokens must carry timestep exactly 0")
        gen_ts = self.timesteps[self.is_gen]
        if gen_ts.size and np.any(gen_ts != gen_ts[0]):
            raise ConfigError("generation tokens must share one timestep")

    def with_features(self, features: np.ndarray) -> "TokenSequence":
        return TokenSequence(features, self.coords, self.timesteps, self.segments)

    def with_gen_timestep(self, t: float) -> "TokenSequence":
        ts = np.where(self.is_gen, float(t), 0.0)
        return TokenSequence(self.features, self.coords, ts, self.segments)

    def select(self, index) -> "TokenSequence":
        index = np.asarray(index)
        return TokenSequence(self.features[index], self.coords[index], self.timesteps[index], self.segments[index])

    @staticmethod
    def concat(*parts: "TokenSequence") -> "TokenSequence":
        return TokenSequence(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.coords for p in parts]),
            np.concatenate([p.timesteps for p in parts]),
            np.concatenate([p.segments for p in parts]),
        )


@dataclass
class StrengthField:
    """Scale on generation-query -> reference-key attention.

    Effective strength per generation token is ``global_ * local``; an absent
    local map means all ones.
    """

    global_: float = 1.0
    local: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.global_) or self.global_ < 0:
            raise ConfigError(f"strength must be finite and >= 0, got {self.global_}")
        if self.local is not None:
            self.local = np.asarray(self.local, dtype=np.float64).reshape(-1)
            if np.any(~np.isfinite(self.local)) or np.any(self.local < 0):
                raise ConfigError("local strength map must be finite and >= 0")

    def resolve(self, n_gen: int) -> np.ndarray:
        if self.local is None:
            return np.full(n_gen, float(self.global_))
        if self.local.shape[0] != n_gen:
            raise ShapeError(f"local strength map has {self.local.shape[0]} entries for {n_gen} generation tokens")
        return float(self.global_) * self.local

    def is_identity(self) -> bool:
        return self.global_ == 1.0 and (self.local is None or bool(np.all(self.local == 1.0)))
