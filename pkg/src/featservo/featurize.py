"""Observation featurizers, per-channel standardization and the feature pyramid.

Observations and feature maps are plain float64 arrays in channel-major
layout, ``(channels, height, width)``; batched variants carry a leading
sample axis. A pyramid is a list of maps, level 0 first, each level at half
the resolution of the one before it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEATURIZERS = ("pixel", "chroma")

# Reference colours for the chroma featurizer, normalised RGB. Ordered as
# target family, distractor family, road, ground.
CHROMA_REFERENCES = np.array(
    [
        [0.80, 0.15, 0.15],
        [0.15, 0.25, 0.75],
        [0.35, 0.35, 0.35],
        [0.30, 0.50, 0.25],
    ]
)
CHROMA_SIGMA = 0.15
STD_FLOOR = 1e-6


def n_feature_channels(featurizer: str) -> int:
    if featurizer == "pixel":
        return 3
    if featurizer == "chroma":
        return len(CHROMA_REFERENCES) + 1
    raise ValueError(f"unknown featurizer {featurizer!r}; expected one of {FEATURIZERS}")


@dataclass(frozen=True)
class Standardizer:
    """Per-channel affine normalisation ``(y - mean) / std``."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ValueError(f"mean/std length mismatch: {mean.shape} vs {std.shape}")
        if np.any(std <= 0) or not np.all(np.isfinite(std)) or not np.all(np.isfinite(mean)):
            raise ValueError("standardizer needs finite mean and positive finite std")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls, n_channels: int) -> "Standardizer":
        return cls(np.zeros(n_channels), np.ones(n_channels))

    @property
    def n_channels(self) -> int:
        return self.mean.shape[0]

    def apply(self, raw: np.ndarray) -> np.ndarray:
        """Standardize ``(C, H, W)`` or ``(N, C, H, W)`` raw features."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-3] != self.n_channels:
            raise ValueError(f"expected {self.n_channels} channels, got {raw.shape[-3]}")
        shape = (-1, 1, 1)
        return (raw - self.mean.reshape(shape)) / self.std.reshape(shape)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def _check_obs(obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim not in (3, 4):
        raise ValueError(f"observation must be (C,H,W) or (N,C,H,W), got shape {obs.shape}")
    if obs.shape[-3] != 3:
        raise ValueError(f"featurizers expect RGB observations, got {obs.shape[-3]} channels")
    if not np.all(np.isfinite(obs)):
        raise ValueError("observation contains non-finite values")
    return obs


def _chroma_raw(obs: np.ndarray) -> np.ndarray:
    # colour axis moved last so the distance is a plain broadcast
    rgb = np.moveaxis(obs, -3, -1)[..., None, :]
    d2 = np.sum((rgb - CHROMA_REFERENCES) ** 2, axis=-1)
    match = np.exp(-d2 / (2.0 * CHROMA_SIGMA**2))
    match = np.moveaxis(match, -1, -3)
    gray = obs.mean(axis=-3)
    gy, gx = np.gradient(gray, axis=(-2, -1))
    grad = np.sqrt(gx**2 + gy**2)[..., None, :, :]
    return np.concatenate([match, grad], axis=-3)


def raw_features(obs: np.ndarray, featurizer: str) -> np.ndarray:
    """Unstandardized features of one observation or a batch of them."""
    obs = _check_obs(obs)
    if featurizer == "pixel":
        return obs.copy()
    if featurizer == "chroma":
        return _chroma_raw(obs)
    raise ValueError(f"unknown featurizer {featurizer!r}; expected one of {FEATURIZERS}")


def featurize(obs: np.ndarray, featurizer: str, standardizer: Standardizer) -> np.ndarray:
    """Level-0 standardized feature map(s) of ``obs``."""
    return standardizer.apply(raw_features(obs, featurizer))


def fit_standardizer(raw: np.ndarray) -> Standardizer:
    """Population mean/std per channel over all pixels of all samples.

    ``raw`` is ``(N, C, H, W)`` (or a single ``(C, H, W)`` map).
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3:
        raw = raw[None]
    if raw.ndim != 4 or raw.shape[0] == 0:
        raise ValueError("fit_standardizer needs a nonempty (N, C, H, W) dataset")
    axes = (0, 2, 3)
    mean = raw.mean(axis=axes)
    std = raw.std(axis=axes)
    return Standardizer(mean, np.maximum(std, STD_FLOOR))


def _as_float(a) -> np.ndarray:
    a = np.asarray(a)
    return a if a.dtype in (np.float32, np.float64) else a.astype(np.float64)


def downsample(fm: np.ndarray) -> np.ndarray:
    """2x2 mean pooling over the last two axes (float32 input stays float32)."""
    fm = _as_float(fm)
    h, w = fm.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"cannot halve odd resolution {h}x{w}")
    out = fm[..., 0::2, 0::2] + fm[..., 0::2, 1::2]
    out += fm[..., 1::2, 0::2]
    out += fm[..., 1::2, 1::2]
    out *= 0.25
    return out


def build_pyramid(fm: np.ndarray, levels: int) -> list[np.ndarray]:
    """Levels ``0..levels``; works on single maps and batches alike."""
    fm = _as_float(fm)
    if levels < 0:
        raise ValueError("pyramid depth must be >= 0")
    r0 = fm.shape[-1]
    if fm.shape[-2] != r0:
        raise ValueError(f"feature maps must be square, got {fm.shape[-2:]}")
    if r0 % (2**levels):
        raise ValueError(f"resolution {r0} is not divisible by 2**{levels}")
    pyr = [fm]
    for _ in range(levels):
        pyr.append(downsample(pyr[-1]))
    return pyr
