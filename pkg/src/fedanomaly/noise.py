"""Noise specifications shared by training (aggregator) and inference (bank)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .rng import Csprng

FAMILIES = ("none", "gaussian", "laplace")
DEFAULT_NOISE_MULTIPLIER = 10.0


@dataclass(frozen=True)
class NoiseSpec:
    """``family`` plus its parameter (Gaussian std or Laplace scale).

    ``scale`` multiplies the parameter when sampling. Training noise uses
    the clip bound as scale, so ``param`` reads as a noise multiplier; for
    inference the scale is 1 and ``param`` is absolute.
    """
    family: str = "none"
    param: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown noise family {self.family!r}")
        if not self.param >= 0:
            raise ConfigError("noise parameter must be >= 0")

    @property
    def active(self) -> bool:
        return self.family != "none" and self.param > 0

    @classmethod
    def parse(cls, text: str) -> NoiseSpec:
        """``none``, ``gaussian:0.2`` or ``laplace:0.1``."""
        text = text.strip().lower()
        if text in ("", "none"):
            return cls()
        family, _, value = text.partition(":")
        try:
            return cls(family, float(value))
        except ValueError:
            raise ConfigError(f"bad noise spec {text!r}") from None

    def __str__(self) -> str:
        return "none" if self.family == "none" else f"{self.family}:{self.param:g}"

    def sample(self, rng: Csprng, shape, scale: float = 1.0) -> np.ndarray:
        if not self.active:
            return np.zeros(shape)
        width = self.param * scale
        if self.family == "gaussian":
            return rng.normal(shape, width)
        return rng.laplace(shape, width)

    def std(self, scale: float = 1.0) -> float:
        """Per-coordinate standard deviation of :meth:`sample`."""
        if not self.active:
            return 0.0
        width = self.param * scale
        return width if self.family == "gaussian" else width * np.sqrt(2.0)


def noise_default(clip: float, multiplier: float | None = None) -> float:
    """Absolute Gaussian std for training noise: ``multiplier * clip``.

    The default multiplier of 10 makes one clipped update (norm <= clip)
    small against the noise.
    """
    if not clip > 0:
        raise ConfigError("clip bound must be positive")
    return (DEFAULT_NOISE_MULTIPLIER if multiplier is None else multiplier) * clip
