"""Deterministic synthetic Voronoi segmentation samples.

Every sample is a pure function of ``(cfg, index)``: a split-mix hash of the
pair seeds a private numpy generator, so no global RNG state is touched and
samples can be produced in any order.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .pyramid import DONT_CARE

_MASK64 = (1 << 64) - 1
NOISE_SIGMA = 0.05


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    key = splitmix64(splitmix64(seed & _MASK64) ^ (index & _MASK64))
    return np.random.Generator(np.random.PCG64(key))


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 6
    n_sites: int = 20
    dont_care_rate: float = 0.1

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError("n_sites must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 <= self.dont_care_rate < 1.0:
            raise ValueError("dont_care_rate must lie in [0, 1)")


def base_colors(num_classes: int) -> np.ndarray:
    """``(C, 3)`` RGB colours evenly spaced on the hue circle."""
    return np.array([colorsys.hsv_to_rgb(k / num_classes, 0.8, 0.9) for k in range(num_classes)])


def voronoi_labels(sites: np.ndarray, site_class: np.ndarray, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    d = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    return site_class[d.argmin(-1)]


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of a different label."""
    b = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def gen_sample(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(rgb, labels)``: float32 ``(3, H, W)`` and int64 ``(H, W)``."""
    rng = sample_rng(cfg.seed, index)
    sites = rng.uniform(0, 1, size=(cfg.n_sites, 2)) * (cfg.height, cfg.width)
    site_class = rng.integers(0, cfg.num_classes, size=cfg.n_sites)
    clean = voronoi_labels(sites, site_class, cfg.height, cfg.width)

    rgb = base_colors(cfg.num_classes)[clean].transpose(2, 0, 1)
    rgb = rgb + rng.normal(0.0, NOISE_SIGMA, size=rgb.shape)

    labels = clean.astype(np.int64)
    if cfg.dont_care_rate > 0:
        drop = boundary_mask(clean) & (rng.uniform(size=clean.shape) < cfg.dont_care_rate)
        labels[drop] = DONT_CARE
    return rgb.astype(np.float32), labels


def gen_batch(cfg: SynthConfig, indices) -> tuple[np.ndarray, np.ndarray]:
    pairs = [gen_sample(cfg, int(i)) for i in indices]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
