"""Client-side update transformations: Laplace/Gaussian perturbation, top-k.

Noise comes from a counter-based Philox stream turned into open-interval
uniforms, then shaped by inverse CDF (Laplace) or Box-Muller (Gaussian), so a
(seed, update size) pair always yields the same noise on any machine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import GradientUpdate

KINDS = ("none", "laplace", "gaussian", "topk")
LEVEL_UNIT = 1e-4  # Laplace scale per unit of integer noise level


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed from a tuple of nonnegative ints (global seed, client, round, ...)."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def uniform_open(seed: int, n: int) -> np.ndarray:
    """``n`` float64 uniforms strictly inside (0, 1) from a Philox stream."""
    raw = np.random.Philox(seed).random_raw(n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 2 ** 53)


def laplace_noise(seed: int, n: int, b: float) -> np.ndarray:
    u = uniform_open(seed, n) - 0.5
    return -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def gaussian_noise(seed: int, n: int, sigma: float) -> np.ndarray:
    m = (n + 1) // 2
    u = uniform_open(seed, 2 * m)
    r = np.sqrt(-2.0 * np.log(u[:m]))
    theta = 2.0 * math.pi * u[m:]
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return sigma * z[:n]


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    scale: float | None = None
    level: int | None = None
    keep_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind in ("laplace", "gaussian"):
            if (self.scale is None) == (self.level is None):
                raise ValueError("noise defenses need exactly one of scale or level")
            if self.scale is not None and self.scale < 0:
                raise ValueError("noise scale must be >= 0")
        if self.kind == "topk" and not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")

    @property
    def noise_scale(self) -> float:
        if self.kind not in ("laplace", "gaussian"):
            return 0.0
        return self.scale if self.scale is not None else level_to_scale(self.level)

    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "topk":
            return f"topk:{self.keep_fraction:g}"
        return f"{self.kind}:{self.noise_scale:g}"


def _add_noise(update: GradientUpdate, noise: np.ndarray) -> GradientUpdate:
    out, i = [], 0
    for t in update.tensors:
        n = t.size
        out.append((t.astype(np.float64) + noise[i:i + n].reshape(t.shape)).astype(t.dtype))
        i += n
    return update.with_tensors(out)


def _total_size(update):
    return sum(t.size for t in update.tensors)


def laplace_perturb(update: GradientUpdate, b: float, seed: int) -> GradientUpdate:
    """Add i.i.d. Laplace(0, b) noise to every entry of the flattened update."""
    if b < 0:
        raise ValueError("Laplace scale must be >= 0")
    if b == 0:
        return update
    return _add_noise(update, laplace_noise(seed, _total_size(update), b))


def gaussian_perturb(update: GradientUpdate, sigma: float, seed: int) -> GradientUpdate:
    """Add i.i.d. N(0, sigma^2) noise to every entry of the flattened update."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return update
    return _add_noise(update, gaussian_noise(seed, _total_size(update), sigma))


def topk_compress(update: GradientUpdate, keep_fraction: float) -> GradientUpdate:
    """Per tensor, keep the ceil(keep_fraction * n) largest magnitudes.

    Equal magnitudes are ranked by flat index, lower first.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    out = []
    for t in update.tensors:
        flat = t.reshape(-1)
        k = min(flat.size, math.ceil(keep_fraction * flat.size))
        order = np.lexsort((np.arange(flat.size), -np.abs(flat.astype(np.float64))))
        kept = np.zeros_like(flat)
        kept[order[:k]] = flat[order[:k]]
        out.append(kept.reshape(t.shape))
    return update.with_tensors(out)


def level_to_scale(level: int) -> float:
    """Map an integer noise level (100, 200, ...) to a Laplace scale: level * 1e-4."""
    if level <= 0:
        raise ValueError("noise level must be > 0")
    return level * LEVEL_UNIT


def apply_defense(update: GradientUpdate, cfg: DefenseConfig | None,
                  seed: int | None = None) -> GradientUpdate:
    """Apply ``cfg`` with ``seed`` (defaults to ``cfg.seed``)."""
    if cfg is None or cfg.kind == "none":
        return update
    seed = cfg.seed if seed is None else seed
    if cfg.kind == "laplace":
        return laplace_perturb(update, cfg.noise_scale, seed)
    if cfg.kind == "gaussian":
        return gaussian_perturb(update, cfg.noise_scale, seed)
    return topk_compress(update, cfg.keep_fraction)
