"""Reconstruction quality: MSE, SSIM, PSNR and attack success rate.

All metrics assume images on the [0, 1] display scale (dynamic range 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

C1 = 0.01 ** 2
C2 = 0.03 ** 2
DEFAULT_THRESHOLD = 0.9


def _pair(a, b):
    # same layout for both, so reductions sum in the same order
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {list(a.shape)} vs {list(b.shape)}")
    if a.size == 0:
        raise ValueError("empty image")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """10 log10(1 / MSE); +inf for identical images."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _ssim_stats(mu_a, mu_b, var_a, var_b, cov):
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return num / den


def _as_chw(x):
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return x
    if x.ndim == 1:
        return x[None, None]
    raise ValueError(f"expected an image of dims H x W or C x H x W, got {list(x.shape)}")


def ssim(a, b, mode: str = "global", window: int = 8) -> float:
    """Structural similarity with population (1/N) statistics.

    ``mode="global"`` uses one window per channel covering the whole image;
    ``mode="windowed"`` averages over every ``window`` x ``window`` patch at
    stride 1.  Channel scores are averaged.
    """
    a, b = _pair(a, b)
    a, b = _as_chw(a), _as_chw(b)
    if mode == "global":
        axes = (1, 2)
        mu_a, mu_b = a.mean(axis=axes), b.mean(axis=axes)
        da = a - mu_a[:, None, None]
        db = b - mu_b[:, None, None]
        var_a = (da * da).mean(axis=axes)
        var_b = (db * db).mean(axis=axes)
        cov = (da * db).mean(axis=axes)
        return float(np.mean(_ssim_stats(mu_a, mu_b, var_a, var_b, cov)))
    if mode == "windowed":
        _, h, w = a.shape
        if window < 1 or window > min(h, w):
            raise ValueError(f"window {window} does not fit image dims {list(a.shape)}")
        view = np.lib.stride_tricks.sliding_window_view
        wa = view(a, (window, window), axis=(1, 2))
        wb = view(b, (window, window), axis=(1, 2))
        axes = (3, 4)
        mu_a, mu_b = wa.mean(axis=axes), wb.mean(axis=axes)
        da = wa - mu_a[..., None, None]
        db = wb - mu_b[..., None, None]
        var_a = (da * da).mean(axis=axes)
        var_b = (db * db).mean(axis=axes)
        cov = (da * db).mean(axis=axes)
        per_channel = _ssim_stats(mu_a, mu_b, var_a, var_b, cov).mean(axis=(1, 2))
        return float(np.mean(per_channel))
    raise ValueError(f"unknown SSIM mode {mode!r}")


def asr(ssim_values: Sequence[float], threshold: float = DEFAULT_THRESHOLD) -> float:
    """Fraction of reconstructions with SSIM >= threshold."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    if len(ssim_values) == 0:
        raise ValueError("asr of an empty list")
    return sum(1 for s in ssim_values if s >= threshold) / len(ssim_values)


@dataclass
class ImageScore:
    image_id: str
    mse: float
    ssim: float
    psnr: float
    success: bool


@dataclass
class MetricReport:
    threshold: float = DEFAULT_THRESHOLD
    per_image: list[ImageScore] = field(default_factory=list)

    def add(self, image_id: str, original, reconstructed, mode: str = "global") -> ImageScore:
        s = ssim(original, reconstructed, mode)
        score = ImageScore(str(image_id), mse(original, reconstructed), s,
                           psnr(original, reconstructed), s >= self.threshold)
        self.per_image.append(score)
        return score

    @property
    def asr(self) -> float:
        return asr([p.ssim for p in self.per_image], self.threshold)

    def to_csv_rows(self) -> list[dict]:
        return [{"image_id": p.image_id, "mse": format_float(p.mse), "ssim": format_float(p.ssim),
                 "psnr": format_float(p.psnr), "success": str(p.success).lower()}
                for p in self.per_image]


def format_float(x: float) -> str:
    """Decimal with 9 significant digits; infinities as 'inf' / '-inf'."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.9g}"
