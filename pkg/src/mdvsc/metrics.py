"""Reconstruction quality metrics: MSE, PSNR, multi-scale SSIM, dB conversions.

All metrics assume unit-range pixels, so the PSNR peak is 1.0 and MS-SSIM
uses the standard constants for data range 1.  MS-SSIM values cluster near
1 for decent reconstructions, so they are also reported on a -10*log10(1-d)
dB scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .video_model import Frame, Gop

# Standard 5-level MS-SSIM exponents; renormalized to sum 1 for fewer levels.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


@dataclass(frozen=True)
class FrameQuality:
    psnr_db: float
    ms_ssim: float
    ms_ssim_db: float


@dataclass(frozen=True)
class QualityReport:
    """Aggregate quality over a GOP plus the per-frame breakdown."""

    psnr_db: float
    ms_ssim: float
    ms_ssim_db: float
    per_frame: tuple[FrameQuality, ...]


def _pixels(x) -> np.ndarray:
    if isinstance(x, Frame):
        return np.asarray(x.pixels, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def mse(x, y) -> float:
    """Mean squared error over all pixels and channels."""
    a, b = _pixels(x), _pixels(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.square(a - b)))


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB for unit-range pixels."""
    err = mse(x, y)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def ms_ssim_db(d: float) -> float:
    """Map an MS-SSIM value in [0, 1] to the -10*log10(1 - d) dB scale."""
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"MS-SSIM value must lie in [0, 1], got {d}")
    if d == 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - d)


def max_ms_ssim_levels(min_side: int) -> int:
    """Largest level count whose coarsest scale still fits an 11x11 window."""
    levels = 0
    while min_side >= _WINDOW_SIZE * (2 ** levels):
        levels += 1
    return levels


def _gaussian_window() -> np.ndarray:
    r = np.arange(_WINDOW_SIZE, dtype=np.float64) - (_WINDOW_SIZE - 1) / 2
    g = np.exp(-(r ** 2) / (2 * _WINDOW_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()


_WINDOW = _gaussian_window()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    return fftconvolve(img, _WINDOW, mode="valid")


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean luminance and contrast-structure SSIM terms of one channel."""
    mu_x = _filter_valid(x)
    mu_y = _filter_valid(y)
    sxx = _filter_valid(x * x) - mu_x * mu_x
    syy = _filter_valid(y * y) - mu_y * mu_y
    sxy = _filter_valid(x * y) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + _C1) / (mu_x * mu_x + mu_y * mu_y + _C1)
    cs = (2 * sxy + _C2) / (sxx + syy + _C2)
    return float(np.mean(lum)), float(np.mean(cs))


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    return img[: h2 * 2, : w2 * 2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def ms_ssim(x, y, levels: int = 5, weights=None) -> float:
    """Multi-scale SSIM with a Gaussian 11x11 window, sigma 1.5.

    Contrast-structure terms are taken at every scale and the luminance
    term only at the coarsest; negative contrast terms are floored at zero
    so the result stays in [0, 1].  Weights are renormalized to sum 1.
    Channels are scored independently and averaged.
    """
    a, b = _pixels(x), _pixels(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    min_side = min(a.shape[0], a.shape[1])
    max_levels = max_ms_ssim_levels(min_side)
    if levels < 1 or levels > max_levels:
        raise ValueError(
            f"levels={levels} invalid for {a.shape[0]}x{a.shape[1]} frames; "
            f"at most {max_levels} levels fit the 11x11 window"
        )
    if weights is None:
        weights = MS_SSIM_WEIGHTS[:levels]
    if len(weights) != levels:
        raise ValueError("need one weight per level")
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()

    scores = []
    for c in range(a.shape[2]):
        xa, yb = a[:, :, c], b[:, :, c]
        value = 1.0
        for lvl in range(levels):
            lum, cs = _ssim_terms(xa, yb)
            cs = max(cs, 0.0)
            if lvl == levels - 1:
                value *= (max(lum, 0.0) * cs) ** w[lvl]
            else:
                value *= cs ** w[lvl]
                xa, yb = _downsample2(xa), _downsample2(yb)
        scores.append(value)
    return float(np.mean(scores))


def frame_quality(x: Frame, y: Frame, levels: int | None = None) -> FrameQuality:
    """PSNR and MS-SSIM of one reconstructed frame against its source."""
    if levels is None:
        levels = min(5, max_ms_ssim_levels(min(x.shape[0], x.shape[1])))
    d = ms_ssim(x, y, levels=levels)
    return FrameQuality(psnr_db=psnr(x, y), ms_ssim=d, ms_ssim_db=ms_ssim_db(d))


def gop_quality(source: Gop, recon: Gop, levels: int | None = None) -> QualityReport:
    """Per-frame quality plus frame-averaged aggregates for a GOP pair."""
    if source.frame_shape != recon.frame_shape or source.num_frames != recon.num_frames:
        raise ValueError("source and reconstruction GOPs must match in shape")
    per_frame = tuple(
        frame_quality(a, b, levels=levels)
        for a, b in zip(source.frames, recon.frames)
    )
    mean_psnr = float(np.mean([q.psnr_db for q in per_frame]))
    mean_d = float(np.mean([q.ms_ssim for q in per_frame]))
    return QualityReport(
        psnr_db=mean_psnr,
        ms_ssim=mean_d,
        ms_ssim_db=ms_ssim_db(min(mean_d, 1.0)),
        per_frame=per_frame,
    )
