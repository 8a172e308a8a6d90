"""Hyperprior entropy model: per-element bit costs for feature maps.

Every feature element is modeled as a zero-mean Gaussian whose scale comes
from a small hyperprior encoder/decoder pair.  Convolving that Gaussian
with U(-1/2, 1/2) gives the probability of the unit-width bin around the
quantized value, and -log2 of it is the element's bit cost.  The costs are
never entropy-coded; they only price symbols for variable-length coding and
supply the rate term of the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn as nn
from scipy.special import ndtr

from .model_division import FeatureSet
from .transform_codec import (
    LEAKY_SLOPE,
    CodecConfig,
    FeatureMap,
    conv_down,
    conv_up,
    from_tensor,
    to_tensor,
)

if TYPE_CHECKING:  # pragma: no cover
    from .training import ModelState

SIGMA_MIN = 0.01
# float32 cannot represent 0.01 exactly; accept its nearest representable value
_SIGMA_MIN_CHECK = SIGMA_MIN - 1e-9
LIKELIHOOD_FLOOR = 1e-9
LOG2_E = float(np.log2(np.e))


@dataclass(frozen=True)
class HyperLatent:
    """Hyperprior latent for one feature map, stored (h, w, hyper_width)."""

    z: np.ndarray
    quantized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.z)
        if arr.ndim != 3:
            raise ValueError(f"hyper latent must be 3-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("hyper latent must be finite")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "z", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.z.shape


@dataclass(frozen=True)
class ScaleField:
    """Per-element Gaussian scales aligned with a feature map."""

    sigma: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.sigma)
        if not np.isfinite(arr).all():
            raise ValueError("scale field must be finite")
        if arr.min() < _SIGMA_MIN_CHECK:
            raise ValueError(f"scale field must be >= {SIGMA_MIN}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "sigma", arr)


@dataclass(frozen=True)
class EntropyMap:
    """Per-element bit costs aligned with a feature map."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if not np.isfinite(arr).all():
            raise ValueError("entropy map must be finite")
        if arr.min() < 0:
            raise ValueError("entropy map must be nonnegative")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def total_bits(self) -> float:
        return float(self.bits.sum())


class HyperEncoder(nn.Module):
    """Feature map to hyper latent; each stage halves the spatial size."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w, hw = cfg.channel_width, cfg.hyper_width
        k = cfg.residual_kernel
        layers: list[nn.Module] = [nn.Conv2d(w, hw, k, padding=k // 2)]
        for _ in range(cfg.hyper_stages):
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
            layers.append(conv_down(hw, hw, cfg.resample_kernel, 2))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class HyperDecoder(nn.Module):
    """Hyper latent to a per-element scale field, bounded below SIGMA_MIN."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w, hw = cfg.channel_width, cfg.hyper_width
        k = cfg.residual_kernel
        layers: list[nn.Module] = []
        for _ in range(cfg.hyper_stages):
            layers.append(conv_up(hw, hw, cfg.resample_kernel, 2))
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
        layers.append(nn.Conv2d(hw, w, k, padding=k // 2))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        # softplus keeps the bound smooth so gradients never die at the clamp
        return SIGMA_MIN + nn.functional.softplus(self.net(x))


def quantize(w: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Soft quantization: uniform noise in training, rounding at eval.

    Training adds i.i.d. U(-1/2, 1/2) noise as a differentiable rounding
    proxy; eval rounds half away from zero.  Either way the output stays
    within 1/2 of the input.
    """
    arr = np.asarray(w)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs an explicit rng")
        return (arr + rng.uniform(-0.5, 0.5, size=arr.shape)).astype(arr.dtype)
    if mode == "eval":
        return (np.sign(arr) * np.floor(np.abs(arr) + 0.5)).astype(arr.dtype)
    raise ValueError(f"unknown quantization mode {mode!r}")


def quantize_eval_t(w: torch.Tensor) -> torch.Tensor:
    """Tensor version of eval-mode rounding (half away from zero)."""
    return torch.sign(w) * torch.floor(torch.abs(w) + 0.5)


def likelihood(w_quantized: np.ndarray, sigma) -> np.ndarray:
    """Probability of the unit bin around each value under N(0, sigma)*U.

    P = Phi((w + 1/2) / sigma) - Phi((w - 1/2) / sigma), floored at 1e-9 so
    bit costs stay finite.
    """
    s = np.asarray(sigma.sigma if isinstance(sigma, ScaleField) else sigma, dtype=np.float64)
    w = np.asarray(w_quantized, dtype=np.float64)
    if np.min(s) < _SIGMA_MIN_CHECK:
        raise ValueError(f"sigma must be >= {SIGMA_MIN}")
    p = ndtr((w + 0.5) / s) - ndtr((w - 0.5) / s)
    return np.maximum(p, LIKELIHOOD_FLOOR)


def likelihood_t(w: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Tensor version of :func:`likelihood` for the training path."""
    p = torch.special.ndtr((w + 0.5) / sigma) - torch.special.ndtr((w - 0.5) / sigma)
    return torch.clamp(p, min=LIKELIHOOD_FLOOR)


def bits_t(w: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Per-element bit cost -log2(P) on tensors."""
    return -torch.log(likelihood_t(w, sigma)) * LOG2_E


def _model_dtype(state: "ModelState") -> torch.dtype:
    return next(state.model.parameters()).dtype


def hyper_encode(w: FeatureMap, state: "ModelState") -> HyperLatent:
    """Encode one feature map into its (unquantized) hyper latent."""
    x = to_tensor([w], _model_dtype(state))
    with torch.no_grad():
        z = state.model.hyper_encoder(x)
    return HyperLatent(z=from_tensor(z)[0], quantized=False)


def hyper_decode(z: HyperLatent, state: "ModelState") -> ScaleField:
    """Decode a hyper latent into the per-element scale field."""
    x = to_tensor([z.z], _model_dtype(state))
    with torch.no_grad():
        sigma = state.model.hyper_decoder(x)
    return ScaleField(sigma=from_tensor(sigma)[0])


def entropy_map(
    fset: FeatureSet,
    state: "ModelState",
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[EntropyMap, list[EntropyMap]]:
    """Bit-cost maps for the common map and each individual map.

    Both the feature values and the hyper latent pass through
    :func:`quantize` in the requested mode before the likelihood is
    evaluated, mirroring the training-time model.
    """
    units = fset.units()
    dtype = _model_dtype(state)
    x = to_tensor(units, dtype)
    with torch.no_grad():
        z = state.model.hyper_encoder(x)
        z_q = torch.from_numpy(
            quantize(z.cpu().numpy(), mode, rng)
        ).to(dtype)
        sigma = state.model.hyper_decoder(z_q)
    w_q = quantize(np.stack([np.asarray(u.data) for u in units]), mode, rng)
    sigma_np = np.stack(from_tensor(sigma))
    bits = -np.log2(likelihood(w_q, sigma_np))
    maps = [EntropyMap(bits=b) for b in bits]
    return maps[-1], maps[:-1]
