"""Latent transformer and JSCC codec networks.

The transmitter maps frames into a latent space (one stride-2 convolution
plus residual blocks) and then through three stride-2 encoder blocks to the
semantic feature space; the receiver mirrors both with transposed
convolutions.  Under the defaults a frame shrinks 16x spatially and widens
to ``channel_width`` channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn as nn

from .video_model import Frame, Gop

if TYPE_CHECKING:  # pragma: no cover
    from .training import ModelState

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class CodecConfig:
    """Architecture hyperparameters for the full transmit/receive stack."""

    channel_width: int = 128
    latent_downsample: int = 2
    jscc_blocks: int = 3
    residual_per_block: int = 3
    resample_kernel: int = 5
    residual_kernel: int = 3
    hyper_width: int = 64
    hyper_stages: int = 2

    def __post_init__(self):
        for name in ("channel_width", "latent_downsample", "jscc_blocks",
                     "residual_per_block", "resample_kernel", "residual_kernel",
                     "hyper_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hyper_stages < 0:
            raise ValueError("hyper_stages must be nonnegative")

    @property
    def total_downsample(self) -> int:
        return self.latent_downsample * 2 ** self.jscc_blocks

    def check_frame_shape(self, height: int, width: int) -> None:
        d = self.total_downsample
        if height % d or width % d:
            raise ValueError(
                f"frame size {height}x{width} must be divisible by the total "
                f"downsample factor {d}"
            )
        fh, fw = height // d, width // d
        hd = 2 ** self.hyper_stages
        if fh % hd or fw % hd:
            raise ValueError(
                f"feature size {fh}x{fw} must be divisible by 2^hyper_stages={hd}"
            )

    def feature_shape(self, height: int, width: int) -> tuple[int, int, int]:
        self.check_frame_shape(height, width)
        d = self.total_downsample
        return height // d, width // d, self.channel_width

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        self.check_frame_shape(height, width)
        d = self.latent_downsample
        return height // d, width // d, self.channel_width


@dataclass(frozen=True)
class LatentMap:
    """Per-frame latent representation, stored (h, w, channels)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"latent map must be 3-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("latent map must be finite")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class FeatureMap:
    """Per-frame semantic feature map, stored (h, w, channels)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"feature map must be 3-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("feature map must be finite")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def conv_down(cin: int, cout: int, kernel: int, stride: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2)


def conv_up(cin: int, cout: int, kernel: int, stride: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(
        cin, cout, kernel, stride=stride, padding=kernel // 2,
        output_padding=stride - 1,
    )


class ResidualBlock(nn.Module):
    """conv -> leaky ReLU -> conv with an identity skip."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv2d(channels, channels, kernel, padding=kernel // 2)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


def _residual_stack(channels: int, count: int, kernel: int) -> list[nn.Module]:
    return [ResidualBlock(channels, kernel) for _ in range(count)]


class LatentTransform(nn.Module):
    """Color space to latent space: one downsampling conv, residual blocks."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w = cfg.channel_width
        self.net = nn.Sequential(
            conv_down(3, w, cfg.resample_kernel, cfg.latent_downsample),
            nn.LeakyReLU(LEAKY_SLOPE),
            *_residual_stack(w, cfg.residual_per_block, cfg.residual_kernel),
        )

    def forward(self, x):
        return self.net(x)


class JsccEncoder(nn.Module):
    """Consecutive blocks of a stride-2 conv followed by residual blocks."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w = cfg.channel_width
        layers: list[nn.Module] = []
        for _ in range(cfg.jscc_blocks):
            layers.append(conv_down(w, w, cfg.resample_kernel, 2))
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
            layers.extend(_residual_stack(w, cfg.residual_per_block, cfg.residual_kernel))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class JsccDecoder(nn.Module):
    """Mirror of the encoder, with transposed convolutions for upsampling."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w = cfg.channel_width
        layers: list[nn.Module] = []
        for _ in range(cfg.jscc_blocks):
            layers.append(conv_up(w, w, cfg.resample_kernel, 2))
            layers.append(nn.LeakyReLU(LEAKY_SLOPE))
            layers.extend(_residual_stack(w, cfg.residual_per_block, cfg.residual_kernel))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class LatentInversion(nn.Module):
    """Latent space back to color space; output is unclamped here."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w = cfg.channel_width
        self.net = nn.Sequential(
            *_residual_stack(w, cfg.residual_per_block, cfg.residual_kernel),
            conv_up(w, 3, cfg.resample_kernel, cfg.latent_downsample),
        )

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------------------
# numpy-facing operations; tensors live in (batch, channels, h, w) layout and
# the value objects in (h, w, channels).

def _model_dtype(state: "ModelState") -> torch.dtype:
    return next(state.model.parameters()).dtype


def to_tensor(maps, dtype: torch.dtype) -> torch.Tensor:
    """Stack (h, w, c) arrays into a (n, c, h, w) tensor."""
    arrs = [np.asarray(m.data if hasattr(m, "data") else m) for m in maps]
    stacked = np.ascontiguousarray(np.stack(arrs).transpose(0, 3, 1, 2))
    return torch.from_numpy(stacked).to(dtype)


def from_tensor(t: torch.Tensor) -> list[np.ndarray]:
    """Split a (n, c, h, w) tensor back into (h, w, c) arrays."""
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return [np.ascontiguousarray(a) for a in arr]


def latent_forward(gop: Gop, state: "ModelState") -> list[LatentMap]:
    """Transform every frame of a GOP into latent space."""
    h, w, c = gop.frame_shape
    if c != 3:
        raise ValueError(f"expected 3 input channels, got {c}")
    state.codec_config.check_frame_shape(h, w)
    x = to_tensor([f.pixels for f in gop.frames], _model_dtype(state))
    with torch.no_grad():
        z = state.model.latent_transform(x)
    return [LatentMap(a) for a in from_tensor(z)]


def jscc_encode(latents: list[LatentMap], state: "ModelState") -> list[FeatureMap]:
    """Encode latent maps into channel-robust semantic feature maps."""
    _check_channels(latents, state.codec_config.channel_width, "latent")
    x = to_tensor(latents, _model_dtype(state))
    with torch.no_grad():
        y = state.model.jscc_encoder(x)
    return [FeatureMap(a) for a in from_tensor(y)]


def jscc_decode(features: list[FeatureMap], state: "ModelState") -> list[LatentMap]:
    """Decode (possibly noisy) feature maps back to latent space."""
    _check_channels(features, state.codec_config.channel_width, "feature")
    x = to_tensor(features, _model_dtype(state))
    with torch.no_grad():
        z = state.model.jscc_decoder(x)
    return [LatentMap(a) for a in from_tensor(z)]


def latent_inverse(latents: list[LatentMap], state: "ModelState", gop_id: int = 0) -> Gop:
    """Map latent representations back to clamped [0, 1] frames."""
    _check_channels(latents, state.codec_config.channel_width, "latent")
    x = to_tensor(latents, _model_dtype(state))
    with torch.no_grad():
        frames = state.model.latent_inversion(x).clamp(0.0, 1.0)
    arrays = from_tensor(frames)
    return Gop(
        frames=tuple(Frame(pixels=a, index=i) for i, a in enumerate(arrays)),
        gop_id=gop_id,
    )


def _check_channels(maps, expected: int, kind: str) -> None:
    if not maps:
        raise ValueError(f"need at least one {kind} map")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ValueError(f"{kind} maps must share one shape")
    if shape[2] != expected:
        raise ValueError(
            f"{kind} map has {shape[2]} channels, config expects {expected}"
        )


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
