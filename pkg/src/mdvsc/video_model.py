"""Frames, GOPs, symbol streams, and channel-bandwidth-ratio accounting.

A video is an ordered list of equal-shape frames.  Transmission happens one
GOP (group of pictures) at a time; every frame in a GOP is a peer, there is
no keyframe distinction.  The cost of transmitting a GOP is measured by the
channel bandwidth ratio: channel symbols sent divided by the number of real
source dimensions in the GOP.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Frame:
    """One video frame: HxWxC pixel intensities in [0, 1] plus a time index."""

    pixels: np.ndarray
    index: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3:
            raise ValueError(f"frame pixels must be HxWxC, got shape {px.shape}")
        if any(s < 1 for s in px.shape):
            raise ValueError(f"frame dimensions must be >= 1, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("frame pixels must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("frame pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class Gop:
    """An ordered stack of equal-shape frames, the unit of transmission."""

    frames: tuple[Frame, ...]
    gop_id: int = 0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a GOP needs at least one frame")
        shape = frames[0].shape
        for f in frames:
            if f.shape != shape:
                raise ValueError(
                    f"all frames in a GOP must share one shape: {shape} vs {f.shape}"
                )
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return self.frames[0].shape

    def as_array(self) -> np.ndarray:
        """Stack to an (N, H, W, C) float32 array."""
        return np.stack([f.pixels for f in self.frames])


@dataclass(frozen=True)
class SymbolStream:
    """Flat vector of channel-input symbols plus per-unit symbol counts.

    Units are ordered: N individual-feature units first, then the single
    common-feature unit last.
    """

    symbols: np.ndarray
    per_unit_counts: tuple[int, ...]

    def __post_init__(self):
        sym = np.asarray(self.symbols, dtype=np.float32).ravel()
        counts = tuple(int(k) for k in self.per_unit_counts)
        if any(k < 0 for k in counts):
            raise ValueError("per-unit symbol counts must be nonnegative")
        if sym.size != sum(counts):
            raise ValueError(
                f"symbol count {sym.size} does not match per-unit counts {counts}"
            )
        if sym.size and not np.isfinite(sym).all():
            raise ValueError("channel symbols must be finite")
        object.__setattr__(self, "symbols", _freeze(sym))
        object.__setattr__(self, "per_unit_counts", counts)

    @property
    def symbol_count(self) -> int:
        return int(self.symbols.size)


@dataclass(frozen=True)
class CbrReport:
    """Channel bandwidth ratio: symbols transmitted per source dimension."""

    source_dim: int
    symbol_count: int
    cbr: float

    def __post_init__(self):
        if self.source_dim <= 0:
            raise ValueError("source dimension must be positive")
        if self.symbol_count < 0:
            raise ValueError("symbol count must be nonnegative")

    def as_fraction(self) -> Fraction:
        return Fraction(self.symbol_count, self.source_dim)


def split_into_gops(video, gop_size: int, pad_policy: str = "drop_tail") -> list[Gop]:
    """Chunk an ordered list of frames into fixed-size GOPs.

    ``drop_tail`` discards a trailing remainder shorter than ``gop_size``;
    ``repeat_last`` repeats the final frame until the last GOP is full.
    """
    frames = list(video)
    if not frames:
        raise ValueError("no frames")
    if gop_size < 1:
        raise ValueError("gop_size must be >= 1")
    if pad_policy not in ("drop_tail", "repeat_last"):
        raise ValueError(f"unknown pad_policy {pad_policy!r}")
    shape = frames[0].shape
    for f in frames:
        if f.shape != shape:
            raise ValueError("all frames must share one shape")

    gops = []
    for start in range(0, len(frames), gop_size):
        chunk = frames[start : start + gop_size]
        if len(chunk) < gop_size:
            if pad_policy == "drop_tail":
                break
            chunk = chunk + [chunk[-1]] * (gop_size - len(chunk))
        gops.append(Gop(frames=tuple(chunk), gop_id=len(gops)))
    return gops


def source_dimension(gop: Gop) -> int:
    """Total real source dimension of a GOP: N * H * W * C."""
    h, w, c = gop.frame_shape
    return gop.num_frames * h * w * c


def cbr_of(stream: SymbolStream, gop: Gop) -> CbrReport:
    """Channel bandwidth ratio of a symbol stream against its source GOP.

    The ratio is formed in exact rational arithmetic and converted to a
    float only at the end.
    """
    dim = source_dimension(gop)
    if dim == 0:
        raise ValueError("zero source dimension")
    ratio = Fraction(stream.symbol_count, dim)
    return CbrReport(source_dim=dim, symbol_count=stream.symbol_count, cbr=float(ratio))
