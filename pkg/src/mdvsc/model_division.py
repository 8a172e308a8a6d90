"""Common feature extractor: split GOP features into common + individual maps.

The common map carries semantic content shared by every frame of the GOP
(one transmission for the whole group); each individual map is the per-frame
residual after subtracting the common map, so the decomposition is additive
and exactly invertible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch
import torch.nn as nn

from .transform_codec import LEAKY_SLOPE, CodecConfig, FeatureMap, from_tensor, to_tensor

if TYPE_CHECKING:  # pragma: no cover
    from .training import ModelState


@dataclass(frozen=True)
class FeatureSet:
    """One common feature map plus N per-frame individual feature maps."""

    common: FeatureMap
    individuals: tuple[FeatureMap, ...]

    def __post_init__(self):
        individuals = tuple(self.individuals)
        if not individuals:
            raise ValueError("a feature set needs at least one individual map")
        shape = self.common.shape
        for m in individuals:
            if m.shape != shape:
                raise ValueError("all feature maps in a set must share one shape")
        object.__setattr__(self, "individuals", individuals)

    @property
    def gop_size(self) -> int:
        return len(self.individuals)

    @property
    def map_shape(self) -> tuple[int, int, int]:
        return self.common.shape

    @property
    def map_numel(self) -> int:
        h, w, c = self.common.shape
        return h * w * c

    def units(self) -> list[FeatureMap]:
        """Transmission-ordered maps: individuals first, common last."""
        return [*self.individuals, self.common]


class CommonFeatureExtractor(nn.Module):
    """Two conv+activation layers on frame-axis statistics of the GOP.

    The GOP mean is wired in as a residual prior, and the final layer is
    zero-initialized, so a fresh extractor outputs exactly the mean.
    Consuming only frame-axis mean/std keeps the module independent of the
    GOP size and invariant to frame order.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        w = cfg.channel_width
        k = cfg.residual_kernel
        self.conv1 = nn.Conv2d(2 * w, w, k, padding=k // 2)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.conv2 = nn.Conv2d(w, w, k, padding=k // 2)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        """y: (batch, gop, channels, h, w) -> common (batch, channels, h, w)."""
        mean = y.mean(dim=1)
        std = y.std(dim=1, unbiased=False) if y.shape[1] > 1 else torch.zeros_like(mean)
        delta = self.conv2(self.act(self.conv1(torch.cat([mean, std], dim=1))))
        return mean + delta


def split_tensor(y: torch.Tensor, cfe: CommonFeatureExtractor, bypass: bool = False):
    """Tensor-level decomposition used by both inference and training.

    y: (batch, gop, channels, h, w).  Returns (common, individuals) where
    ``bypass`` zeroes the common map so features pass through undivided.
    """
    if bypass:
        common = torch.zeros_like(y[:, 0])
    else:
        common = cfe(y)
    individuals = y - common.unsqueeze(1)
    return common, individuals


def extract_common(features: list[FeatureMap], state: "ModelState") -> FeatureMap:
    """Common feature map of a GOP: frame-axis mean plus a learned delta."""
    if not features:
        raise ValueError("need at least one feature map")
    dtype = next(state.model.parameters()).dtype
    y = to_tensor(features, dtype).unsqueeze(0)
    with torch.no_grad():
        common = state.model.cfe(y)
    return FeatureMap(from_tensor(common)[0])


def split(features: list[FeatureMap], state: "ModelState", bypass_cfe: bool = False) -> FeatureSet:
    """Decompose GOP features into one common and N individual maps."""
    if not features:
        raise ValueError("need at least one feature map")
    dtype = next(state.model.parameters()).dtype
    y = to_tensor(features, dtype).unsqueeze(0)
    with torch.no_grad():
        common, individuals = split_tensor(y, state.model.cfe, bypass=bypass_cfe)
    common_map = FeatureMap(from_tensor(common)[0])
    individual_maps = tuple(FeatureMap(a) for a in from_tensor(individuals[0]))
    return FeatureSet(common=common_map, individuals=individual_maps)


def combine(fset: FeatureSet) -> list[FeatureMap]:
    """Invert the decomposition: common + individual, per frame."""
    common = np.asarray(fset.common.data)
    return [FeatureMap(common + np.asarray(m.data)) for m in fset.individuals]
