"""Full transmit/receive orchestration for single GOPs and whole videos.

``transmit`` composes the module operations in chain order: latent
transform, JSCC encode, common/individual split, entropy pricing, mask
construction, masking, power normalization, AWGN, then the receiver path.
The receiver works from the Payload alone; it never sees transmitter-side
entropy maps or clean features.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import channel as channel_mod
from . import entropy_model, metrics, model_division, transform_codec, vlc
from .channel import ChannelConfig
from .metrics import QualityReport
from .training import ModelState
from .vlc import Budget, Payload
from .video_model import CbrReport, Frame, Gop, SymbolStream, cbr_of, source_dimension, split_into_gops


class PipelineError(RuntimeError):
    """A stage of the transmit chain failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r}: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class TransmitResult:
    payload: Payload
    recon: Gop
    cbr: CbrReport
    quality: QualityReport
    timing: dict[str, float]
    cbr_with_overhead: CbrReport | None = None


@dataclass(frozen=True)
class EvaluationReport:
    """Aggregates over a whole video transmitted GOP by GOP."""

    quality: QualityReport
    per_gop_cbr: tuple[CbrReport, ...]
    per_gop_quality: tuple[QualityReport, ...]
    cbr_mean: float
    cbr_variance: float
    psnr_variance: float
    ms_ssim_variance: float


class _StageTimer:
    def __init__(self):
        self.timing: dict[str, float] = {}
        self._stage = None
        self._t0 = 0.0

    def run(self, stage: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except Exception as err:
            raise PipelineError(stage, err) from err
        self.timing[stage] = self.timing.get(stage, 0.0) + time.perf_counter() - t0
        return out


def transmit(
    gop: Gop,
    state: ModelState,
    budget: Budget,
    channel: ChannelConfig,
    policy: str = "entropy",
    rng: np.random.Generator | None = None,
    bypass_cfe: bool = False,
    channel_fn=None,
) -> TransmitResult:
    """Send one GOP through the lossy, noisy chain and reconstruct it.

    ``channel_fn(symbols, config, rng)`` defaults to the AWGN model; pass a
    different function to swap in another channel.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if channel_fn is None:
        channel_fn = channel_mod.awgn
    mask_rng, channel_rng = rng.spawn(2)
    if channel.seed is not None:
        channel_rng = np.random.default_rng(channel.seed)
    timer = _StageTimer()

    budget = budget.with_source_dim(source_dimension(gop))

    latents = timer.run("latent_forward", transform_codec.latent_forward, gop, state)
    features = timer.run("jscc_encode", transform_codec.jscc_encode, latents, state)
    fset = timer.run("split", model_division.split, features, state, bypass_cfe)
    entropies = timer.run("entropy_map", entropy_model.entropy_map, fset, state, "eval")
    plan = timer.run("build_mask", vlc.build_mask, entropies, budget, policy, fset, mask_rng)
    stream = timer.run("apply_mask", vlc.apply_mask, fset, plan)

    if stream.symbol_count > 0:
        body, scale = timer.run("power_normalize", channel_mod.power_normalize, stream.symbols)
    else:
        body, scale = np.empty(0, dtype=np.float32), 1.0
    fh, fw, fc = fset.map_shape
    payload = Payload(
        gop_id=gop.gop_id,
        gop_size=gop.num_frames,
        feature_shape=(fh, fw, fc),
        frame_shape=gop.frame_shape,
        scale=scale,
        plan=plan,
        body=body,
    )

    noisy_body = timer.run("awgn", channel_fn, payload.body, channel, channel_rng)
    recon = _receive(payload.with_body(noisy_body), state, timer)

    cbr = cbr_of(stream, gop)
    cbr_overhead = None
    if budget.mask_overhead_bits_per_symbol:
        bitmap_bits = 8 * len(plan.to_bitmap())
        extra = math.ceil(bitmap_bits / budget.mask_overhead_bits_per_symbol)
        total = stream.symbol_count + extra
        cbr_overhead = CbrReport(
            source_dim=cbr.source_dim,
            symbol_count=total,
            cbr=float(Fraction(total, cbr.source_dim)),
        )
    quality = timer.run("quality", metrics.gop_quality, gop, recon)
    return TransmitResult(
        payload=payload,
        recon=recon,
        cbr=cbr,
        quality=quality,
        timing=timer.timing,
        cbr_with_overhead=cbr_overhead,
    )


def receive(payload: Payload, state: ModelState) -> Gop:
    """Reconstruct a GOP from a received payload (noisy body, clean header)."""
    return _receive(payload, state, _StageTimer())


def _receive(payload: Payload, state: ModelState, timer: _StageTimer) -> Gop:
    body = channel_mod.de_normalize(payload.body, payload.scale)
    stream = SymbolStream(
        symbols=body,
        per_unit_counts=tuple(len(i) for i in payload.plan.kept_indices),
    )
    fset = timer.run("zero_fill", vlc.zero_fill, stream, payload.plan, payload.feature_shape)
    features = timer.run("combine", model_division.combine, fset)
    latents = timer.run("jscc_decode", transform_codec.jscc_decode, features, state)
    recon = timer.run("latent_inverse", transform_codec.latent_inverse, latents, state,
                      payload.gop_id)
    return recon


def transmitter_seconds(timing: dict[str, float]) -> float:
    stages = ("latent_forward", "jscc_encode", "split", "entropy_map",
              "build_mask", "apply_mask", "power_normalize")
    return sum(timing.get(s, 0.0) for s in stages)


def receiver_seconds(timing: dict[str, float]) -> float:
    stages = ("zero_fill", "combine", "jscc_decode", "latent_inverse")
    return sum(timing.get(s, 0.0) for s in stages)


def evaluate(
    video: list[Frame],
    state: ModelState,
    budget: Budget,
    channel: ChannelConfig,
    gop_size: int,
    policy: str = "entropy",
    master_seed: int = 0,
    pad_policy: str = "drop_tail",
    bypass_cfe: bool = False,
    channel_fn=None,
) -> EvaluationReport:
    """Transmit a whole video GOP by GOP and aggregate CBR and quality.

    Each GOP gets an independent RNG substream derived from the master
    seed, so results do not depend on processing order.
    """
    gops = split_into_gops(video, gop_size, pad_policy)
    results = []
    for i, gop in enumerate(gops):
        rng = np.random.default_rng([master_seed, i])
        gop_channel = channel
        if channel.seed is not None:
            gop_channel = ChannelConfig(snr_db=channel.snr_db, seed=None)
            rng = np.random.default_rng([channel.seed, master_seed, i])
        results.append(
            transmit(gop, state, budget, gop_channel, policy=policy, rng=rng,
                     bypass_cfe=bypass_cfe, channel_fn=channel_fn)
        )
    return summarize(results)


def summarize(results: list[TransmitResult]) -> EvaluationReport:
    """Fold per-GOP transmit results into one report."""
    if not results:
        raise ValueError("no transmit results to aggregate")
    per_cbr = tuple(r.cbr for r in results)
    per_quality = tuple(r.quality for r in results)
    frames = [q for r in results for q in r.quality.per_frame]
    mean_psnr = float(np.mean([f.psnr_db for f in frames]))
    mean_d = float(np.mean([f.ms_ssim for f in frames]))
    quality = QualityReport(
        psnr_db=mean_psnr,
        ms_ssim=mean_d,
        ms_ssim_db=metrics.ms_ssim_db(min(mean_d, 1.0)),
        per_frame=tuple(frames),
    )
    # exact rational variance so identical symbol counts give exactly zero
    ratios = [r.as_fraction() for r in per_cbr]
    mean_ratio = sum(ratios, Fraction(0)) / len(ratios)
    var = sum((x - mean_ratio) ** 2 for x in ratios) / len(ratios)
    psnrs = [q.psnr_db for q in per_quality]
    dvals = [q.ms_ssim for q in per_quality]
    return EvaluationReport(
        quality=quality,
        per_gop_cbr=per_cbr,
        per_gop_quality=per_quality,
        cbr_mean=float(mean_ratio),
        cbr_variance=float(var),
        psnr_variance=float(np.var(psnrs)) if all(map(math.isfinite, psnrs)) else math.inf,
        ms_ssim_variance=float(np.var(dvals)),
    )
