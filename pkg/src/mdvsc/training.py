"""End-to-end rate-distortion training, schedule, and checkpointing.

The optimization target is ``lambda * R + D`` where R is the entropy-model
bit cost per source dimension and D the mean squared reconstruction error
on unit-range pixels.  Training always transmits every symbol (rate is
penalized through the entropy term, not through masking), applies uniform
quantization noise to features and hyper latents, and passes the stream
through the AWGN channel at the training SNR.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from . import metrics
from .channel import noise_variance
from .entropy_model import EntropyMap, HyperDecoder, HyperEncoder, bits_t
from .model_division import CommonFeatureExtractor, split_tensor
from .transform_codec import (
    CodecConfig,
    JsccDecoder,
    JsccEncoder,
    LatentInversion,
    LatentTransform,
    parameter_count,
)
from .video_model import Gop, source_dimension

CHECKPOINT_MAGIC = b"MDVSCKPT"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Training schedule and loss hyperparameters."""

    lambda_rate: float = 8192.0
    lr_init: float = 1e-4
    lr_min: float = 1e-6
    batch_size: int = 8
    gop_size: int = 4
    train_snr_db: float = 10.0
    crop: int = 64
    steps: int = 2000
    seed: int = 0
    weight_decay: float = 0.0
    bypass_cfe: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lambda_rate", "lr_init", "lr_min", "batch_size",
                     "gop_size", "crop", "steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.crop % 16:
            raise ValueError("crop must be divisible by 16")


class MdvscModel(nn.Module):
    """All learnable pieces of the transmit/receive chain in one module."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.latent_transform = LatentTransform(cfg)
        self.jscc_encoder = JsccEncoder(cfg)
        self.jscc_decoder = JsccDecoder(cfg)
        self.latent_inversion = LatentInversion(cfg)
        self.cfe = CommonFeatureExtractor(cfg)
        self.hyper_encoder = HyperEncoder(cfg)
        self.hyper_decoder = HyperDecoder(cfg)

    def transmitter_parameter_count(self) -> int:
        return sum(
            parameter_count(m)
            for m in (self.latent_transform, self.jscc_encoder, self.cfe,
                      self.hyper_encoder, self.hyper_decoder)
        )

    def receiver_parameter_count(self) -> int:
        return parameter_count(self.jscc_decoder) + parameter_count(self.latent_inversion)


def init_parameters(model: MdvscModel, seed: int) -> None:
    """Variance-scaling fan-in init from an explicit generator; biases zero.

    Residual branches close with a zero conv so every block starts as the
    identity; otherwise ~20 stacked blocks double the signal variance each
    and the first forward pass explodes.  The CFE's final layer also starts
    at zero so the initial common feature is exactly the GOP mean.
    """
    from .transform_codec import ResidualBlock

    gen = torch.Generator().manual_seed(seed)
    gain = 2.0 / (1.0 + 0.2 ** 2)  # leaky-rectifier variance correction
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = module.weight.shape[1] * module.weight.shape[2] * module.weight.shape[3]
            std = math.sqrt(gain / fan_in)
            with torch.no_grad():
                module.weight.normal_(0.0, std, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, ResidualBlock):
                module.conv2.weight.zero_()
        model.cfe.conv2.weight.zero_()
        model.cfe.conv2.bias.zero_()


class ModelState:
    """Model parameters plus optimizer state and the step counter."""

    def __init__(self, model: MdvscModel, optimizer: torch.optim.Optimizer,
                 codec_config: CodecConfig, train_config: TrainConfig, step: int = 0):
        self.model = model
        self.optimizer = optimizer
        self.codec_config = codec_config
        self.train_config = train_config
        self.step = step

    @classmethod
    def initialize(cls, codec_config: CodecConfig, train_config: TrainConfig,
                   seed: int = 0, dtype: torch.dtype = torch.float32) -> "ModelState":
        model = MdvscModel(codec_config)
        init_parameters(model, seed)
        model.to(dtype)
        optimizer = torch.optim.Adam(
            model.parameters(),
            lr=train_config.lr_init,
            weight_decay=train_config.weight_decay,
        )
        return cls(model, optimizer, codec_config, train_config, step=0)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float) -> float:
    """Cosine annealing from lr_init down to exactly lr_min at total_steps."""
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def _noise_like(t: torch.Tensor, rng: np.random.Generator, kind: str, std: float = 1.0) -> torch.Tensor:
    if kind == "uniform":
        arr = rng.uniform(-0.5, 0.5, size=tuple(t.shape))
    else:
        arr = rng.normal(0.0, std, size=tuple(t.shape))
    return torch.from_numpy(arr).to(t.dtype)


def gop_batch_tensor(batch: list[Gop], dtype: torch.dtype) -> torch.Tensor:
    """Stack GOPs into a (batch, gop, 3, H, W) tensor."""
    arrs = np.stack([g.as_array() for g in batch])  # (B, N, H, W, C)
    arrs = np.ascontiguousarray(arrs.transpose(0, 1, 4, 2, 3))
    return torch.from_numpy(arrs).to(dtype)


def training_forward(state: ModelState, frames: torch.Tensor, config: TrainConfig,
                     rng: np.random.Generator) -> dict:
    """Differentiable transmit/receive pass for a batch of GOPs.

    frames: (batch, gop, 3, H, W).  Keep-all masking; quantization noise on
    features and hyper latents; AWGN at the training SNR on the
    power-normalized stream.  Returns the loss and its components.
    """
    model = state.model
    b, n, _, height, width = frames.shape
    flat = frames.reshape(b * n, 3, height, width)

    latents = model.latent_transform(flat)
    y = model.jscc_encoder(latents)
    c, fh, fw = y.shape[1], y.shape[2], y.shape[3]
    y = y.view(b, n, c, fh, fw)

    common, individuals = split_tensor(y, model.cfe, bypass=config.bypass_cfe)
    units = torch.cat([individuals, common.unsqueeze(1)], dim=1)  # (B, N+1, C, fh, fw)
    units_flat = units.reshape(b * (n + 1), c, fh, fw)

    z = model.hyper_encoder(units_flat)
    z_tilde = z + _noise_like(z, rng, "uniform")
    sigma = model.hyper_decoder(z_tilde)
    w_tilde = units_flat + _noise_like(units_flat, rng, "uniform")
    bits = bits_t(w_tilde, sigma)

    source_dim = n * height * width * 3
    rate = bits.reshape(b, -1).sum(dim=1) / source_dim  # bits per source dimension

    stream = w_tilde.reshape(b, -1)
    scale = stream.pow(2).mean(dim=1, keepdim=True).sqrt()
    normed = stream / scale
    sigma_ch = math.sqrt(noise_variance(config.train_snr_db))
    if sigma_ch > 0:
        normed = normed + _noise_like(normed, rng, "normal", std=sigma_ch)
    received = (normed * scale).reshape(b, n + 1, c, fh, fw)

    y_hat = received[:, :n] + received[:, n:]
    lat_hat = model.jscc_decoder(y_hat.reshape(b * n, c, fh, fw))
    x_hat = model.latent_inversion(lat_hat)  # unclamped during training

    distortion = (x_hat - flat).pow(2).mean()
    rate_mean = rate.mean()
    loss = config.lambda_rate * rate_mean + distortion
    return {
        "loss": loss,
        "rate_bits_per_dim": rate_mean,
        "mse": distortion,
        "recon": x_hat,
    }


def loss(gop: Gop, recon: Gop, entropies: tuple[EntropyMap, list[EntropyMap]],
         config: TrainConfig) -> float:
    """Rate-distortion objective on value objects: lambda * R + D."""
    common_map, individual_maps = entropies
    total_bits = common_map.total_bits + sum(m.total_bits for m in individual_maps)
    rate = total_bits / source_dimension(gop)
    distortion = float(
        np.mean([metrics.mse(a, b) for a, b in zip(gop.frames, recon.frames)])
    )
    value = config.lambda_rate * rate + distortion
    if not math.isfinite(value):
        raise ValueError(f"non-finite loss: rate={rate}, distortion={distortion}")
    return value


def train_step(batch: list[Gop], state: ModelState, config: TrainConfig,
               rng: np.random.Generator) -> tuple[ModelState, float]:
    """One gradient update; mutates and returns the state."""
    frames = gop_batch_tensor(batch, state.dtype)
    lr = cosine_lr(state.step, config.steps, config.lr_init, config.lr_min)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    out = training_forward(state, frames, config, rng)
    value = out["loss"]
    if not torch.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss at step {state.step}: "
            f"rate={float(out['rate_bits_per_dim'])}, mse={float(out['mse'])}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    value.backward()
    state.optimizer.step()
    state.step += 1
    return state, float(value.detach())


def train(state: ModelState, dataset, config: TrainConfig,
          checkpoint_path: str | None = None, log_fn=None,
          until_step: int | None = None) -> list[dict]:
    """Run the training loop from the state's current step to config.steps.

    Each step derives its RNG from (config.seed, step), so resumed runs
    consume the same randomness as uninterrupted ones.  ``until_step``
    pauses early without touching the schedule (resume by calling again).
    Returns one trace record per step.
    """
    stop = config.steps if until_step is None else min(until_step, config.steps)
    trace = []
    last_good = None
    while state.step < stop:
        step = state.step
        rng = np.random.default_rng([config.seed, step])
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        batch = [dataset[int(i)] for i in idx]
        try:
            _, value = train_step(batch, state, config, rng)
        except TrainingDiverged as err:
            raise TrainingDiverged(
                f"{err}; last good checkpoint: {last_good or 'none'}"
            ) from err
        lr = cosine_lr(step, config.steps, config.lr_init, config.lr_min)
        trace.append({"step": step, "lr": lr, "loss": value})
        if log_fn is not None:
            log_fn(trace[-1])
        if (checkpoint_path and config.checkpoint_every
                and state.step % config.checkpoint_every == 0):
            save_checkpoint(state, checkpoint_path)
            last_good = checkpoint_path
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return trace


# ---------------------------------------------------------------------------
# checkpoint format: magic, version u32, header-length u32, JSON header,
# then raw little-endian blobs in header order.

def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(state: ModelState, path: str) -> None:
    blobs: list[tuple[str, np.ndarray]] = []
    for name, p in state.model.named_parameters():
        blobs.append((f"model.{name}", p.detach().cpu().numpy()))
    opt_sd = state.optimizer.state_dict()
    for idx in sorted(opt_sd["state"]):
        for key, val in sorted(opt_sd["state"][idx].items()):
            blobs.append((f"opt.{idx}.{key}", val.detach().cpu().numpy()))
    header = {
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "dtype": str(state.dtype).replace("torch.", ""),
        "codec_config": asdict(state.codec_config),
        "train_config": _train_config_dict(state.train_config),
        "param_groups": opt_sd["param_groups"],
        "blobs": [
            {"name": n, "dtype": str(a.dtype), "shape": list(a.shape)}
            for n, a in blobs
        ],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for _, arr in blobs:
            fh.write(_le(arr).tobytes())


def _train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def load_checkpoint(path: str) -> ModelState:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 8 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    off += 8
    try:
        header = json.loads(data[off : off + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint header: {err}") from err
    off += head_len

    arrays: dict[str, np.ndarray] = {}
    for spec in header["blobs"]:
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        count = int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"] else 1
        nbytes = dt.itemsize * count
        if off + nbytes > len(data):
            raise CheckpointError(f"checkpoint truncated in blob {spec['name']}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(spec["shape"])
        arrays[spec["name"]] = arr.copy()
        off += nbytes
    if off != len(data):
        raise CheckpointError("trailing bytes after final checkpoint blob")

    codec_config = CodecConfig(**header["codec_config"])
    train_config = TrainConfig(**header["train_config"])
    dtype = getattr(torch, header["dtype"])
    state = ModelState.initialize(codec_config, train_config, seed=0, dtype=dtype)
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            key = f"model.{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing parameter {key}")
            p.copy_(torch.from_numpy(arrays[key]))

    opt_state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if not name.startswith("opt."):
            continue
        _, idx, key = name.split(".", 2)
        opt_state.setdefault(int(idx), {})[key] = torch.from_numpy(arr)
    if opt_state:
        state.optimizer.load_state_dict(
            {"state": opt_state, "param_groups": header["param_groups"]}
        )
    state.step = int(header["step"])
    return state


def calibrate_lambda(dataset, codec_config: CodecConfig, base_config: TrainConfig,
                     candidates=(0.01, 1.0, 100.0), warmup_steps: int = 200,
                     tail: int = 50, seed: int = 0) -> tuple[float, list[dict]]:
    """Pick the rate weight whose loss terms end up closest in magnitude.

    Runs a short warmup per candidate and measures the mean of lambda*R and
    D over the final ``tail`` steps.  Candidates where either term exceeds
    the other by more than 100x are rejected unless none qualify; among the
    qualifiers the one with the lowest distortion wins.
    """
    results = []
    for lam in candidates:
        cfg = TrainConfig(**{**_train_config_dict(base_config),
                             "lambda_rate": lam, "steps": warmup_steps})
        state = ModelState.initialize(codec_config, cfg, seed=seed)
        tail_rate, tail_mse = [], []
        for step in range(warmup_steps):
            rng = np.random.default_rng([seed, step])
            idx = rng.integers(0, len(dataset), size=cfg.batch_size)
            batch = [dataset[int(i)] for i in idx]
            frames = gop_batch_tensor(batch, state.dtype)
            for group in state.optimizer.param_groups:
                group["lr"] = cosine_lr(step, cfg.steps, cfg.lr_init, cfg.lr_min)
            out = training_forward(state, frames, cfg, rng)
            state.optimizer.zero_grad(set_to_none=True)
            out["loss"].backward()
            state.optimizer.step()
            if step >= warmup_steps - tail:
                tail_rate.append(lam * float(out["rate_bits_per_dim"]))
                tail_mse.append(float(out["mse"]))
        rate_term = float(np.mean(tail_rate))
        mse_term = float(np.mean(tail_mse))
        ratio = max(rate_term, mse_term) / max(min(rate_term, mse_term), 1e-30)
        results.append({"lambda": lam, "rate_term": rate_term,
                        "mse_term": mse_term, "ratio": ratio})
    balanced = [r for r in results if r["ratio"] <= 100.0]
    if balanced:
        chosen = min(balanced, key=lambda r: r["mse_term"])
    else:
        chosen = min(results, key=lambda r: abs(math.log10(r["ratio"])))
    return chosen["lambda"], results


def toy_codec_config() -> CodecConfig:
    """Desk-scale architecture: 64x64 frames, 4x4 feature maps."""
    return CodecConfig(channel_width=32, hyper_width=32)


def toy_train_config(**overrides) -> TrainConfig:
    """Sub-hour CPU training preset for the synthetic 64x64 GOP-4 dataset."""
    defaults = dict(
        lambda_rate=1.0,
        batch_size=4,
        gop_size=4,
        crop=64,
        steps=3000,
        train_snr_db=10.0,
        seed=0,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)
