import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from mdvsc.data import ToyVideoDataset
from mdvsc.training import (
    ModelState,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    toy_codec_config,
    toy_train_config,
    train,
)
from mdvsc.transform_codec import CodecConfig
from mdvsc.video_model import Frame, Gop

# small enough for double-precision gradient checks: 8x8 frames, width 8
TINY_CODEC = CodecConfig(
    channel_width=8,
    latent_downsample=2,
    jscc_blocks=2,
    residual_per_block=1,
    hyper_width=8,
    hyper_stages=0,
)
TINY_TRAIN = TrainConfig(
    lambda_rate=1.0, batch_size=2, gop_size=2, crop=16, steps=50, seed=5
)


def random_frames(rng: np.random.Generator, n: int, h: int = 64, w: int = 64):
    return [Frame(pixels=rng.uniform(0.0, 1.0, size=(h, w, 3)), index=i) for i in range(n)]


def random_gop(rng: np.random.Generator, n: int = 4, h: int = 64, w: int = 64, gop_id: int = 0):
    return Gop(frames=tuple(random_frames(rng, n, h, w)), gop_id=gop_id)


@pytest.fixture(scope="session")
def tiny_state():
    return ModelState.initialize(TINY_CODEC, TINY_TRAIN, seed=7)


@pytest.fixture(scope="session")
def toy_state():
    """Untrained toy-architecture model (also the untrained oracle)."""
    return ModelState.initialize(toy_codec_config(), toy_train_config(), seed=0)


def _preset_digest() -> str:
    blob = json.dumps(
        {"codec": asdict(toy_codec_config()), "train": asdict(toy_train_config())},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def trained_state(request):
    """Toy model trained with the preset config; cached across pytest runs."""
    cache_dir = Path(request.config.cache.mkdir("mdvsc"))
    path = cache_dir / f"toy_{_preset_digest()}.mdvsc"
    cfg = toy_train_config()
    if path.exists():
        try:
            state = load_checkpoint(str(path))
            if state.step >= cfg.steps:
                return state
        except Exception:
            path.unlink()
    dataset = ToyVideoDataset()
    state = ModelState.initialize(toy_codec_config(), cfg, seed=cfg.seed)
    train(state, dataset, cfg)
    save_checkpoint(state, str(path))
    return state
