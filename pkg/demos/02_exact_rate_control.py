"""Show exact rate control: achieved CBR hits every target to one symbol.

Rate control is pure mask arithmetic, so an untrained model demonstrates
it just as well as a trained one.
Run:  python demos/02_exact_rate_control.py
"""

import numpy as np

from mdvsc import Budget, ChannelConfig, ToyVideoDataset, transmit
from mdvsc.training import ModelState, toy_codec_config, toy_train_config
from mdvsc.video_model import source_dimension

state = ModelState.initialize(toy_codec_config(), toy_train_config(), seed=0)
gop = ToyVideoDataset(num_clips=1)[0]
dim = source_dimension(gop)

print(f"source dimension {dim}; one-symbol tolerance {1 / dim:.3e}\n")
print(f"{'target':>8} {'kept':>6} {'achieved':>12} {'error':>12}")
for target in (0.005, 0.010, 0.015, 0.020, 0.025, 0.030):
    res = transmit(gop, state, Budget(target_cbr=target),
                   ChannelConfig(snr_db=float("inf")), rng=np.random.default_rng(0))
    err = abs(res.cbr.cbr - target)
    print(f"{target:>8} {res.cbr.symbol_count:>6} {res.cbr.cbr:>12.8f} {err:>12.3e}")
    assert err <= 1 / dim

print("\nachieved rates are exactly floor(target * dim) / dim: "
      "equally spaced like the targets themselves")
