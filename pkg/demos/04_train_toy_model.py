"""Train a small model briefly and watch the rate-distortion loss fall.

A real run uses the toy preset (see README); this demo trims everything
down to finish in about a minute on a laptop CPU.
Run:  python demos/04_train_toy_model.py
"""

import numpy as np

from mdvsc import Budget, ChannelConfig, ToyVideoDataset, evaluate
from mdvsc.data import eval_video
from mdvsc.training import ModelState, toy_codec_config, toy_train_config, train

steps = 150
config = toy_train_config(steps=steps)
dataset = ToyVideoDataset()
state = ModelState.initialize(toy_codec_config(), config, seed=0)

video = eval_video(num_gops=2)


def eval_psnr():
    rep = evaluate(video, state, Budget(target_cbr=0.01), ChannelConfig(snr_db=15.0),
                   gop_size=4, master_seed=9)
    return rep.quality.psnr_db


print(f"PSNR before training: {eval_psnr():.2f} dB at CBR 0.01, SNR 15 dB")
trace = train(state, dataset, config)
losses = [t["loss"] for t in trace]
print(f"loss: start {np.mean(losses[:10]):.4f} -> end {np.mean(losses[-10:]):.4f}")
print(f"PSNR after {steps} steps: {eval_psnr():.2f} dB")
print("(the shipped preset trains thousands of steps; see `mdvsc train`)")
