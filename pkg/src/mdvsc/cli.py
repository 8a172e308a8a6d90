"""Experiment harness CLI: training plus the sweep and ablation commands.

Usage:
    mdvsc COMMAND [--config PATH] [--seed N] [--out DIR] [key=value ...]

Commands: train, sweep-cbr, sweep-snr, sweep-drop, sweep-balance, ablate,
jitter.  Configuration is a nested YAML file; any key can be overridden on
the command line with dotted ``section.key=value`` arguments.  Every
command writes CSV tables (the contract) and PNG plots (derived artifacts)
into the output directory.  Exit codes: 0 ok, 1 runtime failure, 2 config
error.  CSV columns are documented in docs/csv_schema.md.
"""

from __future__ import annotations

import argparse
import copy
import csv
import math
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from .channel import ChannelConfig
from .data import (
    ToyVideoDataset,
    eval_video,
    generate_clip,
    make_jump_gop,
    random_scene,
    read_frames,
)
from .pipeline import evaluate, summarize, transmit
from .training import (
    ModelState,
    TrainConfig,
    calibrate_lambda,
    load_checkpoint,
    save_checkpoint,
    toy_codec_config,
    train,
)
from .transform_codec import CodecConfig
from .video_model import Gop, split_into_gops
from .vlc import Budget, trade_budget

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs/out",
    "checkpoint": None,
    "no_cfe_checkpoint": None,
    "workers": 1,
    "model": {
        "channel_width": 32,
        "latent_downsample": 2,
        "jscc_blocks": 3,
        "residual_per_block": 3,
        "resample_kernel": 5,
        "residual_kernel": 3,
        "hyper_width": 32,
        "hyper_stages": 2,
    },
    "train": {
        "lambda_rate": 1.0,
        "lr_init": 1e-4,
        "lr_min": 1e-6,
        "batch_size": 4,
        "gop_size": 4,
        "train_snr_db": 10.0,
        "crop": 64,
        "steps": 3000,
        "weight_decay": 0.0,
        "bypass_cfe": False,
        "checkpoint_every": 500,
        "resume": None,
        "calibrate_lambda": False,
    },
    "data": {
        "preset": "toy",
        "dir": None,
        "clips": 2000,
        "frame_size": 64,
        "dataset_seed": 1234,
    },
    "eval": {
        "snr_db": 15.0,
        "target_cbr": 0.01,
        "policy": "entropy",
        "gop_size": 4,
        "num_gops": 8,
        "video_seed": 777,
        "num_seeds": 1,
    },
    "sweep": {
        "cbr_grid": [0.005, 0.010, 0.015, 0.020, 0.025, 0.030],
        "snr_grid": [0.0, 5.0, 10.0, 15.0, 20.0],
        "drop_grid": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        "delta_grid": [-0.1, -0.05, 0.0, 0.05, 0.1, 0.15, 0.2],
        "balance_cbr_grid": [0.005, 0.010, 0.020],
        "jitter_gops": 50,
        "jitter_jump_every": 0,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted} expects a mapping")
            out[key] = _merge(base[key], value, f"{dotted}.")
        else:
            out[key] = value
    return out


def _apply_override(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[keys[-1]] = yaml.safe_load(raw)


def load_config(path: str | None, overrides: list[str],
                seed: int | None, out: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = _merge(cfg, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        _apply_override(cfg, key, value)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    return cfg


def _codec_config(cfg: dict) -> CodecConfig:
    return CodecConfig(**cfg["model"])


def _train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t.pop("resume", None)
    t.pop("calibrate_lambda", None)
    return TrainConfig(seed=cfg["seed"], **t)


def _dataset(cfg: dict):
    d = cfg["data"]
    if d["dir"]:
        frames = read_frames(d["dir"])
        gops = split_into_gops(frames, cfg["train"]["gop_size"])
        return gops
    return ToyVideoDataset(
        num_clips=d["clips"],
        height=d["frame_size"],
        width=d["frame_size"],
        gop_size=cfg["train"]["gop_size"],
        seed=d["dataset_seed"],
    )


def _eval_frames(cfg: dict, num_gops: int | None = None):
    e = cfg["eval"]
    return eval_video(
        num_gops=num_gops or e["num_gops"],
        height=cfg["data"]["frame_size"],
        width=cfg["data"]["frame_size"],
        gop_size=e["gop_size"],
        seed=e["video_seed"],
    )


def _load_state(cfg: dict) -> ModelState:
    path = cfg["checkpoint"]
    if not path:
        raise ConfigError("this command needs a checkpoint path (config key: checkpoint)")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


_GRID_FN = None


def _grid_call(item):
    return _GRID_FN(item)


def map_grid(fn, items, workers: int = 1):
    """Apply ``fn`` over grid points, optionally in worker processes.

    Results always come back in grid order, so CSV output is identical for
    any worker count.  Workers are forked and find ``fn`` through an
    inherited module global (closures cannot cross the task pipe); each
    child pins itself to one torch thread.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    import multiprocessing

    import torch

    global _GRID_FN
    _GRID_FN = fn
    try:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=min(workers, len(items)),
                      initializer=torch.set_num_threads, initargs=(1,)) as pool:
            return pool.map(_grid_call, items)
    finally:
        _GRID_FN = None


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _plot(path: Path, x, series: dict[str, list], xlabel: str, ylabel: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in series.items():
        ax.plot(x, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = _dataset(cfg)
    codec = _codec_config(cfg)
    tcfg = _train_config(cfg)
    if cfg["train"]["calibrate_lambda"]:
        lam, details = calibrate_lambda(dataset, codec, tcfg)
        print(f"calibrated lambda_rate={lam} from {details}")
        tcfg = TrainConfig(**{**tcfg.__dict__, "lambda_rate": lam})
    resume = cfg["train"]["resume"]
    if resume:
        state = load_checkpoint(resume)
    else:
        state = ModelState.initialize(codec, tcfg, seed=cfg["seed"])
    ckpt = cfg["checkpoint"] or str(out / "checkpoint.mdvsc")
    trace = train(state, dataset, tcfg, checkpoint_path=ckpt,
                  log_fn=lambda rec: print(
                      f"step {rec['step']:6d} lr {rec['lr']:.3e} loss {rec['loss']:.5f}",
                      flush=True) if rec["step"] % 100 == 0 else None)
    save_checkpoint(state, ckpt)
    rows = [[r["step"], r["lr"], r["loss"]] for r in trace]
    write_csv(out / "loss_curve.csv", ["step", "lr", "loss"], rows)
    if rows:
        _plot(out / "loss_curve.png", [r[0] for r in rows],
              {"loss": [r[2] for r in rows]}, "step", "loss")
    print(f"checkpoint: {ckpt}")
    return 0


def _channel(cfg: dict, snr_db: float | None = None) -> ChannelConfig:
    value = cfg["eval"]["snr_db"] if snr_db is None else snr_db
    return ChannelConfig(snr_db=float(value))  # accepts "inf" for noiseless rows


def cmd_sweep_cbr(cfg: dict) -> int:
    state = _load_state(cfg)
    frames = _eval_frames(cfg)
    out = Path(cfg["out"])

    def point(target):
        budget = Budget(target_cbr=float(target))
        rep = evaluate(frames, state, budget, _channel(cfg), cfg["eval"]["gop_size"],
                       policy=cfg["eval"]["policy"], master_seed=cfg["seed"])
        feasible = all(
            abs(c.cbr - target) <= 1.0 / c.source_dim for c in rep.per_gop_cbr
        )
        return [
            target, rep.cbr_mean, rep.per_gop_cbr[0].symbol_count, feasible,
            rep.quality.psnr_db, rep.quality.ms_ssim, rep.quality.ms_ssim_db,
        ]

    rows = map_grid(point, cfg["sweep"]["cbr_grid"], cfg["workers"])
    write_csv(out / "sweep_cbr.csv",
              ["target_cbr", "achieved_cbr", "symbols_per_gop", "feasible",
               "psnr_db", "ms_ssim", "ms_ssim_db"], rows)
    _plot(out / "sweep_cbr.png", [r[0] for r in rows],
          {"PSNR (dB)": [r[4] for r in rows]}, "CBR", "PSNR (dB)")
    return 0


def cmd_sweep_snr(cfg: dict) -> int:
    state = _load_state(cfg)
    frames = _eval_frames(cfg)
    out = Path(cfg["out"])
    budget = Budget(target_cbr=cfg["eval"]["target_cbr"])

    def point(snr):
        rep = evaluate(frames, state, budget, _channel(cfg, float(snr)),
                       cfg["eval"]["gop_size"], policy=cfg["eval"]["policy"],
                       master_seed=cfg["seed"])
        return [snr, rep.cbr_mean, rep.quality.psnr_db,
                rep.quality.ms_ssim, rep.quality.ms_ssim_db]

    rows = map_grid(point, cfg["sweep"]["snr_grid"], cfg["workers"])
    write_csv(out / "sweep_snr.csv",
              ["snr_db", "cbr", "psnr_db", "ms_ssim", "ms_ssim_db"], rows)
    _plot(out / "sweep_snr.png", [r[0] for r in rows],
          {"MS-SSIM (dB)": [r[4] for r in rows]}, "SNR (dB)", "MS-SSIM (dB)")
    return 0


def cmd_sweep_drop(cfg: dict) -> int:
    state = _load_state(cfg)
    frames = _eval_frames(cfg)
    out = Path(cfg["out"])
    gop_size = cfg["eval"]["gop_size"]

    def point(ratio):
        budget = Budget(mode="split", drop_common=ratio, drop_individual=ratio,
                        gop_size=gop_size)
        rep = evaluate(frames, state, budget, _channel(cfg), gop_size,
                       policy=cfg["eval"]["policy"], master_seed=cfg["seed"])
        return [ratio, rep.per_gop_cbr[0].symbol_count, rep.cbr_mean,
                rep.quality.psnr_db, rep.quality.ms_ssim, rep.quality.ms_ssim_db]

    rows = map_grid(point, cfg["sweep"]["drop_grid"], cfg["workers"])
    write_csv(out / "sweep_drop.csv",
              ["drop_ratio", "kept_symbols", "cbr", "psnr_db", "ms_ssim", "ms_ssim_db"],
              rows)
    base_psnr = rows[0][3]
    knee = next((r[0] for r in rows if r[3] < base_psnr - 1.0), None)
    write_csv(out / "sweep_drop_summary.csv", ["baseline_psnr_db", "knee_ratio"],
              [[base_psnr, knee if knee is not None else ""]])
    _plot(out / "sweep_drop.png", [r[0] for r in rows],
          {"PSNR (dB)": [r[3] for r in rows]}, "drop ratio", "PSNR (dB)")
    return 0


def cmd_sweep_balance(cfg: dict) -> int:
    state = _load_state(cfg)
    frames = _eval_frames(cfg)
    out = Path(cfg["out"])
    gop_size = cfg["eval"]["gop_size"]
    gops = split_into_gops(frames, gop_size)
    fh, fw, fc = state.codec_config.feature_shape(*gops[0].frame_shape[:2])
    map_numel = fh * fw * fc
    h, w, c = gops[0].frame_shape
    source_dim = gop_size * h * w * c
    rows = []
    for target in cfg["sweep"]["balance_cbr_grid"]:
        k_total = math.floor(Fraction(str(target)) * source_dim)
        ratio0 = 1 - Fraction(k_total, (gop_size + 1) * map_numel)
        if not 0 <= ratio0 <= 1:
            raise ValueError(f"target_cbr {target} infeasible for this model")
        base = Budget(mode="split", target_cbr=float(target),
                      drop_common=ratio0, drop_individual=ratio0, gop_size=gop_size)
        for delta in cfg["sweep"]["delta_grid"]:
            try:
                budget = trade_budget(base, delta)
            except ValueError:
                rows.append([target, delta, "", "", "", False, "", "", ""])
                continue
            rep = evaluate(frames, state, budget, _channel(cfg), gop_size,
                           policy=cfg["eval"]["policy"], master_seed=cfg["seed"])
            kept = rep.per_gop_cbr[0].symbol_count
            rows.append([
                target, delta, float(budget.drop_common), float(budget.drop_individual),
                kept, True, rep.quality.psnr_db, rep.quality.ms_ssim,
                rep.quality.ms_ssim_db,
            ])
    write_csv(out / "sweep_balance.csv",
              ["target_cbr", "delta_individual", "dr_common", "dr_individual",
               "kept_symbols", "feasible", "psnr_db", "ms_ssim", "ms_ssim_db"], rows)
    feasible = [r for r in rows if r[5]]
    if feasible:
        targets = sorted({r[0] for r in feasible})
        series = {
            f"cbr={t}": [r[6] for r in feasible if r[0] == t] for t in targets
        }
        xs = [r[1] for r in feasible if r[0] == targets[0]]
        try:
            _plot(out / "sweep_balance.png", xs, series, "delta individual", "PSNR (dB)")
        except ValueError:
            pass  # uneven feasibility across CBR groups; CSV remains the contract
    return 0


def cmd_ablate(cfg: dict) -> int:
    state = _load_state(cfg)
    frames = _eval_frames(cfg)
    out = Path(cfg["out"])
    gop_size = cfg["eval"]["gop_size"]
    no_cfe_state = None
    if cfg["no_cfe_checkpoint"]:
        if not Path(cfg["no_cfe_checkpoint"]).exists():
            raise FileNotFoundError(
                f"checkpoint not found: {cfg['no_cfe_checkpoint']}")
        no_cfe_state = load_checkpoint(cfg["no_cfe_checkpoint"])

    variants = ["baseline", "no_cfe", "entropy", "power", "random",
                "inv_entropy", "inv_power"]
    if no_cfe_state is not None:
        variants.insert(2, "no_cfe_retrained")
    rows = []
    for target in cfg["sweep"]["cbr_grid"]:
        budget = Budget(target_cbr=float(target))
        row = [target]
        cells = {}
        for variant in variants:
            policy = variant if variant in ("power", "random", "inv_entropy",
                                            "inv_power") else "entropy"
            bypass = variant == "no_cfe"
            eval_state = no_cfe_state if variant == "no_cfe_retrained" else state
            rep = evaluate(frames, eval_state, budget, _channel(cfg), gop_size,
                           policy=policy, master_seed=cfg["seed"], bypass_cfe=bypass)
            cells[variant] = (rep.quality.psnr_db, rep.quality.ms_ssim_db)
        for variant in variants:
            row.append(cells[variant][0])
        for variant in variants:
            row.append(cells[variant][1])
        rows.append(row)
    header = (["target_cbr"]
              + [f"psnr_{v}" for v in variants]
              + [f"msssimdb_{v}" for v in variants])
    write_csv(out / "ablate.csv", header, rows)
    _plot(out / "ablate.png", [r[0] for r in rows],
          {v: [r[1 + i] for r in rows] for i, v in enumerate(variants)},
          "CBR", "PSNR (dB)")
    return 0


def cmd_jitter(cfg: dict) -> int:
    state = _load_state(cfg)
    out = Path(cfg["out"])
    gop_size = cfg["eval"]["gop_size"]
    num_gops = cfg["sweep"]["jitter_gops"]
    jump_every = cfg["sweep"]["jitter_jump_every"]
    size = cfg["data"]["frame_size"]
    budget = Budget(target_cbr=cfg["eval"]["target_cbr"])
    results = []
    rows = []
    for i in range(num_gops):
        rng = np.random.default_rng([cfg["seed"], 31337, i])
        is_jump = bool(jump_every) and i % jump_every == jump_every - 1
        if is_jump:
            specs = [random_scene(np.random.default_rng([cfg["seed"], i, j]),
                                  size, size, gop_size)
                     for j in range(gop_size)]
            gop = make_jump_gop(specs, rng, gop_id=i)
        else:
            spec = random_scene(np.random.default_rng([cfg["seed"], 91, i]),
                                size, size, gop_size)
            gop = Gop(frames=tuple(generate_clip(spec)), gop_id=i)
        res = transmit(gop, state, budget, _channel(cfg), policy=cfg["eval"]["policy"],
                       rng=rng)
        results.append(res)
        rows.append([i, res.cbr.symbol_count, res.cbr.cbr, is_jump,
                     res.quality.psnr_db, res.quality.ms_ssim, res.quality.ms_ssim_db])
    rep = summarize(results)
    write_csv(out / "jitter.csv",
              ["gop_index", "symbols", "cbr", "is_jump", "psnr_db", "ms_ssim",
               "ms_ssim_db"], rows)
    write_csv(out / "jitter_summary.csv",
              ["cbr_mean", "cbr_variance", "psnr_variance", "ms_ssim_variance"],
              [[rep.cbr_mean, rep.cbr_variance, rep.psnr_variance,
                rep.ms_ssim_variance]])
    _plot(out / "jitter.png", [r[0] for r in rows],
          {"CBR": [r[2] for r in rows]}, "GOP index", "CBR")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep-cbr": cmd_sweep_cbr,
    "sweep-snr": cmd_sweep_snr,
    "sweep-drop": cmd_sweep_drop,
    "sweep-balance": cmd_sweep_balance,
    "ablate": cmd_ablate,
    "jitter": cmd_jitter,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdvsc",
        description="Model-division video semantic communication experiment harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("overrides", nargs="*", help="dotted key=value overrides")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.out)
    except (ConfigError, FileNotFoundError, yaml.YAMLError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg)
    except (ConfigError,) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
