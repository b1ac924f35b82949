"""Command-line surface.

Subcommands: synth-gen, train, eval, infer, profile, gradcheck.
Configuration comes from an optional plain-text key=value file plus flag
overrides (flags win); unknown keys are rejected and the effective config
is echoed into the run directory. All randomness flows from --seed.

Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .events import read_evt
from .evalx import density_report, write_depth_f32, write_depth_pgm
from .losses import LossConfig
from .model import (ModelConfig, SpikingDepthNet, calibrate_firing_rates,
                    load_checkpoint, save_checkpoint)
from .events import make_chunk
from .synthdata import load_dataset, make_dataset
from .train import TrainPlan, evaluate, run_training

_CONFIG_KEYS = {
    "mode": str, "epochs": int, "lr": float, "lambda_smooth": float,
    "lambda_spike": float, "base_channels": int, "seed": int,
    "n_frames": int, "frame_ms": float, "d_min": float, "d_max": float,
    "depth_code": str, "skip_mode": str, "spike_penalty": bool,
    "clip_norm": float, "data": str, "out": str, "checkpoint": str,
    "count": int, "height": int, "width": int, "surrogate_alpha": float,
}

_DEFAULTS = {
    "mode": "binocular", "epochs": 30, "lr": 2e-4, "lambda_smooth": 0.5,
    "lambda_spike": 5e-3, "base_channels": 8, "seed": 0, "n_frames": 5,
    "frame_ms": 50.0, "d_min": 0.5, "d_max": 10.0, "depth_code": "log",
    "skip_mode": "sum", "spike_penalty": False, "clip_norm": None,
    "data": None, "out": None, "checkpoint": None, "count": 100,
    "height": 64, "width": 64, "surrogate_alpha": 2.0,
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    typ = _CONFIG_KEYS[key]
    if typ is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: {e}") from e


def load_config(path: str | None, overrides: dict) -> dict:
    """Merge defaults <- config file <- flag overrides."""
    cfg = dict(_DEFAULTS)
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = _parse_value(key, raw)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg) if cfg[k] is not None]
    (out_dir / "config_used.txt").write_text("\n".join(lines) + "\n")


def _model_config(cfg: dict, height: int, width: int) -> ModelConfig:
    mode = {"mono": "monocular", "bino": "binocular"}.get(cfg["mode"], cfg["mode"])
    return ModelConfig(
        mode=mode, in_channels=2 * cfg["n_frames"],
        base_channels=cfg["base_channels"], input_height=height,
        input_width=width, d_min=cfg["d_min"], d_max=cfg["d_max"],
        depth_code=cfg["depth_code"], surrogate_alpha=cfg["surrogate_alpha"],
        skip_mode=cfg["skip_mode"])


def _loss_config(cfg: dict) -> LossConfig:
    return LossConfig(lambda_smooth=cfg["lambda_smooth"],
                      lambda_spike=cfg["lambda_spike"])


def _require(cfg: dict, *keys: str):
    for key in keys:
        if cfg[key] is None:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")


# ---------------------------------------------------------------------------
# commands

def cmd_synth_gen(cfg: dict) -> int:
    _require(cfg, "out")
    out = Path(cfg["out"])
    make_dataset(out, count=cfg["count"], seed=cfg["seed"],
                 height=cfg["height"], width=cfg["width"])
    echo_config(cfg, out)
    print(f"wrote {cfg['count']} samples to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    out = Path(cfg["out"])
    dataset = load_dataset(cfg["data"], n_frames=cfg["n_frames"],
                           frame_ms=cfg["frame_ms"])
    if cfg["checkpoint"] is not None:
        # fine-tune: geometry and mode come from the checkpoint
        net = load_checkpoint(cfg["checkpoint"])
    else:
        mc = _model_config(cfg, dataset.height, dataset.width)
        rng = np.random.default_rng(cfg["seed"])
        net = SpikingDepthNet(mc, rng)
        probes = _probe_inputs(net, dataset)
        calibrate_firing_rates(net, probes)
    plan = TrainPlan(epochs=cfg["epochs"], lr0=cfg["lr"],
                     spike_penalty_enabled=cfg["spike_penalty"],
                     seed=cfg["seed"], clip_norm=cfg["clip_norm"])
    echo_config(cfg, out)

    def progress(stats):
        print(f"epoch {stats.epoch:3d}  lr {stats.lr:.1e}  "
              f"train loss {stats.train_loss:.4f} mde {stats.train_mde:.1f}cm  "
              f"test loss {stats.test_loss:.4f} mde {stats.test_mde:.1f}cm  "
              f"({stats.seconds:.0f}s)", flush=True)

    log = run_training(net, dataset, plan, _loss_config(cfg), out_dir=out,
                       progress=progress)
    save_checkpoint(net, out / "last.ssk")
    print(f"best test MDE {log.best_test_mde:.1f} cm at epoch {log.best_epoch}")
    return 0


def _probe_inputs(net: SpikingDepthNet, dataset):
    probes = []
    for sample in dataset.train[:2]:
        if net.cfg.mode == "binocular":
            probes.append((sample.left, sample.right))
        else:
            probes.append((sample.left,))
    return probes


def _eval_common(cfg: dict, keep_traces: bool):
    _require(cfg, "checkpoint", "data")
    net = load_checkpoint(cfg["checkpoint"])
    dataset = load_dataset(cfg["data"], n_frames=cfg["n_frames"],
                           frame_ms=cfg["frame_ms"])
    loss, mde, dens, traces = evaluate(net, dataset.test, _loss_config(cfg),
                                       with_penalty=False,
                                       keep_traces=keep_traces)
    return net, dataset, loss, mde, dens, traces


def cmd_eval(cfg: dict) -> int:
    net, _, loss, mde, _, traces = _eval_common(cfg, keep_traces=True)
    report = density_report(traces, mde, net.cfg.mode, net.cfg.n_scales)
    print(f"test loss {loss:.4f}  test MDE {mde:.2f} cm")
    print(report.as_text())
    if cfg["out"] is not None:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.as_csv())
        (out / "report.txt").write_text(report.as_text() + "\n")
        echo_config(cfg, out)
    return 0


def cmd_profile(cfg: dict) -> int:
    # same machinery as eval; kept as its own verb for the sparsity report
    return cmd_eval(cfg)


def cmd_infer(cfg: dict, left_path: str, right_path: str | None) -> int:
    _require(cfg, "checkpoint", "out")
    net = load_checkpoint(cfg["checkpoint"])
    if (right_path is None) != (net.cfg.mode == "monocular"):
        raise ConfigError(f"checkpoint is {net.cfg.mode}; "
                          f"{'--right required' if net.cfg.mode == 'binocular' else 'drop --right'}")
    dt_us = int(round(cfg["frame_ms"] * 1000))
    left = make_chunk(read_evt(left_path), 0, cfg["n_frames"], dt_us)
    right = None
    if right_path is not None:
        right = make_chunk(read_evt(right_path), 0, cfg["n_frames"], dt_us)
    pred, _ = net.forward(left, right)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(left_path).stem
    write_depth_pgm(pred, out / f"pred_{stem}.pgm", net.cfg.d_max)
    write_depth_f32(pred, out / f"pred_{stem}.f32")
    print(f"wrote pred_{stem}.pgm / .f32 to {out}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    tol = 1e-3 if ad.default_dtype() == np.float32 else 1e-5
    results = ad.gradient_suite(n_instances=20, seed=cfg["seed"])
    failed = False
    for name, err in sorted(results.items()):
        ok = err <= tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<20} max rel err {err:.2e}")
    if failed:
        print(f"gradient suite FAILED (tolerance {tol:g})")
        return 2
    print(f"gradient suite passed (tolerance {tol:g})")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spikedepth")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--n-frames", type=int, dest="n_frames", default=None)
        p.add_argument("--frame-ms", type=float, dest="frame_ms", default=None)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None,
                   help="fine-tune from an existing .ssk instead of "
                        "initializing fresh")
    p.add_argument("--mode", choices=["mono", "bino", "monocular", "binocular"],
                   default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda-smooth", type=float, dest="lambda_smooth",
                   default=None)
    p.add_argument("--lambda-spike", type=float, dest="lambda_spike",
                   default=None)
    p.add_argument("--base-channels", type=int, dest="base_channels",
                   default=None)
    p.add_argument("--spike-penalty", action="store_const", const=True,
                   dest="spike_penalty", default=None)
    p.add_argument("--clip-norm", type=float, dest="clip_norm", default=None)

    for verb in ("eval", "profile"):
        p = sub.add_parser(verb)
        common(p)
        p.add_argument("--data", default=None)
        p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("infer", help="predict depth for .evt inputs")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--left", required=True)
    p.add_argument("--right", default=None)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    common(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items()
                 if k in _CONFIG_KEYS and v is not None}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "synth-gen":
            return cmd_synth_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "profile":
            return cmd_profile(cfg)
        if args.command == "infer":
            return cmd_infer(cfg, args.left, args.right)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
