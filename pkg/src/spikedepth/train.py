"""Adam optimizer and the five-step training loop.

Per sample: 1) zero all potentials, 2) forward pass, 3) compute the
multiscale loss and back-propagate (single sweep, no unrolling through
time), 4) Adam step, 5) next shuffled sample. Learning rate starts at
2e-4 and is divided by 10 at epoch 8 (epochs are 1-indexed: epochs 1-7
run at the initial rate). Batch size 1, no weight decay.

The regression objective is the variance of the log-depth residuals, so
it is invariant to a constant residual offset: training shapes relative
depth but leaves the absolute scale of the readout free. After each
epoch the mean full-scale residual c observed on the training passes is
folded into the readout by rescaling D_max <- D_max * exp(-c) (a pure
re-parameterization: it shifts prediction and target potentials by the
same constant, so every loss term and every gradient is unchanged).

The best model is selected by test MDE. The per-epoch log is CSV:
epoch, split, loss, mde_cm, then one density column per layer.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .evalx import mde as compute_mde
from .losses import (LossConfig, ResidualMap, regression_loss, smoothness_loss,
                     spike_penalty, total_loss)
from .model import (ForwardTrace, SpikingDepthNet, encode_depth,
                    save_checkpoint, table_layers)
from .synthdata import Dataset, Sample


class NonFiniteGradientError(RuntimeError):
    """A NaN/inf gradient reached the optimizer."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


@dataclass
class TrainPlan:
    epochs: int = 30
    lr0: float = 2e-4
    lr_drop_epoch: int = 8        # 1-indexed: this epoch runs at lr0/factor
    lr_drop_factor: float = 10.0
    batch_size: int = 1
    weight_decay: float = 0.0
    shuffle: bool = True
    spike_penalty_enabled: bool = False
    anchor_readout: bool = True   # fold the mean residual into D_max per epoch
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.weight_decay != 0.0:
            raise ValueError("weight decay is not used by this training recipe")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.epochs < 1 or self.lr0 <= 0:
            raise ValueError("epochs and lr0 must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 / self.lr_drop_factor if epoch >= self.lr_drop_epoch \
            else self.lr0


class Adam:
    """Textbook Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self, clip_norm: float | None = None) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    f"non-finite gradient in parameter {name!r}")
            grads[name] = g
        if clip_norm is not None:
            norm = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
            if norm > clip_norm:
                factor = clip_norm / norm
                grads = {k: g * factor for k, g in grads.items()}
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.values -= (self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)
                         ).astype(p.values.dtype)


def sample_loss(trace: ForwardTrace, gt, cfg, loss_cfg: LossConfig,
                with_penalty: bool):
    """Total loss for one forward pass; returns (loss tensor, parts dict)."""
    gt_potential = encode_depth(gt.depth, cfg)
    residuals = [
        ResidualMap.from_prediction(pred, gt_potential, gt.valid)
        for _, pred in trace.intermediate_predictions
    ]
    reg = regression_loss(residuals)
    smooth = smoothness_loss(residuals)
    penalty = None
    if with_penalty:
        layers = [trace.spikes[name] for name in loss_cfg.penalized_layers
                  if name in trace.spikes]
        penalty = spike_penalty(layers)
    loss = total_loss(reg, smooth, loss_cfg, penalty)
    parts = {"regression": float(reg.values), "smooth": float(smooth.values)}
    if penalty is not None:
        parts["spike_penalty"] = float(penalty.values)
    return loss, parts


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_mde: float
    test_loss: float
    test_mde: float
    train_densities: dict[str, float]
    test_densities: dict[str, float]
    seconds: float = 0.0


@dataclass
class TrainingLog:
    layers: list[str]
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_test_mde: float = float("inf")
    checkpoint_path: str | None = None

    def to_csv(self) -> str:
        cols = ["epoch", "split", "loss", "mde_cm"] + \
               [f"density_{name}" for name in self.layers]
        lines = [",".join(cols)]
        for e in self.epochs:
            for split, loss, m, dens in (
                    ("train", e.train_loss, e.train_mde, e.train_densities),
                    ("test", e.test_loss, e.test_mde, e.test_densities)):
                row = [str(e.epoch), split, f"{loss:.6f}", f"{m:.4f}"]
                row += [f"{dens[name]:.6f}" for name in self.layers]
                lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def _forward_sample(net: SpikingDepthNet, sample: Sample):
    right = sample.right if net.cfg.mode == "binocular" else None
    return net.forward(sample.left, right)


def evaluate(net: SpikingDepthNet, samples: list[Sample],
             loss_cfg: LossConfig, with_penalty: bool,
             keep_traces: bool = False):
    """Forward-only pass over a split: mean loss, mean MDE, mean densities.

    Never mutates parameters (no tape is active)."""
    if not samples:
        raise ValueError("empty evaluation split")
    layers = table_layers(net.cfg.mode, net.cfg.n_scales)
    losses, mdes = [], []
    dens = {name: 0.0 for name in layers}
    traces = []
    for sample in samples:
        pred, trace = _forward_sample(net, sample)
        loss, _ = sample_loss(trace, sample.gt, net.cfg, loss_cfg, with_penalty)
        losses.append(float(loss.values))
        mdes.append(compute_mde(pred, sample.gt))
        for name in layers:
            dens[name] += trace.densities[name]
        if keep_traces:
            traces.append(trace)
    n = len(samples)
    out_dens = {name: v / n for name, v in dens.items()}
    return float(np.mean(losses)), float(np.mean(mdes)), out_dens, traces


def run_training(net: SpikingDepthNet, dataset: Dataset, plan: TrainPlan,
                 loss_cfg: LossConfig, out_dir=None,
                 progress=None) -> TrainingLog:
    """Run the full training schedule; checkpoints the best-test-MDE model
    into out_dir (if given) and returns the per-epoch log."""
    if not dataset.train or not dataset.test:
        raise ValueError("dataset must provide non-empty train and test splits")
    layers = table_layers(net.cfg.mode, net.cfg.n_scales)
    log = TrainingLog(layers=layers)
    rng = np.random.default_rng(plan.seed)
    adam = Adam(net.parameters(), lr=plan.lr0)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, plan.epochs + 1):
        t_start = time.monotonic()
        adam.lr = plan.lr_at(epoch)
        order = rng.permutation(len(dataset.train)) if plan.shuffle \
            else np.arange(len(dataset.train))
        losses, mdes, offsets = [], [], []
        dens = {name: 0.0 for name in layers}
        for idx in order:
            sample = dataset.train[int(idx)]
            net.zero_grad()
            with ad.Tape() as tape:
                pred, trace = _forward_sample(net, sample)
                loss, _ = sample_loss(trace, sample.gt, net.cfg, loss_cfg,
                                      plan.spike_penalty_enabled)
                if not np.isfinite(loss.values):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, sample "
                        f"{sample.name}: {float(loss.values)}")
                ad.backward(loss, tape)
            adam.step(clip_norm=plan.clip_norm)
            losses.append(float(loss.values))
            mdes.append(compute_mde(pred, sample.gt))
            for name in layers:
                dens[name] += trace.densities[name]
            final = trace.intermediate_predictions[-1][1].values[0]
            gt_pot = encode_depth(sample.gt.depth, net.cfg)
            offsets.append(float((final - gt_pot)[sample.gt.valid].mean()))

        if plan.anchor_readout and net.cfg.depth_code == "log":
            c = float(np.mean(offsets))
            net.cfg = replace(net.cfg, d_max=net.cfg.d_max * math.exp(-c))

        n = len(order)
        train_dens = {name: v / n for name, v in dens.items()}
        test_loss, test_mde, test_dens, _ = evaluate(
            net, dataset.test, loss_cfg, plan.spike_penalty_enabled)
        stats = EpochStats(
            epoch=epoch, lr=adam.lr,
            train_loss=float(np.mean(losses)), train_mde=float(np.mean(mdes)),
            test_loss=test_loss, test_mde=test_mde,
            train_densities=train_dens, test_densities=test_dens,
            seconds=time.monotonic() - t_start)
        log.epochs.append(stats)
        if test_mde < log.best_test_mde:
            log.best_test_mde = test_mde
            log.best_epoch = epoch
            if out_dir is not None:
                path = out_dir / "best.ssk"
                save_checkpoint(net, path)
                log.checkpoint_path = str(path)
        if out_dir is not None:
            (out_dir / "train_log.csv").write_text(log.to_csv())
        if progress is not None:
            progress(stats)
    return log
