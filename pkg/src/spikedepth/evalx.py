"""Evaluation metrics and sparsity profiling.

MDE (mean depth error) is the mean absolute depth difference over valid
ground-truth pixels, in centimeters, always computed in metric space.
Density of a spike tensor is the fraction of nonzero entries (occupancy);
spike-mass density (mean count / max possible) is emitted as a secondary
column since a cell holding 2 spikes still occupies one unit.

The density report follows the firing-rate table layout: per-branch
encoder rows with a group mean, bottleneck rows, decoder rows, and the
model MDE at the bottom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import DepthMap, ForwardTrace, table_layers
from .snn import SpikeTensor


def mde(pred: DepthMap, gt: DepthMap) -> float:
    """Mean absolute depth error in centimeters over gt-valid pixels."""
    if pred.depth.shape != gt.depth.shape:
        raise ValueError(f"shape mismatch: pred {pred.depth.shape} vs "
                         f"gt {gt.depth.shape}")
    mask = gt.valid
    if not mask.any():
        raise ValueError("ground truth has no valid pixels")
    err = np.abs(pred.depth[mask].astype(np.float64)
                 - gt.depth[mask].astype(np.float64))
    return float(err.mean() * 100.0)


def density(t) -> float:
    """Fraction of nonzero entries of a spike tensor or array."""
    v = t.values if isinstance(t, SpikeTensor) else np.asarray(t)
    return float(np.count_nonzero(v)) / v.size if v.size else 0.0


def spike_mass(t) -> float:
    """Mean spike count per unit (secondary sparsity measure)."""
    v = t.values if isinstance(t, SpikeTensor) else np.asarray(t)
    return float(np.mean(v)) if v.size else 0.0


@dataclass
class DensityReport:
    """Per-layer mean densities over an evaluation split, grouped like the
    firing-rate table, plus the split MDE."""
    mode: str
    rows: list[tuple[str, float, float]]          # (layer, density, spike mass)
    group_means: dict[str, float] = field(default_factory=dict)
    mde_cm: float = float("nan")

    def as_text(self) -> str:
        lines = [f"{'Layer':<22}{'Density (%)':>12}{'Mass':>10}"]
        lines.append("-" * 44)
        groups = _group_layout(self.mode)
        for group_name, layers in groups:
            for name in layers:
                d, m = dict((r[0], (r[1], r[2])) for r in self.rows)[name]
                lines.append(f"{name:<22}{100 * d:>11.1f}{m:>10.3f}")
            lines.append(f"{group_name + ' Mean':<22}"
                         f"{100 * self.group_means[group_name]:>11.1f}")
            lines.append("-" * 44)
        lines.append(f"{'Model MDE [cm]':<22}{self.mde_cm:>11.1f}")
        return "\n".join(lines)

    def as_csv(self) -> str:
        lines = ["layer,density_pct,spike_mass"]
        for name, d, m in self.rows:
            lines.append(f"{name},{100 * d:.4f},{m:.6f}")
        for gname, gmean in self.group_means.items():
            lines.append(f"{gname} Mean,{100 * gmean:.4f},")
        lines.append(f"Model MDE [cm],{self.mde_cm:.4f},")
        return "\n".join(lines) + "\n"


def _group_layout(mode: str, n_scales: int = 4):
    """(group name, member layers) in report order."""
    groups = []
    enc_L = [f"out_bottomL"] + [f"out_conv{k}L" for k in range(1, n_scales + 1)]
    groups.append(("Left Encoder", enc_L))
    if mode == "binocular":
        enc_R = [f"out_bottomR"] + [f"out_conv{k}R" for k in range(1, n_scales + 1)]
        groups.append(("Right Encoder", enc_R))
    groups.append(("Bottleneck", ["out_combined", "out_rconv"]))
    dec = []
    for k in range(n_scales, 0, -1):
        dec += [f"out_deconv{k}", f"out_add{k}"]
    groups.append(("Decoder", dec))
    return groups


def density_report(traces: list[ForwardTrace], mde_cm: float, mode: str,
                   n_scales: int = 4) -> DensityReport:
    """Average per-layer densities over test-sample traces (per-sample
    mean) and assemble the grouped report."""
    if not traces:
        raise ValueError("no forward traces given")
    layers = table_layers(mode, n_scales)
    rows = []
    dens = {}
    for name in layers:
        d = float(np.mean([t.densities[name] for t in traces]))
        m = float(np.mean([spike_mass(t.spikes[name]) for t in traces]))
        dens[name] = d
        rows.append((name, d, m))
    group_means = {
        gname: float(np.mean([dens[n] for n in members]))
        for gname, members in _group_layout(mode, n_scales)
    }
    return DensityReport(mode=mode, rows=rows, group_means=group_means,
                         mde_cm=mde_cm)


def write_depth_pgm(depth_map: DepthMap, path, d_max: float) -> None:
    """16-bit grayscale PGM of a depth raster, scaled to [0, d_max]."""
    d = np.clip(depth_map.depth / d_max, 0.0, 1.0)
    img = (d * 65535).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(img.tobytes())


def write_depth_f32(depth_map: DepthMap, path) -> None:
    """Raw little-endian float32 raster for exact comparison; invalid
    pixels written as NaN, 8-byte (H, W) header."""
    import struct
    d = depth_map.depth.astype("<f4").copy()
    d[~depth_map.valid] = np.nan
    with open(path, "wb") as f:
        f.write(struct.pack("<II", d.shape[0], d.shape[1]))
        f.write(d.tobytes())
