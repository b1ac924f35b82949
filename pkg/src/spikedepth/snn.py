"""Spiking layer semantics on top of the autodiff primitives.

Single-step, stateless model: every membrane potential is (conceptually)
reset to zero before each inference, so an integrate-and-fire layer
degenerates to a thresholded feedforward nonlinearity over its synaptic
input. The type distinction matters: conv outputs are real preactivations
(Tensor); only thresholded/summed activations are SpikeTensors, which
always hold exact non-negative integers with a tracked upper bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (ShapeMismatchError, SurrogateConfig, Tensor, add,
                       constant, conv2d, default_dtype, spike_threshold)


class SpikeRangeError(AssertionError):
    """A spike tensor violated its integrality or max_count bound."""


@dataclass
class SpikeTensor:
    """Integer activation volume (counts stored as reals) with a static
    upper bound: 1 after an IF layer, up to 4 after the bottleneck."""
    data: Tensor
    max_count: int

    @property
    def values(self) -> np.ndarray:
        return self.data.values

    def check(self, context: str = "") -> None:
        v = self.data.values
        if not np.array_equal(v, np.round(v)):
            raise SpikeRangeError(f"non-integer spike count {context}")
        if v.size and (v.min() < 0 or v.max() > self.max_count):
            raise SpikeRangeError(
                f"spike counts outside [0, {self.max_count}] {context}: "
                f"range [{v.min()}, {v.max()}]")

    def density(self) -> float:
        v = self.data.values
        return float(np.count_nonzero(v)) / v.size if v.size else 0.0


@dataclass(frozen=True)
class IFLayer:
    """Integrate-and-fire neuron layer, threshold 1.0, reset to 0."""
    v_thresh: float = 1.0
    v_reset: float = 0.0
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)

    def __post_init__(self):
        if self.v_thresh <= self.v_reset:
            raise ValueError("v_thresh must exceed v_reset")


def if_forward(preact: Tensor, layer: IFLayer) -> SpikeTensor:
    """One stateless IF step: potential = preactivation, spike iff it
    reaches threshold, potential reset (no state carried anywhere)."""
    out = spike_threshold(preact, layer.v_thresh, layer.surrogate)
    return SpikeTensor(data=out, max_count=1)


@dataclass
class SEWResBlock:
    """Spike-element-wise residual block with ADD connect: two bias-free
    3x3 convs, each followed by an IF layer, plus the identity spikes."""
    conv_a: Tensor
    conv_b: Tensor
    if_a: IFLayer
    if_b: IFLayer


def sew_block_forward(x: SpikeTensor, block: SEWResBlock) -> SpikeTensor:
    k = block.conv_a.values.shape[2]
    p = (k - 1) // 2
    s1 = if_forward(conv2d(x.data, block.conv_a, stride=1, padding=p,
                           layer="sew.conv_a"), block.if_a)
    s2 = if_forward(conv2d(s1.data, block.conv_b, stride=1, padding=p,
                           layer="sew.conv_b"), block.if_b)
    out = add(s2.data, x.data)
    return SpikeTensor(data=out, max_count=x.max_count + 1)


def skip_add(a: SpikeTensor, b: SpikeTensor) -> SpikeTensor:
    """Elementwise integer sum of two spike tensors; bounds add."""
    return SpikeTensor(data=add(a.data, b.data),
                       max_count=a.max_count + b.max_count)


class ReadoutPool:
    """Pool of non-leaky, infinite-threshold integrator neurons. Its
    accumulated membrane potentials are the network's analog output; the
    running potential after the k-th contribution is intermediate
    prediction k (coarse to fine)."""

    def __init__(self, height: int, width: int):
        self.height = height
        self.width = width
        self.potential: Tensor = None
        self.history: list[Tensor] = []
        self.reset()

    def reset(self) -> None:
        self.potential = constant(
            np.zeros((1, self.height, self.width), dtype=default_dtype()))
        self.history = []

    def accumulate(self, contribution: Tensor) -> Tensor:
        if contribution.values.shape != (1, self.height, self.width):
            raise ShapeMismatchError(
                f"readout contribution shape {contribution.values.shape} != "
                f"(1, {self.height}, {self.width})")
        self.potential = add(self.potential, contribution)
        self.history.append(self.potential)
        return self.potential
