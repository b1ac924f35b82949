"""Training losses: multiscale scale-invariant regression, multiscale
smoothness, their weighted total, and the quadratic spike penalization.

Residuals live in readout (log-depth) space: r = predicted potential minus
encoded ground truth, masked to valid ground-truth pixels. Per scale the
regression term is the population variance of the valid residuals,

    L_i = (1/n) * sum r^2  -  (1/n^2) * (sum r)^2

averaged over scales. (The printed form of the source equation drops the
inner 1/n on the squared term; the variance form is the standard
scale-invariant loss and is what is implemented here.) The smoothness term
is the mean absolute forward difference of the residual, counting only
pixel pairs whose endpoints are both valid, summed over scales.

The spike penalty is (1/(2K)) * sum_k S_k^2 per penalized layer (one time
step: the network is stateless), applied to the bottleneck output and the
skip-sum tensors only; gradients reach upstream weights through the
surrogate path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .snn import SpikeTensor

DEFAULT_PENALIZED_LAYERS = ("out_rconv", "out_add4", "out_add3", "out_add2",
                            "out_add1")


class NoValidPixelsError(ValueError):
    """Loss evaluation requested with no valid ground truth."""


@dataclass
class LossConfig:
    lambda_smooth: float = 0.5
    lambda_spike: float = 5e-3
    penalized_layers: tuple[str, ...] = DEFAULT_PENALIZED_LAYERS

    def __post_init__(self):
        if self.lambda_smooth < 0 or self.lambda_spike < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class ResidualMap:
    """Residual raster (H, W) in readout space with its validity mask."""
    r: Tensor
    valid: np.ndarray
    n_valid: int

    @classmethod
    def from_prediction(cls, prediction: Tensor, gt_potential: np.ndarray,
                        valid: np.ndarray) -> "ResidualMap":
        """prediction: (1, H, W) or (H, W) cumulative readout potential."""
        pred = prediction
        if pred.values.ndim == 3:
            pred = ad.reshape(pred, pred.values.shape[1:])
        valid = np.asarray(valid, dtype=bool)
        n_valid = int(valid.sum())
        if n_valid < 1:
            raise NoValidPixelsError("no valid ground truth pixels")
        gt = ad.constant(np.asarray(gt_potential, dtype=ad.default_dtype()))
        return cls(r=ad.sub(pred, gt), valid=valid, n_valid=n_valid)


def regression_loss(residuals: list[ResidualMap]) -> Tensor:
    """Mean over scales of the population variance of valid residuals."""
    if not residuals:
        raise ValueError("no residual maps given")
    terms = []
    for rm in residuals:
        if rm.n_valid < 1:
            raise NoValidPixelsError("no valid ground truth pixels")
        sel = ad.masked_select(rm.r, rm.valid)
        n = rm.n_valid
        mean_sq = ad.scale(ad.sum_reduce(ad.square(sel)), 1.0 / n)
        sq_mean = ad.square(ad.scale(ad.sum_reduce(sel), 1.0 / n))
        terms.append(ad.sub(mean_sq, sq_mean))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def smoothness_loss(residuals: list[ResidualMap]) -> Tensor:
    """Sum over scales of the mean absolute residual gradient; a forward
    difference counts only when both endpoint pixels are valid."""
    if not residuals:
        raise ValueError("no residual maps given")
    total = None
    for rm in residuals:
        if rm.n_valid < 1:
            raise NoValidPixelsError("no valid ground truth pixels")
        v = rm.valid
        mask_x = (v[:, 1:] & v[:, :-1]).astype(ad.default_dtype())
        mask_y = (v[1:, :] & v[:-1, :]).astype(ad.default_dtype())
        gx = ad.sum_reduce(ad.mul_const(ad.abs_elem(ad.diff_x(rm.r)), mask_x))
        gy = ad.sum_reduce(ad.mul_const(ad.abs_elem(ad.diff_y(rm.r)), mask_y))
        term = ad.scale(ad.add(gx, gy), 1.0 / rm.n_valid)
        total = term if total is None else ad.add(total, term)
    return total


def spike_penalty(layers: list[SpikeTensor]) -> Tensor:
    """Quadratic spike penalization, summed over the penalized layers."""
    if not layers:
        raise ValueError("no spike tensors given")
    total = None
    for st in layers:
        k = st.data.values.size
        term = ad.scale(ad.sum_reduce(ad.square(st.data)), 1.0 / (2 * k))
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(reg: Tensor, smooth: Tensor, cfg: LossConfig,
               penalty: Tensor | None = None) -> Tensor:
    out = ad.add(reg, ad.scale(smooth, cfg.lambda_smooth))
    if penalty is not None:
        out = ad.add(out, ad.scale(penalty, cfg.lambda_spike))
    return out
