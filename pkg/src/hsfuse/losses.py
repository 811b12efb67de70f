"""Reconstruction, sum-to-one, sparsity and consistency losses.

Every L1 term is a mean over elements, so the trade-off weights do not
depend on image size. ``mask_lr``/``mask_hr`` restrict each term to the
pixels used for training (or for validation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import Outputs
from .tensor import Tensor


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 1e-4
    gamma: float = 1.0
    epsilon: float = 0.01

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")


def loss_reconstruction(x, y, x_rec: Tensor, y_rec: Tensor, mask_lr=None, mask_hr=None) -> Tensor:
    return T.add(T.l1_loss(x_rec, x, mask_lr), T.l1_loss(y_rec, y, mask_hr))


def _row_sum_gap(s: Tensor, mask) -> Tensor:
    sums = T.reduce_sum(s, axis=0, keepdims=True)
    return T.l1_loss(sums, np.ones(sums.shape, dtype=s.dtype), mask)


def loss_asc(s_hs: Tensor, s_ms: Tensor, mask_lr=None, mask_hr=None) -> Tensor:
    return T.add(_row_sum_gap(s_hs, mask_lr), _row_sum_gap(s_ms, mask_hr))


def loss_sparsity(s_hs: Tensor, s_ms: Tensor, eps: float, mask_lr=None, mask_hr=None) -> Tensor:
    return T.add(T.kl_div(eps, s_hs, mask_lr, reduction="mean"),
                 T.kl_div(eps, s_ms, mask_hr, reduction="mean"))


def loss_consistency(x, y, x_hat: Tensor, y_hat: Tensor, u_hs: Tensor, u_ms: Tensor,
                     mask_lr=None, mask_hr=None) -> Tensor:
    return T.add(T.add(T.l1_loss(u_ms, u_hs, mask_lr), T.l1_loss(x_hat, x, mask_lr)),
                 T.l1_loss(y_hat, y, mask_hr))


@dataclass
class LossParts:
    reconstruction: Tensor
    asc: Tensor
    sparsity: Tensor
    consistency: Tensor | None
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "L_R": self.reconstruction.item(),
            "L_ASC": self.asc.item(),
            "L_S": self.sparsity.item(),
            "L_C": self.consistency.item() if self.consistency is not None else 0.0,
            "total": self.total.item(),
        }


def total_loss(parts: dict[str, Tensor | None], weights: LossWeights) -> Tensor:
    """``L_R + alpha*L_ASC + beta*L_S + gamma*L_C``; a missing ``L_C`` counts as zero."""
    total = parts["reconstruction"]
    total = T.add(total, T.scale(parts["asc"], weights.alpha))
    total = T.add(total, T.scale(parts["sparsity"], weights.beta))
    if parts.get("consistency") is not None:
        total = T.add(total, T.scale(parts["consistency"], weights.gamma))
    return total


def compute_losses(out: Outputs, x: Tensor, y: Tensor, weights: LossWeights,
                   mask_lr=None, mask_hr=None) -> LossParts:
    parts = {
        "reconstruction": loss_reconstruction(x, y, out.x_rec, out.y_rec, mask_lr, mask_hr),
        "asc": loss_asc(out.s_hs, out.s_ms, mask_lr, mask_hr),
        "sparsity": loss_sparsity(out.s_hs, out.s_ms, weights.epsilon, mask_lr, mask_hr),
        "consistency": None,
    }
    if out.x_hat is not None:
        parts["consistency"] = loss_consistency(x, y, out.x_hat, out.y_hat, out.u_hs, out.u_ms,
                                                mask_lr, mask_hr)
    return LossParts(total=total_loss(parts, weights), **parts)
