"""Loss terms for voltage estimation under partial observability.

Four terms enter the objective. Supervision is mean absolute error over
the nodes whose voltage was hidden from the input; observed nodes carry
their measurement already and are excluded. The physics term penalizes
the linearized squared-voltage drop residual along closed series branches,

    | (v_i^2 - v_j^2) - 2 (R_ij P_ij + X_ij Q_ij) |

averaged over the physics edge set. Ground-truth voltages leave only the
quadratic loss term of the exact relation, so the residual is second-order
small on lightly loaded branches and the penalty pulls predictions toward
power-flow-consistent profiles rather than exact solutions. A hub term
charges mismatch between the transformer injection and the sum of feeder
head flows plus auxiliary load; it is data-only and constant with respect
to parameters. Weight decay applies to the trainable tensors only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import GraphBatch, ModelParams, forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Objective weights; the physics weight follows a ramp during training."""

    lam_sup: float = 1.0
    lam_phys: float = 0.0
    lam_reg: float = 1e-5
    lam_hub: float = 0.0

    def __post_init__(self):
        for name in ("lam_sup", "lam_phys", "lam_reg", "lam_hub"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def with_physics(cls, lam_phys: float, lam_sup: float = 1.0,
                     lam_reg: float = 1e-5) -> "LossWeights":
        # the hub term rides on the physics schedule at a fixed fraction
        return cls(lam_sup=lam_sup, lam_phys=lam_phys, lam_reg=lam_reg,
                   lam_hub=0.1 * lam_phys)


def physics_ramp(step: int, ramp_steps: int, lam_max: float) -> float:
    """Linear 0 -> lam_max over ramp_steps; clamped outside the ramp."""
    if ramp_steps <= 0:
        return lam_max
    return lam_max * min(max(step, 0), ramp_steps) / ramp_steps


def supervised_loss(v_hat: ad.Tensor, v_true: np.ndarray,
                    masked: np.ndarray) -> ad.Tensor:
    """Mean absolute voltage error over the hidden node set."""
    idx = np.flatnonzero(np.asarray(masked, dtype=bool))
    if idx.size == 0:
        raise ValueError("supervised_loss: the masked set is empty")
    err = ad.sub(ad.gather_rows(v_hat, idx), v_true[idx])
    return ad.l1_loss(err)


def physics_loss(v_hat: ad.Tensor, phys_from: np.ndarray, phys_to: np.ndarray,
                 r: np.ndarray, x: np.ndarray, p: np.ndarray, q: np.ndarray,
                 weights: np.ndarray | None = None) -> ad.Tensor:
    """Mean weighted absolute linearized-DistFlow residual."""
    n = len(phys_from)
    if n == 0:
        logger.warning("physics_loss: empty edge set, physics term disabled")
        return ad.as_tensor(0.0)
    v_sq = ad.mul(v_hat, v_hat)
    drop = ad.sub(ad.gather_rows(v_sq, phys_from),
                  ad.gather_rows(v_sq, phys_to))
    resid = ad.absolute(ad.sub(drop, 2.0 * (r * p + x * q)))
    if weights is not None:
        resid = ad.mul(resid, np.asarray(weights, dtype=np.float64))
    return ad.mul(ad.total_sum(resid), 1.0 / n)


def hub_balance_penalty(head_flows, s_aux: complex,
                        s_subxfmr: complex) -> float:
    """Magnitude of the substation power bookkeeping mismatch."""
    flows = list(head_flows.values()) if isinstance(head_flows, dict) \
        else list(head_flows)
    return float(abs(sum(flows) + s_aux - s_subxfmr))


def regularization(tensors) -> ad.Tensor:
    """Squared L2 norm over the currently trainable tensors."""
    return ad.l2_penalty([t for t in tensors if t.requires_grad])


def total_loss(supervised, physics, reg, hub, weights: LossWeights) -> ad.Tensor:
    total = ad.mul(ad.as_tensor(supervised), weights.lam_sup)
    total = ad.add(total, ad.mul(ad.as_tensor(physics), weights.lam_phys))
    total = ad.add(total, ad.mul(ad.as_tensor(reg), weights.lam_reg))
    return ad.add(total, weights.lam_hub * float(hub))


def batch_loss(params: ModelParams, batch: GraphBatch,
               weights: LossWeights) -> tuple[ad.Tensor, dict[str, float]]:
    """Forward pass plus the full objective for one batch.

    Returns the scalar loss tensor (attached to the active tape) and a
    plain-float component breakdown for logging.
    """
    v_hat = forward(params, batch)
    sup = supervised_loss(v_hat, batch.v_true, ~batch.observed)
    phys = physics_loss(v_hat, batch.phys_from, batch.phys_to, batch.phys_r,
                        batch.phys_x, batch.phys_p, batch.phys_q,
                        batch.phys_weight)
    reg = regularization(params.tensors.values())
    hub = float(np.mean(batch.hub_residual))
    total = total_loss(sup, phys, reg, hub, weights)
    parts = {"total": float(total.values), "supervised": float(sup.values),
             "physics": float(phys.values), "reg": float(reg.values),
             "hub": hub}
    return total, parts
