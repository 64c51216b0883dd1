"""Training objectives: bidirectional InfoNCE plus prototype cross-entropy.

Temperatures are trained through their log inverse s = log(1/tau), which
keeps tau positive without constraints; clipping s from above bounds the
effective logit scale. Loss functions accept a TemperatureParam, a (1, 1)
node holding s, or a plain positive float tau.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DomainError, ShapeError


@dataclass
class TemperatureParam:
    """Learnable temperature stored as log inverse temperature (1, 1)."""

    log_inv_tau: np.ndarray

    @classmethod
    def create(cls, tau=0.07):
        if tau <= 0:
            raise DomainError(f"temperature must be positive, got {tau}")
        return cls(np.array([[math.log(1.0 / tau)]]))

    @property
    def tau(self):
        return float(1.0 / np.exp(self.log_inv_tau[0, 0]))

    @property
    def inv_tau(self):
        return float(np.exp(self.log_inv_tau[0, 0]))


def clip_temperature(param, max_inv_tau=100.0):
    """Cap the logit scale: after this, 1/tau <= max_inv_tau."""
    if max_inv_tau <= 0:
        raise DomainError(f"max_inv_tau must be positive, got {max_inv_tau}")
    bound = math.log(max_inv_tau)
    if param.log_inv_tau[0, 0] > bound:
        param.log_inv_tau[0, 0] = bound


def _inv_tau_node(tau):
    """Lift any accepted temperature form to a (1, 1) node holding 1/tau."""
    if isinstance(tau, ad.DiffNode):
        return ad.exp(tau)
    if isinstance(tau, TemperatureParam):
        return ad.exp(ad.constant(tau.log_inv_tau))
    t = float(tau)
    if t <= 0:
        raise DomainError(f"temperature must be positive, got {t}")
    return ad.constant([[1.0 / t]])


@dataclass
class LossBreakdown:
    """Scalar values of the loss terms for one training step."""

    l_clip: float
    l_proto: float
    l_proto_external: float
    total: float

    @classmethod
    def build(cls, l_clip, l_proto=0.0, l_proto_external=0.0):
        return cls(
            l_clip=float(l_clip),
            l_proto=float(l_proto),
            l_proto_external=float(l_proto_external),
            total=float(l_clip) + float(l_proto) + float(l_proto_external),
        )


def total_loss(parts):
    """Unweighted sum of the enabled loss terms."""
    return parts.l_clip + parts.l_proto + parts.l_proto_external


def info_nce(z_image, z_text, tau):
    """Symmetric paired-batch contrastive loss.

    Rows of z_image and z_text must be L2-normalized by the caller and
    aligned so row i of each side is the matching pair. Both softmax
    directions are averaged.
    """
    zi, zt = ad.as_node(z_image), ad.as_node(z_text)
    vi, vt = zi.value.values, zt.value.values
    if vi.ndim != 2 or vt.ndim != 2 or vi.shape[0] != vt.shape[0]:
        raise ContractError(
            f"info_nce needs matching batches, got shapes {vi.shape} and {vt.shape}"
        )
    n = vi.shape[0]
    logits = ad.mul(ad.matmul(zi, ad.transpose(zt)), _inv_tau_node(tau))
    mask = ad.constant(np.eye(n))
    hit_i2t = ad.sum_all(ad.mul(ad.log_softmax_rows(logits), mask))
    hit_t2i = ad.sum_all(ad.mul(ad.log_softmax_rows(ad.transpose(logits)), mask))
    return ad.scale(ad.add(hit_i2t, hit_t2i), -0.5 / n)


def proto_scores(h, prototypes, tau):
    """Softmax assignment scores of feature rows against fixed prototypes.

    prototypes act as a frozen linear classifier: they are detached, so
    gradient flows to h and to the temperature only.
    """
    h = ad.as_node(h)
    protos = prototypes.value.values if isinstance(prototypes, ad.DiffNode) else prototypes
    protos = ad.constant(np.asarray(protos, dtype=np.float64))
    hv, pv = h.value.values, protos.value.values
    if hv.ndim != 2 or pv.ndim != 2 or hv.shape[1] != pv.shape[1]:
        raise ShapeError(
            f"proto_scores needs matching widths, got shapes {hv.shape} and {pv.shape}"
        )
    logits = ad.mul(ad.matmul(h, ad.transpose(protos)), _inv_tau_node(tau))
    return ad.softmax_rows(logits)


def _stochastic_rows(name, rows):
    sums = np.asarray(rows).sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ContractError(f"{name} rows must each sum to 1 within 1e-6")


def _cross_entropy(p, y):
    yv = np.asarray(y, dtype=np.float64)
    pv = p.value.values
    if pv.shape != yv.shape:
        raise ShapeError(f"scores {pv.shape} and targets {yv.shape} differ")
    _stochastic_rows("score", pv)
    _stochastic_rows("target", yv)
    n = pv.shape[0]
    return ad.scale(ad.sum_all(ad.mul(ad.constant(yv), ad.log_clamped(p))), -1.0 / n)


def proto_loss(p_image, y_text_rows, p_text, y_image_rows):
    """Cross-modal prototype cross-entropy, mean of both directions.

    p_image scores image features against text-derived prototypes and is
    supervised by each sample's text-space target row; p_text is the
    mirror image.
    """
    ce_i = _cross_entropy(p_image, y_text_rows)
    ce_t = _cross_entropy(p_text, y_image_rows)
    return ad.scale(ad.add(ce_i, ce_t), 0.5)


def external_proto_loss(p_image, p_text, y_external_rows):
    """Prototype cross-entropy against a shared external teacher target."""
    ce_i = _cross_entropy(p_image, y_external_rows)
    ce_t = _cross_entropy(p_text, y_external_rows)
    return ad.scale(ad.add(ce_i, ce_t), 0.5)
