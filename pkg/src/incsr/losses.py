"""The seven training loss terms and their weighted combination.

Term names used throughout logging and configs:

    kd_response, kd_feature, edge, adversarial, lce, identity, reconstruction

The distillation terms treat the teacher side as constant: gradients flow
only into the student tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .autograd import Tensor, softplus
from .errors import ShapeError
from .imageops import YCBCR_MATRIX, YCBCR_OFFSET
from . import autograd as ag

LOG_EPS = 1e-12


@dataclass
class LossWeights:
    """Scalar weights of the combined objective.

    ``kd_response``/``kd_feature`` are the two inner distillation weights;
    the combined distillation weight is their composition.
    """

    kd_response: float = 5.0
    kd_feature: float = 0.01
    edge: float = 0.3
    adversarial: float = 1.0
    lce: float = 1.0
    identity: float = 1.0
    reconstruction: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LossBreakdown:
    """Unweighted per-term values plus the weighted total."""

    terms: dict          # name -> float (unweighted)
    weighted: dict       # name -> float (weight * term)
    total: float


def _require_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _mse(a, b):
    d = a - b
    return (d * d).mean()


def kd_loss(sr_teacher, sr_student, bottleneck_teacher, bottleneck_student,
            w_response, w_feature):
    """Distillation: response MSE on outputs plus feature MSE on bottlenecks.

    Teacher tensors are detached so only the student receives gradients.
    """
    _require_same_shape(sr_teacher, sr_student, "kd response")
    _require_same_shape(bottleneck_teacher, bottleneck_student, "kd feature")
    response = _mse(sr_student, sr_teacher.detach())
    feature = _mse(bottleneck_student, bottleneck_teacher.detach())
    return w_response * response + w_feature * feature, response, feature


def edge_loss(e_sr, e_hr):
    """Mean squared difference between generated and ground-truth edge maps."""
    _require_same_shape(e_sr, e_hr, "edge loss")
    return _mse(e_sr, e_hr)


def adversarial_loss_d(logits_real, logits_fake):
    """Discriminator loss: -E[log s(real)] - E[log(1 - s(fake))].

    Written with softplus so it is finite and non-negative for any logits.
    """
    return softplus(-logits_real).mean() + softplus(logits_fake).mean()


def adversarial_loss_g(logits_fake, saturating=True):
    """Generator adversarial loss.

    Default is the literal saturating form min E[log(1 - s(fake))]; the
    non-saturating variant -E[log s(fake)] is available behind the flag.
    """
    if saturating:
        return -softplus(logits_fake).mean()
    return softplus(-logits_fake).mean()


def _to_ycbcr_nchw(t):
    # 1x1 conv against the fixed BT.601 matrix keeps the op differentiable
    m = Tensor(YCBCR_MATRIX.reshape(3, 3, 1, 1).astype(t.data.dtype))
    off = Tensor(YCBCR_OFFSET.astype(t.data.dtype))
    return ag.conv2d(t, m, off, stride=1, padding="same")


def lce_loss(sr, hr):
    """Mean per-pixel Euclidean distance in YCbCr space."""
    _require_same_shape(sr, hr, "lce loss")
    if sr.ndim != 4 or sr.shape[1] != 3:
        raise ShapeError(f"lce loss expects [B,3,H,W] tensors, got {sr.shape}")
    d = _to_ycbcr_nchw(sr) - _to_ycbcr_nchw(hr)
    sq = (d * d).sum(axis=1)                      # [B,H,W]
    return ((sq + LOG_EPS).sqrt()).mean()


def identity_loss(v_sr, v_hr):
    """Jensen-Shannon divergence between two batches of class distributions."""
    _require_same_shape(v_sr, v_hr, "identity loss")
    for v in (v_sr, v_hr):
        if np.any(v.data < 0):
            raise ValueError("identity loss requires non-negative probabilities")
        if np.any(np.abs(v.data.sum(axis=-1) - 1.0) > 1e-5):
            raise ValueError("identity loss rows must sum to 1")
    m = (v_sr + v_hr) * 0.5
    log_m = (m + LOG_EPS).log()
    kl_sr = (v_sr * ((v_sr + LOG_EPS).log() - log_m)).sum(axis=-1)
    kl_hr = (v_hr * ((v_hr + LOG_EPS).log() - log_m)).sum(axis=-1)
    return (0.5 * kl_sr + 0.5 * kl_hr).mean()


def reconstruction_loss(sr, hr):
    """Pixelwise mean squared error."""
    _require_same_shape(sr, hr, "reconstruction loss")
    return _mse(sr, hr)


def total_loss(terms, weights):
    """Weighted sum of the provided terms.

    ``terms`` maps term names (a subset of the LossWeights field names) to
    scalar tensors or floats; missing terms contribute zero.  Raises on any
    non-finite term, naming it.
    """
    wdict = weights.as_dict()
    unknown = set(terms) - set(wdict)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    plain = {}
    weighted = {}
    for name, value in terms.items():
        v = value.item() if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise ValueError(f"loss term {name!r} is not finite: {v}")
        plain[name] = v
        weighted[name] = wdict[name] * v
        contrib = wdict[name] * value
        total = contrib if total is None else total + contrib
    if total is None:
        total = Tensor(np.zeros(()))
    total_value = total.item() if isinstance(total, Tensor) else float(total)
    return total, LossBreakdown(terms=plain, weighted=weighted, total=total_value)
