"""Softened softmax, cross-entropy and the two-way distillation losses.

All losses are averaged over the batch.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

LOG_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 3.0
    detach_teacher: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")


@dataclass
class LogitSet:
    """Sub-network logits ``z``, their mean ``z_e`` and the fused logits ``z_f``."""

    z: list
    z_e: Tensor
    z_f: Tensor = None

    @classmethod
    def build(cls, z, z_f=None):
        return cls(list(z), ensemble_logits(z), z_f)

    def __post_init__(self):
        shapes = {t.shape for t in self.z} | {self.z_e.shape}
        if self.z_f is not None:
            shapes.add(self.z_f.shape)
        if len(shapes) != 1:
            raise DimensionError(f"logit shapes disagree: {sorted(shapes)}")

    @property
    def n(self):
        return len(self.z)


@dataclass
class LossBreakdown:
    ce_sub: list
    ce_fused: float
    ekd: float
    fkd: float
    total: float
    temperature: float
    loss: Tensor = field(default=None, repr=False, compare=False)

    @property
    def ce_sub_sum(self):
        return float(np.sum(self.ce_sub))

    def assembled_total(self):
        return self.ce_sub_sum + self.ce_fused + self.temperature ** 2 * (self.ekd + self.fkd)

    def identity_error(self):
        """Relative gap between ``total`` and its reassembly from the parts."""
        return abs(self.total - self.assembled_total()) / max(1.0, abs(self.total))

    def is_finite(self):
        return all(math.isfinite(v) for v in [*self.ce_sub, self.ce_fused, self.ekd, self.fkd, self.total])


def _check_temperature(temperature):
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")


def softened_softmax(z, temperature):
    _check_temperature(temperature)
    return T.exp(T.log_softmax(z, temperature))


def softmax(z):
    return softened_softmax(z, 1.0)


def _as_onehot(y, shape):
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if y.shape != shape:
        raise DimensionError(f"labels {y.shape} do not match logits {shape}")
    if not (np.isin(y, (0, 1)).all() and (y.sum(axis=1) == 1).all()):
        raise ContractError("labels must be one-hot rows")
    return Tensor(y)


def cross_entropy(z, y):
    """Mean over the batch of ``-sum_i y_i log softmax(z)_i``."""
    y = _as_onehot(y, z.shape)
    return T.scale(T.sum(T.mul(y, T.log_softmax(z, 1.0))), -1.0 / z.shape[0])


def ensemble_logits(z):
    if not z:
        raise ContractError("ensemble_logits needs at least one logit tensor")
    shapes = {t.shape for t in z}
    if len(shapes) != 1:
        raise DimensionError(f"logit shapes disagree: {sorted(shapes)}")
    acc = z[0]
    for t in z[1:]:
        acc = T.add(acc, t)
    return T.scale(acc, 1.0 / len(z))


def kl_divergence(p_logits, q_logits, temperature, detach_teacher=True):
    """Batch mean of KL(softmax(p/T) || softmax(q/T)).

    ``p_logits`` is the teacher; with ``detach_teacher`` no gradient reaches it.
    Log-probabilities are floored at log(1e-12).
    """
    _check_temperature(temperature)
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"kl_divergence: shapes {p_logits.shape} and {q_logits.shape} differ")
    if detach_teacher:
        p_logits = p_logits.detach()
    log_p = T.log_softmax(p_logits, temperature)
    p = T.exp(log_p)
    log_q = T.log_softmax(q_logits, temperature)
    gap = T.sub(T.clamp_min(log_p, LOG_FLOOR), T.clamp_min(log_q, LOG_FLOOR))
    return T.scale(T.sum(T.mul(p, gap)), 1.0 / p_logits.shape[0])


def ekd_loss(ls, cfg):
    """Ensemble -> fused distillation: KL(z_e || z_f)."""
    return kl_divergence(ls.z_e, ls.z_f, cfg.temperature, cfg.detach_teacher)


def fkd_loss(ls, cfg):
    """Fused -> sub-network distillation, summed (not averaged) over branches."""
    acc = None
    for z_k in ls.z:
        term = kl_divergence(ls.z_f, z_k, cfg.temperature, cfg.detach_teacher)
        acc = term if acc is None else T.add(acc, term)
    return acc


def total_loss(ls, y, cfg, use_ekd=True, use_fkd=True):
    """Sum of CE terms plus T^2 times the enabled distillation terms.

    Disabled terms are never built into the graph and report 0. Without
    fused logits only the sub-network cross-entropies remain.
    """
    ce_sub = [cross_entropy(z_k, y) for z_k in ls.z]
    parts = list(ce_sub)
    ce_fused = ekd = fkd = None
    if ls.z_f is not None:
        ce_fused = cross_entropy(ls.z_f, y)
        parts.append(ce_fused)
        kd = []
        if use_ekd:
            ekd = ekd_loss(ls, cfg)
            kd.append(ekd)
        if use_fkd:
            fkd = fkd_loss(ls, cfg)
            kd.append(fkd)
        if kd:
            kd_sum = kd[0] if len(kd) == 1 else T.add(kd[0], kd[1])
            parts.append(T.scale(kd_sum, cfg.temperature ** 2))

    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    value = lambda t: 0.0 if t is None else float(t.data)
    return LossBreakdown(
        ce_sub=[value(t) for t in ce_sub],
        ce_fused=value(ce_fused),
        ekd=value(ekd),
        fkd=value(fkd),
        total=value(total),
        temperature=cfg.temperature,
        loss=total,
    )
