"""Focal, binary-matchability and asymmetric losses with analytic gradients.

All scores are independent per-class sigmoid probabilities. Callers clamp
probabilities with :func:`clamp_prob` before evaluating a loss; the losses
themselves reject anything outside the open unit interval.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

EPS = 1e-7


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0,1), got {self.alpha}")
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")


@dataclass(frozen=True)
class AslConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip_m: float = 0.05

    def __post_init__(self):
        for name in ("gamma_pos", "gamma_neg", "clip_m"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.clip_m >= 1:
            raise ValueError("clip_m must be < 1")


@dataclass
class LossAndGrad:
    value: float
    grad: np.ndarray


def clamp_prob(p, eps: float = EPS):
    return np.clip(p, eps, 1.0 - eps)


def _check_open_unit(p: np.ndarray):
    if not np.all((p > 0.0) & (p < 1.0)):
        raise ValueError("probabilities must lie strictly inside (0, 1); clamp first")


def binary_focal_arrays(p, target, cfg: FocalConfig = FocalConfig()):
    """Elementwise binary focal loss and d(loss)/dp.

    ``target`` is broadcast against ``p`` and must be 0 or 1.
    """
    p = np.asarray(p, dtype=np.float64)
    _check_open_unit(p)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    a, g = cfg.alpha, cfg.gamma
    q = 1.0 - p
    nlp = -np.log(p)
    nlq = -np.log(q)
    # gamma * x**(gamma-1) vanishes for gamma == 0 even when x is small
    gq = g * q ** (g - 1.0) if g > 0 else 0.0
    gp = g * p ** (g - 1.0) if g > 0 else 0.0
    pos_val = a * q**g * nlp
    pos_grad = -a * (gq * nlp + q**g / p)
    neg_val = (1.0 - a) * p**g * nlq
    neg_grad = (1.0 - a) * (gp * nlq + p**g / q)
    value = np.where(t > 0.5, pos_val, neg_val)
    grad = np.where(t > 0.5, pos_grad, neg_grad)
    return value, grad


def binary_focal(p: float, target: int, cfg: FocalConfig = FocalConfig()) -> LossAndGrad:
    if target not in (0, 1):
        raise ValueError(f"target must be 0 or 1, got {target}")
    v, g = binary_focal_arrays(np.array([p], dtype=np.float64), target, cfg)
    return LossAndGrad(float(v[0]), g)


def class_match_cost(p: float, cfg: FocalConfig = FocalConfig()) -> float:
    """Cost of declaring a query matchable to a ground truth of its class."""
    return binary_focal(p, 1, cfg).value


def multiclass_focal_cost(probs, target_class: int, cfg: FocalConfig = FocalConfig()) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= target_class < len(probs):
        raise IndexError(f"target class {target_class} out of range for K={len(probs)}")
    return binary_focal(float(probs[target_class]), 1, cfg).value


def asymmetric_loss_arrays(scores, targets, cfg: AslConfig = AslConfig(), mu_asl: float = 1.0, mask=None):
    """Per-element asymmetric loss and its gradient w.r.t. ``scores``.

    ``mask`` (same shape, 0/1) drops entries from both value and gradient;
    used to keep supervision inside a sample's own taxonomy.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"scores {s.shape} and targets {t.shape} differ in shape")
    _check_open_unit(s)
    gp, gn, m = cfg.gamma_pos, cfg.gamma_neg, cfg.clip_m

    q = 1.0 - s
    nls = -np.log(s)
    pos_val = q**gp * nls
    pos_grad = -((gp * q ** (gp - 1.0) if gp > 0 else 0.0) * nls + q**gp / s)

    sm = np.maximum(s - m, 0.0)
    active = sm > 0
    sm_safe = np.where(active, sm, 0.5)
    nl1 = -np.log1p(-sm)
    neg_val = np.where(active, sm_safe**gn * nl1, 0.0)
    neg_grad = np.where(
        active,
        (gn * sm_safe ** (gn - 1.0) if gn > 0 else 0.0) * nl1 + sm_safe**gn / (1.0 - sm_safe),
        0.0,
    )
    value = mu_asl * np.where(t > 0.5, pos_val, neg_val)
    grad = mu_asl * np.where(t > 0.5, pos_grad, neg_grad)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        value = value * mask
        grad = grad * mask
    return value, grad


def asymmetric_loss(scores, targets, cfg: AslConfig = AslConfig(), mu_asl: float = 1.0, mask=None) -> LossAndGrad:
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape:
        raise ValueError(f"length mismatch: {scores.shape} scores vs {targets.shape} targets")
    v, g = asymmetric_loss_arrays(scores, targets, cfg, mu_asl, mask)
    return LossAndGrad(float(v.sum()), g)
