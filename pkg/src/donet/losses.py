"""Segmentation losses and the three-headed dual objective.

All losses take probability maps (already passed through a sigmoid) and a
binary target of the same shape. The overlap losses pool their sums over
every pixel of the batch; the focal loss is a per-pixel mean.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, cast, clamp, hadamard, log, mean_all, pow_scalar, sum_all

LOSS_KINDS = ("dl", "tl", "fl", "ftl")
FTL_FLOOR = 1e-8
FOCAL_CLAMP = 1e-7


@dataclass
class LossParams:
    epsilon: float = 1e-6
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 0.75
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def validate(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        return self


@dataclass
class ObjectiveConfig:
    l1_kind: str = "dl"
    l2_kind: str = "ftl"
    params: LossParams = field(default_factory=LossParams)

    def validate(self):
        for kind in (self.l1_kind, self.l2_kind):
            if kind not in LOSS_KINDS:
                raise ConfigError(f"unknown loss {kind!r}; expected one of {LOSS_KINDS}")
        self.params.validate()
        return self


def _check(yhat, y):
    if yhat.shape != y.shape:
        raise ShapeError(f"prediction {yhat.shape} and target {y.shape} differ")
    yd = y.data
    if not np.all((yd == 0) | (yd == 1)):
        raise ContractError("target mask must be binary")


def _target(y, like):
    return y if y.dtype == like.dtype else Tensor(y.data.astype(like.dtype))


def dice_loss(yhat, y, epsilon=1e-6):
    """1 - 2(sum(yhat*y) + eps) / (sum(yhat) + sum(y) + eps)."""
    _check(yhat, y)
    y = _target(y, yhat)
    inter = sum_all(hadamard(yhat, y))
    denom = sum_all(yhat) + float(y.data.sum(dtype=np.float64)) + epsilon
    return 1.0 - 2.0 * ((inter + epsilon) / denom)


def tversky_index(yhat, y, alpha=0.7, beta=0.3, epsilon=1e-6):
    """(TP + eps) / (TP + alpha*FN + beta*FP + eps) on soft counts.

    ``alpha`` weights the false negatives sum((1 - yhat) * y), ``beta`` the
    false positives sum(yhat * (1 - y)).
    """
    _check(yhat, y)
    y = _target(y, yhat)
    tp = sum_all(hadamard(yhat, y))
    fn = sum_all(hadamard(1.0 - yhat, y))
    fp = sum_all(hadamard(yhat, Tensor(1.0 - y.data)))
    return (tp + epsilon) / (tp + alpha * fn + beta * fp + epsilon)


def tversky_loss(yhat, y, alpha=0.7, beta=0.3, epsilon=1e-6):
    return 1.0 - tversky_index(yhat, y, alpha, beta, epsilon)


def focal_tversky_loss(yhat, y, params=None):
    """(1 - TI)^(1/gamma), with 1 - TI floored at 1e-8 so the gradient stays finite."""
    p = params or LossParams()
    ti = tversky_index(yhat, y, p.alpha, p.beta, p.epsilon)
    return pow_scalar(clamp(1.0 - ti, lo=FTL_FLOOR), 1.0 / p.gamma)


def focal_loss(yhat, y, focal_gamma=2.0, focal_alpha=0.25):
    """Binary focal cross-entropy averaged over pixels."""
    _check(yhat, y)
    y = _target(y, yhat)
    q = clamp(yhat, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    neg_y = Tensor(1.0 - y.data)
    pos = hadamard(pow_scalar(1.0 - q, focal_gamma), hadamard(y, log(q)))
    negv = hadamard(pow_scalar(q, focal_gamma), hadamard(neg_y, log(1.0 - q)))
    return -mean_all(focal_alpha * pos + (1.0 - focal_alpha) * negv)


def loss_by_kind(kind, yhat, y, params):
    if kind == "dl":
        return dice_loss(yhat, y, params.epsilon)
    if kind == "tl":
        return tversky_loss(yhat, y, params.alpha, params.beta, params.epsilon)
    if kind == "ftl":
        return focal_tversky_loss(yhat, y, params)
    if kind == "fl":
        return focal_loss(yhat, y, params.focal_gamma, params.focal_alpha)
    raise ConfigError(f"unknown loss {kind!r}")


@dataclass
class ObjectiveTerms:
    total: Tensor
    l1: Tensor
    l2: Tensor
    lf: Tensor

    def values(self):
        return {k: getattr(self, k).item() if getattr(self, k) is not None else 0.0
                for k in ("total", "l1", "l2", "lf")}


def combined_objective(cfg, triple, y):
    """L1(y1) + L2(y2) + [L1(y_joint) + L2(y_joint)].

    With a single decoder (``triple.y2`` is None) the L2 head is dropped and
    the joint term becomes the summed loss on the single map.
    """
    p = cfg.params

    def term(kind, pred):
        # Scalars are summed in float64 so the reported total matches its parts.
        return cast(loss_by_kind(kind, pred, y, p), np.float64)

    l1 = term(cfg.l1_kind, triple.y1)
    lf = term(cfg.l1_kind, triple.y_joint) + term(cfg.l2_kind, triple.y_joint)
    if triple.y2 is None:
        return ObjectiveTerms(l1 + lf, l1, None, lf)
    l2 = term(cfg.l2_kind, triple.y2)
    return ObjectiveTerms(l1 + l2 + lf, l1, l2, lf)
