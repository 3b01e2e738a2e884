"""Training objective: reconstruction plus similarity regression.

``total = l_mse + lambda_grad * l_grad + alpha * l_pr``
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from recnet.engine import Tensor, image_gradients
from recnet.errors import ConfigError, ShapeError
from recnet.pointcloud_io import Pose


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and the similarity length scale ``m`` (meters).

    The defaults for ``alpha`` and ``lambda_grad`` are unvalidated choices.
    """

    alpha: float = 1.0
    lambda_grad: float = 1.0
    m: float = 10.0

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_grad < 0:
            raise ConfigError("alpha and lambda_grad must be non-negative")
        if not self.m > 0:
            raise ConfigError(f"m must be positive, got {self.m}")


@dataclass(frozen=True)
class LossReport:
    l_mse: float
    l_grad: float
    l_pr: float
    total: float

    def csv_row(self, step: int) -> str:
        return f"{step},{self.l_mse!r},{self.l_grad!r},{self.l_pr!r},{self.total!r}"


LOG_HEADER = "step,l_mse,l_grad,l_pr,total"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def loss_mse(target, pred) -> Tensor:
    """Mean squared pixel error."""
    target, pred = _as_tensor(target), _as_tensor(pred)
    _check_same(target, pred, "loss_mse")
    return (target - pred).square().mean()


def loss_grad(target, pred) -> Tensor:
    """Mean absolute difference of forward-difference image gradients.

    Both directions are summed and divided by the pixel count once. A
    constant offset between the images is invisible to this term.
    """
    target, pred = _as_tensor(target), _as_tensor(pred)
    _check_same(target, pred, "loss_grad")
    tu, tv = image_gradients(target)
    pu, pv = image_gradients(pred)
    n = target.size
    return ((tu - pu).abs().sum() + (tv - pv).abs().sum()) * (1.0 / n)


def target_similarity(p1: Pose | np.ndarray, p2: Pose | np.ndarray, m: float = 10.0) -> float:
    """``exp(-d / m)`` with ``d`` the distance between pose translations."""
    if not m > 0:
        raise ConfigError(f"m must be positive, got {m}")
    t1 = p1.translation if isinstance(p1, Pose) else np.asarray(p1, dtype=np.float64)
    t2 = p2.translation if isinstance(p2, Pose) else np.asarray(p2, dtype=np.float64)
    return math.exp(-float(np.linalg.norm(t1 - t2)) / m)


def similarity_from_distance(d, m: float = 10.0):
    return np.exp(-np.asarray(d, dtype=np.float64) / m)


def loss_pr(c_target, c_pred) -> Tensor:
    """Squared error of the predicted similarity, averaged over the batch."""
    c_target, c_pred = _as_tensor(c_target), _as_tensor(c_pred)
    _check_same(c_target, c_pred, "loss_pr")
    return (c_target - c_pred).square().mean()


def total_loss(target, pred, c_target, c_pred, config: LossConfig = LossConfig()) -> tuple[Tensor, LossReport]:
    """Combined loss tensor (for ``backward``) and its per-term report.

    ``c_target`` holds precomputed similarities; use ``target_similarity`` to
    get them from poses.
    """
    target, pred = _as_tensor(target), _as_tensor(pred)
    c_pred = _as_tensor(c_pred)
    c_target = _as_tensor(np.asarray(c_target.data if isinstance(c_target, Tensor) else c_target, dtype=c_pred.dtype).reshape(c_pred.shape))
    mse = loss_mse(target, pred)
    grad = loss_grad(target, pred)
    pr = loss_pr(c_target, c_pred)
    total = mse + grad * config.lambda_grad + pr * config.alpha
    report = LossReport(mse.item(), grad.item(), pr.item(), total.item())
    return total, report
