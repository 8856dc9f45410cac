"""
Training losses with analytic gradients w.r.t. predicted vertex coordinates.

Fixed-pairing smooth-L1 supervises the initial, coarse and first refined
contours. The last refined contour is supervised by the dynamic matching
loss, whose assignments come from the module's *input* contour and are held
constant when differentiating. Chamfer and smooth-L1 are available for the
last module as ablation baselines.
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError, IndexOutOfRange, LengthMismatch
from .labeling import LabeledInstance

if TYPE_CHECKING:
    from .model import ModelOutputs

logger = logging.getLogger(__name__)

FINAL_LOSSES = ("dml", "smooth_l1", "chamfer")
STAGES = ("initial", "coarse", "iter1", "iter2")

LossAndGrad = Tuple[float, np.ndarray]


@dataclass
class LossConfig:
    """Loss weights and the supervision of the last deformation module"""
    alpha: float = 0.1
    beta: float = 0.1
    smooth_l1_delta: float = 1.0
    final_loss: str = "dml"

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss.alpha and loss.beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.smooth_l1_delta <= 0:
            raise ConfigError(f"loss.smooth_l1_delta must be positive, got {self.smooth_l1_delta}")
        if self.final_loss not in FINAL_LOSSES:
            raise ConfigError(f"loss.final_loss must be one of {FINAL_LOSSES}, got {self.final_loss!r}")


@dataclass
class MatchAssignment:
    """Dynamic pairing computed from the pre-deformation contour"""
    pred_to_interp: np.ndarray
    key_to_pred: np.ndarray


@dataclass
class LossBreakdown:
    """
    Per-stage loss values and gradients of l_overall w.r.t. each stage's vertices.

    Gradients are already weighted by alpha/beta, so they can be fed to the
    model's backward pass directly.
    """
    l_init: float
    l_coarse: float
    l_iter1: float
    l_iter2: float
    l_overall: float
    gradients: Dict[str, np.ndarray] = field(default_factory=dict)
    assignment: Optional[MatchAssignment] = None

    def values(self) -> Dict[str, float]:
        return {
            'l_init': self.l_init,
            'l_coarse': self.l_coarse,
            'l_iter1': self.l_iter1,
            'l_iter2': self.l_iter2,
            'l_overall': self.l_overall,
        }


def _points(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(-1, 2)


def _squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _check_assignment(assign: np.ndarray, n_targets: int, expected: int) -> np.ndarray:
    assign = np.asarray(assign, dtype=np.intp)
    if assign.shape != (expected,):
        raise LengthMismatch(f"Assignment has shape {assign.shape}, expected ({expected},)")
    if expected and (assign.min() < 0 or assign.max() >= n_targets):
        raise IndexOutOfRange(f"Assignment indices must be in [0, {n_targets}), got "
                              f"[{assign.min()}, {assign.max()}]")
    return assign


def smooth_l1_contour(pred, gt, delta: float = 1.0) -> LossAndGrad:
    """
    Fixed-pairing smooth-L1 between two contours.

    Per coordinate the penalty is 0.5*d²/delta for |d| < delta and
    |d| - delta/2 otherwise; x and y are summed and the result is averaged
    over vertices.

    Raises:
        LengthMismatch: if the contours differ in vertex count
    """
    pred, gt = _points(pred), _points(gt)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"Contours have {len(pred)} and {len(gt)} vertices")
    n = len(pred)
    d = pred - gt
    ad = np.abs(d)
    quadratic = ad < delta
    penalty = np.where(quadratic, 0.5 * d * d / delta, ad - 0.5 * delta)
    grad = np.where(quadratic, d / delta, np.sign(d)) / n
    return float(penalty.sum() / n), grad


def match_pred_to_interp(pred_in, gt_interp) -> np.ndarray:
    """Index of the nearest interpolated label point for each predicted vertex (ties -> lowest)"""
    return np.argmin(_squared_distances(_points(pred_in), _points(gt_interp)), axis=1)


def match_key_to_pred(pred_in, gt_keys) -> np.ndarray:
    """Index of the nearest predicted vertex for each key vertex (ties -> lowest)"""
    return np.argmin(_squared_distances(_points(gt_keys), _points(pred_in)), axis=1)


def match_assignment(pred_in, label: LabeledInstance) -> MatchAssignment:
    return MatchAssignment(
        pred_to_interp=match_pred_to_interp(pred_in, label.gt_interp),
        key_to_pred=match_key_to_pred(pred_in, label.gt_keys),
    )


def loss_pull_to_boundary(pred_out, gt_interp, assign) -> LossAndGrad:
    """Mean L1 distance from each output vertex to its assigned interpolated point"""
    pred_out, gt_interp = _points(pred_out), _points(gt_interp)
    assign = _check_assignment(assign, len(gt_interp), len(pred_out))
    n = len(pred_out)
    diff = pred_out - gt_interp[assign]
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def loss_pull_keys(pred_out, gt_keys, assign) -> LossAndGrad:
    """Mean L1 distance from each key vertex to the output vertex it pulls"""
    pred_out, gt_keys = _points(pred_out), _points(gt_keys)
    assign = _check_assignment(assign, len(pred_out), len(gt_keys))
    n_key = len(gt_keys)
    diff = pred_out[assign] - gt_keys
    grad = np.zeros_like(pred_out)
    np.add.at(grad, assign, np.sign(diff) / n_key)
    return float(np.abs(diff).sum() / n_key), grad


def dynamic_matching_loss(pred_in, pred_out, label: LabeledInstance,
                          assignment: Optional[MatchAssignment] = None) -> LossAndGrad:
    """
    Average of the pull-to-boundary and pull-keys terms.

    Both assignments are functions of ``pred_in`` only; the gradient is
    taken w.r.t. ``pred_out`` with the assignments fixed.
    """
    pred_in, pred_out = _points(pred_in), _points(pred_out)
    if pred_in.shape != pred_out.shape:
        raise LengthMismatch(f"pred_in has {len(pred_in)} vertices, pred_out {len(pred_out)}")
    if assignment is None:
        assignment = match_assignment(pred_in, label)
    l1, g1 = loss_pull_to_boundary(pred_out, label.gt_interp, assignment.pred_to_interp)
    l2, g2 = loss_pull_keys(pred_out, label.gt_keys, assignment.key_to_pred)
    return 0.5 * (l1 + l2), 0.5 * (g1 + g2)


def chamfer_loss(pred, gt) -> LossAndGrad:
    """
    Symmetric chamfer distance: mean nearest-neighbour L2 distance from pred
    to gt plus the same from gt to pred. Vertex order is ignored.
    """
    pred, gt = _points(pred), _points(gt)
    dist = np.sqrt(_squared_distances(pred, gt))
    nn_pred = np.argmin(dist, axis=1)
    nn_gt = np.argmin(dist, axis=0)
    d_pred = dist[np.arange(len(pred)), nn_pred]
    d_gt = dist[nn_gt, np.arange(len(gt))]

    grad = np.zeros_like(pred)
    vec = pred - gt[nn_pred]
    scale = np.divide(1.0, d_pred, out=np.zeros_like(d_pred), where=d_pred > 0)
    grad += vec * scale[:, None] / len(pred)
    vec = pred[nn_gt] - gt
    scale = np.divide(1.0, d_gt, out=np.zeros_like(d_gt), where=d_gt > 0)
    np.add.at(grad, nn_gt, vec * scale[:, None] / len(gt))
    return float(d_pred.mean() + d_gt.mean()), grad


def overall_loss(stages: "ModelOutputs", label: LabeledInstance, cfg: LossConfig) -> LossBreakdown:
    """
    Combined objective alpha*L_init + beta*L_coarse + L_iter1 + L_iter2.

    The last module's term follows ``cfg.final_loss``; for DML the matching
    input is the iter1 contour.
    """
    cfg.validate()
    gt = label.gt_contour
    delta = cfg.smooth_l1_delta
    l_init, g_init = smooth_l1_contour(stages.initial, gt, delta)
    l_coarse, g_coarse = smooth_l1_contour(stages.coarse, gt, delta)
    l_iter1, g_iter1 = smooth_l1_contour(stages.iter1, gt, delta)

    assignment = None
    if cfg.final_loss == "dml":
        assignment = match_assignment(stages.iter1, label)
        l_iter2, g_iter2 = dynamic_matching_loss(stages.iter1, stages.iter2, label, assignment)
    elif cfg.final_loss == "smooth_l1":
        l_iter2, g_iter2 = smooth_l1_contour(stages.iter2, gt, delta)
    else:
        l_iter2, g_iter2 = chamfer_loss(stages.iter2, gt)

    l_overall = cfg.alpha * l_init + cfg.beta * l_coarse + l_iter1 + l_iter2
    return LossBreakdown(
        l_init=l_init,
        l_coarse=l_coarse,
        l_iter1=l_iter1,
        l_iter2=l_iter2,
        l_overall=l_overall,
        gradients={
            'initial': cfg.alpha * g_init,
            'coarse': cfg.beta * g_coarse,
            'iter1': g_iter1,
            'iter2': g_iter2,
        },
        assignment=assignment,
    )
