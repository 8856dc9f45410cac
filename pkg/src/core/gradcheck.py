"""
Finite-difference verification of every analytic gradient.

Each coordinate of each checked array is perturbed by +-step and the central
difference is compared with the analytic value using

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-2)

A coordinate whose central difference disagrees but whose forward or backward
one-sided difference agrees sits on a kink (ReLU, L1 sign, bilinear cell
edge, nearest-neighbour switch) and is counted as rejected, not failed.
A check with more than MAX_REJECTED_FRACTION of its coordinates rejected
(at least one is always allowed) fails anyway.
"""

import logging
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Callable, Dict, List

import numpy as np

from .dataset import SynthConfig, generate_dataset
from .labeling import LabeledInstance, MDAConfig
from .losses import (
    LossConfig,
    chamfer_loss,
    dynamic_matching_loss,
    loss_pull_keys,
    loss_pull_to_boundary,
    match_assignment,
    overall_loss,
    smooth_l1_contour,
)
from .model import (
    FeatureGrid,
    ModelConfig,
    ModelParams,
    backward,
    circular_conv,
    circular_conv_backward,
    forward,
    sample_features,
    sample_features_backward,
)

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
ONE_SIDED_TOLERANCE = 1e-3
ERROR_FLOOR = 1e-2
MAX_REJECTED_FRACTION = 0.01


@dataclass
class CheckResult:
    name: str
    n_checked: int
    n_rejected: int
    n_failed: int
    max_rel_error: float

    @property
    def max_rejected(self) -> int:
        return max(1, int(MAX_REJECTED_FRACTION * self.n_checked))

    @property
    def passed(self) -> bool:
        return self.n_failed == 0 and self.n_rejected <= self.max_rejected

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED"
        return (f"{self.name}: {status} (max rel err {self.max_rel_error:.2e}, "
                f"{self.n_checked} checked, {self.n_rejected} kinks rejected, {self.n_failed} failed)")


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.abs(np.asarray(analytic, dtype=np.float64))
    n = np.abs(np.asarray(numeric, dtype=np.float64))
    return np.abs(np.asarray(analytic) - np.asarray(numeric)) / np.maximum(np.maximum(a, n), ERROR_FLOOR)


def check_gradient(name: str, objective: Callable[[], float], x: np.ndarray, analytic: np.ndarray,
                   step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> CheckResult:
    """
    Compare ``analytic`` with finite differences of ``objective`` w.r.t. ``x``.

    ``x`` is perturbed in place and restored; ``objective`` must read it.
    """
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    f0 = objective()
    flat = x.reshape(-1)
    grad_flat = analytic.reshape(-1)
    rejected = failed = 0
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = objective()
        flat[i] = orig - step
        f_minus = objective()
        flat[i] = orig

        err = float(relative_error(grad_flat[i], (f_plus - f_minus) / (2.0 * step)))
        if err < tolerance:
            worst = max(worst, err)
            continue
        one_sided = min(
            float(relative_error(grad_flat[i], (f_plus - f0) / step)),
            float(relative_error(grad_flat[i], (f0 - f_minus) / step)),
        )
        if one_sided < ONE_SIDED_TOLERANCE:
            rejected += 1
            continue
        failed += 1
        worst = max(worst, err)
        logger.debug(f"{name}[{i}]: analytic {grad_flat[i]:.6e}, central error {err:.3e}")

    result = CheckResult(name, flat.size, rejected, failed, worst)
    logger.info(str(result))
    return result


def _toy_label(seed: int, n_vertices: int, image: int) -> LabeledInstance:
    synth = SynthConfig(n_instances=1, shape_family="blob", image_size=(image, image),
                        vertex_budget=12, seed=seed)
    return generate_dataset(synth, MDAConfig(n_vertices=n_vertices, m_aligned=4))[0][1]


def loss_checks(seed: int = 0, n_vertices: int = 16, step: float = DEFAULT_STEP,
                tolerance: float = DEFAULT_TOLERANCE) -> List[CheckResult]:
    """Gradient checks of every loss w.r.t. predicted vertices"""
    rng = np.random.default_rng(seed)
    label = _toy_label(seed, n_vertices, 32)
    gt = label.gt_contour
    noisy = {stage: gt + rng.normal(0.0, 1.5, gt.shape) for stage in ("initial", "coarse", "iter1", "iter2")}
    pred_in = noisy["iter1"]
    pred = noisy["iter2"].copy()
    assignment = match_assignment(pred_in, label)
    results = []

    def run(name, fn):
        _, grad = fn()
        results.append(check_gradient(name, lambda: fn()[0], pred, grad, step, tolerance))

    run("loss/smooth_l1", lambda: smooth_l1_contour(pred, gt))
    run("loss/pull_to_boundary", lambda: loss_pull_to_boundary(pred, label.gt_interp, assignment.pred_to_interp))
    run("loss/pull_keys", lambda: loss_pull_keys(pred, label.gt_keys, assignment.key_to_pred))
    run("loss/dml", lambda: dynamic_matching_loss(pred_in, pred, label, assignment))
    run("loss/chamfer", lambda: chamfer_loss(pred, gt))

    for final_loss in ("dml", "smooth_l1", "chamfer"):
        cfg = LossConfig(final_loss=final_loss)
        stages = SimpleNamespace(**{k: v.copy() for k, v in noisy.items()})
        breakdown = overall_loss(stages, label, cfg)
        for stage in ("initial", "coarse", "iter1", "iter2"):
            results.append(check_gradient(
                f"loss/overall[{final_loss}]/{stage}",
                lambda: overall_loss(stages, label, cfg).l_overall,
                getattr(stages, stage), breakdown.gradients[stage], step, tolerance,
            ))
    return results


def _toy_model(seed: int, n_vertices: int, channels: int, grid_size: int):
    cfg = ModelConfig(n_vertices=n_vertices, channels=channels, init_hidden=8, refine_channels=6,
                      kernel_width=9, offset_scale=1.0, grid_size=(grid_size, grid_size))
    params = ModelParams.initialize(cfg, seed=seed, zero_offset_heads=False)
    rng = np.random.default_rng(seed + 1)
    grid = FeatureGrid(rng.normal(0.0, 1.0, (grid_size, grid_size, channels)), stride=1.0)
    return params, grid


def model_checks(seed: int = 0, n_vertices: int = 16, channels: int = 4, grid_size: int = 16,
                 step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> List[CheckResult]:
    """Every parameter tensor and the feature grid under the full combined loss"""
    params, grid = _toy_model(seed, n_vertices, channels, grid_size)
    label = _toy_label(seed, n_vertices, grid_size)
    loss_cfg = LossConfig()

    outputs = forward(label.center, params, grid)
    breakdown = overall_loss(outputs, label, loss_cfg)
    grads, grid_grad = backward(outputs, params, grid, breakdown.gradients)

    def objective() -> float:
        return overall_loss(forward(label.center, params, grid), label, loss_cfg).l_overall

    results = [
        check_gradient(f"model/{name}", objective, params.tensors[name], grads[name], step, tolerance)
        for name in params.tensors
    ]
    results.append(check_gradient("model/grid", objective, grid.values, grid_grad, step, tolerance))
    return results


def primitive_checks(seed: int = 0, channels: int = 4, grid_size: int = 16,
                     step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> List[CheckResult]:
    """Bilinear sampling and circular convolution under random linear objectives"""
    rng = np.random.default_rng(seed + 2)
    _, grid = _toy_model(seed, 16, channels, grid_size)
    points = rng.uniform(1.0, grid_size - 1.0, (12, 2))
    weights = rng.normal(size=(12, channels))

    def sample_objective() -> float:
        return float(np.sum(sample_features(grid, points)[0] * weights))

    _, cache = sample_features(grid, points)
    grid_grad, point_grad = sample_features_backward(cache, weights)
    results = [
        check_gradient("sample_features/points", sample_objective, points, point_grad, step, tolerance),
        check_gradient("sample_features/grid", sample_objective, grid.values, grid_grad, step, tolerance),
    ]

    feats = rng.normal(size=(16, 5))
    kernel = rng.normal(size=(9, 5, 3))
    out_weights = rng.normal(size=(16, 3))

    def conv_objective() -> float:
        return float(np.sum(circular_conv(feats, kernel) * out_weights))

    feat_grad, kernel_grad = circular_conv_backward(feats, kernel, out_weights)
    results.append(check_gradient("circular_conv/feats", conv_objective, feats, feat_grad, step, tolerance))
    results.append(check_gradient("circular_conv/kernel", conv_objective, kernel, kernel_grad, step, tolerance))
    return results


def run_gradient_checks(seed: int = 0, n_vertices: int = 16, channels: int = 4, grid_size: int = 16,
                        step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> List[CheckResult]:
    """Full suite: losses, primitives and every model tensor"""
    results = loss_checks(seed, n_vertices, step, tolerance)
    results += primitive_checks(seed, channels, grid_size, step, tolerance)
    results += model_checks(seed, n_vertices, channels, grid_size, step, tolerance)
    return results


def summarize(results: List[CheckResult]) -> Dict[str, int]:
    return {
        "checks": len(results),
        "failed": sum(1 for r in results if not r.passed),
        "coordinates": sum(r.n_checked for r in results),
        "rejected": sum(r.n_rejected for r in results),
    }
