"""
End-to-end training, evaluation and the ablation harness.

Each instance owns a feature grid initialised from its rasterized mask;
shared network weights and (optionally) the grids are updated by gradient
descent on the combined contour objective with a step-decay schedule.
"""

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ConfigError, DivergenceDetected, IoError
from .geometry import MaskGrid, Polygon, boundary_iou, mask_iou, rasterize, rasterize_vertices
from .labeling import LabeledInstance, MDAConfig, build_label
from .losses import LossConfig, overall_loss
from .model import FeatureGrid, ModelConfig, ModelParams, backward, forward

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "momentum", "adam")
ABLATION_SUITES = ("loss", "alignment", "components")
EVAL_STAGES = ("initial", "coarse", "final")
HISTORY_COLUMNS = [
    "epoch", "l_init", "l_coarse", "l_iter1", "l_iter2", "l_overall", "lr",
    "eval_iou_initial", "eval_iou_coarse", "eval_iou_final",
]

Instance = Tuple[Polygon, LabeledInstance]


@dataclass
class TrainConfig:
    """Optimisation schedule plus the nested label, loss and model sections"""
    epochs: int = 150
    learning_rate: float = 1e-4
    lr_decay: float = 0.5
    milestones: Tuple[int, ...] = (80, 120)
    batch_size: int = 8
    optimizer: str = "sgd"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    train_grid: bool = True
    grid_lr_scale: float = 0.1
    divergence_threshold: float = 1e6
    eval_every: int = 0  # epochs between training-set IoU evaluations; 0 means last epoch only
    shuffle: bool = True
    seed: int = 0
    image_size: Tuple[int, int] = (32, 32)
    mda: MDAConfig = field(default_factory=MDAConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.image_size = tuple(int(s) for s in self.image_size)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"train.learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"train.lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.grid_lr_scale < 0:
            raise ConfigError(f"train.grid_lr_scale must be >= 0, got {self.grid_lr_scale}")
        if self.mda.n_vertices != self.model.n_vertices:
            raise ConfigError(
                f"mda.n_vertices ({self.mda.n_vertices}) must equal model.n_vertices ({self.model.n_vertices})"
            )
        self.mda.validate()
        self.loss.validate()
        self.model.validate()


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    """lr0 * decay ** (number of milestones <= epoch); epochs count from 0"""
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.learning_rate * cfg.lr_decay ** passed


class Optimizer:
    """Plain gradient descent; subclasses keep per-key state"""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg

    def step(self, key: Hashable, value: np.ndarray, grad: np.ndarray, lr: float) -> None:
        value -= lr * grad


class MomentumOptimizer(Optimizer):
    def __init__(self, cfg: TrainConfig):
        super().__init__(cfg)
        self.velocity: Dict[Hashable, np.ndarray] = {}

    def step(self, key, value, grad, lr):
        v = self.velocity.get(key)
        v = grad.copy() if v is None else self.cfg.momentum * v + grad
        self.velocity[key] = v
        value -= lr * v


class AdamOptimizer(Optimizer):
    def __init__(self, cfg: TrainConfig):
        super().__init__(cfg)
        self.state: Dict[Hashable, Tuple[int, np.ndarray, np.ndarray]] = {}

    def step(self, key, value, grad, lr):
        b1, b2 = self.cfg.adam_beta1, self.cfg.adam_beta2
        t, m, v = self.state.get(key, (0, np.zeros_like(grad), np.zeros_like(grad)))
        t += 1
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        self.state[key] = (t, m, v)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        value -= lr * m_hat / (np.sqrt(v_hat) + self.cfg.adam_eps)


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    return {"sgd": Optimizer, "momentum": MomentumOptimizer, "adam": AdamOptimizer}[cfg.optimizer](cfg)


def make_grid(polygon: Polygon, image_size: Tuple[int, int], model_cfg: ModelConfig) -> FeatureGrid:
    """Feature grid encoded from the instance's rasterized mask"""
    h, w = image_size
    mask = rasterize(polygon, h, w).bits
    return FeatureGrid.from_mask(mask, model_cfg.grid_size, model_cfg.channels)


@dataclass
class TrainResult:
    params: ModelParams
    history: pd.DataFrame
    grids: List[FeatureGrid]

    def __iter__(self):
        # unpacks as (params, history)
        return iter((self.params, self.history))


def train(data: Sequence[Instance], cfg: TrainConfig,
          on_epoch: Optional[Callable[[Dict[str, float]], None]] = None) -> TrainResult:
    """
    Train shared weights (and per-instance grids) on ``data``.

    Args:
        data: (polygon, label) pairs; labels must have ``cfg.model.n_vertices`` vertices
        cfg: Training configuration
        on_epoch: Optional callback receiving each history row

    Returns:
        TrainResult with params, per-epoch history DataFrame and trained grids

    Raises:
        ValueError: if data is empty
        DivergenceDetected: on a non-finite loss or one above the threshold
    """
    cfg.validate()
    if not data:
        raise ValueError("Training data is empty")

    rng = np.random.default_rng(cfg.seed)
    params = ModelParams.initialize(cfg.model, seed=cfg.seed)
    grids = [make_grid(polygon, cfg.image_size, cfg.model) for polygon, _ in data]
    optimizer = make_optimizer(cfg)
    n = len(data)
    rows = []

    logger.info(f"Training on {n} instances for {cfg.epochs} epochs "
                f"({cfg.optimizer}, lr {cfg.learning_rate}, {params.num_parameters} parameters)")

    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        terms: Dict[str, List[float]] = {k: [] for k in ("l_init", "l_coarse", "l_iter1", "l_iter2", "l_overall")}

        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            scale = 1.0 / len(batch)
            total = {name: np.zeros_like(t) for name, t in params.tensors.items()}
            grid_grads = []
            # instances are reduced in batch order so the sum is reproducible
            for idx in batch:
                polygon, label = data[idx]
                outputs = forward(label.center, params, grids[idx])
                breakdown = overall_loss(outputs, label, cfg.loss)
                _check_divergence(breakdown.l_overall, cfg, epoch, int(idx), breakdown.values(), lr)
                for key, value in breakdown.values().items():
                    terms[key].append(value)
                grads, grid_grad = backward(outputs, params, grids[idx], breakdown.gradients)
                for name, g in grads.items():
                    total[name] += scale * g
                grid_grads.append((idx, scale * grid_grad))

            for name, g in total.items():
                optimizer.step(name, params.tensors[name], g, lr)
            params.bump()
            if cfg.train_grid:
                for idx, g in grid_grads:
                    optimizer.step(("grid", int(idx)), grids[idx].values, g, lr * cfg.grid_lr_scale)
                    grids[idx].bump()

        row: Dict[str, float] = {"epoch": epoch}
        row.update({key: math.fsum(values) / n for key, values in terms.items()})
        row["lr"] = lr
        last = epoch == cfg.epochs - 1
        if last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
            report = evaluate(params, data, cfg.mda, image_size=cfg.image_size, grids=grids,
                              measure_throughput=False)
            for stage in EVAL_STAGES:
                row[f"eval_iou_{stage}"] = report.stages[stage].mask_iou
        else:
            for stage in EVAL_STAGES:
                row[f"eval_iou_{stage}"] = float("nan")
        rows.append(row)
        logger.info(f"Epoch {epoch}: l_overall={row['l_overall']:.5f} lr={lr:.3g}")
        if on_epoch:
            on_epoch(row)

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return TrainResult(params=params, history=history, grids=grids)


def _check_divergence(loss: float, cfg: TrainConfig, epoch: int, instance: int,
                      values: Dict[str, float], lr: float) -> None:
    if math.isfinite(loss) and loss <= cfg.divergence_threshold:
        return
    diagnostics = {"epoch": epoch, "instance": instance, "lr": lr, **values}
    logger.error(f"Training diverged: {diagnostics}")
    raise DivergenceDetected(
        f"Loss {loss} at epoch {epoch}, instance {instance} is non-finite or above "
        f"{cfg.divergence_threshold}",
        diagnostics=diagnostics,
    )


def write_history(path: Union[str, Path], history: pd.DataFrame, run_config: Dict[str, Any]) -> None:
    """CSV history preceded by one ``# config: {...}`` comment line"""
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(f"# config: {json.dumps(run_config, sort_keys=True)}\n")
            history.to_csv(f, index=False)
    except OSError as e:
        raise IoError(f"Failed to write history {path}: {e}") from e
    logger.info(f"History with {len(history)} epochs saved to {path}")


def read_history(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment='#')


@dataclass
class StageMetrics:
    vertex_l1: float
    mask_iou: float
    boundary_iou_d1: float
    boundary_iou_d2: float
    throughput: Optional[float] = None  # instances per second


@dataclass
class EvalReport:
    """Mean metrics per stage over an evaluation set"""
    n_instances: int
    stages: Dict[str, StageMetrics]

    @property
    def final(self) -> StageMetrics:
        return self.stages["final"]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_instances': self.n_instances,
            'stages': {name: asdict(m) for name, m in self.stages.items()},
        }

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(m) for m in self.stages.values()], index=list(self.stages))
        frame.index.name = "stage"
        return frame


def evaluate(params: ModelParams, data: Sequence[Union[Instance, Polygon]], mda: MDAConfig,
             image_size: Tuple[int, int] = (32, 32), grids: Optional[Sequence[FeatureGrid]] = None,
             measure_throughput: bool = True,
             timing_repeats: int = 3) -> EvalReport:
    """
    Rasterize each stage's contour and compare with the instance mask.

    Vertex L1 is measured against labels rebuilt with ``mda``. Instances
    without a trained grid get the mask encoding as-is. Throughput times
    ``forward`` truncated at each stage, best of ``timing_repeats``.
    """
    polygons = [item if isinstance(item, Polygon) else item[0] for item in data]
    labels = [build_label(p, mda) for p in polygons]
    if grids is None:
        grids = [make_grid(p, image_size, params.config) for p in polygons]
    h, w = image_size

    sums = {stage: {"vertex_l1": [], "mask_iou": [], "bd1": [], "bd2": []} for stage in EVAL_STAGES}
    for polygon, label, grid in zip(polygons, labels, grids):
        outputs = forward(label.center, params, grid)
        gt_mask = rasterize(polygon, h, w)
        for stage in EVAL_STAGES:
            contour = outputs.stage(stage)
            pred_mask = MaskGrid(h, w, rasterize_vertices(contour, h, w))
            s = sums[stage]
            s["vertex_l1"].append(float(np.abs(contour - label.gt_contour).sum(axis=1).mean()))
            s["mask_iou"].append(mask_iou(pred_mask, gt_mask))
            s["bd1"].append(boundary_iou(pred_mask, gt_mask, 1))
            s["bd2"].append(boundary_iou(pred_mask, gt_mask, 2))

    n = len(polygons)
    stages = {}
    for stage in EVAL_STAGES:
        s = sums[stage]
        stages[stage] = StageMetrics(
            vertex_l1=math.fsum(s["vertex_l1"]) / n,
            mask_iou=math.fsum(s["mask_iou"]) / n,
            boundary_iou_d1=math.fsum(s["bd1"]) / n,
            boundary_iou_d2=math.fsum(s["bd2"]) / n,
        )
        if measure_throughput:
            stages[stage].throughput = measure_stage_throughput(
                params, [label.center for label in labels], grids, stage, timing_repeats)

    logger.info("Evaluation: " + ", ".join(
        f"{stage} IoU {m.mask_iou:.3f}" for stage, m in stages.items()))
    return EvalReport(n_instances=n, stages=stages)


def measure_stage_throughput(params: ModelParams, centers: Sequence[np.ndarray],
                             grids: Sequence[FeatureGrid], stage: str, repeats: int = 3) -> float:
    """Instances per second of ``forward`` truncated at ``stage`` (best of ``repeats``)"""
    best = math.inf
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        for center, grid in zip(centers, grids):
            forward(center, params, grid, upto=stage)
        best = min(best, time.perf_counter() - start)
    return len(centers) / best if best > 0 else math.inf


def ablation_variants(suite: str, base: TrainConfig) -> List[Tuple[str, TrainConfig]]:
    """Matched configurations differing only in the ablated factor"""
    if suite not in ABLATION_SUITES:
        raise ConfigError(f"Ablation suite must be one of {ABLATION_SUITES}, got {suite!r}")

    def variant(mda=None, loss=None, model=None) -> TrainConfig:
        cfg = copy.deepcopy(base)
        if mda:
            cfg.mda = replace(cfg.mda, **mda)
        if loss:
            cfg.loss = replace(cfg.loss, **loss)
        if model:
            cfg.model = replace(cfg.model, **model)
        return cfg

    if suite == "loss":
        return [(name, variant(loss={"final_loss": name})) for name in ("smooth_l1", "chamfer", "dml")]
    if suite == "alignment":
        n = base.mda.n_vertices
        return [(f"M={m}", variant(mda={"m_aligned": m})) for m in (1, 2, 4, 8) if n % m == 0]

    plain = {"init_mode": "learned", "use_global_deform": True}
    return [
        ("baseline", variant(mda={"m_aligned": 1}, loss={"final_loss": "smooth_l1"},
                             model={"init_mode": "circle", "use_global_deform": False})),
        ("+arch", variant(mda={"m_aligned": 1}, loss={"final_loss": "smooth_l1"}, model=plain)),
        ("+mda", variant(mda={"m_aligned": 4}, loss={"final_loss": "smooth_l1"}, model=plain)),
        ("+dml", variant(mda={"m_aligned": 4}, loss={"final_loss": "dml"}, model=plain)),
    ]


def run_ablation(suite: str, base: TrainConfig, polygons: Sequence[Polygon],
                 holdout: Sequence[Polygon], seeds: Sequence[int] = (0,),
                 variants: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Train every variant of ``suite`` once per seed and evaluate on ``holdout``.
    ``variants`` restricts the run to the named variants, kept in suite order.

    Timings are left out so identical inputs give identical tables.

    Returns:
        DataFrame with one row per (variant, seed)
    """
    chosen = ablation_variants(suite, base)
    if variants is not None:
        unknown = set(variants) - {name for name, _ in chosen}
        if unknown:
            raise ConfigError(f"Unknown {suite} variants {sorted(unknown)}; "
                              f"expected some of {[name for name, _ in chosen]}")
        chosen = [(name, cfg) for name, cfg in chosen if name in variants]

    rows = []
    for seed in seeds:
        for name, template in chosen:
            cfg = copy.deepcopy(template)
            cfg.seed = seed
            data = [(p, build_label(p, cfg.mda)) for p in polygons]
            logger.info(f"Ablation {suite}: variant {name}, seed {seed}")
            result = train(data, cfg)
            report = evaluate(result.params, holdout, cfg.mda, image_size=cfg.image_size,
                              measure_throughput=False)
            final = report.final
            rows.append({
                "suite": suite,
                "variant": name,
                "seed": seed,
                "l_overall": float(result.history["l_overall"].iloc[-1]) if len(result.history) else float("nan"),
                "vertex_l1": final.vertex_l1,
                "mask_iou": final.mask_iou,
                "boundary_iou_d1": final.boundary_iou_d1,
                "boundary_iou_d2": final.boundary_iou_d2,
                "mask_iou_initial": report.stages["initial"].mask_iou,
                "mask_iou_coarse": report.stages["coarse"].mask_iou,
            })
    return pd.DataFrame(rows)


def summarize_ablation(table: pd.DataFrame) -> pd.DataFrame:
    """Per-variant means over seeds, variants kept in run order"""
    order = list(dict.fromkeys(table["variant"]))
    numeric = table.drop(columns=["suite", "seed"])
    summary = numeric.groupby("variant", sort=False).mean()
    return summary.loc[order]
