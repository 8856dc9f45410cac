"""
Sub-command implementations.

Each ``cmd_*`` takes the parsed arguments and the resolved ConfigManager and
returns a process exit code. Library errors propagate to ``main`` which maps
them to exit codes.
"""

import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from core.checkpoint import load_checkpoint, save_checkpoint
from core.dataset import build_dataset_file, generate_dataset, label_instances, load_dataset, save_dataset
from core.errors import ConfigError, IoError
from core.geometry import Polygon, point_edge_distances
from core.gradcheck import run_gradient_checks, summarize
from core.labeling import LabeledInstance, MDAConfig, build_label
from core.model import ModelParams, forward
from core.training import (
    EVAL_STAGES,
    evaluate,
    make_grid,
    measure_stage_throughput,
    run_ablation,
    summarize_ablation,
    train,
    write_history,
)
from utils.config_manager import ConfigManager

from .render import RenderSpec, render_label_panels, render_stages, write_svg

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3

RAY_ANGLE_TOLERANCE = 1e-9
ON_BOUNDARY_TOLERANCE = 1e-6


def _write_json(path, payload: Dict[str, Any]) -> None:
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    except OSError as e:
        raise IoError(f"Failed to write {path}: {e}") from e
    logger.info(f"Wrote {path}")


def _write_table(path, table: pd.DataFrame, config: Dict[str, Any]) -> None:
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(f"# config: {json.dumps(config, sort_keys=True)}\n")
            table.to_csv(f, index=False)
    except OSError as e:
        raise IoError(f"Failed to write {path}: {e}") from e
    logger.info(f"Wrote {path}")


def _mda_for(params: ModelParams, run_config: Dict[str, Any], fallback: MDAConfig) -> MDAConfig:
    """Labeling settings a checkpoint was trained with, sized to its vertex count"""
    mda = MDAConfig(**run_config["mda"]) if "mda" in run_config else fallback
    return replace(mda, n_vertices=params.config.n_vertices)


def cmd_gen_data(args, config: ConfigManager) -> int:
    dataset = build_dataset_file(config.synth, config.train.mda, run_config=config.get_config_dict())
    save_dataset(args.out, dataset)
    print(f"{len(dataset.instances)} instances written to {args.out}")
    return EXIT_OK


def verify_label(polygon: Polygon, label: LabeledInstance, mda: MDAConfig) -> List[str]:
    """
    Re-check a label without the sampler: every vertex within tolerance of
    some polygon edge, and every fixed vertex on its alignment ray.
    """
    problems = []
    for i, q in enumerate(label.gt_contour):
        dist = float(np.min(point_edge_distances(q, polygon.vertices)[0]))
        if dist > ON_BOUNDARY_TOLERANCE:
            problems.append(f"vertex {i} is {dist:.3e} px off the boundary")
    m = mda.m_aligned
    for j, idx in enumerate(label.fixed_indices):
        d = label.gt_contour[idx] - label.center
        expected = mda.start_angle + 2.0 * math.pi * j / m
        err = abs(math.remainder(math.atan2(d[1], d[0]) - expected, 2.0 * math.pi))
        if err > RAY_ANGLE_TOLERANCE:
            problems.append(f"fixed vertex {idx} is {err:.3e} rad off its ray")
    return problems


def cmd_sample_labels(args, config: ConfigManager) -> int:
    dataset = load_dataset(args.data)
    mda = config.train.mda
    labels = label_instances(dataset, mda)

    records = []
    failures = 0
    for inst, (polygon, label) in zip(dataset.instances, labels):
        record = {"id": inst.id, **label.to_dict()}
        if args.verify:
            problems = verify_label(polygon, label, mda)
            record["verified"] = not problems
            for problem in problems:
                logger.warning(f"Instance {inst.id}: {problem}")
            failures += bool(problems)
        records.append(record)

    payload = {"version": dataset.version, "config": config.get_config_dict(), "instances": records}
    if args.out:
        _write_json(args.out, payload)
    else:
        print(json.dumps(payload, indent=2))

    if args.svg:
        if not 0 <= args.instance < len(dataset.instances):
            raise ConfigError(f"Instance {args.instance} not in dataset of {len(dataset.instances)}")
        inst = dataset.instances[args.instance]
        panels = {}
        for m in (1, 2, 4, 8):
            if mda.n_vertices % m == 0:
                panels[m] = build_label(inst.polygon, replace(mda, m_aligned=m))
        write_svg(render_label_panels(dataset.image_size, panels), args.svg)

    if args.verify:
        if failures:
            print(f"verification failed for {failures} of {len(records)} instances")
            return EXIT_CHECK_FAILED
        print(f"all {len(records)} labels verified")
    return EXIT_OK


def cmd_train(args, config: ConfigManager) -> int:
    dataset = load_dataset(args.data)
    cfg = config.train
    cfg.image_size = dataset.image_size
    data = label_instances(dataset, cfg.mda)
    result = train(data, cfg)

    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"Cannot create output directory {out_dir}: {e}") from e
    run_config = config.get_config_dict()
    save_checkpoint(out_dir / "model.ckpt", result.params, run_config)
    write_history(out_dir / "history.csv", result.history, run_config)
    config.export_config(out_dir / "config.yaml")

    last = result.history.iloc[-1] if len(result.history) else None
    if last is not None:
        print(f"trained {len(result.history)} epochs: l_overall {last['l_overall']:.4f}, "
              f"final IoU {last['eval_iou_final']:.3f}")
    print(f"checkpoint written to {out_dir / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args, config: ConfigManager) -> int:
    dataset = load_dataset(args.data)
    params, run_config = load_checkpoint(args.checkpoint)
    mda = _mda_for(params, run_config, config.train.mda)
    report = evaluate(params, dataset.polygons, mda, image_size=dataset.image_size,
                      measure_throughput=not args.no_timing)

    payload = {
        "config": config.get_config_dict(),
        "checkpoint_config": run_config,
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "report": report.to_dict(),
    }
    if args.out:
        _write_json(args.out, payload)
    print(report.to_frame().to_string(float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_grad_check(args, config: ConfigManager) -> int:
    results = run_gradient_checks(seed=config.train.seed, n_vertices=args.n, channels=args.c,
                                  grid_size=args.grid, step=args.step, tolerance=args.tolerance)
    totals = summarize(results)
    if args.out:
        _write_json(args.out, {
            "config": config.get_config_dict(),
            "summary": totals,
            "checks": [{"name": r.name, "passed": r.passed, "max_rel_error": r.max_rel_error,
                        "checked": r.n_checked, "rejected": r.n_rejected, "failed": r.n_failed}
                       for r in results],
        })
    for r in results:
        if not r.passed or args.verbose:
            print(r)
    if totals["failed"]:
        print(f"{totals['failed']} of {totals['checks']} checks failed")
        return EXIT_CHECK_FAILED
    print(f"all checks passed ({totals['checks']} checks, {totals['coordinates']} coordinates, "
          f"{totals['rejected']} kinks rejected)")
    return EXIT_OK


def cmd_bench(args, config: ConfigManager) -> int:
    dataset = load_dataset(args.data)
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
    else:
        params = ModelParams.initialize(config.train.model, seed=config.train.seed)
    mda = replace(config.train.mda, n_vertices=params.config.n_vertices)
    centers = [build_label(p, mda).center for p in dataset.polygons]
    grids = [make_grid(p, dataset.image_size, params.config) for p in dataset.polygons]

    rows = [{"stage": stage,
             "instances_per_s": measure_stage_throughput(params, centers, grids, stage, args.repeats)}
            for stage in EVAL_STAGES]
    table = pd.DataFrame(rows)
    if args.out:
        _write_table(args.out, table, config.get_config_dict())
    print(table.to_string(index=False))

    rates = table["instances_per_s"].tolist()
    ordered = all(a >= b for a, b in zip(rates, rates[1:]))
    if not ordered:
        logger.warning(f"Throughput not ordered initial >= coarse >= final: {rates}")
        if args.check_order:
            return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_render(args, config: ConfigManager) -> int:
    dataset = load_dataset(args.data)
    params, run_config = load_checkpoint(args.checkpoint)
    mda = _mda_for(params, run_config, config.train.mda)
    spec = RenderSpec(stages=tuple(args.stages), draw_paths=args.paths, output=args.out, scale=args.scale)
    spec.validate()

    chosen = args.render_instances if args.render_instances else [0]
    polygons, contours = [], []
    for idx in chosen:
        if not 0 <= idx < len(dataset.instances):
            raise ConfigError(f"Instance {idx} not in dataset of {len(dataset.instances)}")
        polygon = dataset.instances[idx].polygon
        outputs = forward(build_label(polygon, mda).center, params,
                          make_grid(polygon, dataset.image_size, params.config))
        polygons.append(polygon)
        contours.append({stage: outputs.stage(stage) for stage in ("initial", "coarse", "iter1", "final")})

    write_svg(render_stages(dataset.image_size, polygons, contours, spec), spec.output)
    print(f"SVG written to {spec.output}")
    return EXIT_OK


def cmd_ablate(args, config: ConfigManager) -> int:
    synth, base = config.synth, config.train
    base.image_size = synth.image_size
    polygons = [p for p, _ in generate_dataset(synth, base.mda)]
    holdout_cfg = replace(synth, seed=synth.seed + 1, n_instances=args.holdout)
    holdout = [p for p, _ in generate_dataset(holdout_cfg, base.mda)]
    seeds = args.seeds if args.seeds else [base.seed]

    table = run_ablation(args.suite, base, polygons, holdout, seeds=seeds, variants=args.variants)
    _write_table(args.out, table, config.get_config_dict())
    print(summarize_ablation(table).to_string(float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK
