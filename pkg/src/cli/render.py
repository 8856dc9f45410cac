"""
SVG figures: stage contours with deformation paths, and label-sampling panels.

Built with ElementTree so the output is always well-formed XML.
"""

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np

from core.errors import ConfigError, IoError
from core.geometry import Polygon
from core.labeling import LabeledInstance

logger = logging.getLogger(__name__)

SVG_NS = "http://www.w3.org/2000/svg"
STAGE_ORDER = ("initial", "coarse", "iter1", "final")
DEFAULT_COLORS = {
    "gt": "#2ca02c",
    "initial": "#1f77b4",
    "coarse": "#ff7f0e",
    "iter1": "#9467bd",
    "final": "#d62728",
    "paths": "#7f7f7f",
}
MIN_SEGMENT_LENGTH = 1e-9


@dataclass
class RenderSpec:
    """What to draw and where"""
    stages: Tuple[str, ...] = ("initial", "coarse", "final")
    draw_paths: bool = False
    colors: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_COLORS))
    output: Union[str, Path] = "contours.svg"
    scale: float = 8.0  # SVG units per image pixel

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("At least one stage must be selected for rendering")
        unknown = [s for s in self.stages if s not in STAGE_ORDER]
        if unknown:
            raise ConfigError(f"Unknown stages {unknown}; expected a subset of {STAGE_ORDER}")
        if self.scale <= 0:
            raise ConfigError(f"Render scale must be positive, got {self.scale}")


def _path_data(points: np.ndarray, scale: float, closed: bool = True) -> str:
    coords = [f"{x * scale:.3f},{y * scale:.3f}" for x, y in np.asarray(points)]
    data = "M " + " L ".join(coords)
    return data + " Z" if closed else data


def _svg_root(width: float, height: float) -> ET.Element:
    ET.register_namespace("", SVG_NS)
    return ET.Element(f"{{{SVG_NS}}}svg", {
        "width": f"{width:.0f}",
        "height": f"{height:.0f}",
        "viewBox": f"0 0 {width:.3f} {height:.3f}",
    })


def _group(parent: ET.Element, group_id: str, css_class: str, color: str, **extra) -> ET.Element:
    attrs = {"id": group_id, "class": css_class, "stroke": color, "fill": "none"}
    attrs.update(extra)
    return ET.SubElement(parent, f"{{{SVG_NS}}}g", attrs)


def _add_path(group: ET.Element, points: np.ndarray, scale: float, closed: bool = True) -> None:
    ET.SubElement(group, f"{{{SVG_NS}}}path", {"d": _path_data(points, scale, closed)})


def render_stages(image_size: Tuple[int, int], polygons: Sequence[Polygon],
                  contours: Sequence[Mapping[str, np.ndarray]], spec: RenderSpec) -> ET.ElementTree:
    """
    One ``<g>`` with every ground-truth polygon, one per selected stage, and
    with ``draw_paths`` one holding vertex-wise segments between consecutive
    selected stages (zero-length segments are skipped).

    Args:
        image_size: (H, W) in pixels
        polygons: Ground-truth polygon per instance
        contours: Stage name -> (N, 2) contour, per instance
        spec: Render settings
    """
    spec.validate()
    h, w = image_size
    s = spec.scale
    root = _svg_root(w * s, h * s)
    ET.SubElement(root, f"{{{SVG_NS}}}rect", {"width": "100%", "height": "100%", "fill": "white"})

    gt_group = _group(root, "gt", "gt", spec.colors.get("gt", DEFAULT_COLORS["gt"]), **{"stroke-width": "2"})
    for polygon in polygons:
        _add_path(gt_group, polygon.vertices, s)

    stages = [st for st in STAGE_ORDER if st in spec.stages]
    for stage in stages:
        group = _group(root, f"stage-{stage}", "stage", spec.colors.get(stage, DEFAULT_COLORS[stage]))
        for inst in contours:
            _add_path(group, inst[stage], s)

    if spec.draw_paths:
        group = _group(root, "paths", "paths", spec.colors.get("paths", DEFAULT_COLORS["paths"]),
                       **{"stroke-width": "0.5"})
        for inst in contours:
            for a, b in zip(stages, stages[1:]):
                for p, q in zip(np.asarray(inst[a]), np.asarray(inst[b])):
                    if np.hypot(*(q - p)) <= MIN_SEGMENT_LENGTH:
                        continue
                    ET.SubElement(group, f"{{{SVG_NS}}}line", {
                        "x1": f"{p[0] * s:.3f}", "y1": f"{p[1] * s:.3f}",
                        "x2": f"{q[0] * s:.3f}", "y2": f"{q[1] * s:.3f}",
                    })
    return ET.ElementTree(root)


def render_label_panels(image_size: Tuple[int, int], labels: Mapping[int, LabeledInstance],
                        scale: float = 8.0) -> ET.ElementTree:
    """
    Side-by-side panels, one per alignment count M: the annotation, the
    sampled contour, rays through the fixed vertices and the key vertices.
    """
    h, w = image_size
    pw, ph = w * scale, h * scale
    root = _svg_root(pw * len(labels), ph)
    for k, (m, label) in enumerate(labels.items()):
        panel = ET.SubElement(root, f"{{{SVG_NS}}}g", {
            "id": f"panel-m{m}", "class": "panel", "transform": f"translate({k * pw:.3f},0)",
        })
        ET.SubElement(panel, f"{{{SVG_NS}}}rect", {
            "width": f"{pw:.3f}", "height": f"{ph:.3f}", "fill": "white", "stroke": "black",
        })
        gt = _group(panel, f"gt-m{m}", "gt", DEFAULT_COLORS["gt"])
        _add_path(gt, label.raw_polygon.vertices, scale)
        contour = _group(panel, f"contour-m{m}", "contour", DEFAULT_COLORS["final"])
        _add_path(contour, label.gt_contour, scale)

        rays = _group(panel, f"rays-m{m}", "rays", DEFAULT_COLORS["paths"], **{"stroke-dasharray": "2,2"})
        cx, cy = label.center * scale
        for idx in label.fixed_indices:
            x, y = label.gt_contour[idx] * scale
            ET.SubElement(rays, f"{{{SVG_NS}}}line", {
                "x1": f"{cx:.3f}", "y1": f"{cy:.3f}", "x2": f"{x:.3f}", "y2": f"{y:.3f}",
            })

        points = _group(panel, f"vertices-m{m}", "vertices", "none", fill=DEFAULT_COLORS["final"])
        fixed = set(int(i) for i in label.fixed_indices)
        for i, (x, y) in enumerate(label.gt_contour * scale):
            ET.SubElement(points, f"{{{SVG_NS}}}circle", {
                "cx": f"{x:.3f}", "cy": f"{y:.3f}", "r": "3" if i in fixed else "1.5",
            })
        keys = _group(panel, f"keys-m{m}", "keys", DEFAULT_COLORS["coarse"])
        for x, y in label.gt_keys * scale:
            ET.SubElement(keys, f"{{{SVG_NS}}}rect", {
                "x": f"{x - 2:.3f}", "y": f"{y - 2:.3f}", "width": "4", "height": "4",
            })
        title = ET.SubElement(panel, f"{{{SVG_NS}}}text", {"x": "4", "y": "14", "font-size": "12"})
        title.text = f"M={m}"
    return ET.ElementTree(root)


def write_svg(tree: ET.ElementTree, path: Union[str, Path]) -> None:
    """
    Raises:
        IoError: if the file cannot be written
    """
    try:
        tree.write(path, encoding="utf-8", xml_declaration=True)
    except OSError as e:
        raise IoError(f"Failed to write SVG {path}: {e}") from e
    logger.info(f"SVG written to {path}")
