"""
Training-label construction for one instance.

A label holds the multi-direction-aligned ground-truth contour, its
sub-segment interpolation (candidate targets for dynamic matching) and the
Douglas-Peucker key vertices of the annotation.
"""

import logging
from dataclasses import dataclass
from functools import partial
from typing import Any, Dict, Optional

import numpy as np

from .errors import CenterOutside, ConfigError
from .geometry import (
    Contour,
    Polygon,
    boundary_arclength,
    centroid,
    default_dp_eps,
    distance_to_boundary,
    douglas_peucker,
    interpolate_subsegments,
    normalize_orientation,
    point_in_polygon,
    points_at_arclength,
    polygon_perimeter,
    ray_boundary_intersection,
    resample_uniform,
)

logger = logging.getLogger(__name__)

KEY_SOURCES = ("raw", "contour")


@dataclass
class MDAConfig:
    """Label sampling settings (multi-direction alignment)"""
    n_vertices: int = 128
    m_aligned: int = 4
    start_angle: float = 0.0
    subsegments: int = 10
    dp_eps: Optional[float] = None  # px; None means dp_eps_relative * max bbox side
    dp_eps_relative: float = 0.01
    key_source: str = "raw"
    farthest_intersection: bool = True

    def validate(self) -> None:
        if self.n_vertices < 3:
            raise ConfigError(f"mda.n_vertices must be >= 3, got {self.n_vertices}")
        m = self.m_aligned
        if not 0 <= m <= self.n_vertices:
            raise ConfigError(f"mda.m_aligned must be in [0, {self.n_vertices}], got {m}")
        if m > 0 and self.n_vertices % m:
            raise ConfigError(f"mda.m_aligned={m} must divide mda.n_vertices={self.n_vertices}")
        if self.subsegments < 1:
            raise ConfigError(f"mda.subsegments must be >= 1, got {self.subsegments}")
        if self.dp_eps is not None and self.dp_eps <= 0:
            raise ConfigError(f"mda.dp_eps must be positive, got {self.dp_eps}")
        if self.dp_eps_relative <= 0:
            raise ConfigError(f"mda.dp_eps_relative must be positive, got {self.dp_eps_relative}")
        if self.key_source not in KEY_SOURCES:
            raise ConfigError(f"mda.key_source must be one of {KEY_SOURCES}, got {self.key_source!r}")


@dataclass(eq=False)
class LabeledInstance:
    """Ground truth for one instance: sampled contour, interpolated points and key vertices"""
    raw_polygon: Polygon
    center: np.ndarray
    gt_contour: Contour
    gt_interp: np.ndarray
    gt_keys: np.ndarray
    fixed_indices: np.ndarray

    @property
    def n_key(self) -> int:
        return len(self.gt_keys)

    @property
    def n_vertices(self) -> int:
        return len(self.gt_contour)

    def to_dict(self) -> Dict[str, Any]:
        """Convert label to a JSON-ready dictionary"""
        return {
            'center': self.center.tolist(),
            'gt_contour': self.gt_contour.tolist(),
            'gt_keys': self.gt_keys.tolist(),
            'n_key': self.n_key,
            'fixed_indices': [int(i) for i in self.fixed_indices],
        }


def fixed_vertex_indices(cfg: MDAConfig) -> np.ndarray:
    """Contour indices pinned to alignment rays (every N/M-th vertex)"""
    if cfg.m_aligned == 0:
        return np.zeros(0, dtype=int)
    return np.arange(0, cfg.n_vertices, cfg.n_vertices // cfg.m_aligned)


def _strictly_inside(point: np.ndarray, p: Polygon) -> bool:
    return point_in_polygon(point, p.vertices) and distance_to_boundary(point, p) > 1e-9


def compute_center(p: Polygon) -> np.ndarray:
    """
    Instance midpoint used as the contour origin.

    The bbox center is preferred; when it is not strictly inside the polygon
    the area centroid is used instead.

    Raises:
        CenterOutside: if neither candidate is strictly inside
    """
    xmin, ymin, xmax, ymax = p.bbox
    candidate = np.array([(xmin + xmax) / 2.0, (ymin + ymax) / 2.0])
    if _strictly_inside(candidate, p):
        return candidate
    logger.debug(f"Bbox center {candidate.tolist()} outside polygon, trying centroid")
    candidate = centroid(p)
    if _strictly_inside(candidate, p):
        return candidate
    raise CenterOutside(f"Neither bbox center nor centroid {candidate.tolist()} is inside the polygon")


def mda_sample(p: Polygon, center: np.ndarray, cfg: MDAConfig) -> Contour:
    """
    Sample the ground-truth contour with multi-direction alignment.

    With M > 0, vertex j*N/M is the boundary hit of the ray at
    ``start_angle + 2*pi*j/M``; the N/M - 1 vertices after it are spaced
    uniformly in arc length along the boundary up to the next fixed vertex.
    M == 0 is plain uniform resampling from the start-angle hit and M == N
    puts every vertex on its own ray.

    Args:
        p: Annotation polygon (normalized to counter-clockwise here)
        center: Point strictly inside p
        cfg: Sampling configuration

    Returns:
        (N, 2) contour

    Raises:
        NoIntersection: propagated from ray casting
    """
    cfg.validate()
    p = normalize_orientation(p)
    n, m = cfg.n_vertices, cfg.m_aligned
    ray = partial(ray_boundary_intersection, p, center, farthest=cfg.farthest_intersection)

    if m == 0:
        return resample_uniform(p, n, ray(cfg.start_angle))

    angles = cfg.start_angle + 2.0 * np.pi * np.arange(m) / m
    fixed = np.array([ray(angle) for angle in angles])
    positions = np.array([boundary_arclength(p, point) for point in fixed])
    perimeter = polygon_perimeter(p)
    per_segment = n // m

    contour = np.empty((n, 2))
    for j in range(m):
        span = perimeter if m == 1 else (positions[(j + 1) % m] - positions[j]) % perimeter
        contour[j * per_segment] = fixed[j]
        if per_segment > 1:
            steps = positions[j] + span * np.arange(1, per_segment) / per_segment
            contour[j * per_segment + 1:(j + 1) * per_segment] = points_at_arclength(p, steps)
    return contour


def build_label(p: Polygon, cfg: MDAConfig) -> LabeledInstance:
    """
    Assemble the full training label for one annotation polygon.

    Raises:
        CenterOutside: if no interior midpoint can be found
    """
    cfg.validate()
    p = normalize_orientation(p)
    center = compute_center(p)
    gt_contour = mda_sample(p, center, cfg)
    gt_interp = interpolate_subsegments(gt_contour, cfg.subsegments)

    key_polygon = p if cfg.key_source == "raw" else Polygon(gt_contour)
    eps = cfg.dp_eps if cfg.dp_eps is not None else default_dp_eps(key_polygon, cfg.dp_eps_relative)
    gt_keys = douglas_peucker(key_polygon, eps)

    logger.debug(f"Label built: {len(p)} raw vertices -> {len(gt_keys)} keys, eps={eps:.4f}")
    return LabeledInstance(
        raw_polygon=p,
        center=center,
        gt_contour=gt_contour,
        gt_interp=gt_interp,
        gt_keys=gt_keys,
        fixed_indices=fixed_vertex_indices(cfg),
    )
