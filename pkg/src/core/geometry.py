"""
Ordered-polygon primitives used by labeling, losses and evaluation.

Polygons close implicitly (the last vertex connects back to the first).
Contours are plain ``(N, 2)`` float64 arrays whose vertex order carries the
predicted/label pairing, so they are not wrapped in a class.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from shapely.geometry import Polygon as ShapelyPolygon

from .errors import (
    DimensionMismatch,
    InvalidPolygon,
    NoIntersection,
    StartOffBoundary,
    ZeroArea,
)

logger = logging.getLogger(__name__)

PointLike = Union[Sequence[float], np.ndarray]
Contour = np.ndarray

MIN_EDGE_LENGTH = 1e-9
ZERO_AREA_TOLERANCE = 1e-12
BOUNDARY_TOLERANCE = 1e-6
DEFAULT_DP_RELATIVE_EPS = 0.01


@dataclass(frozen=True, eq=False)
class Polygon:
    """Raw annotation boundary: an ordered, implicitly closed vertex ring"""
    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise InvalidPolygon(f"Expected (n, 2) vertices, got shape {v.shape}")
        if len(v) < 3:
            raise InvalidPolygon(f"Polygon needs at least 3 vertices, got {len(v)}")
        if not np.all(np.isfinite(v)):
            raise InvalidPolygon("Polygon vertices must be finite")
        if np.any(_edge_lengths(v) <= MIN_EDGE_LENGTH):
            raise InvalidPolygon("Consecutive polygon vertices coincide")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def signed_area(self) -> float:
        return signed_area(self.vertices)

    @property
    def bbox(self) -> Tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)"""
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def translated(self, offset: PointLike) -> "Polygon":
        return Polygon(self.vertices + np.asarray(offset, dtype=np.float64))

    def to_list(self) -> List[List[float]]:
        return [[float(x), float(y)] for x, y in self.vertices]

    @classmethod
    def from_list(cls, points: Sequence[Sequence[float]]) -> "Polygon":
        return cls(np.asarray(points, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class MaskGrid:
    """Binary occupancy raster, row-major, pixel (r, c) centered at (c+0.5, r+0.5)"""
    height: int
    width: int
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.size != self.height * self.width:
            raise DimensionMismatch(
                f"Mask has {bits.size} bits, expected {self.height}x{self.width}"
            )
        object.__setattr__(self, "bits", bits.reshape(self.height, self.width))

    @property
    def area(self) -> int:
        return int(self.bits.sum())


def _edges(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return v, np.roll(v, -1, axis=0)


def _edge_lengths(v: np.ndarray) -> np.ndarray:
    a, b = _edges(v)
    return np.hypot(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1])


def _cumulative_lengths(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    lengths = _edge_lengths(v)
    return np.concatenate(([0.0], np.cumsum(lengths))), lengths


def signed_area(vertices: np.ndarray) -> float:
    """Shoelace area, positive for counter-clockwise rings"""
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def centroid(p: Polygon) -> np.ndarray:
    """Area centroid of a polygon"""
    v = p.vertices
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * float(np.sum(cross))
    if abs(area) < ZERO_AREA_TOLERANCE:
        raise ZeroArea(f"Polygon area {area:.3e} too small for a centroid")
    cx = float(np.sum((x + xn) * cross)) / (6.0 * area)
    cy = float(np.sum((y + yn) * cross)) / (6.0 * area)
    return np.array([cx, cy])


def polygon_perimeter(p: Polygon) -> float:
    """Sum of edge lengths including the closing edge"""
    return float(np.sum(_edge_lengths(p.vertices)))


def normalize_orientation(p: Polygon) -> Polygon:
    """
    Return the polygon with counter-clockwise orientation.

    The vertex set is unchanged; the order is reversed when the input is
    clockwise.

    Raises:
        ZeroArea: if the absolute signed area is below 1e-12 px²
    """
    area = signed_area(p.vertices)
    if abs(area) < ZERO_AREA_TOLERANCE:
        raise ZeroArea(f"Cannot orient polygon with signed area {area:.3e}")
    if area > 0:
        return p
    return Polygon(p.vertices[::-1])


def point_edge_distances(point: PointLike, vertices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Distance from a point to every polygon edge.

    Returns:
        Tuple of (distances, t) where t is the clamped edge parameter of the
        closest point on each edge
    """
    pt = np.asarray(point, dtype=np.float64)
    a, b = _edges(np.asarray(vertices, dtype=np.float64))
    e = b - a
    len2 = np.einsum("ij,ij->i", e, e)
    proj = np.einsum("ij,ij->i", pt - a, e)
    t = np.divide(proj, len2, out=np.zeros_like(proj), where=len2 > 0)
    t = np.clip(t, 0.0, 1.0)
    foot = a + t[:, None] * e
    diff = pt - foot
    return np.hypot(diff[:, 0], diff[:, 1]), t


def distance_to_boundary(point: PointLike, p: Polygon) -> float:
    return float(np.min(point_edge_distances(point, p.vertices)[0]))


def point_in_polygon(point: PointLike, vertices: np.ndarray) -> bool:
    """Crossing-number (even-odd) test; boundary points have no guaranteed side"""
    x, y = float(point[0]), float(point[1])
    a, b = _edges(np.asarray(vertices, dtype=np.float64))
    crosses = ((a[:, 1] <= y) & (b[:, 1] > y)) | ((a[:, 1] > y) & (b[:, 1] <= y))
    if not crosses.any():
        return False
    ac, bc = a[crosses], b[crosses]
    t = (y - ac[:, 1]) / (bc[:, 1] - ac[:, 1])
    x_int = ac[:, 0] + t * (bc[:, 0] - ac[:, 0])
    return bool(np.count_nonzero(x < x_int) % 2)


def boundary_arclength(p: Polygon, point: PointLike, tolerance: float = BOUNDARY_TOLERANCE) -> float:
    """
    Arc-length position of a boundary point, measured from vertex 0 along the
    polygon's vertex order.

    Raises:
        StartOffBoundary: if the point is farther than ``tolerance`` from every edge
    """
    d, t = point_edge_distances(point, p.vertices)
    k = int(np.argmin(d))
    if d[k] > tolerance:
        raise StartOffBoundary(
            f"Point {tuple(np.asarray(point).tolist())} is {d[k]:.3e} px off the boundary"
        )
    cum, lengths = _cumulative_lengths(p.vertices)
    return float((cum[k] + t[k] * lengths[k]) % cum[-1])


def points_at_arclength(p: Polygon, positions: np.ndarray) -> np.ndarray:
    """Boundary points at the given arc-length positions (wrapping modulo the perimeter)"""
    v = p.vertices
    cum, lengths = _cumulative_lengths(v)
    s = np.mod(np.asarray(positions, dtype=np.float64), cum[-1])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(v) - 1)
    u = np.clip((s - cum[k]) / lengths[k], 0.0, 1.0)
    a = v[k]
    b = v[(k + 1) % len(v)]
    return a + u[:, None] * (b - a)


def resample_uniform(p: Polygon, n: int, start: PointLike) -> Contour:
    """
    Sample ``n`` points at equal arc-length spacing along the boundary.

    Sampling begins at ``start`` and follows the polygon's vertex order.

    Args:
        p: Polygon to sample
        n: Number of output vertices (>= 3)
        start: Point on the boundary (within 1e-6 px)

    Returns:
        (n, 2) contour

    Raises:
        StartOffBoundary: if ``start`` is not on the boundary
    """
    if n < 3:
        raise ValueError(f"Need at least 3 samples, got {n}")
    s0 = boundary_arclength(p, start)
    perimeter = polygon_perimeter(p)
    return points_at_arclength(p, s0 + perimeter * np.arange(n) / n)


def ray_boundary_intersection(p: Polygon, center: PointLike, angle: float,
                              farthest: bool = True) -> np.ndarray:
    """
    Intersection of the ray ``center + t * (cos angle, sin angle)``, t > 0,
    with the polygon boundary.

    When the ray crosses the boundary several times (non-star-shaped
    polygons) the farthest crossing is returned, or the nearest one when
    ``farthest`` is False.

    Raises:
        NoIntersection: if the ray never meets the boundary
    """
    c = np.asarray(center, dtype=np.float64)
    d = np.array([math.cos(angle), math.sin(angle)])
    a, b = _edges(p.vertices)
    e = b - a
    w = a - c
    denom = d[0] * e[:, 1] - d[1] * e[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]) / denom
        u = (w[:, 0] * d[1] - w[:, 1] * d[0]) / denom
    valid = (np.abs(denom) > 1e-15) & (t > 1e-12) & (u >= -1e-12) & (u <= 1.0 + 1e-12)
    if not valid.any():
        raise NoIntersection(f"Ray at angle {angle:.6f} from {tuple(c.tolist())} misses the boundary")
    hits = t[valid]
    distance = hits.max() if farthest else hits.min()
    return c + distance * d


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    e = b - a
    len2 = float(e @ e)
    if len2 == 0.0:
        diff = points - a
    else:
        t = np.clip((points - a) @ e / len2, 0.0, 1.0)
        diff = points - (a + t[:, None] * e)
    return np.hypot(diff[:, 0], diff[:, 1])


def _simplify_chain(points: np.ndarray, eps: float) -> np.ndarray:
    """Ramer-Douglas-Peucker on an open chain; returns kept indices (ends included)"""
    keep = np.zeros(len(points), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(points) - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = _segment_distances(points[i + 1:j], points[i], points[j])
        k = int(np.argmax(d))
        if d[k] > eps:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return np.flatnonzero(keep)


def douglas_peucker_indices(vertices: np.ndarray, eps: float) -> np.ndarray:
    """
    Indices of the vertices kept by closed-ring Douglas-Peucker simplification.

    The ring is split at vertex 0 and the vertex farthest from it; each half
    is simplified as an open chain. If fewer than 3 vertices survive, the
    three extreme vertices (0, the farthest, and the one farthest from their
    chord) are returned instead.
    """
    if eps <= 0:
        raise ValueError(f"Douglas-Peucker tolerance must be positive, got {eps}")
    v = np.asarray(vertices, dtype=np.float64)
    n = len(v)
    spread = v - v[0]
    far = int(np.argmax(np.hypot(spread[:, 0], spread[:, 1])))
    first = _simplify_chain(v[:far + 1], eps)
    second = _simplify_chain(np.vstack([v[far:], v[:1]]), eps) + far
    idx = np.unique(np.concatenate([first, second[second < n]]))
    if len(idx) >= 3:
        return idx
    d = _segment_distances(v, v[0], v[far])
    d[[0, far]] = -1.0
    return np.unique([0, far, int(np.argmax(d))])


def douglas_peucker(p: Polygon, eps: float) -> np.ndarray:
    """
    Simplify a polygon, keeping an ordered subset of its vertices.

    Every dropped vertex lies within ``eps`` of the simplified ring.
    """
    return p.vertices[douglas_peucker_indices(p.vertices, eps)].copy()


def default_dp_eps(p: Polygon, relative: float = DEFAULT_DP_RELATIVE_EPS) -> float:
    """Scale-relative Douglas-Peucker tolerance: a fraction of the larger bbox side"""
    xmin, ymin, xmax, ymax = p.bbox
    return relative * max(xmax - xmin, ymax - ymin)


def interpolate_subsegments(contour: Contour, k: int) -> np.ndarray:
    """
    Split every contour edge into ``k`` equal sub-segments.

    Edge (v_i, v_{i+1}) contributes v_i and the k-1 interior points at
    fractions j/k, so the output has exactly k*N points in contour order.
    """
    if k < 1:
        raise ValueError(f"Sub-segment count must be >= 1, got {k}")
    v = np.asarray(contour, dtype=np.float64)
    nxt = np.roll(v, -1, axis=0)
    frac = np.arange(k) / k
    pts = v[:, None, :] + frac[None, :, None] * (nxt - v)[:, None, :]
    return pts.reshape(-1, 2)


def rasterize_vertices(vertices: np.ndarray, height: int, width: int) -> np.ndarray:
    """
    Even-odd scanline fill of a vertex ring on pixel centers.

    Accepts degenerate rings (repeated or collapsed vertices), which simply
    produce fewer or no set pixels.
    """
    mask = np.zeros((height, width), dtype=bool)
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) < 3:
        return mask
    a, b = _edges(v)
    xs = np.arange(width) + 0.5
    for r in range(height):
        y = r + 0.5
        crosses = ((a[:, 1] <= y) & (b[:, 1] > y)) | ((a[:, 1] > y) & (b[:, 1] <= y))
        if not crosses.any():
            continue
        ac, bc = a[crosses], b[crosses]
        t = (y - ac[:, 1]) / (bc[:, 1] - ac[:, 1])
        x_int = ac[:, 0] + t * (bc[:, 0] - ac[:, 0])
        counts = np.count_nonzero(xs[:, None] < x_int[None, :], axis=1)
        mask[r] = (counts % 2) == 1
    return mask


def rasterize(p: Polygon, height: int, width: int) -> MaskGrid:
    """Pixel (r, c) is set iff (c+0.5, r+0.5) is inside p under the even-odd rule"""
    if height < 1 or width < 1:
        raise ValueError(f"Raster size must be positive, got {height}x{width}")
    return MaskGrid(height, width, rasterize_vertices(p.vertices, height, width))


def _check_same_shape(a: MaskGrid, b: MaskGrid):
    if (a.height, a.width) != (b.height, b.width):
        raise DimensionMismatch(
            f"Mask shapes differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mask_iou(a: MaskGrid, b: MaskGrid) -> float:
    """|a ∩ b| / |a ∪ b|, defined as 1.0 when both masks are empty"""
    _check_same_shape(a, b)
    return _iou(a.bits, b.bits)


def boundary_band(bits: np.ndarray, d: int) -> np.ndarray:
    """Inner boundary band of width d: the mask minus its erosion by d pixels"""
    eroded = ndimage.binary_erosion(
        bits, structure=np.ones((3, 3), dtype=bool), iterations=d, border_value=0
    )
    return bits & ~eroded


def boundary_iou(a: MaskGrid, b: MaskGrid, d: int = 2) -> float:
    """IoU of the d-pixel inner boundary bands of two masks"""
    _check_same_shape(a, b)
    if d < 1:
        raise ValueError(f"Boundary band width must be >= 1, got {d}")
    return _iou(boundary_band(a.bits, d), boundary_band(b.bits, d))


def is_simple(vertices: np.ndarray) -> bool:
    """True when the ring bounds a valid polygon: no crossings, touches or spikes"""
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) < 3:
        return False
    return bool(ShapelyPolygon(v).is_valid)
