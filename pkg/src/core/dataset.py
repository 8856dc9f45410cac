"""
Synthetic instance shapes and the dataset JSON document.

Shapes are generated as radial functions sampled at angle-sorted vertices
(star-shaped about their origin), randomly placed inside the image, and
rejected when self-intersecting, out of bounds or unlabelable.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import (
    CenterOutside,
    ConfigError,
    GenerationExhausted,
    InvalidPolygon,
    IoError,
    NoIntersection,
    ParseError,
    ZeroArea,
)
from .geometry import Polygon, is_simple
from .labeling import LabeledInstance, MDAConfig, build_label

logger = logging.getLogger(__name__)

SHAPE_FAMILIES = ("blob", "star", "rect", "ellipse")
DATASET_VERSION = "1.0"


@dataclass
class SynthConfig:
    """Synthetic dataset settings"""
    n_instances: int = 200
    shape_family: str = "blob"
    image_size: Tuple[int, int] = (32, 32)  # (H, W)
    vertex_budget: int = 24
    seed: int = 0
    max_attempts: int = 100  # consecutive rejections before giving up
    margin: float = 1.0  # px kept free between a shape and the image border

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)

    def validate(self) -> None:
        if self.n_instances < 1:
            raise ConfigError(f"synth.n_instances must be >= 1, got {self.n_instances}")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ConfigError(f"synth.shape_family must be one of {SHAPE_FAMILIES}, got {self.shape_family!r}")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise ConfigError(f"synth.image_size must be (H, W) with both >= 8, got {self.image_size}")
        if self.vertex_budget < 4:
            raise ConfigError(f"synth.vertex_budget must be >= 4, got {self.vertex_budget}")
        if self.max_attempts < 1:
            raise ConfigError(f"synth.max_attempts must be >= 1, got {self.max_attempts}")


@dataclass
class SynthInstance:
    id: int
    polygon: Polygon
    shape_family: str

    def to_dict(self) -> Dict[str, Any]:
        return {'id': self.id, 'polygon': self.polygon.to_list(), 'shape_family': self.shape_family}


@dataclass
class DatasetFile:
    """In-memory form of the dataset JSON document"""
    image_size: Tuple[int, int]
    instances: List[SynthInstance] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    version: str = DATASET_VERSION

    @property
    def polygons(self) -> List[Polygon]:
        return [inst.polygon for inst in self.instances]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'version': self.version,
            'image_size': list(self.image_size),
            'config': self.config,
            'instances': [inst.to_dict() for inst in self.instances],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetFile":
        """
        Raises:
            ParseError: on missing fields, invalid polygons or out-of-image coordinates
        """
        try:
            h, w = (int(s) for s in data['image_size'])
            records = data['instances']
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"Dataset document is malformed: {e}") from e

        instances = []
        for record in records:
            try:
                polygon = Polygon.from_list(record['polygon'])
                inst = SynthInstance(int(record['id']), polygon, str(record.get('shape_family', 'unknown')))
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"Dataset instance {record.get('id', '?')} is malformed: {e}") from e
            v = polygon.vertices
            if v.min() < 0 or np.any(v[:, 0] > w) or np.any(v[:, 1] > h):
                raise ParseError(f"Dataset instance {inst.id} lies outside the {h}x{w} image")
            instances.append(inst)
        return cls(
            image_size=(h, w),
            instances=instances,
            config=data.get('config', {}),
            version=str(data.get('version', DATASET_VERSION)),
        )


def _radial_blob(rng: np.random.Generator, k: int, radius: float) -> np.ndarray:
    theta = np.sort(rng.uniform(0.0, 2.0 * np.pi, k))
    r = np.ones(k)
    for freq in (1, 2, 3):
        r += rng.uniform(0.0, 0.3 / freq) * np.cos(freq * theta + rng.uniform(0.0, 2.0 * np.pi))
    return _polar(theta, radius * r)


def _radial_star(rng: np.random.Generator, k: int, radius: float) -> np.ndarray:
    k -= k % 2
    theta = 2.0 * np.pi * (np.arange(k) + rng.uniform(-0.2, 0.2, k)) / k
    inner = rng.uniform(0.35, 0.6)
    r = np.where(np.arange(k) % 2 == 0, 1.0, inner) * rng.uniform(0.9, 1.1, k)
    return _polar(theta + rng.uniform(0.0, 2.0 * np.pi), radius * r)


def _rect(rng: np.random.Generator, radius: float) -> np.ndarray:
    half_w, half_h = radius * rng.uniform(0.4, 1.0, 2)
    corners = np.array([[-half_w, -half_h], [half_w, -half_h], [half_w, half_h], [-half_w, half_h]])
    return _rotate(corners, rng.uniform(0.0, np.pi))


def _ellipse(rng: np.random.Generator, k: int, radius: float) -> np.ndarray:
    a, b = radius * rng.uniform(0.45, 1.0, 2)
    theta = 2.0 * np.pi * np.arange(k) / k
    return _rotate(np.stack([a * np.cos(theta), b * np.sin(theta)], axis=1), rng.uniform(0.0, np.pi))


def _polar(theta: np.ndarray, r: np.ndarray) -> np.ndarray:
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return points @ np.array([[c, s], [-s, c]])


def random_shape(rng: np.random.Generator, family: str, cfg: SynthConfig) -> np.ndarray:
    """One unplaced vertex ring around the origin"""
    h, w = cfg.image_size
    radius = rng.uniform(0.25, 0.4) * min(h, w)
    if family == "blob":
        return _radial_blob(rng, cfg.vertex_budget, radius)
    if family == "star":
        return _radial_star(rng, cfg.vertex_budget, radius)
    if family == "rect":
        return _rect(rng, radius)
    return _ellipse(rng, cfg.vertex_budget, radius)


def _place(rng: np.random.Generator, shape: np.ndarray, cfg: SynthConfig) -> Optional[np.ndarray]:
    h, w = cfg.image_size
    lo, hi = shape.min(axis=0), shape.max(axis=0)
    room_x = (w - 2 * cfg.margin) - (hi[0] - lo[0])
    room_y = (h - 2 * cfg.margin) - (hi[1] - lo[1])
    if room_x < 0 or room_y < 0:
        return None
    offset = np.array([cfg.margin + rng.uniform(0.0, room_x), cfg.margin + rng.uniform(0.0, room_y)]) - lo
    return shape + offset


def generate_instances(cfg: SynthConfig, mda: Optional[MDAConfig] = None) -> List[Tuple[SynthInstance, LabeledInstance]]:
    """
    Draw ``cfg.n_instances`` shapes, each paired with its label.

    Raises:
        GenerationExhausted: after ``cfg.max_attempts`` consecutive rejections
    """
    cfg.validate()
    mda = mda or MDAConfig()
    rng = np.random.default_rng(cfg.seed)
    out = []
    rejected = 0
    while len(out) < cfg.n_instances:
        if rejected >= cfg.max_attempts:
            raise GenerationExhausted(
                f"Rejected {rejected} consecutive {cfg.shape_family} samples after {len(out)} accepted"
            )
        vertices = _place(rng, random_shape(rng, cfg.shape_family, cfg), cfg)
        if vertices is None or not is_simple(vertices):
            rejected += 1
            continue
        try:
            polygon = Polygon(vertices)
            label = build_label(polygon, mda)
        except (InvalidPolygon, ZeroArea, CenterOutside, NoIntersection) as e:
            logger.debug(f"Rejected sample: {e}")
            rejected += 1
            continue
        rejected = 0
        out.append((SynthInstance(len(out), label.raw_polygon, cfg.shape_family), label))
    logger.info(f"Generated {len(out)} {cfg.shape_family} instances (seed {cfg.seed})")
    return out


def generate_dataset(cfg: SynthConfig, mda: Optional[MDAConfig] = None) -> List[Tuple[Polygon, LabeledInstance]]:
    """Deterministic list of (polygon, label) pairs for the given seed"""
    return [(inst.polygon, label) for inst, label in generate_instances(cfg, mda)]


def build_dataset_file(cfg: SynthConfig, mda: Optional[MDAConfig] = None,
                       run_config: Optional[Dict[str, Any]] = None) -> DatasetFile:
    pairs = generate_instances(cfg, mda)
    return DatasetFile(
        image_size=cfg.image_size,
        instances=[inst for inst, _ in pairs],
        config=run_config if run_config is not None else {'synth': asdict(cfg)},
    )


def label_instances(dataset: DatasetFile, mda: MDAConfig) -> List[Tuple[Polygon, LabeledInstance]]:
    """Label every polygon of a loaded dataset"""
    return [(inst.polygon, build_label(inst.polygon, mda)) for inst in dataset.instances]


def save_dataset(path: Union[str, Path], dataset: DatasetFile) -> None:
    """
    Write the dataset document; identical inputs give byte-identical files.

    Raises:
        IoError: if the file cannot be written
    """
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(dataset.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise IoError(f"Failed to write dataset {path}: {e}") from e
    logger.info(f"Dataset with {len(dataset.instances)} instances saved to {path}")


def load_dataset(path: Union[str, Path]) -> DatasetFile:
    """
    Raises:
        IoError: if the file cannot be read
        ParseError: if it is not a valid dataset document
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise IoError(f"Failed to read dataset {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"Dataset {path} is not valid JSON: {e}") from e
    dataset = DatasetFile.from_dict(data)
    logger.info(f"Loaded {len(dataset.instances)} instances from {path}")
    return dataset
