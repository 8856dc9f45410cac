"""
Contour network with hand-written reverse-mode gradients.

Pipeline: the center feature regresses the initial contour, a global
deformation MLP over all vertex features yields the coarse contour, and two
circular-convolution refinement modules produce iter1 and iter2 (final).
Features are bilinearly sampled from a per-instance learnable grid that
stands in for a backbone.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, KernelTooWide, StaleCache

logger = logging.getLogger(__name__)

STAGES = ("initial", "coarse", "iter1", "iter2")
STAGE_ALIASES = {"final": "iter2"}
INIT_MODES = ("learned", "circle")
REFINE_MODULES = ("refine1", "refine2")

# Final layers of every offset head; zero at start so the contour begins at the center
OFFSET_HEADS = (
    "init.w2", "init.b2", "global.w2", "global.b2",
    "refine1.head_w", "refine1.head_b", "refine2.head_w", "refine2.head_b",
)


@dataclass
class ModelConfig:
    """Network sizes and switches"""
    n_vertices: int = 128
    channels: int = 64
    init_hidden: int = 64
    refine_channels: int = 32
    kernel_width: int = 9
    offset_scale: float = 4.0
    coord_softening: float = 1.0  # px², added to the squared bbox diagonal
    init_mode: str = "learned"
    circle_radius: float = 8.0
    use_global_deform: bool = True
    use_refinement: bool = True
    grid_size: Tuple[int, int] = (32, 32)  # (H, W) of each instance's feature grid

    def __post_init__(self):
        self.grid_size = tuple(int(s) for s in self.grid_size)

    def validate(self) -> None:
        if len(self.grid_size) != 2 or min(self.grid_size) < 2:
            raise ConfigError(f"model.grid_size must be (H, W) with both >= 2, got {self.grid_size}")
        if self.n_vertices < 3:
            raise ConfigError(f"model.n_vertices must be >= 3, got {self.n_vertices}")
        for name in ("channels", "init_hidden", "refine_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ConfigError(f"model.kernel_width must be odd, got {self.kernel_width}")
        if self.use_refinement and self.kernel_width > self.n_vertices:
            raise ConfigError(f"model.kernel_width {self.kernel_width} exceeds n_vertices {self.n_vertices}")
        if self.offset_scale <= 0:
            raise ConfigError(f"model.offset_scale must be positive, got {self.offset_scale}")
        if self.coord_softening <= 0:
            raise ConfigError(f"model.coord_softening must be positive, got {self.coord_softening}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"model.init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")


@dataclass(eq=False)
class FeatureGrid:
    """
    Learnable H x W x C feature lattice for one image.

    Cell (r, c) sits at image position ((c + 0.5) * stride, (r + 0.5) * stride).
    """
    values: np.ndarray
    stride: float = 1.0
    version: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"Feature grid must be H x W x C, got shape {self.values.shape}")
        if self.values.shape[0] < 2 or self.values.shape[1] < 2:
            raise ValueError(f"Feature grid needs H, W >= 2, got {self.values.shape[:2]}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Feature grid values must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def bump(self) -> None:
        self.version += 1

    @classmethod
    def from_mask(cls, mask: np.ndarray, grid_size: Tuple[int, int], channels: int) -> "FeatureGrid":
        """
        Encode a binary instance mask as a feature grid.

        Channels, in order and truncated to ``channels``: the mask, squashed
        signed distance, the two squashed signed-distance gradient components,
        then the mask blurred at sigma 1, 2, 4, ... pixels.
        """
        mask = np.asarray(mask, dtype=bool)
        h, w = mask.shape
        m = mask.astype(np.float64)
        if mask.any() and not mask.all():
            sdf = ndimage.distance_transform_edt(mask) - ndimage.distance_transform_edt(~mask)
        else:
            sdf = np.zeros_like(m)
        scale = max(h, w) / 8.0
        gy, gx = np.gradient(sdf)
        layers = [m, np.tanh(sdf / scale), np.tanh(gx), np.tanh(gy)]
        sigma = 1.0
        while len(layers) < channels:
            layers.append(ndimage.gaussian_filter(m, sigma))
            sigma *= 2.0
        values = np.stack(layers[:channels], axis=-1)

        gh, gw = grid_size
        if (gh, gw) != (h, w):
            values = np.stack(
                [ndimage.zoom(values[..., k], (gh / h, gw / w), order=1) for k in range(channels)],
                axis=-1,
            )
        return cls(values=values, stride=w / gw)


@dataclass
class SampleCache:
    x0: np.ndarray
    y0: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    free_x: np.ndarray
    free_y: np.ndarray
    corners: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    stride: float
    grid_shape: Tuple[int, int, int]


def sample_features(grid: FeatureGrid, points: np.ndarray) -> Tuple[np.ndarray, SampleCache]:
    """
    Bilinearly interpolate grid features at image-space points.

    Points outside the lattice are clamped to its border, where the spatial
    derivative is zero.

    Returns:
        Tuple of ((P, C) features, cache for ``sample_features_backward``)
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h, w = grid.height, grid.width
    gx = pts[:, 0] / grid.stride - 0.5
    gy = pts[:, 1] / grid.stride - 0.5
    cx = np.clip(gx, 0.0, w - 1.0)
    cy = np.clip(gy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(cx).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(cy).astype(np.intp), h - 2)
    fx = (cx - x0)[:, None]
    fy = (cy - y0)[:, None]

    v = grid.values
    f00, f01 = v[y0, x0], v[y0, x0 + 1]
    f10, f11 = v[y0 + 1, x0], v[y0 + 1, x0 + 1]
    feats = (1.0 - fy) * ((1.0 - fx) * f00 + fx * f01) + fy * ((1.0 - fx) * f10 + fx * f11)

    cache = SampleCache(
        x0=x0, y0=y0, fx=fx, fy=fy,
        free_x=(gx > 0.0) & (gx < w - 1.0),
        free_y=(gy > 0.0) & (gy < h - 1.0),
        corners=(f00, f01, f10, f11),
        stride=grid.stride,
        grid_shape=v.shape,
    )
    return feats, cache


def sample_features_backward(cache: SampleCache, grad_feats: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns:
        Tuple of (gradient w.r.t. grid values, (P, 2) gradient w.r.t. points)
    """
    g = np.asarray(grad_feats, dtype=np.float64)
    fx, fy = cache.fx, cache.fy
    x0, y0 = cache.x0, cache.y0
    grad_grid = np.zeros(cache.grid_shape)
    np.add.at(grad_grid, (y0, x0), g * ((1.0 - fx) * (1.0 - fy)))
    np.add.at(grad_grid, (y0, x0 + 1), g * (fx * (1.0 - fy)))
    np.add.at(grad_grid, (y0 + 1, x0), g * ((1.0 - fx) * fy))
    np.add.at(grad_grid, (y0 + 1, x0 + 1), g * (fx * fy))

    f00, f01, f10, f11 = cache.corners
    d_gx = (1.0 - fy) * (f01 - f00) + fy * (f11 - f10)
    d_gy = (1.0 - fx) * (f10 - f00) + fx * (f11 - f01)
    grad_points = np.stack([
        np.sum(g * d_gx, axis=1) * cache.free_x,
        np.sum(g * d_gy, axis=1) * cache.free_y,
    ], axis=1) / cache.stride
    return grad_grid, grad_points


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _rowwise_linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x @ w with each output row computed by the same sequence of operations"""
    return (x[:, :, None] * w[None, :, :]).sum(axis=1)


def circular_conv(feats: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """
    1-D convolution along the vertex axis with wrap-around indexing.

    out[i] = sum_t feats[(i + t - r) mod N] @ kernel[t], r = K // 2

    Args:
        feats: (N, C_in) per-vertex features
        kernel: (K, C_in, C_out) taps, K odd

    Raises:
        KernelTooWide: if N < K
    """
    n = feats.shape[0]
    width = kernel.shape[0]
    if width % 2 == 0:
        raise ValueError(f"Kernel width must be odd, got {width}")
    if n < width:
        raise KernelTooWide(f"Kernel width {width} exceeds contour length {n}")
    r = width // 2
    out = np.zeros((n, kernel.shape[2]))
    for t in range(width):
        out += _rowwise_linear(np.roll(feats, r - t, axis=0), kernel[t])
    return out


def circular_conv_backward(feats: np.ndarray, kernel: np.ndarray,
                           grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (gradient w.r.t. feats, gradient w.r.t. kernel)"""
    r = kernel.shape[0] // 2
    grad_feats = np.zeros_like(feats)
    grad_kernel = np.zeros_like(kernel)
    for t in range(kernel.shape[0]):
        grad_kernel[t] = np.roll(feats, r - t, axis=0).T @ grad_out
        grad_feats += np.roll(grad_out @ kernel[t].T, t - r, axis=0)
    return grad_feats, grad_kernel


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Tensor names and shapes in checkpoint order"""
    n, c = cfg.n_vertices, cfg.channels
    shapes = {
        "init.w1": (cfg.init_hidden, c),
        "init.b1": (cfg.init_hidden,),
        "init.w2": (2 * n, cfg.init_hidden),
        "init.b2": (2 * n,),
        "global.w1": (2 * n, (n + 1) * c),
        "global.b1": (2 * n,),
        "global.w2": (2 * n, 2 * n),
        "global.b2": (2 * n,),
    }
    for module in REFINE_MODULES:
        shapes[f"{module}.kernel"] = (cfg.kernel_width, c + 2, cfg.refine_channels)
        shapes[f"{module}.bias"] = (cfg.refine_channels,)
        shapes[f"{module}.head_w"] = (cfg.refine_channels + 2, 2)
        shapes[f"{module}.head_b"] = (2,)
    return shapes


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if name.endswith(".kernel"):
        return shape[0] * shape[1]
    if name.endswith(".head_w"):
        return shape[0]
    return shape[-1]


@dataclass(eq=False)
class ModelParams:
    """Shared network weights (everything except the per-instance feature grids)"""
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    version: int = 0

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, zero_offset_heads: bool = True) -> "ModelParams":
        """
        Seeded initialization.

        Weight matrices are uniform in +-1/sqrt(fan_in) and biases zero. With
        ``zero_offset_heads`` the final layer of every offset head is zero so
        all stages start at the center; otherwise heads and biases are random
        too (used by gradient checks).
        """
        config.validate()
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(config).items():
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            is_bias = len(shape) == 1
            if zero_offset_heads and name in OFFSET_HEADS:
                tensors[name] = np.zeros(shape)
            elif is_bias and zero_offset_heads:
                tensors[name] = np.zeros(shape)
            else:
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config=config, tensors=tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            version=self.version,
        )


@dataclass(eq=False)
class ModelOutputs:
    """The four contour stages plus the cache needed by ``backward``"""
    initial: np.ndarray
    coarse: np.ndarray
    iter1: np.ndarray
    iter2: np.ndarray
    center: np.ndarray
    cache: Optional[Dict[str, Any]] = None
    params_version: int = -1
    grid_version: int = -1
    computed: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def final(self) -> np.ndarray:
        return self.iter2

    def stage(self, name: str) -> np.ndarray:
        return getattr(self, STAGE_ALIASES.get(name, name))

    def contours(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in STAGES}


def stage_index(name: str) -> int:
    name = STAGE_ALIASES.get(name, name)
    if name not in STAGES:
        raise ValueError(f"Unknown stage {name!r}; expected one of {STAGES + tuple(STAGE_ALIASES)}")
    return STAGES.index(name)


def circle_offsets(n: int, radius: float) -> np.ndarray:
    """Handcrafted initial contour: a counter-clockwise ring starting east"""
    theta = 2.0 * np.pi * np.arange(n) / n
    return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _init_forward(center: np.ndarray, fc: np.ndarray, params: ModelParams):
    cfg = params.config
    if cfg.init_mode == "circle":
        return center + circle_offsets(cfg.n_vertices, cfg.circle_radius), None
    t = params.tensors
    a1 = t["init.w1"] @ fc + t["init.b1"]
    h1 = _relu(a1)
    raw = t["init.w2"] @ h1 + t["init.b2"]
    return center + cfg.offset_scale * raw.reshape(-1, 2), {"a1": a1, "h1": h1, "fc": fc}


def _global_forward(initial: np.ndarray, fc: np.ndarray, params: ModelParams, grid: FeatureGrid):
    t = params.tensors
    vertex_feats, sample_cache = sample_features(grid, initial)
    z = np.concatenate([vertex_feats.ravel(), fc])
    a = t["global.w1"] @ z + t["global.b1"]
    h = _relu(a)
    raw = t["global.w2"] @ h + t["global.b2"]
    coarse = initial + params.config.offset_scale * raw.reshape(-1, 2)
    return coarse, {"sample": sample_cache, "z": z, "a": a, "h": h}


def _relative_coords(x: np.ndarray, softening: float):
    """Centroid-relative coordinates scaled by the softened bbox diagonal"""
    n = len(x)
    # fsum is exactly rounded, so the centroid does not depend on vertex order
    m = np.array([math.fsum(x[:, 0]), math.fsum(x[:, 1])]) / n
    lo = np.argmin(x, axis=0)
    hi = np.argmax(x, axis=0)
    ext = np.array([x[hi[0], 0] - x[lo[0], 0], x[hi[1], 1] - x[lo[1], 1]])
    diag = math.sqrt(ext[0] * ext[0] + ext[1] * ext[1] + softening)
    return (x - m) / diag, {"x": x, "m": m, "diag": diag, "ext": ext, "lo": lo, "hi": hi}


def _relative_coords_backward(grad_rel: np.ndarray, cache: Dict[str, Any]) -> np.ndarray:
    x, m, diag, ext = cache["x"], cache["m"], cache["diag"], cache["ext"]
    n = len(x)
    grad_x = grad_rel / diag - grad_rel.sum(axis=0) / (n * diag)
    grad_diag = -np.sum(grad_rel * (x - m)) / (diag * diag)
    grad_ext = grad_diag * ext / diag
    for k in (0, 1):
        grad_x[cache["hi"][k], k] += grad_ext[k]
        grad_x[cache["lo"][k], k] -= grad_ext[k]
    return grad_x


def _refine_forward(contour: np.ndarray, module: str, params: ModelParams, grid: FeatureGrid):
    cfg = params.config
    t = params.tensors
    feats, sample_cache = sample_features(grid, contour)
    rel, rel_cache = _relative_coords(contour, cfg.coord_softening)
    u = np.concatenate([feats, rel], axis=1)
    a = circular_conv(u, t[f"{module}.kernel"]) + t[f"{module}.bias"]
    v = np.concatenate([_relu(a), rel], axis=1)
    raw = _rowwise_linear(v, t[f"{module}.head_w"]) + t[f"{module}.head_b"]
    out = contour + cfg.offset_scale * raw
    return out, {"sample": sample_cache, "rel": rel_cache, "u": u, "a": a, "v": v}


def init_contour(center, params: ModelParams, grid: FeatureGrid) -> np.ndarray:
    """Initial contour: center plus offsets regressed from the center feature"""
    c = np.asarray(center, dtype=np.float64)
    fc, _ = sample_features(grid, c)
    return _init_forward(c, fc[0], params)[0]


def global_deform(initial: np.ndarray, center, params: ModelParams, grid: FeatureGrid) -> np.ndarray:
    """Coarse contour from the concatenated (N+1)*C vertex-and-center feature vector"""
    fc, _ = sample_features(grid, np.asarray(center, dtype=np.float64))
    return _global_forward(np.asarray(initial, dtype=np.float64), fc[0], params, grid)[0]


def refine(contour: np.ndarray, params: ModelParams, grid: FeatureGrid, module: str = "refine1") -> np.ndarray:
    """One circular-convolution deformation step"""
    return _refine_forward(np.asarray(contour, dtype=np.float64), module, params, grid)[0]


def forward(center, params: ModelParams, grid: FeatureGrid, upto: str = "iter2") -> ModelOutputs:
    """
    Run the pipeline initial -> coarse -> iter1 -> iter2.

    Disabled or truncated stages (``upto``, ``use_global_deform``,
    ``use_refinement``) pass their input contour through unchanged.
    """
    cfg = params.config
    stop = stage_index(upto)
    c = np.asarray(center, dtype=np.float64)
    fc, center_cache = sample_features(grid, c)
    fc = fc[0]
    cache: Dict[str, Any] = {"center": center_cache}
    computed = ["initial"]

    initial, cache["init"] = _init_forward(c, fc, params)
    coarse = initial
    if stop >= 1 and cfg.use_global_deform:
        coarse, cache["global"] = _global_forward(initial, fc, params, grid)
        computed.append("coarse")
    iter1 = coarse
    if stop >= 2 and cfg.use_refinement:
        iter1, cache["refine1"] = _refine_forward(coarse, "refine1", params, grid)
        computed.append("iter1")
    iter2 = iter1
    if stop >= 3 and cfg.use_refinement:
        iter2, cache["refine2"] = _refine_forward(iter1, "refine2", params, grid)
        computed.append("iter2")

    return ModelOutputs(
        initial=initial, coarse=coarse, iter1=iter1, iter2=iter2, center=c,
        cache=cache, params_version=params.version, grid_version=grid.version,
        computed=tuple(computed),
    )


def _refine_backward(cache, grad_out, module, params, grads, grad_grid):
    t = params.tensors
    grad_raw = params.config.offset_scale * grad_out
    v, a, u = cache["v"], cache["a"], cache["u"]
    grads[f"{module}.head_w"] += v.T @ grad_raw
    grads[f"{module}.head_b"] += grad_raw.sum(axis=0)
    grad_v = grad_raw @ t[f"{module}.head_w"].T
    mid = a.shape[1]
    grad_a = grad_v[:, :mid] * (a > 0)
    grad_rel = grad_v[:, mid:].copy()
    grads[f"{module}.bias"] += grad_a.sum(axis=0)
    grad_u, grad_kernel = circular_conv_backward(u, t[f"{module}.kernel"], grad_a)
    grads[f"{module}.kernel"] += grad_kernel
    n_feat = u.shape[1] - 2
    grad_rel += grad_u[:, n_feat:]
    grid_part, grad_points = sample_features_backward(cache["sample"], grad_u[:, :n_feat])
    grad_grid += grid_part
    return grad_out + grad_points + _relative_coords_backward(grad_rel, cache["rel"])


def _global_backward(cache, grad_coarse, params, grads, grad_grid):
    t = params.tensors
    grad_raw = params.config.offset_scale * grad_coarse.ravel()
    grads["global.w2"] += np.outer(grad_raw, cache["h"])
    grads["global.b2"] += grad_raw
    grad_a = (t["global.w2"].T @ grad_raw) * (cache["a"] > 0)
    grads["global.w1"] += np.outer(grad_a, cache["z"])
    grads["global.b1"] += grad_a
    grad_z = t["global.w1"].T @ grad_a
    n, c = grad_coarse.shape[0], params.config.channels
    grid_part, grad_points = sample_features_backward(cache["sample"], grad_z[:n * c].reshape(n, c))
    grad_grid += grid_part
    return grad_coarse + grad_points, grad_z[n * c:]


def _init_backward(cache, grad_initial, params, grads):
    t = params.tensors
    grad_raw = params.config.offset_scale * grad_initial.ravel()
    grads["init.w2"] += np.outer(grad_raw, cache["h1"])
    grads["init.b2"] += grad_raw
    grad_a = (t["init.w2"].T @ grad_raw) * (cache["a1"] > 0)
    grads["init.w1"] += np.outer(grad_a, cache["fc"])
    grads["init.b1"] += grad_a
    return t["init.w1"].T @ grad_a


def backward(outputs: ModelOutputs, params: ModelParams, grid: FeatureGrid,
             loss_grads: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    Reverse-mode gradients for every parameter tensor and the feature grid.

    Args:
        outputs: Result of ``forward`` with the current params and grid
        loss_grads: Gradient of the objective w.r.t. each stage's vertices,
            keyed by stage name; missing stages count as zero

    Returns:
        Tuple of (gradients keyed like ``params.tensors``, grid gradient)

    Raises:
        StaleCache: if params or grid changed since ``forward`` or the cache is gone
    """
    if outputs.cache is None or outputs.params_version != params.version \
            or outputs.grid_version != grid.version:
        raise StaleCache("Forward cache does not match the current parameters; rerun forward")

    cache = outputs.cache
    n = params.config.n_vertices
    grads = {name: np.zeros_like(value) for name, value in params.tensors.items()}
    grad_grid = np.zeros_like(grid.values)
    g = {stage: np.zeros((n, 2)) for stage in STAGES}
    for name, value in loss_grads.items():
        g[STAGE_ALIASES.get(name, name)] += np.asarray(value, dtype=np.float64).reshape(n, 2)

    for stage, previous in (("iter2", "iter1"), ("iter1", "coarse")):
        module = "refine2" if stage == "iter2" else "refine1"
        if module in cache:
            g[previous] += _refine_backward(cache[module], g[stage], module, params, grads, grad_grid)
        else:
            g[previous] += g[stage]

    grad_fc = np.zeros(grid.channels)
    if "global" in cache:
        grad_initial, grad_fc_global = _global_backward(cache["global"], g["coarse"], params, grads, grad_grid)
        g["initial"] += grad_initial
        grad_fc += grad_fc_global
    else:
        g["initial"] += g["coarse"]

    if cache["init"] is not None:
        grad_fc += _init_backward(cache["init"], g["initial"], params, grads)

    grid_part, _ = sample_features_backward(cache["center"], grad_fc[None, :])
    grad_grid += grid_part
    return grads, grad_grid
