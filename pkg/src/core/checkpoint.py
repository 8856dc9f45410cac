"""
Model checkpoint file format.

Layout::

    b"E2ECKPT1\\n"                  magic
    <uint64 little-endian>         header length in bytes
    <header>                       UTF-8 JSON, see below
    <tensor data>                  every tensor as little-endian float64, C order

The header is ``{"version", "dtype": "<f8", "model": {...ModelConfig...},
"run_config": {...}, "tensors": [{"name", "shape", "offset", "count"}]}``
where ``offset`` and ``count`` are in elements from the start of the data
block. Tensors are written in ``parameter_shapes`` order.
"""

import json
import logging
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .errors import IoError, ParseError
from .model import ModelConfig, ModelParams, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b"E2ECKPT1\n"
FORMAT_VERSION = 1
DTYPE = "<f8"


def _model_config_from_dict(data: Dict[str, Any]) -> ModelConfig:
    try:
        return ModelConfig(**data)
    except TypeError as e:
        raise ParseError(f"Checkpoint model config is malformed: {e}") from e


def save_checkpoint(path: Union[str, Path], params: ModelParams,
                    run_config: Optional[Dict[str, Any]] = None) -> None:
    """
    Write params to ``path``.

    Raises:
        IoError: if the file cannot be written
    """
    shapes = parameter_shapes(params.config)
    entries = []
    offset = 0
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        entries.append({"name": name, "shape": list(shape), "offset": offset, "count": count})
        offset += count

    header = {
        "version": FORMAT_VERSION,
        "dtype": DTYPE,
        "model": asdict(params.config),
        "run_config": run_config or {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    data = b"".join(
        np.ascontiguousarray(params.tensors[name], dtype=DTYPE).tobytes() for name in shapes
    )
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header_bytes)))
            f.write(header_bytes)
            f.write(data)
    except OSError as e:
        raise IoError(f"Failed to write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint saved to {path} ({params.num_parameters} parameters)")


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelParams, Dict[str, Any]]:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Returns:
        Tuple of (params, embedded run config)

    Raises:
        IoError: if the file cannot be read
        ParseError: if the contents are not a valid checkpoint
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"Failed to read checkpoint {path}: {e}") from e

    if not raw.startswith(MAGIC):
        raise ParseError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise ParseError(f"{path} is truncated")
    (header_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        header = json.loads(raw[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"Checkpoint header is not valid JSON: {e}") from e
    pos += header_len

    if header.get("version") != FORMAT_VERSION:
        raise ParseError(f"Unsupported checkpoint version {header.get('version')}")
    if header.get("dtype") != DTYPE:
        raise ParseError(f"Unsupported checkpoint dtype {header.get('dtype')}")

    config = _model_config_from_dict(header.get("model", {}))
    expected = parameter_shapes(config)
    itemsize = np.dtype(DTYPE).itemsize
    if pos > len(raw) or (len(raw) - pos) % itemsize:
        raise ParseError(f"{path} is truncated: data section is not a whole number of {DTYPE} values")
    data = np.frombuffer(raw, dtype=DTYPE, offset=pos) if pos < len(raw) else np.zeros(0)
    total = sum(int(np.prod(shape)) for shape in expected.values())
    if data.size != total:
        raise ParseError(f"{path} holds {data.size} values, model expects {total}")
    tensors = {}
    for entry in header.get("tensors", []):
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise ParseError(f"Tensor {name} has shape {shape}, model expects {expected.get(name)}")
        start, count = entry["offset"], entry["count"]
        if start + count > data.size:
            raise ParseError(f"Tensor {name} runs past the end of the file")
        tensors[name] = data[start:start + count].reshape(shape).astype(np.float64)

    missing = set(expected) - set(tensors)
    if missing:
        raise ParseError(f"Checkpoint is missing tensors: {sorted(missing)}")

    logger.info(f"Checkpoint loaded from {path}")
    return ModelParams(config=config, tensors=tensors), header.get("run_config", {})
