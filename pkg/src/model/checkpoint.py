"""
Versioned checkpoint file.

    8 bytes   magic b"DSRANCKP"
    4 bytes   u32 LE format version
    8 bytes   u64 LE header length
    header    UTF-8 JSON: epoch, config, tensor table (name, shape, offset)
    blob      f64 LE tensors, concatenated in table order
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from config import RunConfig, config_from_dict
from model.dsran import DsranModel
from model.errors import ConfigError, IoFailure, ShapeMismatch
from utils.logger import setup_logger

logger = setup_logger(__name__)

MAGIC = b"DSRANCKP"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path: Path, model: DsranModel, cfg: RunConfig, epoch: int,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """Writes parameters and BN statistics of `model` with the run configuration."""
    state = model.state_dict()
    table = []
    offset = 0
    for name, arr in state.items():
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "f64le",
        "epoch": epoch,
        "config": cfg.to_dict(),
        "tensors": table,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
            f.write(header_bytes)
            for arr in state.values():
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as e:
        logger.error(f"Could not write checkpoint {path}: {e}")
        raise IoFailure(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint written: {path} (epoch {epoch}, {len(table)} tensors)")
    return path


def read_checkpoint(path: Path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Parses a checkpoint into its header and name -> array state."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise IoFailure(f"checkpoint not found: {path}") from e
    except OSError as e:
        raise IoFailure(f"cannot read checkpoint {path}: {e}") from e

    if len(raw) < _PREFIX.size:
        raise IoFailure(f"{path} is too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise IoFailure(f"{path} is not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise IoFailure(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IoFailure(f"{path}: corrupt checkpoint header: {e}") from e

    blob = raw[_PREFIX.size + header_len:]
    state: Dict[str, np.ndarray] = {}
    try:
        for entry in header["tensors"]:
            shape = tuple(int(d) for d in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = int(entry["offset"])
            stop = start + count * 8
            if start < 0 or stop > len(blob):
                raise IoFailure(f"{path}: tensor '{entry['name']}' runs past the end of the file")
            state[str(entry["name"])] = np.frombuffer(blob[start:stop], dtype="<f8").reshape(shape).astype(np.float64)
    except (KeyError, TypeError, ValueError) as e:
        logger.error(f"Malformed tensor table in {path}: {e!r}")
        raise IoFailure(f"{path}: malformed tensor table: {e!r}") from e
    return header, state


def load_checkpoint(path: Path) -> Tuple[DsranModel, RunConfig, Dict[str, Any]]:
    """
    Rebuilds the model recorded in a checkpoint.

    Returns:
        (model, run configuration, header)
    """
    header, state = read_checkpoint(path)
    try:
        cfg = config_from_dict(header["config"])
    except (KeyError, TypeError, AttributeError, ConfigError) as e:
        logger.error(f"Checkpoint {path} carries no usable run configuration: {e!r}")
        raise IoFailure(f"{path}: bad run configuration in header: {e!r}") from e
    model = DsranModel.create(cfg.model, seed=cfg.train.seed)
    try:
        model.load_state_dict(state)
    except ShapeMismatch as e:
        raise IoFailure(f"{path}: {e}") from e
    logger.info(f"Loaded checkpoint {path} (epoch {header.get('epoch')})")
    return model, cfg, header


def snapshot(model: DsranModel) -> DsranModel:
    """Independent copy of `model` that later training steps do not touch."""
    copy = DsranModel.create(model.cfg, seed=0)
    copy.load_state_dict(model.state_dict())
    return copy
