"""
Model checkpoints: JSON header + raw little-endian float64 blobs.

The header lists every blob (name, shape, byte offset) together with the
model config echo, training state (optimizer scalars, scheduler, rng state)
and the tail of the loss log. Loading checks the format version first and
then every blob's length against its declared shape.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from config.settings import TOOL_VERSION
from utils.errors import FormatError
from utils.file_utils import payload_path, read_json_header, require, write_json

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ddtrack-checkpoint"
CHECKPOINT_VERSION = 1
BLOB_DTYPE = np.dtype("<f8")


class CheckpointVersionError(FormatError):
    def __init__(self, path: str, found, expected: int):
        self.found, self.expected = found, expected
        super().__init__(f"{path}: checkpoint version {found!r} is not supported (this build reads version {expected})")


@dataclass
class Checkpoint:
    model_config: Dict[str, Any]
    parameters: Dict[str, np.ndarray]
    training_state: Optional[Dict[str, Any]] = None
    training_arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    log_tail: List[Dict[str, Any]] = field(default_factory=list)
    seed: int = 0


def _blob_entries(prefix: str, arrays: Dict[str, np.ndarray], offset: int):
    entries, chunks = [], []
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype=BLOB_DTYPE)
        if not np.all(np.isfinite(data)):
            raise FormatError(f"Blob '{prefix}{name}' holds non-finite values")
        entries.append({"name": prefix + name, "shape": list(data.shape), "offset": offset, "nbytes": data.nbytes})
        chunks.append(data.tobytes())
        offset += data.nbytes
    return entries, chunks, offset


def save_checkpoint(path: str, checkpoint: Checkpoint) -> str:
    raw_path = payload_path(path)
    param_entries, param_chunks, offset = _blob_entries("model/", checkpoint.parameters, 0)
    train_entries, train_chunks, _ = _blob_entries("train/", checkpoint.training_arrays, offset)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tool_version": TOOL_VERSION,
        "seed": checkpoint.seed,
        "model_config": checkpoint.model_config,
        "blobs": param_entries + train_entries,
        "training_state": checkpoint.training_state,
        "log_tail": checkpoint.log_tail,
        "payload": os.path.basename(raw_path),
    }
    with open(raw_path, "wb") as f:
        for chunk in param_chunks + train_chunks:
            f.write(chunk)
    write_json(path, header)
    logger.info(f"Saved checkpoint with {len(param_entries)} parameters to {path}")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    header = read_json_header(path, CHECKPOINT_FORMAT)
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(path, header.get("version"), CHECKPOINT_VERSION)
    raw_file = os.path.join(os.path.dirname(path), require(header, "payload", path))
    if not os.path.exists(raw_file):
        raise FormatError(f"{path}: payload file missing")
    with open(raw_file, "rb") as f:
        raw = f.read()
    parameters: Dict[str, np.ndarray] = {}
    training_arrays: Dict[str, np.ndarray] = {}
    expected_end = 0
    for entry in require(header, "blobs", path):
        name = entry.get("name", "?")
        shape = tuple(entry.get("shape", ()))
        nbytes = int(np.prod(shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
        if entry.get("nbytes") != nbytes or entry.get("offset") != expected_end:
            raise FormatError(f"{path}: blob '{name}' declares {entry.get('nbytes')} bytes at offset "
                              f"{entry.get('offset')}, expected {nbytes} bytes at {expected_end} for shape {list(shape)}")
        if expected_end + nbytes > len(raw):
            raise FormatError(f"{path}: blob '{name}' runs past the end of the payload ({len(raw)} bytes)")
        array = np.frombuffer(raw, dtype=BLOB_DTYPE, count=nbytes // BLOB_DTYPE.itemsize, offset=expected_end)
        array = array.reshape(shape).astype(np.float64)
        expected_end += nbytes
        group, _, key = name.partition("/")
        if group == "model":
            parameters[key] = array
        elif group == "train":
            training_arrays[key] = array
        else:
            raise FormatError(f"{path}: blob '{name}' has unknown group '{group}'")
    if expected_end != len(raw):
        raise FormatError(f"{path}: payload has {len(raw)} bytes, blobs account for {expected_end}")
    return Checkpoint(
        model_config=require(header, "model_config", path),
        parameters=parameters,
        training_state=header.get("training_state"),
        training_arrays=training_arrays,
        log_tail=header.get("log_tail") or [],
        seed=int(header.get("seed", 0)),
    )
