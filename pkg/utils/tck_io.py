"""
Streamline files.

TCK (MRtrix track file): ASCII header starting with `mrtrix tracks`, `key: value`
lines, `file: . <offset>` giving the absolute byte offset of the binary data,
closed by `END`. The binary section holds float32 (x, y, z) triplets in world
millimetres; each streamline ends with a NaN triplet and the file with one Inf
triplet.

Native tractogram: JSON header (point counts, bundle labels, voxel size) +
raw little-endian float64 payload of voxel-continuous coordinates.
"""
import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from dmri.data_types import Tractogram
from utils.errors import FormatError, InputError
from utils.file_utils import payload_path, read_json_header, read_payload, require, write_json

logger = logging.getLogger(__name__)

TCK_MAGIC = "mrtrix tracks"
TCK_DTYPES = {"Float32LE": np.dtype("<f4"), "Float32BE": np.dtype(">f4")}

TRACTOGRAM_FORMAT = "ddtrack-tractogram"
TRACTOGRAM_VERSION = 1
NATIVE_DTYPE = np.dtype("<f8")


def _tck_header(count: int, voxel_size: np.ndarray, extra: Dict[str, str]) -> bytes:
    lines = [TCK_MAGIC, "datatype: Float32LE", f"count: {count}",
             "voxel_size: " + ",".join(repr(float(v)) for v in voxel_size)]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    body = "\n".join(lines) + "\n"
    # the offset's own digit count changes the header length; iterate to a fixed point
    offset = 0
    while True:
        text = f"{body}file: . {offset}\nEND\n".encode("ascii")
        if len(text) == offset:
            return text
        offset = len(text)


def write_tck(path: str, tractogram: Tractogram, extra: Optional[Dict[str, str]] = None) -> str:
    """Write streamlines in world mm (voxel coordinates times voxel size)."""
    rows = []
    for line in tractogram.streamlines:
        if not np.all(np.isfinite(line)):
            raise InputError("write_tck: streamline coordinates must be finite")
        rows.append(line * tractogram.voxel_size)
        rows.append(np.full((1, 3), np.nan))
    rows.append(np.full((1, 3), np.inf))
    payload = np.concatenate(rows, axis=0).astype(TCK_DTYPES["Float32LE"])
    with open(path, "wb") as f:
        f.write(_tck_header(len(tractogram), tractogram.voxel_size, extra or {}))
        f.write(payload.tobytes())
    logger.info(f"Wrote {len(tractogram)} streamlines to {path}")
    return path


def read_tck_header(raw: bytes, path: str) -> Tuple[Dict[str, str], int]:
    """Parse the ASCII header; returns the key/value fields and the END position."""
    end = raw.find(b"\nEND\n")
    if not raw.startswith(TCK_MAGIC.encode("ascii") + b"\n"):
        raise FormatError(f"{path}: missing '{TCK_MAGIC}' magic line")
    if end < 0:
        raise FormatError(f"{path}: header has no END line")
    try:
        text = raw[:end].decode("ascii")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: header is not ASCII") from None
    fields: Dict[str, str] = {}
    for line in text.split("\n")[1:]:
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"{path}: header line {line!r} is not 'key: value'")
        fields[key.strip()] = value.strip()
    return fields, end + len(b"\nEND\n")


def read_tck(path: str, voxel_size=None) -> Tractogram:
    """
    Read a TCK file back to voxel coordinates. `voxel_size` defaults to the
    header's `voxel_size` field, else 1 mm.
    """
    if not os.path.exists(path):
        raise InputError(f"File '{path}' does not exist")
    with open(path, "rb") as f:
        raw = f.read()
    fields, header_end = read_tck_header(raw, path)
    datatype = fields.get("datatype")
    if datatype not in TCK_DTYPES:
        raise FormatError(f"{path}: field 'datatype' is {datatype!r}, expected one of {sorted(TCK_DTYPES)}")
    file_field = fields.get("file", "")
    parts = file_field.split()
    if len(parts) != 2 or parts[0] != "." or not parts[1].isdigit():
        raise FormatError(f"{path}: field 'file' is {file_field!r}, expected '. <offset>'")
    offset = int(parts[1])
    if offset < header_end or offset > len(raw):
        raise FormatError(f"{path}: field 'file' offset {offset} outside [{header_end}, {len(raw)}]")
    body = raw[offset:]
    triplet = 3 * TCK_DTYPES[datatype].itemsize
    if len(body) % triplet:
        raise FormatError(f"{path}: binary data length {len(body)} is not a whole number of float32 triplets")
    values = np.frombuffer(body, dtype=TCK_DTYPES[datatype]).astype(np.float64).reshape(-1, 3)
    terminators = np.flatnonzero(np.all(np.isinf(values), axis=1))
    if terminators.size == 0:
        raise FormatError(f"{path}: binary data has no Inf terminator triplet")
    values = values[:terminators[0]]
    breaks = np.flatnonzero(np.all(np.isnan(values), axis=1))
    if breaks.size and breaks[-1] != values.shape[0] - 1 or (not breaks.size and values.shape[0]):
        raise FormatError(f"{path}: last streamline is not closed by a NaN triplet")
    streamlines = [chunk for chunk in np.split(values, breaks)]
    streamlines = [s[~np.all(np.isnan(s), axis=1)] for s in streamlines]
    streamlines = [s for s in streamlines if s.shape[0]]
    if "count" in fields:
        if not fields["count"].isdigit() or int(fields["count"]) != len(streamlines):
            raise FormatError(f"{path}: field 'count' is {fields['count']!r} but the data holds {len(streamlines)}")
    if voxel_size is None:
        voxel_size = _header_voxel_size(fields, path)
    voxel_size = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    return Tractogram([s / voxel_size for s in streamlines], None, voxel_size)


def _header_voxel_size(fields: Dict[str, str], path: str) -> np.ndarray:
    if "voxel_size" not in fields:
        return np.ones(3)
    try:
        values = np.array([float(v) for v in fields["voxel_size"].split(",")])
    except ValueError:
        values = np.zeros(0)
    if values.shape != (3,) or np.any(values <= 0):
        raise FormatError(f"{path}: field 'voxel_size' is {fields['voxel_size']!r}, expected three positive numbers")
    return values


# ---------------------------------------------------------------------------
# Native tractogram

def write_tractogram(path: str, tractogram: Tractogram) -> str:
    raw_path = payload_path(path)
    counts = [int(s.shape[0]) for s in tractogram.streamlines]
    points = np.concatenate(tractogram.streamlines, axis=0) if counts else np.zeros((0, 3))
    header = {
        "format": TRACTOGRAM_FORMAT,
        "version": TRACTOGRAM_VERSION,
        "count": len(counts),
        "point_counts": counts,
        "labels": tractogram.labels,
        "voxel_size": tractogram.voxel_size.tolist(),
        "dtype": "float64",
        "endianness": "little",
        "payload": os.path.basename(raw_path),
    }
    with open(raw_path, "wb") as f:
        f.write(np.ascontiguousarray(points, dtype=NATIVE_DTYPE).tobytes())
    write_json(path, header)
    logger.info(f"Wrote {len(counts)} streamlines to {path}")
    return path


def read_tractogram(path: str) -> Tractogram:
    header = read_json_header(path, TRACTOGRAM_FORMAT, [TRACTOGRAM_VERSION])
    counts = require(header, "point_counts", path)
    if not isinstance(counts, list) or not all(isinstance(c, int) and c > 0 for c in counts):
        raise FormatError(f"{path}: field 'point_counts' must be a list of positive integers")
    if require(header, "count", path) != len(counts):
        raise FormatError(f"{path}: field 'count' is {header['count']} but 'point_counts' has {len(counts)} entries")
    labels = require(header, "labels", path)
    if labels is not None and (not isinstance(labels, list) or len(labels) != len(counts)):
        raise FormatError(f"{path}: field 'labels' must be null or one label per streamline")
    if require(header, "dtype", path) != "float64" or require(header, "endianness", path) != "little":
        raise FormatError(f"{path}: fields 'dtype'/'endianness' must be 'float64'/'little'")
    total = int(sum(counts))
    raw = read_payload(os.path.join(os.path.dirname(path), require(header, "payload", path)),
                       total * 3 * NATIVE_DTYPE.itemsize)
    points = np.frombuffer(raw, dtype=NATIVE_DTYPE).reshape(total, 3)
    streamlines: List[np.ndarray] = np.split(np.array(points), np.cumsum(counts)[:-1]) if counts else []
    return Tractogram(streamlines, labels, require(header, "voxel_size", path))


def load_any_tractogram(path: str, voxel_size=None) -> Tractogram:
    """Native JSON tractogram or TCK, chosen by extension."""
    if path.endswith(".tck"):
        return read_tck(path, voxel_size)
    return read_tractogram(path)
