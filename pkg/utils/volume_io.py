"""
Native volume container: JSON header sidecar + raw little-endian float32
payload. Payload order is channel fastest, then x, then y, then z.

Value kinds: "scalar" (1 channel), "sh:<m>", "dwi:<n>" (header carries the
gradient scheme), "labels:<n>" (one binary channel per named label).
"""
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from dmri.data_types import DwiVolume, GradientScheme
from dmri.sh_signal import ShVolume
from utils.constants import get_value_kind
from utils.errors import FormatError, InputError
from utils.file_utils import payload_path, read_json_header, read_payload, require, write_json

logger = logging.getLogger(__name__)

VOLUME_FORMAT = "ddtrack-volume"
VOLUME_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class VolumeContainer:
    data: np.ndarray  # (X, Y, Z, C)
    voxel_size: np.ndarray
    value_kind: str
    scheme: Optional[GradientScheme] = None
    labels: Optional[List[str]] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        try:
            kind, channels = get_value_kind(self.value_kind)
        except ValueError as e:
            raise InputError(str(e)) from None
        if self.data.ndim != 4 or self.data.shape[3] != channels:
            raise InputError(f"Value kind '{self.value_kind}' needs {channels} channels, data has shape {self.data.shape}")
        if kind == "dwi" and self.scheme is None:
            raise InputError("A dwi volume needs its gradient scheme")
        if kind == "labels" and (self.labels is None or len(self.labels) != channels):
            raise InputError(f"Value kind '{self.value_kind}' needs {channels} label names")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape[:3])

    # -- typed views ---------------------------------------------------------

    def as_dwi(self) -> DwiVolume:
        self._expect("dwi")
        return DwiVolume(self.data.astype(np.float64), self.scheme, self.voxel_size.copy())

    def as_sh(self) -> ShVolume:
        self._expect("sh")
        return ShVolume(self.data.astype(np.float64), self.voxel_size.copy())

    def as_mask(self) -> np.ndarray:
        self._expect("scalar")
        return self.data[..., 0] > 0.5

    def as_label_masks(self) -> Tuple[np.ndarray, List[str]]:
        """(B, X, Y, Z) boolean masks and their names."""
        self._expect("labels")
        return np.moveaxis(self.data > 0.5, -1, 0), list(self.labels)

    def _expect(self, kind: str) -> None:
        actual = get_value_kind(self.value_kind)[0]
        if actual != kind:
            raise InputError(f"Expected a {kind} volume, got value kind '{self.value_kind}'")


def dwi_container(dwi: DwiVolume) -> VolumeContainer:
    return VolumeContainer(dwi.data, dwi.voxel_size, f"dwi:{len(dwi.scheme)}", scheme=dwi.scheme)


def sh_container(sh: ShVolume) -> VolumeContainer:
    return VolumeContainer(sh.coeffs, sh.voxel_size, f"sh:{sh.m}")


def mask_container(mask: np.ndarray, voxel_size) -> VolumeContainer:
    return VolumeContainer(np.asarray(mask, dtype=np.float32), voxel_size, "scalar")


def labels_container(masks: np.ndarray, names: List[str], voxel_size) -> VolumeContainer:
    data = np.moveaxis(np.asarray(masks, dtype=np.float32), 0, -1)
    return VolumeContainer(data, voxel_size, f"labels:{len(names)}", labels=list(names))


def write_volume(path: str, container: VolumeContainer) -> str:
    raw_path = payload_path(path)
    payload = np.ascontiguousarray(container.data.transpose(2, 1, 0, 3), dtype=PAYLOAD_DTYPE)
    header = {
        "format": VOLUME_FORMAT,
        "version": VOLUME_VERSION,
        "dims": list(container.dims),
        "voxel_size": container.voxel_size.tolist(),
        "value_kind": container.value_kind,
        "dtype": "float32",
        "endianness": "little",
        "payload": os.path.basename(raw_path),
    }
    if container.scheme is not None:
        header["gradient_scheme"] = container.scheme.to_dict()
    if container.labels is not None:
        header["labels"] = list(container.labels)
    with open(raw_path, "wb") as f:
        f.write(payload.tobytes())
    write_json(path, header)
    logger.info(f"Wrote {container.value_kind} volume {container.dims} to {path}")
    return path


def read_volume(path: str) -> VolumeContainer:
    header = read_json_header(path, VOLUME_FORMAT, [VOLUME_VERSION])
    dims = require(header, "dims", path)
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise FormatError(f"{path}: field 'dims' must be three positive integers, got {dims!r}")
    voxel_size = require(header, "voxel_size", path)
    if not (isinstance(voxel_size, list) and len(voxel_size) == 3 and all(float(v) > 0 for v in voxel_size)):
        raise FormatError(f"{path}: field 'voxel_size' must be three positive numbers, got {voxel_size!r}")
    value_kind = require(header, "value_kind", path)
    try:
        kind, channels = get_value_kind(value_kind)
    except ValueError as e:
        raise FormatError(f"{path}: field 'value_kind': {e}") from None
    if require(header, "dtype", path) != "float32":
        raise FormatError(f"{path}: field 'dtype' is {header['dtype']!r}, expected 'float32'")
    if require(header, "endianness", path) != "little":
        raise FormatError(f"{path}: field 'endianness' is {header['endianness']!r}, expected 'little'")
    scheme = None
    if kind == "dwi":
        try:
            scheme = GradientScheme.from_dict(require(header, "gradient_scheme", path))
        except (KeyError, InputError) as e:
            raise FormatError(f"{path}: field 'gradient_scheme': {e}") from None
        if len(scheme) != channels:
            raise FormatError(f"{path}: field 'gradient_scheme' has {len(scheme)} entries for {channels} channels")
    labels = require(header, "labels", path) if kind == "labels" else None
    nx, ny, nz = dims
    expected = nx * ny * nz * channels * PAYLOAD_DTYPE.itemsize
    raw = read_payload(os.path.join(os.path.dirname(path), require(header, "payload", path)), expected)
    data = np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(nz, ny, nx, channels).transpose(2, 1, 0, 3)
    try:
        return VolumeContainer(np.array(data), voxel_size, value_kind, scheme, labels)
    except InputError as e:
        raise FormatError(f"{path}: {e}") from None
