"""
Data containers shared across the pipeline.

Coordinates: voxel (i, j, k) covers the continuous cube [i, i+1) x [j, j+1) x
[k, k+1); its center is (i+0.5, j+0.5, k+0.5). World millimetres are voxel
coordinates times voxel_size.
"""
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from utils.errors import InputError

B0_THRESHOLD = 50.0  # s/mm^2; bvals at or below count as b0
UNIT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class GradientScheme:
    bvals: np.ndarray  # (n,)
    bvecs: np.ndarray  # (n, 3); b0 rows may be zero

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if bvals.shape[0] != bvecs.shape[0]:
            raise InputError(f"Gradient scheme has {bvals.shape[0]} bvals but {bvecs.shape[0]} bvecs")
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)
        if self.b0_indices.size == 0:
            raise InputError("Gradient scheme has no b0 volume")
        norms = np.linalg.norm(bvecs[self.dw_indices], axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOLERANCE)
        if bad.size:
            raise InputError(f"bvec {int(self.dw_indices[bad[0]])} has norm {norms[bad[0]]:.8f}, expected 1")

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bvals <= B0_THRESHOLD)

    @property
    def dw_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bvals > B0_THRESHOLD)

    def __len__(self) -> int:
        return self.bvals.shape[0]

    def to_dict(self) -> Dict:
        return {"bvals": self.bvals.tolist(), "bvecs": self.bvecs.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict) -> "GradientScheme":
        return cls(bvals=np.asarray(payload["bvals"]), bvecs=np.asarray(payload["bvecs"]))


@dataclass
class DwiVolume:
    data: np.ndarray  # (X, Y, Z, n) raw signal
    scheme: GradientScheme
    voxel_size: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        if self.data.ndim != 4 or self.data.shape[3] != len(self.scheme):
            raise InputError(f"DWI data shape {self.data.shape} does not match {len(self.scheme)} gradient entries")

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape[:3])


@dataclass
class Tractogram:
    """Streamlines in voxel-continuous coordinates, optionally labeled by bundle."""
    streamlines: List[np.ndarray] = field(default_factory=list)
    labels: Optional[List[str]] = None
    voxel_size: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.streamlines = [np.asarray(s, dtype=np.float64).reshape(-1, 3) for s in self.streamlines]
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        if self.labels is not None and len(self.labels) != len(self.streamlines):
            raise InputError(f"{len(self.labels)} labels for {len(self.streamlines)} streamlines")

    def __len__(self) -> int:
        return len(self.streamlines)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.streamlines)

    def bundle_names(self) -> List[str]:
        return sorted(set(self.labels)) if self.labels else []

    def select(self, indices: Sequence[int]) -> "Tractogram":
        labels = [self.labels[i] for i in indices] if self.labels is not None else None
        return Tractogram([self.streamlines[i] for i in indices], labels, self.voxel_size.copy())

    def bundle(self, name: str) -> "Tractogram":
        if self.labels is None:
            return Tractogram([], [], self.voxel_size.copy())
        return self.select([i for i, label in enumerate(self.labels) if label == name])
