"""
Spherical-harmonic representation of DWI signals.

Basis: real, symmetric (even l) Descoteaux07 basis, columns ordered by l
ascending and, within l, order m from -l to +l:
    m < 0 : sqrt(2) * N_l^|m| * P_l^|m|(cos theta) * cos(|m| phi)
    m = 0 : N_l^0 * P_l^0(cos theta)
    m > 0 : sqrt(2) * N_l^m * P_l^m(cos theta) * sin(m phi)
with the Condon-Shortley phase carried by scipy's associated Legendre function.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.ndimage import map_coordinates
from scipy.special import lpmv

from dmri.data_types import DwiVolume, GradientScheme, UNIT_TOLERANCE
from utils.errors import InputError

logger = logging.getLogger(__name__)

DEFAULT_B0_FLOOR = 1e-6  # fraction of the volume maximum
OFFSETS = np.array([(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)],
                   dtype=np.float64)  # (27, 3) as (dx, dy, dz), iterated (dz, dy, dx)


class RankDeficientFitError(InputError):
    """The unregularized least-squares system is singular."""


@dataclass(frozen=True)
class ShBasisConfig:
    l_max: int = 6

    def __post_init__(self):
        if self.l_max < 0 or self.l_max % 2:
            raise InputError(f"l_max must be a non-negative even integer, got {self.l_max}")

    @property
    def m(self) -> int:
        return (self.l_max + 1) * (self.l_max + 2) // 2

    def degrees(self) -> Tuple[np.ndarray, np.ndarray]:
        """(l, order) for every column, in basis order."""
        ls, ms = [], []
        for l in range(0, self.l_max + 1, 2):
            for order in range(-l, l + 1):
                ls.append(l)
                ms.append(order)
        return np.array(ls), np.array(ms)

    @classmethod
    def from_m(cls, m: int) -> "ShBasisConfig":
        l_max = int(round((math.sqrt(8 * m + 1) - 3) / 2))
        config = cls(l_max=l_max)
        if config.m != m:
            raise InputError(f"{m} is not a valid even-order SH coefficient count")
        return config


@dataclass
class ShVolume:
    coeffs: np.ndarray  # (X, Y, Z, m)
    voxel_size: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        if self.coeffs.ndim != 4:
            raise InputError(f"SH volume must be 4D, got shape {self.coeffs.shape}")
        ShBasisConfig.from_m(self.coeffs.shape[3])
        if not np.all(np.isfinite(self.coeffs)):
            raise InputError("SH volume contains non-finite coefficients")
        self.coeffs.flags.writeable = False
        self._channel_first = np.ascontiguousarray(np.moveaxis(self.coeffs, -1, 0))

    @property
    def dims(self) -> tuple:
        return tuple(self.coeffs.shape[:3])

    @property
    def m(self) -> int:
        return self.coeffs.shape[3]


@dataclass
class NeighborhoodFeature:
    block: np.ndarray  # (3, 3, 3, m) indexed [dz, dy, dx, coefficient]
    out_of_bounds: bool = False

    def flat(self) -> np.ndarray:
        return self.block.reshape(-1)


def sh_basis_matrix(directions: np.ndarray, config: ShBasisConfig) -> np.ndarray:
    """Evaluate the basis at unit `directions` (n, 3); returns (n, m)."""
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(directions, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise InputError("sh_basis_matrix: directions must be unit vectors")
    cos_theta = np.clip(directions[:, 2], -1.0, 1.0)
    phi = np.arctan2(directions[:, 1], directions[:, 0])
    columns = []
    for l, order in zip(*config.degrees()):
        am = abs(int(order))
        norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - am) / math.factorial(l + am))
        legendre = norm * lpmv(am, l, cos_theta)
        if order < 0:
            columns.append(math.sqrt(2) * legendre * np.cos(am * phi))
        elif order == 0:
            columns.append(legendre)
        else:
            columns.append(math.sqrt(2) * legendre * np.sin(am * phi))
    return np.stack(columns, axis=1)


def laplace_beltrami_diagonal(config: ShBasisConfig) -> np.ndarray:
    ls, _ = config.degrees()
    return (ls * (ls + 1)).astype(np.float64)


def normalize_dwi(dwi: DwiVolume, b0_floor: float = DEFAULT_B0_FLOOR) -> Tuple[np.ndarray, np.ndarray]:
    """
    Divide each DW signal by the voxel's mean b0.

    Returns (normalized DW signals (X, Y, Z, n_dw), flagged background mask).
    Flagged voxels (mean b0 at or below b0_floor * volume max) are zero.
    """
    scheme = dwi.scheme
    b0_mean = dwi.data[..., scheme.b0_indices].mean(axis=-1)
    floor = b0_floor * float(np.max(dwi.data, initial=0.0))
    flagged = b0_mean <= floor
    safe = np.where(flagged, 1.0, b0_mean)
    normalized = dwi.data[..., scheme.dw_indices] / safe[..., None]
    normalized[flagged] = 0.0
    if flagged.any():
        logger.info(f"{int(flagged.sum())} voxels flagged as background (b0 below {floor:.3g})")
    return normalized, flagged


def fitting_matrix(scheme: GradientScheme, config: ShBasisConfig, reg: float = 0.0,
                   voxel: Optional[Tuple[int, int, int]] = None) -> np.ndarray:
    """(m, n_dw) matrix mapping normalized signals to regularized least-squares coefficients."""
    if reg < 0:
        raise InputError(f"SH regularization must be non-negative, got {reg}")
    basis = sh_basis_matrix(scheme.bvecs[scheme.dw_indices], config)
    n_dw = basis.shape[0]
    system = basis
    if reg > 0:
        system = np.vstack([basis, math.sqrt(reg) * np.diag(laplace_beltrami_diagonal(config))])
    if np.linalg.matrix_rank(system) < config.m:
        where = f" at voxel {voxel}" if voxel is not None else ""
        raise RankDeficientFitError(
            f"Normal equations are rank deficient{where}: {n_dw} DW directions for {config.m} coefficients, reg={reg}")
    return linalg.pinv(system)[:, :n_dw]


def fit_sh(dwi: DwiVolume, scheme: Optional[GradientScheme] = None, config: ShBasisConfig = ShBasisConfig(),
           reg: float = 0.0, b0_floor: float = DEFAULT_B0_FLOOR) -> ShVolume:
    """Project b0-normalized DW signals onto the SH basis, voxel by voxel."""
    if scheme is not None and scheme is not dwi.scheme:
        dwi = DwiVolume(dwi.data, scheme, dwi.voxel_size)
    normalized, flagged = normalize_dwi(dwi, b0_floor)
    first = np.argwhere(~flagged)
    voxel = tuple(int(v) for v in first[0]) if first.size else None
    fit = fitting_matrix(dwi.scheme, config, reg, voxel)
    coeffs = normalized @ fit.T
    coeffs[flagged] = 0.0
    logger.info(f"Fitted l_max={config.l_max} SH ({config.m} coefficients) on {dwi.dims} voxels, reg={reg}")
    return ShVolume(coeffs, dwi.voxel_size.copy())


def sample_neighborhoods(sh: ShVolume, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Trilinearly sample the 3x3x3 neighborhood of every point.

    Returns blocks (N, 3, 3, 3, m) indexed [n, dz, dy, dx, c] and an
    out-of-bounds flag per point. Cells whose position lies outside the volume
    are zero.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    positions = points[:, None, :] + OFFSETS[None, :, :]  # (N, 27, 3)
    dims = np.asarray(sh.dims, dtype=np.float64)
    inside = np.all((positions >= 0.0) & (positions < dims), axis=-1)  # (N, 27)
    lattice = (positions - 0.5).reshape(-1, 3).T  # voxel centers sit at integer lattice coordinates
    values = np.empty((lattice.shape[1], sh.m))
    for c in range(sh.m):
        values[:, c] = map_coordinates(sh._channel_first[c], lattice, order=1, mode="nearest")
    values = values.reshape(points.shape[0], 27, sh.m)
    values[~inside] = 0.0
    return values.reshape(points.shape[0], 3, 3, 3, sh.m), ~inside.all(axis=1)


def sample_neighborhood(sh: ShVolume, p: np.ndarray) -> NeighborhoodFeature:
    blocks, oob = sample_neighborhoods(sh, np.asarray(p).reshape(1, 3))
    return NeighborhoodFeature(blocks[0], bool(oob[0]))
