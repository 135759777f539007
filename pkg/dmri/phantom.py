"""
Numerical phantom: bundle geometry, multi-tensor DWI simulation with Rician
noise, and ground-truth streamlines integrated along each bundle's analytic
orientation field.
"""
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from dmri.data_types import DwiVolume, GradientScheme, Tractogram
from templates.phantom_templates import list_templates, load_template
from utils import constants
from utils.errors import InputError
from utils.rng import stream

logger = logging.getLogger(__name__)

_PLANES = {"xy": (0, 1, 2), "xz": (0, 2, 1), "yz": (1, 2, 0)}
MAX_SEED_DRAWS_PER_STREAMLINE = 100


class BundleGeometryError(InputError):
    """A bundle spec is inconsistent with the volume or with itself."""


# ---------------------------------------------------------------------------
# Bundle specifications (JSON schema)

class ArcSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center: Tuple[float, float, float]
    radius: float = Field(gt=0)
    start_deg: float
    end_deg: float
    plane: Literal["xy", "xz", "yz"] = "xy"


class BundleSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(min_length=1)
    shape: Literal["polyline", "arc"] = "polyline"
    points: Optional[List[Tuple[float, float, float]]] = None
    arc: Optional[ArcSpec] = None
    radius: float = Field(gt=0)
    weight: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _check_shape(self):
        if self.shape == "polyline":
            if not self.points or len(self.points) < 2:
                raise ValueError(f"bundle '{self.name}': polyline centerline needs at least 2 points")
            pts = np.asarray(self.points, dtype=np.float64)
            if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0):
                raise ValueError(f"bundle '{self.name}': repeated consecutive centerline points")
        elif self.arc is None:
            raise ValueError(f"bundle '{self.name}': arc centerline needs an 'arc' block")
        elif self.arc.start_deg == self.arc.end_deg:
            raise ValueError(f"bundle '{self.name}': arc has zero angular span")
        return self

    def centerline(self) -> "Centerline":
        if self.shape == "polyline":
            return PolylineCenterline(np.asarray(self.points, dtype=np.float64))
        return ArcCenterline(self.arc)


class PhantomSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dims: Tuple[int, int, int] = (40, 40, 40)
    voxel_size: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    roi_radius: float = Field(default=2.0, gt=0)
    bundles: List[BundleSpec]


# ---------------------------------------------------------------------------
# Centerlines

class Centerline:
    length: float

    def position(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def closest(self, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """For points q (N, 3): arc-length parameter, distance, unit tangent of the closest point."""
        raise NotImplementedError

    @property
    def start(self) -> np.ndarray:
        return self.position(np.array([0.0]))[0]

    @property
    def end(self) -> np.ndarray:
        return self.position(np.array([self.length]))[0]


class PolylineCenterline(Centerline):
    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.segments = np.diff(self.points, axis=0)
        self.seg_lengths = np.linalg.norm(self.segments, axis=1)
        self.seg_tangents = self.segments / self.seg_lengths[:, None]
        self.cumulative = np.concatenate([[0.0], np.cumsum(self.seg_lengths)])
        self.length = float(self.cumulative[-1])

    def position(self, s):
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length)
        seg = np.clip(np.searchsorted(self.cumulative, s, side="right") - 1, 0, len(self.segments) - 1)
        return self.points[seg] + (s - self.cumulative[seg])[:, None] * self.seg_tangents[seg]

    def closest(self, q):
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        rel = q[:, None, :] - self.points[None, :-1, :]  # (N, K, 3)
        t = np.clip(np.einsum("nkc,kc->nk", rel, self.segments) / self.seg_lengths ** 2, 0.0, 1.0)
        proj = self.points[None, :-1, :] + t[..., None] * self.segments[None]
        dist2 = np.sum((q[:, None, :] - proj) ** 2, axis=-1)
        seg = np.argmin(dist2, axis=1)
        rows = np.arange(q.shape[0])
        s = self.cumulative[seg] + t[rows, seg] * self.seg_lengths[seg]
        return s, np.sqrt(dist2[rows, seg]), self.seg_tangents[seg]


class ArcCenterline(Centerline):
    def __init__(self, arc: ArcSpec):
        self.axes = _PLANES[arc.plane]
        self.center = np.asarray(arc.center, dtype=np.float64)
        self.radius = float(arc.radius)
        self.theta0 = math.radians(arc.start_deg)
        self.theta1 = math.radians(arc.end_deg)
        self.sign = 1.0 if self.theta1 > self.theta0 else -1.0
        self.span = abs(self.theta1 - self.theta0)
        self.length = self.radius * self.span

    def _point(self, theta):
        a, b, _ = self.axes
        out = np.repeat(self.center[None, :], theta.shape[0], axis=0)
        out[:, a] += self.radius * np.cos(theta)
        out[:, b] += self.radius * np.sin(theta)
        return out

    def _tangent(self, theta):
        a, b, _ = self.axes
        out = np.zeros((theta.shape[0], 3))
        out[:, a] = -self.sign * np.sin(theta)
        out[:, b] = self.sign * np.cos(theta)
        return out

    def position(self, s):
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length)
        return self._point(self.theta0 + self.sign * s / self.radius)

    def closest(self, q):
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        a, b, _ = self.axes
        psi = np.arctan2(q[:, b] - self.center[b], q[:, a] - self.center[a])
        delta = np.mod(self.sign * (psi - self.theta0), 2.0 * np.pi)
        candidates = np.stack([np.minimum(delta, self.span), np.zeros_like(delta),
                               np.full_like(delta, self.span)], axis=1)  # swept angle from start
        dists = np.stack([np.linalg.norm(q - self._point(self.theta0 + self.sign * candidates[:, i]), axis=1)
                          for i in range(3)], axis=1)
        best = np.argmin(dists, axis=1)
        rows = np.arange(q.shape[0])
        swept = candidates[rows, best]
        theta = self.theta0 + self.sign * swept
        return swept * self.radius, dists[rows, best], self._tangent(theta)


# ---------------------------------------------------------------------------
# Phantom dataset

@dataclass(frozen=True)
class TensorModelParams:
    lambda_parallel: float = constants.LAMBDA_PARALLEL
    lambda_perp: float = constants.LAMBDA_PERPENDICULAR
    s0: float = constants.S0

    def __post_init__(self):
        if not self.lambda_parallel > self.lambda_perp > 0:
            raise InputError(f"Need lambda_parallel > lambda_perp > 0, got {self.lambda_parallel}, {self.lambda_perp}")
        if self.s0 <= 0:
            raise InputError(f"S0 must be positive, got {self.s0}")

    @property
    def mean_diffusivity(self) -> float:
        return (self.lambda_parallel + 2.0 * self.lambda_perp) / 3.0


@dataclass
class PhantomDataset:
    dims: Tuple[int, int, int]
    voxel_size: np.ndarray
    specs: List[BundleSpec]
    orientations: np.ndarray  # (X, Y, Z, B, 3), one compartment slot per bundle
    fractions: np.ndarray  # (X, Y, Z, B), zero where the bundle is absent
    wm_mask: np.ndarray  # (X, Y, Z) bool
    bundle_masks: np.ndarray  # (B, X, Y, Z) bool
    head_rois: np.ndarray  # (B, X, Y, Z) bool
    tail_rois: np.ndarray  # (B, X, Y, Z) bool
    roi_radius: float = 2.0
    gt_tractogram: Optional[Tractogram] = None
    centerlines: List[Centerline] = field(default_factory=list)

    @property
    def bundle_names(self) -> List[str]:
        return [spec.name for spec in self.specs]


def voxel_centers(dims: Sequence[int]) -> np.ndarray:
    grid = np.meshgrid(*[np.arange(d, dtype=np.float64) + 0.5 for d in dims], indexing="ij")
    return np.stack(grid, axis=-1)


def _check_inside(spec: BundleSpec, centerline: Centerline, dims: Sequence[int]):
    samples = centerline.position(np.linspace(0.0, centerline.length, 256))
    low, high = spec.radius, np.asarray(dims, dtype=np.float64) - spec.radius
    if np.any(samples < low) or np.any(samples > high):
        raise BundleGeometryError(f"Bundle '{spec.name}' exits the {tuple(dims)} volume (radius {spec.radius})")


def build_phantom(specs: Sequence[BundleSpec], dims: Sequence[int], voxel_size: Sequence[float],
                  roi_radius: float = 2.0) -> PhantomDataset:
    """Rasterize bundle specs into compartments, masks and endpoint ROIs."""
    if not specs:
        raise InputError("A phantom needs at least one bundle")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise InputError(f"Bundle names must be unique, got {names}")
    dims = tuple(int(d) for d in dims)
    centers = voxel_centers(dims).reshape(-1, 3)
    n_bundles = len(specs)
    orientations = np.zeros((centers.shape[0], n_bundles, 3))
    weights = np.zeros((centers.shape[0], n_bundles))
    heads, tails, masks, centerlines = [], [], [], []
    for b, spec in enumerate(specs):
        centerline = spec.centerline()
        _check_inside(spec, centerline, dims)
        _, dist, tangent = centerline.closest(centers)
        mask = dist <= spec.radius
        orientations[mask, b] = tangent[mask]
        weights[mask, b] = spec.weight
        head = mask & (np.linalg.norm(centers - centerline.start, axis=1) <= roi_radius)
        tail = mask & (np.linalg.norm(centers - centerline.end, axis=1) <= roi_radius)
        if not head.any() or not tail.any():
            raise BundleGeometryError(f"Bundle '{spec.name}' has an empty endpoint ROI")
        if np.any(head & tail):
            raise BundleGeometryError(f"Bundle '{spec.name}' is too short: head and tail ROIs overlap")
        masks.append(mask)
        heads.append(head)
        tails.append(tail)
        centerlines.append(centerline)
        logger.info(f"Bundle '{spec.name}': {int(mask.sum())} voxels, length {centerline.length:.2f}")
    total = weights.sum(axis=1, keepdims=True)
    fractions = np.divide(weights, total, out=np.zeros_like(weights), where=total > 0)
    shape3 = dims
    return PhantomDataset(
        dims=dims,
        voxel_size=np.asarray(voxel_size, dtype=np.float64),
        specs=list(specs),
        orientations=orientations.reshape(shape3 + (n_bundles, 3)),
        fractions=fractions.reshape(shape3 + (n_bundles,)),
        wm_mask=(total[:, 0] > 0).reshape(shape3),
        bundle_masks=np.stack(masks).reshape((n_bundles,) + shape3),
        head_rois=np.stack(heads).reshape((n_bundles,) + shape3),
        tail_rois=np.stack(tails).reshape((n_bundles,) + shape3),
        roi_radius=float(roi_radius),
        centerlines=centerlines,
    )


def phantom_from_spec(spec: PhantomSpec) -> PhantomDataset:
    return build_phantom(spec.bundles, spec.dims, spec.voxel_size, spec.roi_radius)


# ---------------------------------------------------------------------------
# Acquisition scheme

def electrostatic_directions(n: int, seed: int = constants.GRADIENT_TABLE_SEED, iterations: int = 800) -> np.ndarray:
    """
    n unit vectors spread by electrostatic repulsion with antipodal charges,
    canonicalized to the upper hemisphere.
    """
    rng = stream(seed, "gradient-directions", n)
    x = rng.normal(size=(n, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    eye = np.eye(n, dtype=bool)
    for it in range(iterations):
        diff = x[:, None, :] - x[None, :, :]
        summ = x[:, None, :] + x[None, :, :]
        d1 = np.linalg.norm(diff, axis=-1)
        d2 = np.linalg.norm(summ, axis=-1)
        d1[eye] = np.inf
        d2[eye] = np.inf
        force = (diff / d1[..., None] ** 3).sum(axis=1) + (summ / d2[..., None] ** 3).sum(axis=1)
        force -= np.sum(force * x, axis=1, keepdims=True) * x  # tangential part only
        lr = 0.1 * (1.0 - it / iterations) + 1e-3
        x += lr * force / np.abs(force).max()
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    x[x[:, 2] < 0] *= -1.0
    return x


@functools.lru_cache(maxsize=4)
def _cached_scheme(n_dirs: int, n_b0: int, bvalue: float) -> GradientScheme:
    directions = electrostatic_directions(n_dirs)
    bvecs = np.vstack([np.zeros((n_b0, 3)), directions])
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_dirs, bvalue)])
    return GradientScheme(bvals=bvals, bvecs=bvecs)


def default_gradient_scheme(n_dirs: int = constants.DEFAULT_N_DIRECTIONS, n_b0: int = constants.DEFAULT_N_B0,
                            bvalue: float = constants.DEFAULT_BVALUE) -> GradientScheme:
    return _cached_scheme(int(n_dirs), int(n_b0), float(bvalue))


# ---------------------------------------------------------------------------
# Signal simulation

def simulate_dwi(phantom: PhantomDataset, scheme: GradientScheme, params: TensorModelParams = TensorModelParams(),
                 snr: Optional[float] = None, seed: int = 0) -> DwiVolume:
    """
    Multi-tensor signal S(g) = S0 * sum_i f_i exp(-b g^T D_i g) with cylindrically
    symmetric D_i, isotropic background, optional Rician noise with sigma = S0/snr.
    Noise is drawn per z-slab from stream (seed, "dwi-noise", z).
    """
    if snr is not None and snr <= 0:
        raise InputError(f"SNR must be positive, got {snr}")
    g = scheme.bvecs
    b = scheme.bvals
    cos2 = np.einsum("xyzkc,nc->xyzkn", phantom.orientations, g) ** 2
    adc = params.lambda_perp + (params.lambda_parallel - params.lambda_perp) * cos2
    compartments = np.exp(-b * adc)  # (X, Y, Z, B, n)
    signal = np.einsum("xyzk,xyzkn->xyzn", phantom.fractions, compartments)
    background = ~phantom.wm_mask
    signal[background] = np.exp(-b * params.mean_diffusivity)[None, :]
    signal *= params.s0
    signal[..., scheme.b0_indices] = params.s0
    if snr is not None:
        sigma = params.s0 / snr
        for z in range(phantom.dims[2]):
            rng = stream(seed, "dwi-noise", z)
            n1 = rng.normal(0.0, sigma, size=signal[:, :, z].shape)
            n2 = rng.normal(0.0, sigma, size=signal[:, :, z].shape)
            signal[:, :, z] = np.sqrt((signal[:, :, z] + n1) ** 2 + n2 ** 2)
    logger.info(f"Simulated DWI {phantom.dims} x {len(scheme)} volumes, snr={snr}")
    return DwiVolume(signal, scheme, phantom.voxel_size.copy())


# ---------------------------------------------------------------------------
# Ground-truth streamlines

class GtTractogramResult(NamedTuple):
    tractogram: Tractogram
    accepted: Dict[str, int]
    discarded: Dict[str, int]


def _voxel_of(p: np.ndarray) -> Tuple[int, int, int]:
    return tuple(int(v) for v in np.floor(p))


def _in_volume(voxel, dims) -> bool:
    return all(0 <= v < d for v, d in zip(voxel, dims))


def _integrate(centerline: Centerline, seed_point: np.ndarray, step: float, tail: np.ndarray,
               wm_mask: np.ndarray, max_steps: int) -> Optional[np.ndarray]:
    """Midpoint integration of the bundle tangent field until the tail ROI; None on failure."""
    points = [seed_point]
    p = seed_point
    for _ in range(max_steps):
        _, _, t1 = centerline.closest(p[None])
        _, _, t2 = centerline.closest((p + 0.5 * step * t1[0])[None])
        direction = t2[0] / np.linalg.norm(t2[0])
        p = p + step * direction
        voxel = _voxel_of(p)
        if not _in_volume(voxel, wm_mask.shape) or not wm_mask[voxel]:
            return None
        points.append(p)
        if tail[voxel]:
            return np.asarray(points)
    return None


def generate_gt_tractogram(phantom: PhantomDataset, step: float = 1.0, streamlines_per_bundle: int = 100,
                           seed: int = 0, seed_jitter: float = 1.0, max_steps: Optional[int] = None) -> GtTractogramResult:
    """
    Integrate streamlines from jittered seeds in each head ROI to the tail ROI.

    Attempts continue until `streamlines_per_bundle` are accepted or four times
    that many attempts were made; failed attempts are counted as discards.
    Seed draws that miss the head ROI are capped at `MAX_SEED_DRAWS_PER_STREAMLINE`
    per requested streamline. A bundle that yields no streamline raises
    BundleGeometryError.
    """
    if step <= 0:
        raise InputError(f"Integration step must be positive, got {step}")
    streamlines: List[np.ndarray] = []
    labels: List[str] = []
    accepted: Dict[str, int] = {}
    discarded: Dict[str, int] = {}
    for b, (spec, centerline) in enumerate(zip(phantom.specs, phantom.centerlines)):
        rng = stream(seed, "gt-seeds", b)
        budget = max_steps or int(4 * centerline.length / step) + 10
        head, tail = phantom.head_rois[b], phantom.tail_rois[b]
        accepted[spec.name] = 0
        discarded[spec.name] = 0
        attempts = draws = 0
        max_draws = MAX_SEED_DRAWS_PER_STREAMLINE * streamlines_per_bundle
        with tqdm(total=streamlines_per_bundle, desc=f"GT {spec.name}", leave=False) as pbar:
            while accepted[spec.name] < streamlines_per_bundle and attempts < 4 * streamlines_per_bundle \
                    and draws < max_draws:
                draws += 1
                offset = rng.uniform(-seed_jitter, seed_jitter, size=3)
                if np.linalg.norm(offset) > seed_jitter:
                    continue
                seed_point = centerline.start + offset
                voxel = _voxel_of(seed_point)
                if not _in_volume(voxel, phantom.dims) or not head[voxel]:
                    continue
                attempts += 1
                line = _integrate(centerline, seed_point, step, tail, phantom.wm_mask, budget)
                if line is None:
                    discarded[spec.name] += 1
                    continue
                streamlines.append(line)
                labels.append(spec.name)
                accepted[spec.name] += 1
                pbar.update(1)
        if accepted[spec.name] == 0:
            reason = "no seed draw landed in its head ROI" if attempts == 0 else \
                f"all {attempts} integrations failed to reach the tail ROI"
            raise BundleGeometryError(f"Bundle '{spec.name}' yields no ground-truth streamline: {reason}")
        if discarded[spec.name]:
            logger.warning(f"Bundle '{spec.name}': {discarded[spec.name]} ground-truth streamlines discarded")
        logger.info(f"Bundle '{spec.name}': {accepted[spec.name]} ground-truth streamlines")
    tractogram = Tractogram(streamlines, labels, phantom.voxel_size.copy())
    return GtTractogramResult(tractogram, accepted, discarded)


def load_phantom_spec(template: str = "default", **overrides) -> PhantomSpec:
    """Phantom spec from a JSON template, with non-None `overrides` applied."""
    try:
        payload = load_template(template)
    except FileNotFoundError as e:
        raise InputError(f"{e}; available templates: {list_templates()}") from None
    except ValueError as e:
        raise InputError(str(e)) from None
    payload.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PhantomSpec.model_validate(payload)
    except ValidationError as e:
        raise InputError(f"Invalid phantom template '{template}': {e}") from None
