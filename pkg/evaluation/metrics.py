"""
Connectivity and overlap scores against phantom ground truth.

Endpoint membership is tested on containing voxels, from the terminal point
inwards (see endpoint_rois). Voxel visitation counts a streamline at most
once per voxel.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dmri.data_types import Tractogram
from utils.errors import InputError

logger = logging.getLogger(__name__)

VC, IC, NC = "VC", "IC", "NC"
ENDPOINT_LOOKBACK = 2  # inward points tried when the terminal point is in no ROI


@dataclass
class RoiSet:
    names: List[str]
    heads: np.ndarray  # (B, X, Y, Z) bool
    tails: np.ndarray  # (B, X, Y, Z) bool

    def __post_init__(self):
        self.heads = np.asarray(self.heads, dtype=bool)
        self.tails = np.asarray(self.tails, dtype=bool)
        if self.heads.shape != self.tails.shape or self.heads.ndim != 4 or self.heads.shape[0] != len(self.names):
            raise InputError(f"ROI masks {self.heads.shape}/{self.tails.shape} do not match {len(self.names)} bundles")
        for b, name in enumerate(self.names):
            if np.any(self.heads[b] & self.tails[b]):
                raise InputError(f"Head and tail ROIs of bundle '{name}' overlap")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.heads.shape[1:])


@dataclass
class ConnectionReport:
    labels: List[str]  # VC / IC / NC per streamline
    bundles: List[Optional[str]]  # matched bundle for VC streamlines
    valid: Dict[str, List[int]] = field(default_factory=dict)  # bundle -> VC streamline indices

    def fraction(self, label: str) -> float:
        return self.labels.count(label) / len(self.labels) if self.labels else 0.0

    @property
    def vc_fraction(self) -> float:
        return self.fraction(VC)

    @property
    def ic_fraction(self) -> float:
        return self.fraction(IC)

    @property
    def nc_fraction(self) -> float:
        return self.fraction(NC)


@dataclass(frozen=True)
class BundleVolumeScore:
    ol: float
    or_: float
    f1: float
    reconstructed_voxels: int
    gt_voxels: int


@dataclass
class VolumeReport:
    bundles: Dict[str, BundleVolumeScore]

    def mean(self, attr: str) -> float:
        values = [getattr(s, attr) for s in self.bundles.values()]
        return float(np.mean(values)) if values else 0.0


def voxel_indices(points: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Flat indices of the containing voxels of in-grid points, each voxel once."""
    voxels = np.floor(np.asarray(points, dtype=np.float64).reshape(-1, 3)).astype(np.int64)
    inside = np.all((voxels >= 0) & (voxels < np.asarray(dims)), axis=1)
    return np.unique(np.ravel_multi_index(tuple(voxels[inside].T), tuple(dims)))


def _point_rois(point: np.ndarray, rois: RoiSet) -> Tuple[np.ndarray, np.ndarray]:
    voxel = np.floor(point).astype(int)
    if np.any(voxel < 0) or np.any(voxel >= rois.dims):
        empty = np.zeros(len(rois.names), dtype=bool)
        return empty, empty
    index = (slice(None),) + tuple(voxel)
    return rois.heads[index], rois.tails[index]


def endpoint_rois(line: np.ndarray, end: int, rois: RoiSet,
                  lookback: int = ENDPOINT_LOOKBACK) -> Tuple[np.ndarray, np.ndarray]:
    """
    Head/tail membership of one end (0 or -1) of a streamline: the first of the
    terminal point and up to `lookback` inward points that lies in any ROI.
    A mask-exit stop keeps one point past the mask, where no ROI lies.
    """
    order = range(len(line)) if end == 0 else range(len(line) - 1, -1, -1)
    heads = tails = np.zeros(len(rois.names), dtype=bool)
    for i in list(order)[:lookback + 1]:
        heads, tails = _point_rois(line[i], rois)
        if heads.any() or tails.any():
            break
    return heads, tails


def classify_connections(tractogram: Tractogram, rois: RoiSet,
                         lookback: int = ENDPOINT_LOOKBACK) -> ConnectionReport:
    """
    VC: endpoints in the head and tail of one bundle, either order.
    IC: both endpoints in some ROI without forming such a pair.
    NC: everything else.
    """
    report = ConnectionReport([], [], {name: [] for name in rois.names})
    for i, line in enumerate(tractogram.streamlines):
        head_a, tail_a = endpoint_rois(line, 0, rois, lookback)
        head_b, tail_b = endpoint_rois(line, -1, rois, lookback)
        pairs = np.flatnonzero((head_a & tail_b) | (tail_a & head_b))
        if pairs.size:
            name = rois.names[int(pairs[0])]
            report.labels.append(VC)
            report.bundles.append(name)
            report.valid[name].append(i)
        elif (head_a | tail_a).any() and (head_b | tail_b).any():
            report.labels.append(IC)
            report.bundles.append(None)
        else:
            report.labels.append(NC)
            report.bundles.append(None)
    return report


def visitation_mask(streamlines: Sequence[np.ndarray], dims: Sequence[int]) -> np.ndarray:
    mask = np.zeros(int(np.prod(dims)), dtype=bool)
    for line in streamlines:
        mask[voxel_indices(line, dims)] = True
    return mask.reshape(tuple(dims))


def bundle_volume_score(streamlines: Sequence[np.ndarray], gt_mask: np.ndarray, name: str = "") -> BundleVolumeScore:
    gt_mask = np.asarray(gt_mask, dtype=bool)
    gt_size = int(gt_mask.sum())
    if gt_size == 0:
        raise InputError(f"Ground-truth mask of bundle '{name}' is empty")
    recon = visitation_mask(streamlines, gt_mask.shape)
    overlap = int(np.sum(recon & gt_mask))
    excess = int(np.sum(recon & ~gt_mask))
    recon_size = int(recon.sum())
    ol = overlap / gt_size
    precision = overlap / recon_size if recon_size else 0.0
    f1 = 2.0 * precision * ol / (precision + ol) if precision + ol > 0 else 0.0
    return BundleVolumeScore(ol, excess / gt_size, f1, recon_size, gt_size)


def volume_scores(streamlines_by_bundle: Dict[str, Sequence[np.ndarray]], gt_masks: np.ndarray,
                  names: Sequence[str]) -> VolumeReport:
    """OL, OR and F1 per bundle; gt_masks is (B, X, Y, Z) in `names` order."""
    gt_masks = np.asarray(gt_masks, dtype=bool)
    if gt_masks.shape[0] != len(names):
        raise InputError(f"{gt_masks.shape[0]} ground-truth masks for {len(names)} bundles")
    return VolumeReport({name: bundle_volume_score(streamlines_by_bundle.get(name, []), gt_masks[b], name)
                         for b, name in enumerate(names)})


def visit_weights(streamlines: Sequence[np.ndarray], dims: Sequence[int]) -> np.ndarray:
    """Per-voxel count of visiting streamlines, normalized to sum 1 (all zeros when nothing visits)."""
    counts = np.zeros(int(np.prod(dims)))
    for line in streamlines:
        counts[voxel_indices(line, dims)] += 1.0
    total = counts.sum()
    return counts / total if total > 0 else counts


def weighted_dice(t1: Sequence[np.ndarray], t2: Sequence[np.ndarray], dims: Sequence[int]) -> float:
    """
    sum over shared voxels of (w1 + w2), divided by sum(w1) + sum(w2).
    An empty tract scores 0 and logs a warning.
    """
    w1 = visit_weights(t1, dims)
    w2 = visit_weights(t2, dims)
    denominator = w1.sum() + w2.sum()
    if w1.sum() == 0 or w2.sum() == 0:
        logger.warning("Weighted Dice of an empty tract is 0")
        return 0.0
    shared = (w1 > 0) & (w2 > 0)
    return float((w1[shared].sum() + w2[shared].sum()) / denominator)


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    a, b = np.asarray(mask_a, dtype=bool), np.asarray(mask_b, dtype=bool)
    total = int(a.sum() + b.sum())
    return 2.0 * int(np.sum(a & b)) / total if total else 0.0
