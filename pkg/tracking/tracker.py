"""
Streamline propagation over a trained orientation model.

    p_{t+1} = p_t + alpha * y_t

Seeds are propagated in lock-step batches: every iteration samples the SH
neighborhoods of all running rows, advances their temporal state, draws one
orientation per row and applies the stopping rules. Each row owns its rng
stream, and batches are formed from a fixed partition of the seed list, so
output does not depend on how batches are spread over workers.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np

from dmri.data_types import Tractogram
from dmri.sh_signal import ShVolume, sample_neighborhoods
from models.diffusion import SamplerConfig, normalize_orientations
from utils.errors import InputError
from utils.rng import stream

logger = logging.getLogger(__name__)


class OrientationModel(Protocol):
    def init_temporal_state(self, n: int) -> Tuple[np.ndarray, ...]: ...

    def condition(self, blocks: np.ndarray, state: Sequence[np.ndarray]): ...

    def propose(self, c: np.ndarray, local: np.ndarray, sampler: SamplerConfig, rngs=None) -> np.ndarray: ...


class StopReason(str, Enum):
    MASK_EXIT = "mask_exit"
    ANGLE = "angle"
    MAX_STEPS = "max_steps"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class TrackerConfig:
    step_alpha: float = 1.0
    seeds_per_voxel: int = 5
    angle_threshold_deg: float = 45.0
    max_steps: int = 500
    bidirectional: bool = True
    min_points: int = 3
    sampler: SamplerConfig = SamplerConfig()

    def __post_init__(self):
        if not self.step_alpha > 0:
            raise InputError(f"step_alpha must be positive, got {self.step_alpha}")
        if not 0 < self.angle_threshold_deg < 180:
            raise InputError(f"angle threshold must lie in (0, 180), got {self.angle_threshold_deg}")
        if self.max_steps < 1 or self.seeds_per_voxel < 1:
            raise InputError("max_steps and seeds_per_voxel must be positive")


@dataclass
class TrackState:
    points: List[np.ndarray]
    rng: Optional[np.random.Generator] = None
    directions: List[np.ndarray] = field(default_factory=list)
    previous: Optional[np.ndarray] = None  # direction the next step is aligned and angle-checked against
    temporal: Optional[Tuple[np.ndarray, ...]] = None  # per-layer hidden rows (H,)
    stop: Optional[StopReason] = None

    @property
    def steps(self) -> int:
        return len(self.points) - 1

    @property
    def running(self) -> bool:
        return self.stop is None


def seed_points(wm_mask: np.ndarray, seeds_per_voxel: int, rng: np.random.Generator) -> np.ndarray:
    """seeds_per_voxel uniform positions inside every mask voxel, voxels in C order."""
    voxels = np.argwhere(np.asarray(wm_mask, dtype=bool))
    if voxels.size == 0:
        raise InputError("Cannot seed: the white-matter mask is empty")
    jitter = rng.uniform(0.0, 1.0, size=(voxels.shape[0], seeds_per_voxel, 3))
    return (voxels[:, None, :] + jitter).reshape(-1, 3)


def _outside(point: np.ndarray, wm_mask: np.ndarray) -> bool:
    voxel = np.floor(point).astype(int)
    if np.any(voxel < 0) or np.any(voxel >= wm_mask.shape):
        return True
    return not wm_mask[tuple(voxel)]


def turn_exceeds(previous: np.ndarray, direction: np.ndarray, config: TrackerConfig) -> bool:
    cos = float(np.clip(np.dot(previous, direction), -1.0, 1.0))
    return np.degrees(np.arccos(cos)) > config.angle_threshold_deg


def check_stop(state: TrackState, wm_mask: np.ndarray, config: TrackerConfig) -> Optional[StopReason]:
    """Stopping rules on the newest point; turns are rejected before a point is appended."""
    if _outside(state.points[-1], wm_mask):
        return StopReason.MASK_EXIT
    if state.steps >= config.max_steps:
        return StopReason.MAX_STEPS
    return None


def advance(states: Sequence[TrackState], model: OrientationModel, sh: ShVolume, wm_mask: np.ndarray,
            config: TrackerConfig) -> None:
    """One propagation step for every running state, evaluated as one batch."""
    running = [s for s in states if s.running]
    if not running:
        return
    points = np.stack([s.points[-1] for s in running])
    blocks, _ = sample_neighborhoods(sh, points)
    for s in running:
        if s.temporal is None:
            s.temporal = tuple(h[0] for h in model.init_temporal_state(1))
    temporal = tuple(np.stack(layer) for layer in zip(*(s.temporal for s in running)))
    c, local, temporal = model.condition(blocks, temporal)
    rngs = None if config.sampler.deterministic else [s.rng for s in running]
    raw = model.propose(c, local, config.sampler, rngs)
    directions, degenerate = normalize_orientations(raw)
    for row, s in enumerate(running):
        s.temporal = tuple(layer[row] for layer in temporal)
        if degenerate[row]:
            s.stop = StopReason.DEGENERATE
            continue
        direction = directions[row]
        if s.previous is not None:
            if np.dot(direction, s.previous) < 0:
                direction = -direction
            if turn_exceeds(s.previous, direction, config):
                s.stop = StopReason.ANGLE
                continue
        s.points.append(s.points[-1] + config.step_alpha * direction)
        s.directions.append(direction)
        s.previous = direction
        s.stop = check_stop(s, wm_mask, config)


def step(state: TrackState, model: OrientationModel, sh: ShVolume, wm_mask: np.ndarray,
         config: TrackerConfig) -> TrackState:
    advance([state], model, sh, wm_mask, config)
    return state


def propagate(states: Sequence[TrackState], model: OrientationModel, sh: ShVolume, wm_mask: np.ndarray,
              config: TrackerConfig) -> None:
    while any(s.running for s in states):
        advance(states, model, sh, wm_mask, config)


class BatchResult(NamedTuple):
    streamlines: List[np.ndarray]
    seed_indices: List[int]
    stop_reasons: Dict[str, int]
    discarded: int


def track_batch(seeds: np.ndarray, seed_indices: Sequence[int], model: OrientationModel, sh: ShVolume,
                wm_mask: np.ndarray, config: TrackerConfig, master_seed: int = 0) -> BatchResult:
    """Track one batch of seeds; per-seed rng streams are keyed by the global seed index."""
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 3)
    forward = [TrackState([seeds[i].copy()], stream(master_seed, "track", int(idx), 0))
               for i, idx in enumerate(seed_indices)]
    propagate(forward, model, sh, wm_mask, config)
    backward: List[Optional[TrackState]] = [None] * len(forward)
    if config.bidirectional:
        for i, (s, idx) in enumerate(zip(forward, seed_indices)):
            if s.directions:
                backward[i] = TrackState([seeds[i].copy()], stream(master_seed, "track", int(idx), 1),
                                         previous=-s.directions[0])
        propagate([b for b in backward if b is not None], model, sh, wm_mask, config)

    reasons: Counter = Counter()
    streamlines, kept = [], []
    discarded = 0
    for i, idx in enumerate(seed_indices):
        points = forward[i].points
        reasons[forward[i].stop.value] += 1
        if backward[i] is not None:
            reasons[backward[i].stop.value] += 1
            points = backward[i].points[:0:-1] + points
        if len(points) < config.min_points:
            discarded += 1
            continue
        streamlines.append(np.asarray(points))
        kept.append(int(idx))
    return BatchResult(streamlines, kept, dict(reasons), discarded)


class TrackingResult(NamedTuple):
    tractogram: Tractogram
    seed_indices: List[int]
    stop_reasons: Dict[str, int]
    discarded: int


def merge_batches(results: Sequence[BatchResult], voxel_size) -> TrackingResult:
    streamlines, indices = [], []
    reasons: Counter = Counter()
    discarded = 0
    for r in results:
        streamlines.extend(r.streamlines)
        indices.extend(r.seed_indices)
        reasons.update(r.stop_reasons)
        discarded += r.discarded
    if discarded:
        logger.info(f"Discarded {discarded} streamlines shorter than the minimum length")
    return TrackingResult(Tractogram(streamlines, None, voxel_size), indices, dict(reasons), discarded)


def partition(n: int, batch_size: int) -> List[np.ndarray]:
    return [np.arange(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]


def track(seeds: np.ndarray, model: OrientationModel, sh: ShVolume, wm_mask: np.ndarray, config: TrackerConfig,
          master_seed: int = 0, batch_size: int = 64) -> TrackingResult:
    """Sequential whole-seed-list tracking; batch_size fixes the lock-step partition."""
    wm_mask = np.asarray(wm_mask, dtype=bool)
    if wm_mask.shape != sh.dims:
        raise InputError(f"Mask grid {wm_mask.shape} does not match SH grid {sh.dims}")
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 3)
    results = [track_batch(seeds[idx], idx, model, sh, wm_mask, config, master_seed)
               for idx in partition(seeds.shape[0], batch_size)]
    return merge_batches(results, sh.voxel_size.copy())
