import asyncio
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import List

import numpy as np
from tqdm.asyncio import tqdm

from dmri.sh_signal import ShVolume
from tracking.tracker import (BatchResult, OrientationModel, TrackerConfig, TrackingResult, merge_batches,
                              partition, track_batch)
from utils.errors import InputError

logger = logging.getLogger(__name__)


def _track_job(seeds, seed_indices, model, sh, wm_mask, config, master_seed) -> dict:
    """Worker entry point; failures come back as records instead of raising across the pool."""
    try:
        result = track_batch(seeds, seed_indices, model, sh, wm_mask, config, master_seed)
        return {"success": True, "result": result, "first_seed": int(seed_indices[0])}
    except Exception as e:
        return {"success": False, "error": f"{type(e).__name__}: {e}", "first_seed": int(seed_indices[0])}


async def track_batches_async(seeds: np.ndarray, model: OrientationModel, sh: ShVolume, wm_mask: np.ndarray,
                              config: TrackerConfig, master_seed: int, workers: int = 1,
                              batch_size: int = 64) -> List[dict]:
    """
    Fan the fixed seed partition out over `workers` processes. Results come back
    in partition order whatever the completion order.
    """
    batches = partition(seeds.shape[0], batch_size)
    loop = asyncio.get_running_loop()
    if workers <= 1:
        results = []
        for idx in tqdm(batches, desc="Tracking", unit="batch"):
            results.append(_track_job(seeds[idx], idx, model, sh, wm_mask, config, master_seed))
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        tasks = [loop.run_in_executor(pool, _track_job, seeds[idx], idx, model, sh, wm_mask, config, master_seed)
                 for idx in batches]
        return await tqdm.gather(*tasks, desc="Tracking", unit="batch")


def track_parallel(seeds: np.ndarray, model: OrientationModel, sh: ShVolume, wm_mask: np.ndarray,
                   config: TrackerConfig, master_seed: int = 0, workers: int = 1,
                   batch_size: int = 64) -> TrackingResult:
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 3)
    wm_mask = np.asarray(wm_mask, dtype=bool)
    if wm_mask.shape != sh.dims:
        raise InputError(f"Mask grid {wm_mask.shape} does not match SH grid {sh.dims}")
    records = asyncio.run(track_batches_async(seeds, model, sh, wm_mask, config,
                                              master_seed, workers, batch_size))
    successes: List[BatchResult] = [r["result"] for r in records if r["success"]]
    failures = [r for r in records if not r["success"]]
    logger.info(f"Tracking complete. Batches succeeded: {len(successes)}, failed: {len(failures)}")
    for failure in failures:
        logger.error(f"Batch starting at seed {failure['first_seed']} failed: {failure['error']}")
    return merge_batches(successes, sh.voxel_size.copy())
