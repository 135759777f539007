import os
import csv
import time
import logging
from typing import Dict, Optional, Tuple

import numpy as np

from config.run_config import ModelConfig, RunConfig
from dmri.data_types import Tractogram
from dmri.phantom import (TensorModelParams, default_gradient_scheme, generate_gt_tractogram, load_phantom_spec,
                          phantom_from_spec, simulate_dwi)
from dmri.sh_signal import ShBasisConfig, ShVolume, fit_sh
from evaluation.metrics import RoiSet
from evaluation.reports import evaluate_tractogram, write_reports
from models.diffusion import SamplerConfig
from models.network import OrientationNetwork
from models.trainer import Trainer, prepare_samples, split_streamlines
from processing.batch_processor import track_parallel
from tracking.tracker import TrackerConfig, seed_points
from utils.checkpoint_io import Checkpoint, load_checkpoint, save_checkpoint
from utils.constants import PHANTOM_FILES
from utils.errors import InputError
from utils.file_utils import ensure_dir, write_json, write_manifest
from utils.rng import stream
from utils.tck_io import load_any_tractogram, read_tractogram, write_tck, write_tractogram
from utils.volume_io import (dwi_container, labels_container, mask_container, read_volume, sh_container,
                             write_volume)

logger = logging.getLogger(__name__)

SH_FILE = PHANTOM_FILES['sh']
CHECKPOINT_FILE = "checkpoint.json"
LOSS_LOG_FILE = "loss_log.csv"


def cmd_phantom(config: RunConfig, output_folder: str) -> Dict[str, str]:
    """Build the phantom, simulate DWI, integrate ground truth, and write everything to output_folder."""
    start = time.perf_counter()
    ensure_dir(output_folder)
    pc = config.phantom
    seed = config.master_seed
    spec = load_phantom_spec(pc.template, bundles=pc.bundles, dims=pc.dims, voxel_size=pc.voxel_size,
                             roi_radius=pc.roi_radius)
    phantom = phantom_from_spec(spec)
    logger.info(f"Phantom {phantom.dims} with bundles {phantom.bundle_names}")

    scheme = default_gradient_scheme(pc.n_directions, pc.n_b0, pc.bvalue)
    params = TensorModelParams(pc.lambda_parallel, pc.lambda_perp, pc.s0)
    dwi = simulate_dwi(phantom, scheme, params, pc.snr, seed)
    gt = generate_gt_tractogram(phantom, pc.gt_step, pc.streamlines_per_bundle, seed, pc.seed_jitter)
    phantom.gt_tractogram = gt.tractogram

    paths = {key: os.path.join(output_folder, name) for key, name in PHANTOM_FILES.items() if key != 'sh'}
    names = phantom.bundle_names
    write_volume(paths['dwi'], dwi_container(dwi))
    write_volume(paths['wm_mask'], mask_container(phantom.wm_mask, phantom.voxel_size))
    write_volume(paths['bundle_masks'], labels_container(phantom.bundle_masks, names, phantom.voxel_size))
    roi_masks = np.concatenate([phantom.head_rois, phantom.tail_rois])
    roi_names = [f"{n}:head" for n in names] + [f"{n}:tail" for n in names]
    write_volume(paths['rois'], labels_container(roi_masks, roi_names, phantom.voxel_size))
    write_tck(paths['gt_tck'], gt.tractogram)
    write_tractogram(paths['gt_native'], gt.tractogram)
    write_json(paths['phantom'], {
        "spec": spec.model_dump(mode="json"),
        "bundles": names,
        "accepted": gt.accepted,
        "discarded": gt.discarded,
    })
    write_manifest(output_folder, "phantom", config.effective(), [], time.perf_counter() - start,
                   {"ground_truth": {"accepted": gt.accepted, "discarded": gt.discarded}})
    return paths


def load_phantom_dir(phantom_folder: str) -> Tuple[RoiSet, Tractogram, np.ndarray]:
    """ROIs, ground-truth tractogram and voxel size of a phantom output folder."""
    rois_container = read_volume(os.path.join(phantom_folder, PHANTOM_FILES['rois']))
    masks, roi_names = rois_container.as_label_masks()
    half = len(roi_names) // 2
    names = [n.rsplit(":", 1)[0] for n in roi_names[:half]]
    if roi_names != [f"{n}:head" for n in names] + [f"{n}:tail" for n in names]:
        raise InputError(f"ROI labels {roi_names} are not head/tail pairs")
    rois = RoiSet(names, masks[:half], masks[half:])
    gt = read_tractogram(os.path.join(phantom_folder, PHANTOM_FILES['gt_native']))
    return rois, gt, rois_container.voxel_size


def cmd_fit_sh(config: RunConfig, dwi_path: str, out_path: str) -> str:
    start = time.perf_counter()
    output_folder = ensure_dir(os.path.dirname(os.path.abspath(out_path)))
    dwi = read_volume(dwi_path).as_dwi()
    sh = fit_sh(dwi, config=ShBasisConfig(config.sh.l_max), reg=config.sh.reg, b0_floor=config.sh.b0_floor)
    write_volume(out_path, sh_container(sh))
    write_manifest(output_folder, "fit-sh", config.effective(), [dwi_path], time.perf_counter() - start)
    return out_path


def _training_sh(config: RunConfig, data_folder: str) -> Tuple[ShVolume, str]:
    sh_path = os.path.join(data_folder, SH_FILE)
    if not os.path.exists(sh_path):
        logger.info(f"No {SH_FILE} in {data_folder}; fitting from {PHANTOM_FILES['dwi']}")
        dwi = read_volume(os.path.join(data_folder, PHANTOM_FILES['dwi'])).as_dwi()
        sh = fit_sh(dwi, config=ShBasisConfig(config.sh.l_max), reg=config.sh.reg, b0_floor=config.sh.b0_floor)
        write_volume(sh_path, sh_container(sh))
    # read back: stored coefficients are float32
    return read_volume(sh_path).as_sh(), sh_path


def network_from_checkpoint(checkpoint: Checkpoint) -> OrientationNetwork:
    model_config = ModelConfig.model_validate(checkpoint.model_config)
    network = OrientationNetwork(model_config, checkpoint.seed)
    network.load_state_dict(checkpoint.parameters)
    return network


def _write_loss_log(path: str, log) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train", "val", "lr"])
        for record in log:
            writer.writerow([record.epoch, repr(record.train), "" if record.val is None else repr(record.val),
                             repr(record.lr)])


def cmd_train(config: RunConfig, data_folder: str, output_folder: str, resume: Optional[str] = None) -> Dict[str, str]:
    start = time.perf_counter()
    ensure_dir(output_folder)
    seed = config.master_seed
    sh, sh_path = _training_sh(config, data_folder)
    gt_path = os.path.join(data_folder, PHANTOM_FILES['gt_native'])
    gt = read_tractogram(gt_path)
    if len(gt) == 0:
        raise InputError(f"No training streamlines in {gt_path}")
    if config.model.sh_coeffs != sh.m:
        logger.info(f"Model input width set to {sh.m} SH coefficients")
        config = config.with_overrides("model", sh_coeffs=sh.m)

    tc = config.train
    train_ids, val_ids = split_streamlines(len(gt), tc.val_fraction, seed, tc.max_streamlines)
    train_set = prepare_samples(gt, sh, train_ids, tc.include_reversed)
    val_set = prepare_samples(gt, sh, val_ids, tc.include_reversed)
    if not train_set:
        raise InputError("Training set is empty after preparing samples")
    logger.info(f"Training on {len(train_set)} sequences, validating on {len(val_set)}")

    network = OrientationNetwork(config.model, seed)
    trainer = Trainer(network, tc, seed)
    if resume is not None:
        checkpoint = load_checkpoint(resume)
        if checkpoint.model_config != config.model.model_dump(mode="json"):
            raise InputError(f"Checkpoint {resume} was trained with a different model config")
        if checkpoint.training_state is None:
            raise InputError(f"Checkpoint {resume} holds no training state to resume from")
        trainer.load_state(checkpoint.training_state, checkpoint.training_arrays)
        logger.info(f"Resuming from epoch {trainer.epoch}")

    result = trainer.run(train_set, val_set)
    state, arrays = trainer.state()
    final = trainer.best_parameters() if result.finished else network.state_dict()
    checkpoint = Checkpoint(
        model_config=config.model.model_dump(mode="json"),
        parameters=final,
        training_state=state,
        training_arrays=arrays,
        log_tail=[r._asdict() for r in result.log[-tc.log_tail:]] if tc.log_tail else [],
        seed=seed,
    )
    paths = {"checkpoint": os.path.join(output_folder, CHECKPOINT_FILE),
             "loss_log": os.path.join(output_folder, LOSS_LOG_FILE)}
    save_checkpoint(paths["checkpoint"], checkpoint)
    _write_loss_log(paths["loss_log"], result.log)
    write_manifest(output_folder, "train", config.effective(), [sh_path, gt_path, resume],
                   time.perf_counter() - start,
                   {"training": {"epochs": trainer.epoch, "best_epoch": result.best_epoch,
                                 "stopped_early": result.stopped_early}})
    return paths


def tracker_config(config: RunConfig) -> TrackerConfig:
    t = config.track
    return TrackerConfig(step_alpha=t.step, seeds_per_voxel=t.seeds_per_voxel, angle_threshold_deg=t.angle,
                         max_steps=t.max_steps, bidirectional=t.bidirectional, min_points=t.min_points,
                         sampler=SamplerConfig(t.num_steps, t.deterministic))


def cmd_track(config: RunConfig, checkpoint_path: str, sh_path: str, mask_path: str,
              output_folder: str) -> Dict[str, str]:
    start = time.perf_counter()
    ensure_dir(output_folder)
    seed = config.master_seed
    network = network_from_checkpoint(load_checkpoint(checkpoint_path))
    sh = read_volume(sh_path).as_sh()
    mask = read_volume(mask_path).as_mask()
    if mask.shape != sh.dims:
        raise InputError(f"Mask grid {mask.shape} does not match SH grid {sh.dims}")
    if sh.m != network.config.sh_coeffs:
        raise InputError(f"SH volume has {sh.m} coefficients, the model expects {network.config.sh_coeffs}")

    tconfig = tracker_config(config)
    seeds = seed_points(mask, tconfig.seeds_per_voxel, stream(seed, "seeds"))
    logger.info(f"Tracking from {len(seeds)} seeds with {config.track.workers} worker(s)")
    result = track_parallel(seeds, network, sh, mask, tconfig, seed, config.track.workers, config.track.batch_size)

    paths = {"tractogram": os.path.join(output_folder, "tractogram.json"),
             "tck": os.path.join(output_folder, "tractogram.tck")}
    write_tractogram(paths["tractogram"], result.tractogram)
    write_tck(paths["tck"], result.tractogram)
    write_manifest(output_folder, "track", config.effective(), [checkpoint_path, sh_path, mask_path],
                   time.perf_counter() - start,
                   {"tracking": {"seeds": int(len(seeds)), "streamlines": len(result.tractogram),
                                 "discarded": result.discarded, "stop_reasons": result.stop_reasons}})
    return paths


def check_tractogram_grid(tractogram: Tractogram, dims, endpoint_margin: float) -> None:
    """
    Interior points must lie in [0, dims). End points may overshoot by
    `endpoint_margin` voxels, which is where a mask-exit step lands.
    """
    high = np.asarray(dims, dtype=np.float64)
    for i, line in enumerate(tractogram):
        interior = line[1:-1]
        ends = line[[0, -1]]
        if (np.any(interior < 0) or np.any(interior >= high)
                or np.any(ends < -endpoint_margin) or np.any(ends >= high + endpoint_margin)):
            raise InputError(f"Streamline {i} leaves the phantom grid {tuple(int(d) for d in dims)}; "
                             f"the tractogram was built on a different grid")


def cmd_eval(config: RunConfig, tractogram_path: str, phantom_folder: str, output_folder: str) -> Dict[str, str]:
    start = time.perf_counter()
    ensure_dir(output_folder)
    rois, gt, voxel_size = load_phantom_dir(phantom_folder)
    tractogram = load_any_tractogram(tractogram_path)
    if not np.allclose(tractogram.voxel_size, voxel_size):
        raise InputError(f"Tractogram voxel size {tractogram.voxel_size.tolist()} does not match the phantom grid "
                         f"{voxel_size.tolist()}")
    check_tractogram_grid(tractogram, rois.dims, config.track.step)
    report = evaluate_tractogram(tractogram, rois, gt, config.eval.bundle_wdice, config.eval.endpoint_lookback)
    paths = {"json": os.path.join(output_folder, "metrics.json"),
             "csv": os.path.join(output_folder, "metrics.csv")}
    write_reports(report, paths["json"], paths["csv"])
    write_manifest(output_folder, "eval", config.effective(),
                   [tractogram_path, os.path.join(phantom_folder, PHANTOM_FILES['rois']),
                    os.path.join(phantom_folder, PHANTOM_FILES['gt_native'])],
                   time.perf_counter() - start)
    return paths


def cmd_export(config: RunConfig, tractogram_path: str, out_path: str) -> str:
    start = time.perf_counter()
    output_folder = ensure_dir(os.path.dirname(os.path.abspath(out_path)))
    write_tck(out_path, read_tractogram(tractogram_path))
    write_manifest(output_folder, "export", config.effective(), [tractogram_path], time.perf_counter() - start)
    return out_path
