import csv
import logging
from typing import Any, Dict, List

import numpy as np

from dmri.data_types import Tractogram
from evaluation.metrics import (ENDPOINT_LOOKBACK, IC, NC, VC, RoiSet, classify_connections, visitation_mask,
                                volume_scores, weighted_dice)
from utils.file_utils import write_json

logger = logging.getLogger(__name__)

CSV_FIELDS = ["bundle", "vc_count", "ol", "or", "f1", "dice", "wdice"]


def evaluate_tractogram(tractogram: Tractogram, rois: RoiSet, gt_tractogram: Tractogram,
                        bundle_wdice: bool = True, endpoint_lookback: int = ENDPOINT_LOOKBACK) -> Dict[str, Any]:
    """
    Score a tractogram against phantom ground truth.

    Ground-truth bundle volumes are the voxels visited by the ground-truth
    streamlines of each bundle; reconstructed volumes use the VC streamlines
    matched to that bundle.
    """
    dims = rois.dims
    warnings: List[str] = []
    if len(tractogram) == 0:
        warnings.append("empty tractogram")
        logger.warning("Evaluating an empty tractogram; all scores are 0")
    connections = classify_connections(tractogram, rois, endpoint_lookback)
    gt_masks = np.stack([visitation_mask(gt_tractogram.bundle(name).streamlines, dims) for name in rois.names])
    by_bundle = {name: [tractogram.streamlines[i] for i in idx] for name, idx in connections.valid.items()}
    volumes = volume_scores(by_bundle, gt_masks, rois.names)

    bundles = []
    for name in rois.names:
        score = volumes.bundles[name]
        record = {
            "bundle": name,
            "vc_count": len(connections.valid[name]),
            "ol": score.ol,
            "or": score.or_,
            "f1": score.f1,
            "dice": score.f1,
            "reconstructed_voxels": score.reconstructed_voxels,
            "gt_voxels": score.gt_voxels,
        }
        if bundle_wdice:
            record["wdice"] = weighted_dice(by_bundle[name], gt_tractogram.bundle(name).streamlines, dims)
            if not by_bundle[name]:
                warnings.append(f"bundle '{name}' has no valid streamlines")
        bundles.append(record)

    n = len(tractogram)
    report = {
        "streamlines": n,
        "connections": {
            "vc": connections.vc_fraction,
            "ic": connections.ic_fraction,
            "nc": connections.nc_fraction,
            "counts": {label: connections.labels.count(label) for label in (VC, IC, NC)},
        },
        "bundles": bundles,
        "mean": {key: float(np.mean([b[key] for b in bundles])) if bundles else 0.0
                 for key in ("ol", "or", "f1", "dice") + (("wdice",) if bundle_wdice else ())},
        "warnings": warnings,
    }
    logger.info(f"VC {report['connections']['vc']:.3f}, IC {report['connections']['ic']:.3f}, "
                f"NC {report['connections']['nc']:.3f}, mean OL {report['mean']['ol']:.3f}")
    return report


def write_reports(report: Dict[str, Any], json_path: str, csv_path: str) -> None:
    write_json(json_path, report)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for record in report["bundles"]:
            writer.writerow(record)
        writer.writerow({"bundle": "mean", "vc_count": report["connections"]["counts"][VC], **report["mean"]})
    logger.info(f"Wrote evaluation reports to {json_path} and {csv_path}")
