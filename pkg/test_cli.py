import csv
import json
import os

import numpy as np
import pytest

from dmri.data_types import Tractogram
from main import main
from utils.constants import EXIT_INPUT_ERROR, EXIT_OK, PHANTOM_FILES
from utils.tck_io import read_tck, read_tractogram, write_tractogram
from utils.volume_io import read_volume


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("phantom"))
    assert main(["phantom", "--out", out, "--template", "tiny", "--noiseless", "--seed", "1"]) == EXIT_OK
    return out


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _loss_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_phantom_writes_its_directory(phantom_dir):
    for key, name in PHANTOM_FILES.items():
        if key != "sh":
            assert os.path.exists(os.path.join(phantom_dir, name)), name
    assert os.path.exists(os.path.join(phantom_dir, "dwi.raw"))
    manifest = _read_json(os.path.join(phantom_dir, "manifest.json"))
    assert manifest["command"] == "phantom"
    assert manifest["config"]["seed"] == 1
    assert manifest["config"]["phantom"]["snr"] is None
    assert manifest["ground_truth"]["accepted"]["straight"] > 0
    assert os.listdir(os.path.join(phantom_dir, "logs"))


def test_fit_sh(phantom_dir, tmp_path):
    out = str(tmp_path / "sh.json")
    assert main(["fit-sh", os.path.join(phantom_dir, PHANTOM_FILES["dwi"]), out, "--lmax", "2"]) == EXIT_OK
    sh = read_volume(out).as_sh()
    assert sh.m == 6 and sh.dims == (16, 12, 12)
    assert _read_json(str(tmp_path / "manifest.json"))["config"]["sh"]["l_max"] == 2


@pytest.mark.parametrize("name", [PHANTOM_FILES["gt_native"], PHANTOM_FILES["gt_tck"]])
def test_ground_truth_evaluates_as_valid(phantom_dir, tmp_path, name):
    out = str(tmp_path / "eval")
    assert main(["eval", os.path.join(phantom_dir, name), phantom_dir, "--out", out]) == EXIT_OK
    report = _read_json(os.path.join(out, "metrics.json"))
    assert report["connections"]["vc"] == 1.0
    assert report["bundles"][0]["ol"] == 1.0
    assert os.path.exists(os.path.join(out, "metrics.csv"))


@pytest.mark.parametrize("line", [
    [[1.0, 6.0, 6.0], [20.0, 6.0, 6.0], [30.0, 6.0, 6.0]],
    [[1.0, 6.0, 6.0], [2.0, 6.0, 6.0], [40.0, 6.0, 6.0]],
])
def test_tractogram_from_another_grid_exits_with_input_error(phantom_dir, tmp_path, line):
    path = str(tmp_path / "wide.json")
    write_tractogram(path, Tractogram([np.array(line)], None, (2.0, 2.0, 2.0)))
    assert main(["eval", path, phantom_dir, "--out", str(tmp_path / "eval")]) == EXIT_INPUT_ERROR


def test_end_point_one_step_past_the_grid_is_accepted(phantom_dir, tmp_path):
    path = str(tmp_path / "edge.json")
    write_tractogram(path, Tractogram([np.array([[8.0, 6.0, 6.0], [15.5, 6.0, 6.0], [16.4, 6.0, 6.0]])],
                                      None, (2.0, 2.0, 2.0)))
    assert main(["eval", path, phantom_dir, "--out", str(tmp_path / "eval")]) == EXIT_OK


def test_export_to_tck(phantom_dir, tmp_path):
    source = os.path.join(phantom_dir, PHANTOM_FILES["gt_native"])
    out = str(tmp_path / "gt.tck")
    assert main(["export", source, out]) == EXIT_OK
    exported = read_tck(out)
    assert len(exported) == len(read_tractogram(source))
    assert exported.voxel_size.tolist() == [2.0, 2.0, 2.0]


def test_missing_input_exits_with_input_error(tmp_path):
    assert main(["fit-sh", str(tmp_path / "absent.json"), str(tmp_path / "sh.json")]) == EXIT_INPUT_ERROR


@pytest.mark.parametrize("payload", [{"track": {"angle": 270}}, {"sh": {"l_max": 3}}, {"unknown": 1}])
def test_invalid_config_exits_with_input_error(phantom_dir, tmp_path, payload):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(payload))
    dwi = os.path.join(phantom_dir, PHANTOM_FILES["dwi"])
    assert main(["fit-sh", dwi, str(tmp_path / "sh.json"), "--config", str(config)]) == EXIT_INPUT_ERROR


def test_odd_lmax_flag_exits_with_input_error(phantom_dir, tmp_path):
    dwi = os.path.join(phantom_dir, PHANTOM_FILES["dwi"])
    assert main(["fit-sh", dwi, str(tmp_path / "sh.json"), "--lmax", "3"]) == EXIT_INPUT_ERROR


@pytest.mark.slow
def test_train_track_eval_and_resume(phantom_dir, tmp_path, tiny_run_config):
    config = tmp_path / "run.json"
    payload = tiny_run_config.model_dump(mode="json")
    payload["track"]["max_steps"] = 8
    config.write_text(json.dumps(payload))

    train_out = str(tmp_path / "train")
    assert main(["train", phantom_dir, train_out, "--config", str(config), "--epochs", "2"]) == EXIT_OK
    assert os.path.exists(os.path.join(phantom_dir, PHANTOM_FILES["sh"]))
    checkpoint = os.path.join(train_out, "checkpoint.json")
    assert [r["epoch"] for r in _loss_rows(os.path.join(train_out, "loss_log.csv"))] == ["0", "1"]

    track_out = str(tmp_path / "track")
    assert main(["track", checkpoint, os.path.join(phantom_dir, PHANTOM_FILES["sh"]),
                 os.path.join(phantom_dir, PHANTOM_FILES["wm_mask"]), "--out", track_out,
                 "--config", str(config)]) == EXIT_OK
    tractogram = read_tractogram(os.path.join(track_out, "tractogram.json"))
    assert len(read_tck(os.path.join(track_out, "tractogram.tck"))) == len(tractogram)
    tracking = _read_json(os.path.join(track_out, "manifest.json"))["tracking"]
    assert tracking["streamlines"] == len(tractogram)

    eval_out = str(tmp_path / "eval")
    assert main(["eval", os.path.join(track_out, "tractogram.json"), phantom_dir, "--out", eval_out,
                 "--config", str(config)]) == EXIT_OK
    connections = _read_json(os.path.join(eval_out, "metrics.json"))["connections"]
    assert connections["vc"] + connections["ic"] + connections["nc"] == pytest.approx(
        1.0 if len(tractogram) else 0.0)

    resumed_out = str(tmp_path / "resumed")
    assert main(["train", phantom_dir, resumed_out, "--config", str(config), "--epochs", "3",
                 "--resume", checkpoint]) == EXIT_OK
    assert [r["epoch"] for r in _loss_rows(os.path.join(resumed_out, "loss_log.csv"))] == ["0", "1", "2"]
