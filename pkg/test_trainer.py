import json

import numpy as np
import pytest

from config.run_config import TrainSection
from dmri.data_types import Tractogram
from models import tensor_autodiff as td
from models.network import OrientationNetwork
from models.trainer import (AdamW, EarlyStopping, PlateauScheduler, Trainer, TrainingDivergedError,
                            prepare_samples, split_streamlines)
from utils.errors import InputError


def _train_config(**overrides):
    values = dict(epochs=3, lr=1e-3, batch_size=4, val_fraction=0.0, include_reversed=True)
    values.update(overrides)
    return TrainSection(**values)


def test_prepare_samples_covers_both_directions(tiny_gt, tiny_sh):
    samples = prepare_samples(tiny_gt, tiny_sh, range(len(tiny_gt)))
    assert len(samples) == 2 * len(tiny_gt)
    forward, backward = samples[0], samples[1]
    assert not forward.reversed and backward.reversed
    assert len(forward) == len(tiny_gt.streamlines[0]) - 1
    assert forward.blocks.shape == (len(forward), 3, 3, 3, tiny_sh.m)
    np.testing.assert_allclose(np.linalg.norm(forward.targets, axis=1), 1.0)
    np.testing.assert_allclose(backward.targets, -forward.targets[::-1])


def test_prepare_samples_skips_single_point_streamlines(tiny_sh):
    tractogram = Tractogram([np.array([[5.0, 6.0, 6.0]]), np.array([[5.0, 6.0, 6.0], [6.0, 6.0, 6.0]])])
    samples = prepare_samples(tractogram, tiny_sh, [0, 1], include_reversed=False)
    assert [s.streamline_id for s in samples] == [1]


def test_split_is_seeded_and_disjoint():
    train, val = split_streamlines(10, 0.2, seed=3)
    assert len(val) == 2 and len(train) == 8
    assert not set(train) & set(val)
    again = split_streamlines(10, 0.2, seed=3)
    np.testing.assert_array_equal(train, again[0])
    train, val = split_streamlines(10, 0.5, seed=3, max_streamlines=4)
    assert len(train) + len(val) == 4


def test_adamw_first_step_moves_by_learning_rate():
    p = td.parameter([1.0, -2.0])
    optimizer = AdamW({"p": p}, lr=0.1, weight_decay=0.0, eps=0.0)
    optimizer.step({"p": np.array([2.0, -0.5])})
    np.testing.assert_allclose(p.data, [0.9, -1.9])


def test_adamw_decoupled_weight_decay():
    p = td.parameter([1.0])
    optimizer = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    optimizer.step({"p": np.array([0.0])})
    np.testing.assert_allclose(p.data, [0.95])


def test_plateau_scheduler_waits_past_patience():
    optimizer = AdamW({"p": td.parameter([0.0])}, lr=1.0)
    scheduler = PlateauScheduler(factor=0.5, patience=2)
    for value in (1.0, 1.0, 1.0):
        scheduler.step(value, optimizer)
    assert optimizer.lr == 1.0
    scheduler.step(1.0, optimizer)
    assert optimizer.lr == 0.5


def test_early_stopping_keeps_best_weights(tiny_model_config):
    network = OrientationNetwork(tiny_model_config)
    stopper = EarlyStopping(patience=2)
    assert not stopper.step(1.0, 0, network)
    best = network.state_dict()
    network.parameters()["global.bias"].data[...] = 5.0
    assert not stopper.step(2.0, 1, network)
    assert stopper.step(2.0, 2, network)
    assert stopper.best_epoch == 0
    np.testing.assert_array_equal(stopper.best_params["global.bias"], best["global.bias"])


def test_empty_training_set_rejected(tiny_model_config):
    trainer = Trainer(OrientationNetwork(tiny_model_config), _train_config())
    with pytest.raises(InputError):
        trainer.run([])


def test_non_finite_loss_names_the_streamline(tiny_model_config, tiny_gt, tiny_sh):
    network = OrientationNetwork(tiny_model_config)
    network.parameters()["denoiser.head.bias"].data[...] = np.nan
    samples = prepare_samples(tiny_gt, tiny_sh, [4], include_reversed=False)
    trainer = Trainer(network, _train_config())
    with pytest.raises(TrainingDivergedError, match="streamline 4"):
        trainer.run(samples)


def test_training_logs_every_epoch(tiny_model_config, tiny_gt, tiny_sh):
    samples = prepare_samples(tiny_gt, tiny_sh, range(6))
    val = prepare_samples(tiny_gt, tiny_sh, range(6, 8))
    trainer = Trainer(OrientationNetwork(tiny_model_config), _train_config(), seed=1)
    result = trainer.run(samples, val)
    assert [r.epoch for r in result.log] == [0, 1, 2]
    assert all(np.isfinite(r.train) and np.isfinite(r.val) for r in result.log)
    assert result.finished and not result.stopped_early


def test_resumed_training_matches_uninterrupted(tiny_model_config, tiny_gt, tiny_sh):
    samples = prepare_samples(tiny_gt, tiny_sh, range(5))
    config = _train_config(epochs=3)

    straight = Trainer(OrientationNetwork(tiny_model_config, seed=2), config, seed=5)
    straight.run(samples)

    first = Trainer(OrientationNetwork(tiny_model_config, seed=2), config, seed=5)
    partial = first.run(samples, stop_after=1)
    assert not partial.finished
    state, arrays = first.state()
    state = json.loads(json.dumps(state))

    resumed = Trainer(OrientationNetwork(tiny_model_config, seed=9), config, seed=5)
    resumed.load_state(state, arrays)
    result = resumed.run(samples)
    assert result.finished
    assert [r.train for r in result.log] == [r.train for r in straight.log]
    for name, p in straight.network.parameters().items():
        np.testing.assert_array_equal(resumed.network.parameters()[name].data, p.data)


def test_regression_variant_trains(tiny_model_config, tiny_gt, tiny_sh):
    network = OrientationNetwork(tiny_model_config.model_copy(update={"variant": "regression"}))
    samples = prepare_samples(tiny_gt, tiny_sh, range(4), include_reversed=False)
    result = Trainer(network, _train_config(epochs=20, lr=1e-2, weight_decay=0.0)).run(samples)
    assert result.log[-1].train < result.log[0].train


@pytest.mark.slow
def test_denoiser_overfits_a_small_bundle(tiny_model_config, tiny_gt, tiny_sh):
    samples = prepare_samples(tiny_gt, tiny_sh, range(len(tiny_gt)), include_reversed=False)
    config = _train_config(epochs=200, lr=1e-2, batch_size=2, weight_decay=0.0,
                           plateau_patience=1000, early_stop_patience=1000)
    result = Trainer(OrientationNetwork(tiny_model_config), config, seed=0).run(samples)
    tail = np.mean([r.train for r in result.log[-5:]])
    assert tail <= 0.1 * result.log[0].train
