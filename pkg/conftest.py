import numpy as np
import pytest

from config.run_config import ModelConfig, RunConfig
from dmri.phantom import (default_gradient_scheme, generate_gt_tractogram, load_phantom_spec, phantom_from_spec,
                          simulate_dwi)
from dmri.sh_signal import ShBasisConfig, fit_sh


class ConstantModel:
    """Orientation model that always proposes the same vector; tracking tests use it as an oracle."""

    def __init__(self, direction, hidden: int = 2):
        self.direction = np.asarray(direction, dtype=np.float64)
        self.hidden = hidden

    def init_temporal_state(self, n):
        return (np.zeros((n, self.hidden)),)

    def condition(self, blocks, state):
        n = blocks.shape[0]
        return np.zeros((n, 1)), np.zeros((n, 0)), tuple(h + 1.0 for h in state)

    def propose(self, c, local, sampler, rngs=None):
        return np.tile(self.direction, (c.shape[0], 1))


@pytest.fixture(scope="session")
def scheme():
    return default_gradient_scheme()


@pytest.fixture
def tiny_phantom():
    return phantom_from_spec(load_phantom_spec("tiny"))


@pytest.fixture
def tiny_gt(tiny_phantom):
    return generate_gt_tractogram(tiny_phantom, step=1.0, streamlines_per_bundle=10, seed=0).tractogram


@pytest.fixture
def tiny_sh(tiny_phantom, scheme):
    dwi = simulate_dwi(tiny_phantom, scheme, snr=None)
    return fit_sh(dwi, config=ShBasisConfig(l_max=2))


@pytest.fixture
def tiny_model_config():
    return ModelConfig(sh_coeffs=6, conv_channels=(4, 8), embed_dim=8, hidden_dim=16, gru_layers=2,
                       step_embed_dim=8, global_dim=8, denoiser_channels=8, denoiser_mid_channels=16,
                       blocks_per_side=1, norm_groups=4)


@pytest.fixture
def tiny_run_config(tiny_model_config):
    """End-to-end preset on the tiny phantom: small model, short training and tracking."""
    return RunConfig.model_validate({
        "seed": 7,
        "phantom": {"template": "tiny", "snr": None, "streamlines_per_bundle": 10},
        "sh": {"l_max": 2},
        "model": tiny_model_config.model_dump(),
        "train": {"epochs": 3, "batch_size": 4, "lr": 1e-3},
        "track": {"seeds_per_voxel": 1, "max_steps": 40, "batch_size": 16},
    })


@pytest.fixture
def constant_model():
    return ConstantModel
