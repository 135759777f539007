"""
Run configuration: one JSON document with sections phantom, sh, model, train,
track and eval plus a master `seed`. Every field has a default; unknown keys
are rejected. Values are layered CLI > file > DDTRACK_SEED (seed only) > default.
"""
import json
import logging
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config.settings import DDTRACK_SEED, DDTRACK_WORKERS, TRACK_BATCH_SIZE
from dmri.phantom import BundleSpec
from utils.errors import InputError

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PhantomSection(_Section):
    template: str = "default"
    bundles: Optional[List[BundleSpec]] = None  # replaces the template's bundles
    dims: Optional[Tuple[int, int, int]] = None
    voxel_size: Optional[Tuple[float, float, float]] = None
    roi_radius: Optional[float] = Field(default=None, gt=0)
    snr: Optional[float] = Field(default=20.0, gt=0)
    lambda_parallel: float = 1.7e-3
    lambda_perp: float = 0.3e-3
    s0: float = Field(default=1000.0, gt=0)
    n_directions: int = Field(default=32, ge=6)
    n_b0: int = Field(default=2, ge=1)
    bvalue: float = Field(default=1000.0, gt=0)
    gt_step: float = Field(default=1.0, gt=0)
    streamlines_per_bundle: int = Field(default=100, ge=1)
    seed_jitter: float = Field(default=1.0, ge=0)


class ShSection(_Section):
    l_max: int = 6
    reg: float = Field(default=0.0, ge=0)
    b0_floor: float = Field(default=1e-6, gt=0)

    @model_validator(mode="after")
    def _even(self):
        if self.l_max < 0 or self.l_max % 2:
            raise ValueError(f"l_max must be a non-negative even integer, got {self.l_max}")
        return self


class ModelConfig(_Section):
    """Network shape. Defaults are the full-size plan; tests shrink the widths."""
    variant: Literal["full", "no_local", "regression"] = "full"
    sh_coeffs: int = Field(default=28, ge=1)
    conv_channels: Tuple[int, int] = (32, 64)
    embed_dim: int = Field(default=192, ge=1)
    hidden_dim: int = Field(default=512, ge=1)
    gru_layers: int = Field(default=2, ge=1)
    step_embed_dim: int = Field(default=64, ge=2)
    global_dim: int = Field(default=256, ge=1)
    denoiser_channels: int = Field(default=64, ge=2)
    denoiser_mid_channels: int = Field(default=128, ge=2)
    blocks_per_side: int = Field(default=3, ge=0)
    norm_groups: int = Field(default=8, ge=1)
    smooth_l1_beta: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _shapes(self):
        if self.step_embed_dim % 2:
            raise ValueError(f"step_embed_dim must be even, got {self.step_embed_dim}")
        for name in ("denoiser_channels", "denoiser_mid_channels"):
            channels = getattr(self, name)
            if channels % self.norm_groups or channels // self.norm_groups < 2:
                raise ValueError(f"{name}={channels} needs at least 2 channels per each of {self.norm_groups} groups")
        return self


class TrainSection(_Section):
    epochs: int = Field(default=1000, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0)
    batch_size: int = Field(default=8, ge=1)
    val_fraction: float = Field(default=0.2, ge=0, lt=1)
    include_reversed: bool = True
    plateau_factor: float = Field(default=0.1, gt=0, lt=1)
    plateau_patience: int = Field(default=50, ge=1)
    min_lr: float = Field(default=1e-7, ge=0)
    early_stop_patience: int = Field(default=120, ge=1)
    k_min: float = Field(default=0.02, gt=0, lt=1)
    k_max: float = Field(default=0.98, gt=0, lt=1)
    max_streamlines: Optional[int] = Field(default=None, ge=1)
    log_tail: int = Field(default=20, ge=0)

    @model_validator(mode="after")
    def _k_range(self):
        if self.k_min >= self.k_max:
            raise ValueError(f"k_min {self.k_min} must be below k_max {self.k_max}")
        return self


class TrackSection(_Section):
    seeds_per_voxel: int = Field(default=5, ge=1)
    step: float = Field(default=1.0, gt=0)
    angle: float = Field(default=45.0, gt=0, lt=180)
    max_steps: int = Field(default=500, ge=1)
    bidirectional: bool = True
    num_steps: int = Field(default=4, ge=1)
    deterministic: bool = True
    min_points: int = Field(default=3, ge=1)
    workers: int = Field(default=DDTRACK_WORKERS, ge=1)
    batch_size: int = Field(default=TRACK_BATCH_SIZE, ge=1)


class EvalSection(_Section):
    bundle_wdice: bool = True
    endpoint_lookback: int = Field(default=2, ge=0)


class RunConfig(_Section):
    seed: Optional[int] = Field(default=None, ge=0)
    phantom: PhantomSection = Field(default_factory=PhantomSection)
    sh: ShSection = Field(default_factory=ShSection)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSection = Field(default_factory=TrainSection)
    track: TrackSection = Field(default_factory=TrackSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    @property
    def master_seed(self) -> int:
        return DDTRACK_SEED if self.seed is None else int(self.seed)

    def effective(self) -> Dict[str, Any]:
        """Defaults applied, seed resolved; what manifest.json echoes."""
        payload = self.model_dump(mode="json")
        payload["seed"] = self.master_seed
        return payload

    def with_overrides(self, section: Optional[str] = None, **values) -> "RunConfig":
        """Return a validated copy with non-None `values` applied to `section` (or the top level)."""
        updates = {k: v for k, v in values.items() if v is not None}
        if not updates:
            return self
        payload = self.model_dump()
        target = payload if section is None else payload[section]
        target.update(updates)
        return _validate(payload, "command line")


def _validate(payload: Dict[str, Any], source: str) -> RunConfig:
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise InputError(f"Invalid configuration from {source}: {problems}") from None


def load_run_config(path: Optional[str] = None) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise InputError(f"Config file '{path}' does not exist")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"Config file '{path}' is not valid JSON: {e}") from None
    if not isinstance(payload, dict):
        raise InputError(f"Config file '{path}' must hold a JSON object")
    config = _validate(payload, path)
    logger.info(f"Loaded run config from {path}")
    return config
