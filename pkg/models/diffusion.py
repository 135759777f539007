"""
Decoupled diffusion over 3-vector orientations.

The forward process attenuates the clean orientation y0 towards zero along
h = -y0 while injecting Gaussian noise:

    y_k = y0 + k*h + sqrt(k)*eps = (1 - k)*y0 + sqrt(k)*eps,   k in (0, 1]

A denoiser predicts h; eps follows from y_k and h, and reverse steps move
from k to k - dk with a closed-form mean and variance.

Functions accept a single 3-vector or a batch (N, 3). derive_epsilon and
training_loss also accept autodiff tensors for h_pred/eps_pred so the trainer
can differentiate through them.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from models import tensor_autodiff as td
from utils.errors import DDTrackError, InputError

logger = logging.getLogger(__name__)

K_MIN = 0.02  # training-time k is drawn uniformly on [K_MIN, K_MAX]
K_MAX = 0.98
DEFAULT_NUM_STEPS = 4
SMOOTH_L1_BETA = 1.0

ArrayOrScalar = Union[float, np.ndarray]
RngSource = Union[np.random.Generator, Sequence[np.random.Generator]]
# denoiser(yk (N, 3), k, global_ctx, local_ctx) -> h_pred (N, 3)
Denoiser = Callable[[np.ndarray, float, Optional[np.ndarray], Optional[np.ndarray]], np.ndarray]


class DiffusionDomainError(InputError):
    """k or dk outside the range the diffusion formulas are defined on."""


class DegenerateOrientationError(DDTrackError):
    """The sampled orientation has zero norm and cannot be normalized."""

    def __init__(self, rows: np.ndarray):
        self.rows = np.asarray(rows, dtype=int)
        super().__init__(f"Sampled orientation has zero norm for rows {self.rows.tolist()}")


def _as_k(k: ArrayOrScalar, low_open: float, high: float, high_open: bool, what: str) -> np.ndarray:
    arr = np.asarray(k, dtype=np.float64)
    bad = ~np.isfinite(arr) | (arr <= low_open) | ((arr >= high) if high_open else (arr > high))
    if np.any(bad):
        value = arr if arr.ndim == 0 else arr[bad][0]
        bracket = ")" if high_open else "]"
        raise DiffusionDomainError(f"{what}: k={float(value)} outside ({low_open}, {high}{bracket}")
    return arr


def _column(k: np.ndarray, ndim: int) -> np.ndarray:
    """Broadcast a per-sample k (N,) against (N, 3) vectors."""
    return k[:, None] if k.ndim == 1 and ndim == 2 else k


@dataclass(frozen=True)
class ForwardSample:
    y0: np.ndarray
    k: ArrayOrScalar
    eps: np.ndarray
    yk: np.ndarray

    @property
    def h(self) -> np.ndarray:
        return -self.y0


def forward_sample(y0: np.ndarray, k: ArrayOrScalar, eps: np.ndarray) -> np.ndarray:
    """y_k = (1 - k) * y0 + sqrt(k) * eps."""
    y0 = np.asarray(y0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if y0.shape != eps.shape:
        raise InputError(f"forward_sample: y0 {y0.shape} and eps {eps.shape} differ")
    if not np.all(np.isfinite(y0)):
        raise InputError("forward_sample: y0 is not finite")
    kk = _column(_as_k(k, 0.0, 1.0, False, "forward_sample"), y0.ndim)
    return (1.0 - kk) * y0 + np.sqrt(kk) * eps


def draw_forward(y0: np.ndarray, rng: np.random.Generator, k_min: float = K_MIN,
                 k_max: float = K_MAX) -> ForwardSample:
    """One k per row drawn on [k_min, k_max], standard normal eps, and the resulting y_k."""
    y0 = np.asarray(y0, dtype=np.float64).reshape(-1, 3)
    k = rng.uniform(k_min, k_max, size=y0.shape[0])
    eps = rng.standard_normal(y0.shape)
    return ForwardSample(y0=y0, k=k, eps=eps, yk=forward_sample(y0, k, eps))


def derive_epsilon(yk, h_pred, k: ArrayOrScalar):
    """eps = (y_k - (k - 1) * h) / sqrt(k). `h_pred` may be an autodiff tensor."""
    kk = _as_k(k, 0.0, 1.0, False, "derive_epsilon")
    yk = np.asarray(yk, dtype=np.float64)
    kk = _column(kk, yk.ndim)
    return (yk - (kk - 1.0) * h_pred) / np.sqrt(kk)


@dataclass(frozen=True)
class ReverseStepParams:
    k: float
    dk: float

    def __post_init__(self):
        if not (0.0 < self.k <= 1.0):
            raise DiffusionDomainError(f"reverse step: k={self.k} outside (0, 1]")
        if not (0.0 < self.dk <= self.k):
            raise DiffusionDomainError(f"reverse step: dk={self.dk} outside (0, k={self.k}]")

    @property
    def sigma2(self) -> float:
        return self.dk * (self.k - self.dk) / self.k

    @property
    def is_final(self) -> bool:
        return self.dk == self.k


def reverse_step(yk: np.ndarray, h_pred: np.ndarray, params: ReverseStepParams,
                 noise: Optional[np.ndarray] = None) -> np.ndarray:
    """mu = ((k - dk)/k) y_k - (dk/k) h, plus sqrt(sigma2) * noise when noise is given."""
    k, dk = params.k, params.dk
    mu = ((k - dk) / k) * np.asarray(yk, dtype=np.float64) - (dk / k) * np.asarray(h_pred, dtype=np.float64)
    if noise is None or params.sigma2 == 0.0:
        return mu
    return mu + np.sqrt(params.sigma2) * np.asarray(noise, dtype=np.float64)


@dataclass(frozen=True)
class LossWeights:
    lambda1: ArrayOrScalar
    lambda2: ArrayOrScalar


def loss_weights(k: ArrayOrScalar) -> LossWeights:
    kk = _as_k(k, 0.0, 1.0, True, "loss_weights")
    numerator = kk * kk - kk + 1.0
    return LossWeights(lambda1=numerator / kk, lambda2=numerator / (1.0 - kk) ** 2)


def training_loss(h_pred, eps_pred, h_true: np.ndarray, eps_true: np.ndarray, k: ArrayOrScalar,
                  beta: float = SMOOTH_L1_BETA, reduce: bool = True) -> td.Tensor:
    """
    lambda1 * SmoothL1(h) + lambda2 * SmoothL1(eps), each summed over the three
    components. With `reduce` the per-sample losses are averaged; otherwise the
    (N,) vector is returned.
    """
    h_pred, eps_pred = td.as_tensor(h_pred), td.as_tensor(eps_pred)
    if h_pred.ndim == 1:
        h_pred, eps_pred = h_pred.reshape(1, 3), eps_pred.reshape(1, 3)
        h_true, eps_true = np.reshape(h_true, (1, 3)), np.reshape(eps_true, (1, 3))
    weights = loss_weights(np.broadcast_to(np.asarray(k, dtype=np.float64), (h_pred.shape[0],)))
    h_term = td.smooth_l1(h_pred, td.Tensor(h_true), beta).sum(axis=1)
    eps_term = td.smooth_l1(eps_pred, td.Tensor(eps_true), beta).sum(axis=1)
    per_sample = weights.lambda1 * h_term + weights.lambda2 * eps_term
    return per_sample.mean() if reduce else per_sample


# ---------------------------------------------------------------------------
# Reverse sampling

@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = DEFAULT_NUM_STEPS
    deterministic: bool = True

    def __post_init__(self):
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise InputError(f"num_steps must be a positive integer, got {self.num_steps}")

    def grid(self) -> np.ndarray:
        """k = 1, 1 - 1/S, ..., 1/S."""
        return np.arange(self.num_steps, 0, -1, dtype=np.float64) / self.num_steps


def _normal(rng: RngSource, n: int) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal((n, 3))
    if len(rng) != n:
        raise InputError(f"Expected {n} generators, got {len(rng)}")
    return np.stack([r.standard_normal(3) for r in rng]) if n else np.zeros((0, 3))


def reverse_sample(denoiser: Denoiser, global_ctx: Optional[np.ndarray], local_ctx: Optional[np.ndarray],
                   config: SamplerConfig, rng: Optional[RngSource] = None, n: Optional[int] = None) -> np.ndarray:
    """
    Run the reverse chain over the uniform k-grid and return the unnormalized
    final vectors (N, 3).

    `rng` is either one generator or one generator per row; per-row
    generators keep each row's draws independent of the batch it runs in.
    """
    if n is None:
        if global_ctx is None:
            raise InputError("reverse_sample: batch size unknown without a global context")
        n = np.shape(global_ctx)[0]
    if not config.deterministic and rng is None:
        raise InputError("reverse_sample: stochastic sampling needs an rng")
    y = np.zeros((n, 3)) if config.deterministic else _normal(rng, n)
    dk = 1.0 / config.num_steps
    for k in config.grid():
        params = ReverseStepParams(k=float(k), dk=min(dk, float(k)))
        h = np.asarray(denoiser(y, float(k), global_ctx, local_ctx), dtype=np.float64).reshape(n, 3)
        noise = None if config.deterministic or params.is_final else _normal(rng, n)
        y = reverse_step(y, h, params, noise)
    return y


def normalize_orientations(vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unit vectors and a mask of zero-norm (degenerate) rows, which are left as zeros."""
    vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(vectors, axis=1)
    degenerate = ~(norms > 0.0) | ~np.isfinite(norms)
    out = np.zeros_like(vectors)
    out[~degenerate] = vectors[~degenerate] / norms[~degenerate, None]
    return out, degenerate


def sample_orientation(denoiser: Denoiser, global_ctx: Optional[np.ndarray], local_ctx: Optional[np.ndarray],
                       config: SamplerConfig, rng: Optional[RngSource] = None) -> np.ndarray:
    """
    Sample unit orientations. A 1-D global context yields a single (3,) vector,
    a 2-D one a batch (N, 3). Raises DegenerateOrientationError on zero norm.
    """
    single = global_ctx is not None and np.ndim(global_ctx) == 1
    g = np.atleast_2d(global_ctx) if global_ctx is not None else None
    l = np.atleast_2d(local_ctx) if local_ctx is not None else None
    raw = reverse_sample(denoiser, g, l, config, rng, n=None if g is not None else 1)
    unit, degenerate = normalize_orientations(raw)
    if degenerate.any():
        raise DegenerateOrientationError(np.flatnonzero(degenerate))
    return unit[0] if single or g is None else unit
