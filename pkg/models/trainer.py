"""
Training of the orientation network on ground-truth streamline histories.

Each epoch shuffles whole streamlines into batches, builds one graph per
batch, and steps an AdamW optimizer. Validation loss drives a plateau
learning-rate decay and early stopping with best-weight restore.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config.run_config import TrainSection
from dmri.data_types import Tractogram
from dmri.sh_signal import ShVolume, sample_neighborhoods
from models import tensor_autodiff as td
from models.diffusion import derive_epsilon, draw_forward, training_loss
from models.network import OrientationNetwork
from utils.errors import InputError, InvariantViolation
from utils.rng import generator_state, restore_generator, stream

logger = logging.getLogger(__name__)


class TrainingDivergedError(InvariantViolation):
    def __init__(self, loss: float, k: Optional[float], step: int, streamline_id: int, reversed_: bool):
        self.loss, self.k, self.step, self.streamline_id = loss, k, step, streamline_id
        k_text = "n/a" if k is None else f"{k:.6f}"
        direction = " (reversed)" if reversed_ else ""
        super().__init__(f"Non-finite training loss {loss} at k={k_text}, step {step}, "
                         f"streamline {streamline_id}{direction}")


@dataclass
class StreamlineSample:
    streamline_id: int
    reversed: bool
    blocks: np.ndarray  # (T, 3, 3, 3, m) neighborhoods at points 0..T-1
    targets: np.ndarray  # (T, 3) unit directions p_{t+1} - p_t

    def __len__(self) -> int:
        return self.targets.shape[0]


def _make_sample(sh: ShVolume, points: np.ndarray, streamline_id: int, reversed_: bool) -> Optional[StreamlineSample]:
    steps = np.diff(points, axis=0)
    norms = np.linalg.norm(steps, axis=1)
    if steps.shape[0] == 0 or np.any(norms == 0):
        return None
    blocks, _ = sample_neighborhoods(sh, points[:-1])
    return StreamlineSample(streamline_id, reversed_, blocks, steps / norms[:, None])


def prepare_samples(tractogram: Tractogram, sh: ShVolume, ids: Sequence[int],
                    include_reversed: bool = True) -> List[StreamlineSample]:
    samples = []
    skipped = 0
    for i in ids:
        points = tractogram.streamlines[i]
        for reversed_ in ((False, True) if include_reversed else (False,)):
            sample = _make_sample(sh, points[::-1] if reversed_ else points, int(i), reversed_)
            if sample is None:
                skipped += 1
            else:
                samples.append(sample)
    if skipped:
        logger.warning(f"Skipped {skipped} streamline traversals with fewer than 2 distinct points")
    return samples


def split_streamlines(n: int, val_fraction: float, seed: int,
                      max_streamlines: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split of streamline indices (validation may be empty)."""
    order = stream(seed, "split").permutation(n)
    if max_streamlines is not None:
        order = order[:max_streamlines]
    n_val = int(round(val_fraction * len(order)))
    if n_val >= len(order):
        n_val = len(order) - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


# ---------------------------------------------------------------------------
# Optimization pieces

class AdamW:
    """Adam with decoupled weight decay, operating in place on parameter tensors."""

    def __init__(self, params: Dict[str, td.Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> Tuple[dict, Dict[str, np.ndarray]]:
        arrays = {f"adam_m/{n}": a.copy() for n, a in self.m.items()}
        arrays.update({f"adam_v/{n}": a.copy() for n, a in self.v.items()})
        return {"lr": self.lr, "t": self.t}, arrays

    def load_state(self, state: dict, arrays: Dict[str, np.ndarray]) -> None:
        self.lr = float(state["lr"])
        self.t = int(state["t"])
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam_m/{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"adam_v/{name}"], dtype=np.float64)


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by `factor` after more than `patience` epochs without improvement."""
    factor: float = 0.1
    patience: int = 50
    min_lr: float = 1e-7
    best: float = float("inf")
    bad_epochs: int = 0

    def step(self, value: float, optimizer: AdamW) -> None:
        if value < self.best:
            self.best = value
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            new_lr = max(optimizer.lr * self.factor, self.min_lr)
            if new_lr < optimizer.lr:
                logger.info(f"Learning rate {optimizer.lr:.2e} -> {new_lr:.2e}")
            optimizer.lr = new_lr
            self.bad_epochs = 0


@dataclass
class EarlyStopping:
    patience: int = 120
    best: float = float("inf")
    best_epoch: int = -1
    bad_epochs: int = 0
    best_params: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, value: float, epoch: int, network: OrientationNetwork) -> bool:
        """Record the epoch; True once `patience` epochs passed without improvement."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            self.best_params = network.state_dict()
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


class LossRecord(NamedTuple):
    epoch: int
    train: float
    val: Optional[float]
    lr: float


class TrainingResult(NamedTuple):
    log: List[LossRecord]
    best_epoch: int
    stopped_early: bool
    finished: bool


# ---------------------------------------------------------------------------
# Trainer

class Trainer:
    def __init__(self, network: OrientationNetwork, config: TrainSection, seed: int = 0):
        self.network = network
        self.config = config
        self.seed = seed
        self.rng = stream(seed, "train")
        self.optimizer = AdamW(network.parameters(), config.lr, config.betas, config.adam_eps, config.weight_decay)
        self.scheduler = PlateauScheduler(config.plateau_factor, config.plateau_patience, config.min_lr)
        self.early_stopping = EarlyStopping(config.early_stop_patience)
        self.epoch = 0
        self.log: List[LossRecord] = []
        self.stopped_early = False

    # -- loss ----------------------------------------------------------------

    def batch_loss(self, batch: Sequence[StreamlineSample], rng: np.random.Generator) -> Tuple[td.Tensor, np.ndarray]:
        """Mean loss over every (streamline, step) pair of the batch, plus the per-pair values."""
        net = self.network
        c, v = net.encode_sequences([s.blocks for s in batch])
        y0 = np.concatenate([s.targets for s in batch], axis=0)
        beta = net.config.smooth_l1_beta
        k = None
        if net.config.variant == "regression":
            per_sample = td.smooth_l1(net.regress(c, v), td.Tensor(y0), beta).sum(axis=1)
        else:
            draws = draw_forward(y0, rng, self.config.k_min, self.config.k_max)
            k = draws.k
            h_pred = net.denoise(draws.yk, k, c, v if net.local_dim else None)
            eps_pred = derive_epsilon(draws.yk, h_pred, k)
            per_sample = training_loss(h_pred, eps_pred, draws.h, draws.eps, k, beta, reduce=False)
        values = per_sample.data.copy()
        if not np.all(np.isfinite(values)):
            self._diverged(batch, values, k)
        return per_sample.mean(), values

    @staticmethod
    def _diverged(batch: Sequence[StreamlineSample], values: np.ndarray, k: Optional[np.ndarray]):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        bounds = np.cumsum([len(s) for s in batch])
        which = int(np.searchsorted(bounds, bad, side="right"))
        step = bad - (int(bounds[which - 1]) if which else 0)
        sample = batch[which]
        error = TrainingDivergedError(float(values[bad]), None if k is None else float(k[bad]), step,
                                      sample.streamline_id, sample.reversed)
        logger.error(str(error))
        raise error

    def evaluate(self, samples: Sequence[StreamlineSample]) -> float:
        """Mean loss with a fixed noise stream so epochs are comparable."""
        rng = stream(self.seed, "validation")
        total, count = 0.0, 0
        with td.no_grad():
            for start in range(0, len(samples), self.config.batch_size):
                _, values = self.batch_loss(samples[start:start + self.config.batch_size], rng)
                total += float(values.sum())
                count += values.size
        return total / count

    # -- loop ----------------------------------------------------------------

    def train_epoch(self, samples: Sequence[StreamlineSample]) -> float:
        params = self.network.parameters()
        names = list(params)
        order = self.rng.permutation(len(samples))
        total, count = 0.0, 0
        for start in range(0, len(order), self.config.batch_size):
            batch = [samples[i] for i in order[start:start + self.config.batch_size]]
            loss, values = self.batch_loss(batch, self.rng)
            grads = td.backward(loss, [params[n] for n in names])
            self.optimizer.step(dict(zip(names, grads)))
            total += float(values.sum())
            count += values.size
        return total / count

    def run(self, train_set: Sequence[StreamlineSample], val_set: Sequence[StreamlineSample] = (),
            stop_after: Optional[int] = None) -> TrainingResult:
        """
        Train until `config.epochs` (or early stop). `stop_after` interrupts at
        that epoch count without finishing, leaving a resumable state.
        """
        if not train_set:
            raise InputError("Training set is empty")
        last = self.config.epochs if stop_after is None else min(stop_after, self.config.epochs)
        with tqdm(total=last - self.epoch, desc="Training", unit="epoch") as pbar:
            while self.epoch < last and not self.stopped_early:
                train_loss = self.train_epoch(train_set)
                val_loss = self.evaluate(val_set) if val_set else None
                monitor = train_loss if val_loss is None else val_loss
                record = LossRecord(self.epoch, train_loss, val_loss, self.optimizer.lr)
                self.log.append(record)
                self.scheduler.step(monitor, self.optimizer)
                self.stopped_early = self.early_stopping.step(monitor, self.epoch, self.network)
                self.epoch += 1
                pbar.set_postfix(train=f"{train_loss:.4g}", val="-" if val_loss is None else f"{val_loss:.4g}")
                pbar.update(1)
                logger.info(f"Epoch {record.epoch}: train {train_loss:.6g}, val {val_loss}, lr {record.lr:.2e}")
        finished = self.stopped_early or self.epoch >= self.config.epochs
        if self.stopped_early:
            logger.info(f"Early stop at epoch {self.epoch - 1}; best epoch {self.early_stopping.best_epoch}")
        return TrainingResult(list(self.log), self.early_stopping.best_epoch, self.stopped_early, finished)

    def best_parameters(self) -> Dict[str, np.ndarray]:
        """Weights of the best monitored epoch (current weights if none recorded)."""
        return self.early_stopping.best_params or self.network.state_dict()

    # -- resumable state -----------------------------------------------------

    def state(self) -> Tuple[dict, Dict[str, np.ndarray]]:
        opt_state, arrays = self.optimizer.state()
        arrays.update({f"resume/{n}": a for n, a in self.network.state_dict().items()})
        arrays.update({f"best/{n}": a.copy() for n, a in self.early_stopping.best_params.items()})
        es = self.early_stopping
        state = {
            "epoch": self.epoch,
            "stopped_early": self.stopped_early,
            "optimizer": opt_state,
            "scheduler": {"best": self.scheduler.best, "bad_epochs": self.scheduler.bad_epochs},
            "early_stopping": {"best": es.best, "best_epoch": es.best_epoch, "bad_epochs": es.bad_epochs},
            "rng_state": generator_state(self.rng),
            "log": [r._asdict() for r in self.log],
        }
        return state, arrays

    def load_state(self, state: dict, arrays: Dict[str, np.ndarray]) -> None:
        self.network.load_state_dict({n[len("resume/"):]: a for n, a in arrays.items() if n.startswith("resume/")})
        self.optimizer.load_state(state["optimizer"], arrays)
        self.scheduler.best = float(state["scheduler"]["best"])
        self.scheduler.bad_epochs = int(state["scheduler"]["bad_epochs"])
        es = state["early_stopping"]
        self.early_stopping.best = float(es["best"])
        self.early_stopping.best_epoch = int(es["best_epoch"])
        self.early_stopping.bad_epochs = int(es["bad_epochs"])
        self.early_stopping.best_params = {n[len("best/"):]: np.array(a) for n, a in arrays.items()
                                           if n.startswith("best/")}
        self.rng = restore_generator(state["rng_state"])
        self.epoch = int(state["epoch"])
        self.stopped_early = bool(state["stopped_early"])
        self.log = [LossRecord(**r) for r in state["log"]]
