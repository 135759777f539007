"""
Orientation network.

    SH neighborhood --spatial A--> z --GRU x2--> c ----+
                   --spatial B--> v (local, L)        |
    k --sinusoid--> projection ---------------------> G = W [c, e(k)]
    y_k --1D conv encoder/decoder, FiLM(G, L) per block--> h_pred

Variants: "full" (as drawn), "no_local" (FiLM reads G only, branch B is not
built), "regression" (no denoiser; a linear head on [c, v] regresses the unit
orientation directly).

Parameters live in an ordered dict of autodiff tensors keyed by dotted names;
the order is the checkpoint order.
"""
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from config.run_config import ModelConfig
from models import tensor_autodiff as td
from models.diffusion import SamplerConfig, RngSource, reverse_sample
from utils.rng import stream

logger = logging.getLogger(__name__)

STEP_SCALE = 1000.0  # k in [0, 1] is stretched before the sinusoid
MAX_PERIOD = 10000.0

TemporalState = Tuple[td.Tensor, ...]


class SpatialEmbeddings(NamedTuple):
    z: td.Tensor
    v: Optional[td.Tensor]


def embed_step(k, dim: int) -> np.ndarray:
    """Sinusoidal embedding [sin(s*w_i), cos(s*w_i)] with s = STEP_SCALE*k and geometric w_i."""
    half = dim // 2
    freqs = np.exp(-np.log(MAX_PERIOD) * np.arange(half, dtype=np.float64) / half)
    k = np.asarray(k, dtype=np.float64)
    args = STEP_SCALE * k[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def gru_cell(x, h, w_input, w_hidden, b_input, b_hidden) -> td.Tensor:
    """
    Single GRU update with gate blocks [reset, update, candidate] along the
    3H columns:
        r = sigmoid(x Wr + br + h Ur + cr)
        u = sigmoid(x Wu + bu + h Uu + cu)
        n = tanh(x Wn + bn + r * (h Un + cn))
        h' = (1 - u) * n + u * h
    """
    h = td.as_tensor(h)
    hidden = h.shape[1]
    gi = td.linear(x, w_input, b_input)
    gh = td.linear(h, w_hidden, b_hidden)
    r = td.sigmoid(gi[:, :hidden] + gh[:, :hidden])
    u = td.sigmoid(gi[:, hidden:2 * hidden] + gh[:, hidden:2 * hidden])
    n = td.tanh(gi[:, 2 * hidden:] + r * gh[:, 2 * hidden:])
    return (1.0 - u) * n + u * h


def _he(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class OrientationNetwork:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.local_dim = 0 if config.variant == "no_local" else config.embed_dim
        self.params: Dict[str, td.Tensor] = {}
        rng = stream(seed, "init")
        for name, array in self._initial_arrays(rng):
            self.params[name] = td.parameter(array, name=name)
        logger.info(f"Built {config.variant} network with {self.num_parameters()} parameters")

    # -- construction --------------------------------------------------------

    def _initial_arrays(self, rng: np.random.Generator):
        cfg = self.config
        c1, c2 = cfg.conv_channels
        m, e, hdim = cfg.sh_coeffs, cfg.embed_dim, cfg.hidden_dim
        branches = ["spatial_a"] if cfg.variant == "no_local" else ["spatial_a", "spatial_b"]
        for branch in branches:
            yield f"{branch}.conv1.weight", _he(rng, (c1, m, 3, 3, 3), m * 27)
            yield f"{branch}.conv1.bias", np.zeros(c1)
            yield f"{branch}.conv2.weight", _he(rng, (c2, c1, 3, 3, 3), c1 * 27)
            yield f"{branch}.conv2.bias", np.zeros(c2)
            yield f"{branch}.fc1.weight", _he(rng, (c2, e), c2)
            yield f"{branch}.fc1.bias", np.zeros(e)
            yield f"{branch}.fc2.weight", _he(rng, (e, e), e)
            yield f"{branch}.fc2.bias", np.zeros(e)
        bound = 1.0 / np.sqrt(hdim)
        for layer in range(cfg.gru_layers):
            width = e if layer == 0 else hdim
            yield f"gru{layer}.w_input", rng.uniform(-bound, bound, size=(width, 3 * hdim))
            yield f"gru{layer}.w_hidden", rng.uniform(-bound, bound, size=(hdim, 3 * hdim))
            yield f"gru{layer}.b_input", rng.uniform(-bound, bound, size=3 * hdim)
            yield f"gru{layer}.b_hidden", rng.uniform(-bound, bound, size=3 * hdim)
        if cfg.variant == "regression":
            yield "regression.weight", _he(rng, (hdim + e, 3), hdim + e)
            yield "regression.bias", np.zeros(3)
            return
        dk, gdim = cfg.step_embed_dim, cfg.global_dim
        yield "step_proj.weight", _he(rng, (dk, dk), dk)
        yield "step_proj.bias", np.zeros(dk)
        yield "global.weight", _he(rng, (hdim + dk, gdim), hdim + dk)
        yield "global.bias", np.zeros(gdim)
        ch, mid = cfg.denoiser_channels, cfg.denoiser_mid_channels
        yield "denoiser.input.weight", _he(rng, (ch, 1, 3), 3)
        yield "denoiser.input.bias", np.zeros(ch)
        for block, width in self._blocks():
            yield from self._block_arrays(rng, block, width)
        yield "denoiser.downsample.weight", _he(rng, (mid, ch, 3), ch * 3)
        yield "denoiser.downsample.bias", np.zeros(mid)
        yield "denoiser.upsample.weight", _he(rng, (mid, ch, 3), mid)
        yield "denoiser.upsample.bias", np.zeros(ch)
        yield "denoiser.head.weight", _he(rng, (3 * ch, 3), 3 * ch) * 0.1
        yield "denoiser.head.bias", np.zeros(3)

    def _blocks(self) -> List[Tuple[str, int]]:
        cfg = self.config
        down = [(f"denoiser.down{j}", cfg.denoiser_channels) for j in range(cfg.blocks_per_side)]
        up = [(f"denoiser.up{j}", cfg.denoiser_channels) for j in range(cfg.blocks_per_side)]
        return down + [("denoiser.mid", cfg.denoiser_mid_channels)] + up

    def _block_arrays(self, rng: np.random.Generator, block: str, width: int):
        cond = self.config.global_dim + self.local_dim
        yield f"{block}.conv.weight", _he(rng, (width, width, 3), width * 3)
        yield f"{block}.conv.bias", np.zeros(width)
        yield f"{block}.norm.weight", np.ones(width)
        yield f"{block}.norm.bias", np.zeros(width)
        # FiLM heads start as the identity modulation: gamma = 1, beta = 0
        yield f"{block}.gamma.weight", np.zeros((cond, width))
        yield f"{block}.gamma.bias", np.ones(width)
        yield f"{block}.beta.weight", np.zeros((cond, width))
        yield f"{block}.beta.bias", np.zeros(width)

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> Dict[str, td.Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = [n for n in self.params if n not in arrays]
        extra = [n for n in arrays if n not in self.params]
        if missing or extra:
            raise td.ShapeError(f"Parameter names differ: missing {missing}, unexpected {extra}")
        for name, p in self.params.items():
            array = np.asarray(arrays[name], dtype=np.float64)
            if array.shape != p.shape:
                raise td.ShapeError(f"Parameter '{name}': expected shape {p.shape}, got {array.shape}")
            p.data[...] = array

    def _p(self, name: str) -> td.Tensor:
        return self.params[name]

    def _linear(self, x, name: str) -> td.Tensor:
        return td.linear(x, self._p(f"{name}.weight"), self._p(f"{name}.bias"))

    # -- encoders ------------------------------------------------------------

    def _spatial_branch(self, x: np.ndarray, branch: str) -> td.Tensor:
        h = td.relu(td.conv3d(x, self._p(f"{branch}.conv1.weight"), self._p(f"{branch}.conv1.bias"), padding=1))
        h = td.relu(td.conv3d(h, self._p(f"{branch}.conv2.weight"), self._p(f"{branch}.conv2.bias"), padding=0))
        h = h.reshape(h.shape[0], h.shape[1])
        h = td.relu(self._linear(h, f"{branch}.fc1"))
        return self._linear(h, f"{branch}.fc2")

    def spatial_encode(self, blocks: np.ndarray) -> SpatialEmbeddings:
        """blocks (N, 3, 3, 3, m) indexed [n, dz, dy, dx, c] -> z, v of width embed_dim."""
        blocks = np.asarray(blocks, dtype=np.float64)
        if blocks.ndim == 4:
            blocks = blocks[None]
        if blocks.ndim != 5 or blocks.shape[1:4] != (3, 3, 3) or blocks.shape[4] != self.config.sh_coeffs:
            raise td.ShapeError(f"spatial_encode: expected (N, 3, 3, 3, {self.config.sh_coeffs}), got {blocks.shape}")
        x = np.ascontiguousarray(blocks.transpose(0, 4, 1, 2, 3))
        z = self._spatial_branch(x, "spatial_a")
        v = None if self.config.variant == "no_local" else self._spatial_branch(x, "spatial_b")
        return SpatialEmbeddings(z, v)

    def init_temporal_state(self, n: int) -> Tuple[np.ndarray, ...]:
        return tuple(np.zeros((n, self.config.hidden_dim)) for _ in range(self.config.gru_layers))

    def temporal_encode(self, z, state: Sequence) -> Tuple[td.Tensor, TemporalState]:
        inp = z
        new_state = []
        for layer, h in enumerate(state):
            inp = gru_cell(inp, h, self._p(f"gru{layer}.w_input"), self._p(f"gru{layer}.w_hidden"),
                           self._p(f"gru{layer}.b_input"), self._p(f"gru{layer}.b_hidden"))
            new_state.append(inp)
        return inp, tuple(new_state)

    def encode_sequences(self, sequences: Sequence[np.ndarray]) -> Tuple[td.Tensor, Optional[td.Tensor]]:
        """
        Encoding of whole ground-truth streamlines in one pass.

        sequences[i] holds the (T_i, 3, 3, 3, m) neighborhoods along streamline
        i. Returns c and v with one row per (streamline, step), streamline-major.
        The GRU advances all streamlines still running at step t together; a
        finished streamline simply drops out, so nothing is padded.
        """
        lengths = np.array([len(s) for s in sequences])
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        emb = self.spatial_encode(np.concatenate(list(sequences), axis=0))
        order = np.argsort(-lengths, kind="stable")
        state = tuple(td.Tensor(h) for h in self.init_temporal_state(len(order)))
        outputs, rows = [], []
        for t in range(int(lengths.max())):
            active = int(np.sum(lengths > t))
            if active < state[0].shape[0]:
                state = tuple(h[:active] for h in state)
            idx = offsets[order[:active]] + t
            c_t, state = self.temporal_encode(emb.z[idx], state)
            outputs.append(c_t)
            rows.append(idx)
        time_major = td.concat(outputs, axis=0)
        c = time_major[np.argsort(np.concatenate(rows), kind="stable")]
        return c, emb.v

    # -- conditioning and denoising -----------------------------------------

    def global_condition(self, c, k) -> td.Tensor:
        c = td.as_tensor(c)
        k = np.broadcast_to(np.asarray(k, dtype=np.float64), (c.shape[0],))
        e = self._linear(td.Tensor(embed_step(k, self.config.step_embed_dim)), "step_proj")
        return self._linear(td.concat([c, e], axis=1), "global")

    def _film_block(self, x: td.Tensor, cond: td.Tensor, block: str) -> td.Tensor:
        h = td.conv1d(x, self._p(f"{block}.conv.weight"), self._p(f"{block}.conv.bias"), padding=1)
        h = td.group_norm(h, self.config.norm_groups, self._p(f"{block}.norm.weight"), self._p(f"{block}.norm.bias"))
        h = td.film(h, self._linear(cond, f"{block}.gamma"), self._linear(cond, f"{block}.beta"))
        return x + td.relu(h)

    def denoise(self, yk: np.ndarray, k, c, local) -> td.Tensor:
        """Predict h from y_k (N, 3), step k, temporal context c and local embedding."""
        yk = np.asarray(yk, dtype=np.float64).reshape(-1, 3)
        n = yk.shape[0]
        g = self.global_condition(c, k)
        cond = td.concat([g, td.as_tensor(local)], axis=1) if self.local_dim else g
        cfg = self.config
        x = td.conv1d(yk.reshape(n, 1, 3), self._p("denoiser.input.weight"), self._p("denoiser.input.bias"), padding=1)
        for j in range(cfg.blocks_per_side):
            x = self._film_block(x, cond, f"denoiser.down{j}")
        skip = x
        x = td.relu(td.conv1d(x, self._p("denoiser.downsample.weight"), self._p("denoiser.downsample.bias")))
        x = self._film_block(x, cond, "denoiser.mid")
        x = td.conv_transpose1d(x, self._p("denoiser.upsample.weight"), self._p("denoiser.upsample.bias")) + skip
        for j in range(cfg.blocks_per_side):
            x = self._film_block(x, cond, f"denoiser.up{j}")
        return self._linear(x.reshape(n, 3 * cfg.denoiser_channels), "denoiser.head")

    def regress(self, c, v) -> td.Tensor:
        return self._linear(td.concat([td.as_tensor(c), td.as_tensor(v)], axis=1), "regression")

    # -- tracking protocol ---------------------------------------------------

    def condition(self, blocks: np.ndarray, state: Sequence[np.ndarray]):
        """One tracking step for N rows: returns (c, L, new state) as arrays."""
        with td.no_grad():
            emb = self.spatial_encode(blocks)
            c, new_state = self.temporal_encode(emb.z, [td.Tensor(h) for h in state])
        local = emb.v.numpy() if emb.v is not None else np.zeros((c.shape[0], 0))
        return c.numpy(), local, tuple(h.numpy() for h in new_state)

    def denoiser_fn(self, yk: np.ndarray, k: float, c: np.ndarray, local: np.ndarray) -> np.ndarray:
        with td.no_grad():
            return self.denoise(yk, k, c, local).numpy()

    def propose(self, c: np.ndarray, local: np.ndarray, sampler: SamplerConfig,
                rngs: Optional[RngSource] = None) -> np.ndarray:
        """Unnormalized orientation proposals (N, 3) for the given conditions."""
        if self.config.variant == "regression":
            with td.no_grad():
                return self.regress(c, local).numpy()
        return reverse_sample(self.denoiser_fn, c, local, sampler, rngs)
