"""
Seeded, splittable counter-based random streams.

Every stream is a Philox generator keyed by (master seed, stream path). Stream
paths are tuples of ints or short string tags; tags are hashed with crc32 so
the mapping is stable across processes and Python versions. No module keeps
RNG state of its own: callers derive a generator and pass it down.
"""
import zlib
from typing import Union

import numpy as np

StreamKey = Union[int, str]


def _key_to_int(key: StreamKey) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"Stream keys must be non-negative, got {key}")
    return int(key)


def stream(seed: int, *path: StreamKey) -> np.random.Generator:
    """
    Return the generator for stream `path` under master `seed`.

    Two calls with the same arguments yield generators producing identical
    draws; distinct paths yield statistically independent streams.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in path))
    return np.random.Generator(np.random.Philox(seq))


def generator_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's bit-generator state."""
    state = rng.bit_generator.state
    return _to_jsonable(state)


def restore_generator(state: dict) -> np.random.Generator:
    """Rebuild a Philox generator from `generator_state` output."""
    if state.get("bit_generator") != "Philox":
        raise ValueError(f"Unsupported bit generator: {state.get('bit_generator')}")
    bit_gen = np.random.Philox()
    bit_gen.state = _from_jsonable(state)
    return np.random.Generator(bit_gen)


def _to_jsonable(value):
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": str(value.dtype)}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value):
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.asarray(value["__ndarray__"], dtype=value["dtype"])
        return {k: _from_jsonable(v) for k, v in value.items()}
    return value
