"""Named parameter collections, their binary checkpoint format, and Adam.

Checkpoint container layout (little-endian throughout):

    magic   4 bytes  b"KRFL"
    version u32      currently 1
    then, for every entry in insertion order:
        name_len u32
        name     utf-8 bytes
        rank     u32
        dims     rank * u64
        payload  prod(dims) * f64, row-major

The payload bytes are written verbatim from the float64 arrays, so a
save/load round trip is bit-exact.  The ``rng_seed`` bookkeeping field is
not part of the container; callers that need it persist it in their JSON
sidecars.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

MAGIC = b"KRFL"
VERSION = 1


class ParamStore:
    """Ordered mapping from parameter name to float64 array.

    Iteration order is insertion order, which makes optimizer sweeps and
    serialization deterministic given construction order.
    """

    def __init__(self, entries=(), rng_seed: int = 0):
        self._entries: dict[str, np.ndarray] = {}
        self.rng_seed = int(rng_seed)
        items = entries.items() if isinstance(entries, Mapping) else entries
        for name, arr in items:
            self[name] = arr

    def __setitem__(self, name: str, arr) -> None:
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        if not np.isfinite(arr).all():
            raise ValueError(f"parameter '{name}' contains non-finite values")
        self._entries[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def keys(self):
        return self._entries.keys()

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def copy(self) -> "ParamStore":
        return ParamStore(((k, v.copy()) for k, v in self._entries.items()),
                          rng_seed=self.rng_seed)

    def n_scalars(self) -> int:
        return sum(v.size for v in self._entries.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamStore):
            return NotImplemented
        if list(self.keys()) != list(other.keys()):
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            for name, arr in self._entries.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise ValueError(f"{path}: not a parameter container (bad magic)")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != VERSION:
                raise ValueError(f"{path}: unsupported container version {version}")
            while True:
                head = fh.read(4)
                if not head:
                    break
                (name_len,) = struct.unpack("<I", head)
                name = fh.read(name_len).decode("utf-8")
                (rank,) = struct.unpack("<I", fh.read(4))
                dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
                count = int(np.prod(dims)) if dims else 1
                payload = fh.read(8 * count)
                arr = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
                store[name] = arr
        return store


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the optimizer hyperparameters."""

    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int
    beta1: float
    beta2: float
    epsilon: float
    learning_rate: float

    @classmethod
    def fresh(cls, params: ParamStore, learning_rate: float,
              beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
            step_count=0,
            beta1=beta1, beta2=beta2, epsilon=epsilon,
            learning_rate=learning_rate,
        )


def adam_step(params: ParamStore, gradients: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update; pure function of its inputs."""
    new_params = ParamStore(rng_seed=params.rng_seed)
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = np.asarray(gradients[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(
                f"adam_step: gradient for '{name}' has shape {g.shape}, expected {p.shape}")
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.epsilon, state.learning_rate)
