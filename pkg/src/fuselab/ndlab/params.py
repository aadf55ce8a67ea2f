"""Named parameter store with matching gradient slots and checkpoint I/O.

Checkpoint format: magic ``FUSELAB1``, then per-parameter records of
[u32 name length][utf-8 name][u32 ndim][u32 dims...][f32 payload],
all little-endian, parameters in insertion order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from fuselab.ndlab.tensor import Gradients, NDLabError, Tape, Tensor

MAGIC = b"FUSELAB1"


def he_uniform_init(shape: tuple, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class ParamStore:
    """Flat, ordered map of parameter name -> float32 array, plus grad slots."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    # -- construction / access ------------------------------------------------

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise NDLabError(f"duplicate parameter {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float32)
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.copy())
        return out

    # -- autodiff bridge -------------------------------------------------------

    def leaves(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter as a leaf on the tape."""
        return {name: tape.leaf(p) for name, p in self._params.items()}

    def accumulate(self, grads: Gradients, leaves: dict[str, Tensor]) -> None:
        """Add a backward pass's parameter gradients into the grad slots."""
        for name, t in leaves.items():
            self._grads[name] += grads.wrt(t)

    # -- optimization ----------------------------------------------------------

    def scale_grads(self, k: float) -> None:
        k = np.float32(k)
        for g in self._grads.values():
            g *= k

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[:] = 0

    def sgd_step(self, lr: float) -> None:
        """p <- p - lr * g for every parameter, then zero the gradients."""
        lr = np.float32(lr)
        for name, p in self._params.items():
            p -= lr * self._grads[name]
        self.zero_grads()

    # -- checkpoint I/O --------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as f:
            f.write(MAGIC)
            for name, p in self._params.items():
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", p.ndim))
                f.write(struct.pack(f"<{p.ndim}I", *p.shape))
                f.write(p.astype("<f4", copy=False).tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:8] != MAGIC:
            raise NDLabError(f"{path}: not a FUSELAB1 checkpoint")
        store = cls()
        off = 8
        while off < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            store.add(name, arr.copy())
        return store
