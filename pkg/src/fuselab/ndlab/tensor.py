"""Tape-based reverse-mode autodiff.

A :class:`Tape` records primitive ops in creation order (which is a
topological order by construction). :meth:`Tape.backward` walks the record
once in reverse, accumulating gradients with a fixed left-to-right order so
repeated runs are bit-identical. Model math is float32; a tape can be opened
in float64 for finite-difference oracles (forward evaluation only).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class NDLabError(ValueError):
    """Shape/value errors raised by engine primitives."""


class Tensor:
    """A value recorded on a tape. Do not mutate ``data`` in place."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data: np.ndarray, tape: "Tape", nid: int):
        self.data = data
        self.tape = tape
        self.nid = nid

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NDLabError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, nid={self.nid})"


class Gradients:
    """Result of a backward pass; zero for leaves that did not reach the root."""

    def __init__(self, tape: "Tape", grads: dict):
        self._tape = tape
        self._grads = grads

    def wrt(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise NDLabError("gradient queried for a tensor from a different tape")
        g = self._grads.get(t.nid)
        if g is None:
            return np.zeros_like(t.data)
        return g


# backward fn: grad_out -> tuple of grads aligned with the node's input nids
# (an entry may be None when that input is not differentiable)
_BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered op record for one forward computation.

    A tape is single-threaded; independent tapes are fully independent.
    ``check_finite`` validates every op output (NaN/Inf is an error state);
    oracles that only evaluate forward values may switch it off for speed.
    """

    def __init__(self, dtype=np.float32, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self._records: list[tuple[int, tuple[int, ...], _BackwardFn]] = []
        self._next_id = 0

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, data) -> Tensor:
        """Register an input/parameter tensor (a copy, cast to the tape dtype)."""
        arr = np.array(data, dtype=self.dtype)
        if self.check_finite and not np.isfinite(arr).all():
            raise NDLabError("leaf tensor contains NaN/Inf")
        return Tensor(arr, self, self._new_id())

    def node(self, op_name: str, data: np.ndarray, inputs: Sequence[Tensor],
             backward: _BackwardFn) -> Tensor:
        """Record one primitive op output. Used by fuselab.ndlab.ops."""
        for t in inputs:
            if t.tape is not self:
                raise NDLabError(f"{op_name}: input tensor belongs to a different tape")
        if data.dtype != self.dtype:
            data = data.astype(self.dtype)
        if self.check_finite and not np.isfinite(data).all():
            raise NDLabError(f"{op_name}: non-finite values in output")
        out = Tensor(data, self, self._new_id())
        self._records.append((out.nid, tuple(t.nid for t in inputs), backward))
        return out

    def backward(self, root: Tensor) -> Gradients:
        """Gradients of a scalar root w.r.t. every tensor on this tape."""
        if root.tape is not self:
            raise NDLabError("backward root belongs to a different tape")
        if root.data.size != 1:
            raise NDLabError(f"backward root must be scalar, got shape {root.data.shape}")
        grads: dict[int, np.ndarray] = {root.nid: np.ones_like(root.data)}
        for out_nid, in_nids, fn in reversed(self._records):
            gout = grads.get(out_nid)
            if gout is None:
                continue
            gins = fn(gout)
            for nid, g in zip(in_nids, gins):
                if g is None:
                    continue
                acc = grads.get(nid)
                # out-of-place accumulation: backward fns may return views/aliases
                grads[nid] = g if acc is None else acc + g
        return Gradients(self, grads)
