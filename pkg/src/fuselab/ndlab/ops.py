"""Primitive tensor ops: forward math plus recorded backward closures.

Shapes follow the channel-first convention (C, H, W). Every op validates its
input shapes and raises :class:`NDLabError` naming the op on mismatch. Ops
compute in the tape's dtype, so a float64 tape gives a float64 forward path
for finite-difference oracles.
"""

from __future__ import annotations

import numpy as np

from fuselab.ndlab.tensor import NDLabError, Tape, Tensor


def _same_tape(op: str, *tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise NDLabError(f"{op}: operands on different tapes")
    return tape


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """2D convolution, zero padding k//2, kernel 1x1 or 3x3, stride 1 or 2.

    x: (C, H, W), w: (O, C, k, k), b: (O,) -> (O, oh, ow)
    """
    tape = _same_tape("conv2d", x, w, b)
    if x.data.ndim != 3 or w.data.ndim != 4 or b.data.ndim != 1:
        raise NDLabError(
            f"conv2d: expected x(C,H,W) w(O,C,k,k) b(O,), got {x.shape} {w.shape} {b.shape}")
    out_c, in_c, kh, kw = w.data.shape
    if kh != kw or kh not in (1, 3):
        raise NDLabError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if stride not in (1, 2):
        raise NDLabError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.shape[0] != in_c:
        raise NDLabError(f"conv2d: input has {x.data.shape[0]} channels, kernel expects {in_c}")
    if b.data.shape[0] != out_c:
        raise NDLabError(f"conv2d: bias shape {b.shape} does not match {out_c} output channels")

    pad = kh // 2
    _, h, wd = x.data.shape
    if pad:
        xp = np.zeros((in_c, h + 2 * pad, wd + 2 * pad), dtype=tape.dtype)
        xp[:, pad:pad + h, pad:pad + wd] = x.data
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(in_c * kh * kw, oh * ow)
    w_flat = w.data.reshape(out_c, in_c * kh * kw)
    y = (w_flat @ cols + b.data[:, None]).reshape(out_c, oh, ow)

    def backward(gout):
        gy = gout.reshape(out_c, oh * ow)
        gw = (gy @ cols.T).reshape(w.data.shape)
        gb = gy.sum(axis=1)
        gcols = (w_flat.T @ gy).reshape(in_c, kh, kw, oh, ow)
        gxp = np.zeros((in_c, h + 2 * pad, wd + 2 * pad), dtype=tape.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    return tape.node("conv2d", y, (x, w, b), backward)


# ---------------------------------------------------------------------------
# elementwise

def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, slope * x.data)

    def backward(gout):
        return (np.where(pos, gout, slope * gout),)

    return x.tape.node("leaky_relu", y, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # overflow-safe in both tails
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(gout):
        return (gout * s * (1.0 - s),)

    return x.tape.node("sigmoid", s, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("add", a, b)
    if a.data.shape != b.data.shape:
        raise NDLabError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(gout):
        return gout, gout

    return tape.node("add", a.data + b.data, (a, b), backward)


def scale(x: Tensor, k: float) -> Tensor:
    k = x.tape.dtype.type(k)

    def backward(gout):
        return (gout * k,)

    return x.tape.node("scale", x.data * k, (x,), backward)


def mul_const(x: Tensor, c) -> Tensor:
    """Elementwise multiply by a constant array (no gradient into c)."""
    c = np.asarray(c, dtype=x.tape.dtype)
    if c.shape != x.data.shape:
        raise NDLabError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")

    def backward(gout):
        return (gout * c,)

    return x.tape.node("mul_const", x.data * c, (x,), backward)


# ---------------------------------------------------------------------------
# shape ops

def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise NDLabError("concat_channels: empty input list")
    tape = _same_tape("concat_channels", *parts)
    trailing = parts[0].data.shape[1:]
    for p in parts:
        if p.data.shape[1:] != trailing:
            raise NDLabError(
                f"concat_channels: trailing dims differ: {[p.shape for p in parts]}")
    sizes = [p.data.shape[0] for p in parts]
    y = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + sizes)

    def backward(gout):
        return tuple(gout[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return tape.node("concat_channels", y, tuple(parts), backward)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    """Slice [lo, hi) along axis 0."""
    n = x.data.shape[0]
    if not (0 <= lo < hi <= n):
        raise NDLabError(f"slice_channels: [{lo},{hi}) out of range for axis size {n}")

    def backward(gout):
        g = np.zeros_like(x.data)
        g[lo:hi] = gout
        return (g,)

    return x.tape.node("slice_channels", x.data[lo:hi].copy(), (x,), backward)


def gather_pixels(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather spatial positions from a (C, H, W) tensor -> (C, M)."""
    if x.data.ndim != 3:
        raise NDLabError(f"gather_pixels: expected (C,H,W), got {x.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise NDLabError(f"gather_pixels: bad index shapes {rows.shape} {cols.shape}")
    y = x.data[:, rows, cols].copy()

    def backward(gout):
        g = np.zeros_like(x.data)
        np.add.at(g, (slice(None), rows, cols), gout)
        return (g,)

    return x.tape.node("gather_pixels", y, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and losses

def sum_all(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum(), dtype=x.tape.dtype)

    def backward(gout):
        return (np.full_like(x.data, gout.reshape(())),)

    return x.tape.node("sum", y, (x,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over all elements, from logits (stable)."""
    t = np.asarray(targets, dtype=logits.tape.dtype)
    if t.shape != logits.data.shape:
        raise NDLabError(f"bce_with_logits: shape mismatch {logits.shape} vs {t.shape}")
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = logits.tape.dtype.type(per.size)
    y = np.asarray(per.sum() / n, dtype=logits.tape.dtype)

    def backward(gout):
        g = (_sigmoid(z) - t) / n
        return (g * gout.reshape(()),)

    return logits.tape.node("bce_with_logits", y, (logits,), backward)


def softmax_cross_entropy(logits: Tensor, onehot) -> Tensor:
    """Mean cross-entropy over columns of (K, M) class logits."""
    t = np.asarray(onehot, dtype=logits.tape.dtype)
    if logits.data.ndim != 2 or t.shape != logits.data.shape:
        raise NDLabError(
            f"softmax_cross_entropy: expected matching (K,M), got {logits.shape} vs {t.shape}")
    z = logits.data
    zmax = z.max(axis=0, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=0, keepdims=True)
    log_softmax = (z - zmax) - np.log(denom)
    m = logits.tape.dtype.type(z.shape[1])
    y = np.asarray(-(t * log_softmax).sum() / m, dtype=logits.tape.dtype)
    softmax = ez / denom

    def backward(gout):
        return ((softmax - t) / m * gout.reshape(()),)

    return logits.tape.node("softmax_cross_entropy", y, (logits,), backward)


def smooth_l1(pred: Tensor, target, normalizer: float | None = None) -> Tensor:
    """Huber-style smooth L1, summed over elements and divided by normalizer.

    Default normalizer is the element count (plain mean).
    """
    t = np.asarray(target, dtype=pred.tape.dtype)
    if t.shape != pred.data.shape:
        raise NDLabError(f"smooth_l1: shape mismatch {pred.shape} vs {t.shape}")
    n = pred.tape.dtype.type(pred.data.size if normalizer is None else normalizer)
    d = pred.data - t
    ad = np.abs(d)
    small = ad < 1.0
    per = np.where(small, 0.5 * d * d, ad - 0.5)
    y = np.asarray(per.sum() / n, dtype=pred.tape.dtype)

    def backward(gout):
        g = np.where(small, d, np.sign(d)) / n
        return (g * gout.reshape(()),)

    return pred.tape.node("smooth_l1", y, (pred,), backward)
