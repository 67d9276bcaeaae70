"""Minimal dense tensor with reverse-mode automatic differentiation.

Design notes:

* float32 everywhere, numpy-backed, row-major.
* Define-by-run: every op executed inside a ``with Tape():`` block appends a
  backward closure to the active tape. ``Tape.backward(loss)`` replays the
  closures in reverse append order, which is a valid topological order by
  construction. The tape is rebuilt on every step; nothing is cached.
* Gradients accumulate additively across fan-out; ``grad`` arrays are
  allocated lazily on first touch.
* Outside a tape, ops are plain numpy computations (inference mode).

Only the operations the routed-transformer stack actually needs are
implemented. Broadcasting is supported where those ops need it and nowhere
else.
"""

from __future__ import annotations

import numpy as np

MASK_SENTINEL = -1e9  # additive mask value; large negative, not inf, so softmax grads stay finite


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class MaskError(ValueError):
    """A softmax row had no unmasked entries."""


class Tensor:
    """Dense float32 array plus optional gradient.

    ``data`` is a numpy float32 array (any rank, C-order). ``grad`` is either
    None or an array of identical shape. ``requires_grad`` marks leaves that
    should receive gradients; op outputs inherit it while a tape is active.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # light operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


class _Node:
    __slots__ = ("name", "out", "fn")

    def __init__(self, name, out, fn):
        self.name = name
        self.out = out
        self.fn = fn


class Tape:
    """Ordered record of ops for one forward pass.

    Append order is the topological order; ``backward`` walks it in reverse.
    Use as a context manager around the forward computation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def op_shapes(self) -> list[tuple[str, tuple]]:
        """(name, output shape) per recorded op, in execution order."""
        return [(n.name, n.out.data.shape) for n in self.nodes]

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.out.grad is None:
                continue
            node.fn(node.out.grad)


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_out(data, name, inputs, fn) -> Tensor:
    """Wrap an op result; record on the tape when gradients are wanted."""
    tape = _active_tape()
    out = Tensor(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(name, out, fn))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along broadcast axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def constant(data) -> Tensor:
    """A non-differentiable tensor (masks, targets, frozen stats)."""
    return Tensor(np.asarray(data, dtype=np.float32))


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make_out(data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, -_unbroadcast(g, b.data.shape))

    return _make_out(data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make_out(data, "mul", (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    data = x.data * np.float32(c)

    def backward(g):
        _accum(x, g * np.float32(c))

    return _make_out(data, "scale", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    data = np.empty_like(xd)
    pos = xd >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(x, g * data * (1.0 - data))

    return _make_out(data, "sigmoid", (x,), backward)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = np.empty_like(xd)
    pos = xd >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    sig[~pos] = ex / (1.0 + ex)
    data = xd * sig

    def backward(g):
        _accum(x, g * sig * (1.0 + xd * (1.0 - sig)))

    return _make_out(data, "silu", (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    data = np.log(x.data)

    def backward(g):
        _accum(x, g / x.data)

    return _make_out(data, "log", (x,), backward)


# ---------------------------------------------------------------------------
# matmul and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make_out(data, "matmul", (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _make_out(data, "reshape", (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        _accum(x, np.transpose(g, inv))

    return _make_out(data, "transpose", (x,), backward)


def concat_lastaxis(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat: leading shapes differ, {a.shape} vs {b.shape}")
    data = np.concatenate([a.data, b.data], axis=-1)
    split = a.data.shape[-1]

    def backward(g):
        _accum(a, g[..., :split])
        _accum(b, g[..., split:])

    return _make_out(data, "concat", (a, b), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.float32(x.data.mean())

    def backward(g):
        _accum(x, np.full_like(x.data, g / n))

    return _make_out(data, "mean_all", (x,), backward)


def mean_square(x: Tensor) -> Tensor:
    """Scalar mean of squared entries (the MSE building block)."""
    n = x.data.size
    data = np.float32(np.mean(np.square(x.data, dtype=np.float64)))

    def backward(g):
        _accum(x, (g * 2.0 / n) * x.data)

    return _make_out(data, "mean_square", (x,), backward)


def rowwise_mean_square(x: Tensor) -> Tensor:
    """Mean of squares over the last axis; keeps the leading axes."""
    if x.data.ndim < 1 or x.data.shape[-1] == 0:
        raise ShapeError(f"rowwise_mean_square: empty last axis in {x.shape}")
    d = x.data.shape[-1]
    data = np.mean(np.square(x.data), axis=-1)

    def backward(g):
        _accum(x, g[..., None] * (2.0 / d) * x.data)

    return _make_out(data, "rowwise_mean_square", (x,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    return mean_square(sub(pred, target))


# ---------------------------------------------------------------------------
# normalisation, softmax, gated FFN
# ---------------------------------------------------------------------------

RMS_EPS = 1e-6


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    """Root-mean-square normalisation over the last axis, scaled by ``gain``."""
    if x.data.ndim < 1 or x.data.shape[-1] == 0:
        raise ShapeError(f"rms_norm: empty last axis in {x.shape}")
    if gain.data.shape != (x.data.shape[-1],):
        raise ShapeError(f"rms_norm: gain shape {gain.shape} does not match last axis of {x.shape}")
    d = x.data.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + np.float32(RMS_EPS))
    data = x.data * inv * gain.data

    def backward(g):
        gw = g * gain.data
        dot = np.sum(gw * x.data, axis=-1, keepdims=True)
        _accum(x, gw * inv - (inv ** 3) * x.data * dot / d)
        _accum(gain, np.sum(g * x.data * inv, axis=tuple(range(g.ndim - 1))))

    return _make_out(data, "rms_norm", (x, gain), backward)


def softmax_rows(x: Tensor, mask: Tensor | None = None) -> Tensor:
    """Row softmax over the last axis with an optional additive mask.

    Masked entries (mask at the sentinel) come out exactly 0 and every row
    must keep at least one unmasked entry.
    """
    scores = x.data if mask is None else x.data + mask.data
    if mask is not None:
        dead = np.all(mask.data <= MASK_SENTINEL / 2, axis=-1)
        if np.any(dead):
            raise MaskError("softmax_rows: a row is fully masked")
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    z = e.sum(axis=-1, keepdims=True)
    data = e / z

    def backward(g):
        dot = np.sum(g * data, axis=-1, keepdims=True)
        _accum(x, data * (g - dot))

    return _make_out(data, "softmax_rows", (x,) if mask is None else (x, mask), backward)


def swiglu_ffn(x: Tensor, w_in_a: Tensor, w_in_b: Tensor, w_out: Tensor) -> Tensor:
    """Gated FFN: (silu(x @ w_in_a) * (x @ w_in_b)) @ w_out."""
    return matmul(mul(silu(matmul(x, w_in_a)), matmul(x, w_in_b)), w_out)


# ---------------------------------------------------------------------------
# index ops
# ---------------------------------------------------------------------------

def _check_token_indices(idx: np.ndarray, t_extent: int) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= t_extent):
        raise IndexError(f"token index out of range for extent {t_extent}")
    # duplicates within a row break scatter semantics
    sorted_idx = np.sort(idx, axis=-1)
    if idx.shape[-1] > 1 and np.any(sorted_idx[..., 1:] == sorted_idx[..., :-1]):
        raise IndexError("duplicate token indices in selection")


def gather_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the token axis: x[..., idx, :].

    ``idx`` has shape ``x.shape[:-2] + (k,)`` with unique, in-range entries
    per row.
    """
    idx = np.asarray(idx)
    if idx.shape != x.data.shape[:-2] + idx.shape[-1:]:
        raise IndexError(f"gather_tokens: index shape {idx.shape} does not match {x.shape}")
    _check_token_indices(idx, x.data.shape[-2])
    data = np.take_along_axis(x.data, idx[..., None], axis=-2)

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        flat_g = g.reshape(-1, g.shape[-2], g.shape[-1])
        flat_gx = gx.reshape(-1, gx.shape[-2], gx.shape[-1])
        flat_idx = idx.reshape(-1, idx.shape[-1])
        for r in range(flat_gx.shape[0]):
            np.add.at(flat_gx[r], flat_idx[r], flat_g[r])
        _accum(x, gx)

    return _make_out(data, "gather_tokens", (x,), backward)


def scatter_tokens(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of ``base`` with ``rows`` written at token positions ``idx``.

    Positions outside ``idx`` keep the base rows bit-identically.
    """
    idx = np.asarray(idx)
    if idx.shape != base.data.shape[:-2] + idx.shape[-1:]:
        raise IndexError(f"scatter_tokens: index shape {idx.shape} does not match {base.shape}")
    if rows.data.shape != idx.shape + base.data.shape[-1:]:
        raise ShapeError(f"scatter_tokens: rows shape {rows.shape} does not match indices {idx.shape}")
    _check_token_indices(idx, base.data.shape[-2])
    data = base.data.copy()
    np.put_along_axis(data, idx[..., None], rows.data, axis=-2)

    def backward(g):
        g_rows = np.take_along_axis(g, idx[..., None], axis=-2)
        _accum(rows, g_rows)
        if base.requires_grad:
            g_base = g.copy()
            np.put_along_axis(g_base, idx[..., None], 0.0, axis=-2)
            _accum(base, g_base)

    return _make_out(data, "scatter_tokens", (base, rows), backward)


def masked_residual_add(x: Tensor, delta: Tensor, mask: np.ndarray) -> Tensor:
    """x + delta where mask is 1 along the token axis; elsewhere x, bit-exact.

    ``mask`` is a constant 0/1 array shaped like the token axis of ``x``.
    """
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != x.data.shape[:-1]:
        raise ShapeError(f"masked_residual_add: mask shape {mask.shape} does not match {x.shape}")
    keep = mask[..., None] > 0
    data = np.where(keep, x.data + delta.data, x.data)

    def backward(g):
        _accum(x, g)
        _accum(delta, g * mask[..., None])

    return _make_out(data, "masked_residual_add", (x, delta), backward)


def shift_tokens(x: Tensor) -> Tensor:
    """Shift rows one step along the token axis: out_t = x_{t-1}, out_0 = 0."""
    data = np.zeros_like(x.data)
    data[..., 1:, :] = x.data[..., :-1, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., :-1, :] = g[..., 1:, :]
        _accum(x, gx)

    return _make_out(data, "shift_tokens", (x,), backward)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each token row of ``x`` by the matching scalar in ``s``."""
    if s.data.shape != x.data.shape[:-1]:
        raise ShapeError(f"scale_rows: scale shape {s.shape} does not match {x.shape}")
    data = x.data * s.data[..., None]

    def backward(g):
        _accum(x, g * s.data[..., None])
        _accum(s, np.sum(g * x.data, axis=-1))

    return _make_out(data, "scale_rows", (x, s), backward)


# ---------------------------------------------------------------------------
# stop-gradient, embedding, losses
# ---------------------------------------------------------------------------

def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward (shares the buffer), contributes zero backward."""
    return Tensor(x.data, requires_grad=False)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"embedding: id out of range for vocabulary {table.data.shape[0]}")
    data = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        _accum(table, gt)

    return _make_out(data, "embedding", (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over the vocabulary axis, in nats.

    ``targets`` holds integer ids shaped like the leading axes of ``logits``;
    entries equal to ``ignore_index`` are excluded from the mean.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(f"cross_entropy: target shape {targets.shape} does not match {logits.shape}")
    v = logits.data.shape[-1]
    flat = logits.data.reshape(-1, v)
    tgt = targets.reshape(-1)
    valid = tgt != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no valid target positions")
    if tgt[valid].min() < 0 or tgt[valid].max() >= v:
        raise IndexError(f"cross_entropy: target id out of range for vocabulary {v}")
    m = flat.max(axis=-1, keepdims=True)
    z = np.log(np.exp(flat - m).sum(axis=-1, keepdims=True)) + m
    logp = flat - z
    nll = -logp[np.arange(flat.shape[0]), np.where(valid, tgt, 0)]
    data = np.float32(nll[valid].sum(dtype=np.float64) / n_valid)

    def backward(g):
        if not logits.requires_grad:
            return
        p = np.exp(logp)
        p[np.arange(flat.shape[0]), np.where(valid, tgt, 0)] -= 1.0
        p[~valid] = 0.0
        _accum(logits, (p * (g / n_valid)).reshape(logits.data.shape))

    return _make_out(data, "cross_entropy", (logits,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy against constant 0/1 targets, stable form."""
    targets = np.asarray(targets, dtype=np.float32)
    if targets.shape != logits.data.shape:
        raise ShapeError(f"bce_with_logits: target shape {targets.shape} does not match {logits.shape}")
    ld = logits.data
    n = ld.size
    loss = np.maximum(ld, 0) - ld * targets + np.log1p(np.exp(-np.abs(ld)))
    data = np.float32(loss.sum(dtype=np.float64) / n)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-ld))
        _accum(logits, (sig - targets) * (g / n))

    return _make_out(data, "bce_with_logits", (logits,), backward)
