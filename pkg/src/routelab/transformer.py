"""Decoder blocks, causal multi-head attention, KV caches, subset attention.

All blocks are pre-norm residual: ``out = x + attn(norm(x)) + ffn(norm(x + attn))``
with RMS normalisation and a SwiGLU feed-forward. The subset variant runs the
same block over a sorted slice of token positions so that bypassed tokens are
untouched and invisible: they contribute no keys or values, which is what
makes attention cost scale with the square of the kept fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from routelab.tensor import (
    MASK_SENTINEL,
    Tensor,
    add,
    constant,
    gather_tokens,
    matmul,
    mul,
    reshape,
    rms_norm,
    scale,
    scatter_tokens,
    silu,
    softmax_rows,
    transpose,
)


class CacheStateError(RuntimeError):
    """KV cache was asked to append at a non-increasing position."""


@dataclass
class BlockWeights:
    """One decoder block: attention projections, two norms, SwiGLU weights."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm_attn: Tensor
    norm_ffn: Tensor
    ffn_a: Tensor
    ffn_b: Tensor
    ffn_out: Tensor
    heads: int

    @staticmethod
    def create(d: int, heads: int, ffn_hidden: int, rng: np.random.Generator,
               init_std: float = 0.02) -> "BlockWeights":
        if d % heads != 0:
            raise ValueError(f"head count {heads} must divide model dim {d}")

        def w(shape):
            return Tensor(rng.normal(0.0, init_std, shape).astype(np.float32), requires_grad=True)

        return BlockWeights(
            wq=w((d, d)), wk=w((d, d)), wv=w((d, d)), wo=w((d, d)),
            norm_attn=Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
            norm_ffn=Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
            ffn_a=w((d, ffn_hidden)), ffn_b=w((d, ffn_hidden)), ffn_out=w((ffn_hidden, d)),
            heads=heads,
        )

    def params(self) -> list[tuple[str, Tensor]]:
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo),
                ("norm_attn", self.norm_attn), ("norm_ffn", self.norm_ffn),
                ("ffn_a", self.ffn_a), ("ffn_b", self.ffn_b), ("ffn_out", self.ffn_out)]


class KVCache:
    """Append-only per-layer store of past keys and values.

    Entries are (position, key, value) with strictly increasing positions;
    routed-around tokens simply never appear.
    """

    def __init__(self):
        self.positions: list[int] = []
        self._keys: list[np.ndarray] = []    # each (heads, head_dim)
        self._values: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.positions)

    def append(self, pos: int, k: np.ndarray, v: np.ndarray) -> None:
        if self.positions and pos <= self.positions[-1]:
            raise CacheStateError(
                f"cache position {pos} does not advance past {self.positions[-1]}")
        self.positions.append(int(pos))
        self._keys.append(k)
        self._values.append(v)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return np.stack(self._keys, axis=1), np.stack(self._values, axis=1)  # (heads, n, hd)


class CostMeter:
    """Counts attention score pairs and KV entries per layer.

    One "pair" is a single (query token, attended position) score evaluation,
    counted per head. A dense causal layer over T tokens costs
    heads * T*(T+1)/2.
    """

    def __init__(self):
        self.attn_pairs: dict[int, int] = {}
        self.kv_entries: dict[int, int] = {}

    def add_pairs(self, layer: int, n: int) -> None:
        self.attn_pairs[layer] = self.attn_pairs.get(layer, 0) + int(n)

    def add_kv(self, layer: int, n: int) -> None:
        self.kv_entries[layer] = self.kv_entries.get(layer, 0) + int(n)

    def total_pairs(self) -> int:
        return sum(self.attn_pairs.values())


_CAUSAL_MASKS: dict[int, np.ndarray] = {}


def causal_mask(t: int) -> np.ndarray:
    """(t, t) additive mask: 0 on and below the diagonal, sentinel above."""
    m = _CAUSAL_MASKS.get(t)
    if m is None:
        m = np.triu(np.full((t, t), MASK_SENTINEL, dtype=np.float32), k=1)
        _CAUSAL_MASKS[t] = m
    return m


def causal_pairs(t: int, heads: int) -> int:
    """Score pairs for a dense causal pass over t tokens."""
    return heads * t * (t + 1) // 2


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.data.shape
    hd = d // heads
    y = reshape(x, (*lead, t, heads, hd))
    ln = len(lead)
    return transpose(y, (*range(ln), ln + 1, ln, ln + 2))  # (..., heads, t, hd)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, t, hd = x.data.shape
    ln = len(lead)
    y = transpose(x, (*range(ln), ln + 1, ln, ln + 2))  # (..., t, heads, hd)
    return reshape(y, (*lead, t, heads * hd))


def _attention(xn: Tensor, w: BlockWeights) -> Tensor:
    """Causal multi-head attention over normalised inputs, any leading dims."""
    q = _split_heads(matmul(xn, w.wq), w.heads)
    k = _split_heads(matmul(xn, w.wk), w.heads)
    v = _split_heads(matmul(xn, w.wv), w.heads)
    hd = q.data.shape[-1]
    ndim = k.data.ndim
    kt = transpose(k, (*range(ndim - 2), ndim - 1, ndim - 2))
    scores = scale(matmul(q, kt), 1.0 / math.sqrt(hd))
    probs = softmax_rows(scores, constant(causal_mask(xn.data.shape[-2])))
    ctx = matmul(probs, v)
    return matmul(_merge_heads(ctx), w.wo)


def block_parts(x: Tensor, w: BlockWeights) -> tuple[Tensor, Tensor]:
    """(attention contribution, feed-forward contribution) of one block."""
    attn = _attention(rms_norm(x, w.norm_attn), w)
    u = add(x, attn)
    un = rms_norm(u, w.norm_ffn)
    ffn = matmul(mul(silu(matmul(un, w.ffn_a)), matmul(un, w.ffn_b)), w.ffn_out)
    return attn, ffn


def block_delta(x: Tensor, w: BlockWeights) -> Tensor:
    """Total residual contribution, so that block output = x + delta."""
    attn, ffn = block_parts(x, w)
    return add(attn, ffn)


def block_forward(x: Tensor, w: BlockWeights, meter: CostMeter | None = None,
                  layer: int = 0) -> Tensor:
    """Full-sequence block pass; output shape equals input shape."""
    if meter is not None:
        t = x.data.shape[-2]
        batch = int(np.prod(x.data.shape[:-2], dtype=np.int64)) if x.data.ndim > 2 else 1
        meter.add_pairs(layer, batch * causal_pairs(t, w.heads))
        meter.add_kv(layer, batch * t)
    return add(x, block_delta(x, w))


def _check_sorted_unique(idx: np.ndarray) -> None:
    flat_ok = np.all(np.diff(idx, axis=-1) > 0) if idx.shape[-1] > 1 else True
    if not flat_ok:
        raise IndexError("subset indices must be strictly ascending")


def subset_block_delta(x: Tensor, idx: np.ndarray, w: BlockWeights) -> tuple[Tensor, Tensor]:
    """Gather rows at ``idx`` and run the block only among them.

    Returns (gathered rows, their deltas). Because ``idx`` is sorted
    ascending, the ordinary causal mask over the subset enforces causality in
    the original positions.
    """
    idx = np.asarray(idx)
    _check_sorted_unique(idx)
    x_s = gather_tokens(x, idx)
    attn, ffn = block_parts(x_s, w)
    return x_s, add(attn, ffn)


def subset_block_forward(x: Tensor, selected: np.ndarray, w: BlockWeights,
                         meter: CostMeter | None = None, layer: int = 0) -> Tensor:
    """Block pass restricted to ``selected`` positions.

    Rows outside the selection are returned bit-identical to the input; rows
    inside attend only among the selection (causally, by original position).
    ``selected`` may be empty, in which case the input passes straight through.
    """
    selected = np.asarray(selected)
    if selected.ndim == 1 and x.data.ndim > 2:
        selected = np.broadcast_to(selected, x.data.shape[:-2] + selected.shape)
    if selected.shape[-1] == 0:
        return x
    if meter is not None:
        k = selected.shape[-1]
        batch = int(np.prod(selected.shape[:-1], dtype=np.int64)) if selected.ndim > 1 else 1
        meter.add_pairs(layer, batch * causal_pairs(k, w.heads))
        meter.add_kv(layer, batch * k)
    x_s, delta = subset_block_delta(x, selected, w)
    return scatter_tokens(x, selected, add(x_s, delta))


# ---------------------------------------------------------------------------
# incremental (decode-time) path
# ---------------------------------------------------------------------------

def _rms_np(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(1e-6)) * gain


def _silu_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = x[~pos] * e / (1.0 + e)
    return out


def block_decode_step(x_vec: np.ndarray, w: BlockWeights, cache: KVCache, pos: int,
                      meter: CostMeter | None = None, layer: int = 0) -> np.ndarray:
    """Single-token block pass that appends this token's K/V to the cache.

    ``x_vec`` is a plain (d,) array; decoding never needs gradients. The
    token attends to every cached entry plus itself, so no mask is needed:
    cached positions never exceed ``pos``.
    """
    d = x_vec.shape[-1]
    heads = w.heads
    hd = d // heads
    xn = _rms_np(x_vec, w.norm_attn.data)
    q = (xn @ w.wq.data).reshape(heads, hd)
    k = (xn @ w.wk.data).reshape(heads, hd)
    v = (xn @ w.wv.data).reshape(heads, hd)
    cache.append(pos, k, v)
    keys, values = cache.stacked()              # (heads, n, hd)
    n = keys.shape[1]
    scores = np.einsum("hd,hnd->hn", q, keys) / np.float32(math.sqrt(hd))
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = np.einsum("hn,hnd->hd", probs, values).reshape(d)
    attn = ctx @ w.wo.data
    if meter is not None:
        meter.add_pairs(layer, heads * n)
        meter.add_kv(layer, 1)
    u = x_vec + attn
    un = _rms_np(u, w.norm_ffn.data)
    ffn = (_silu_np(un @ w.ffn_a.data) * (un @ w.ffn_b.data)) @ w.ffn_out.data
    return u + ffn


def block_decode_delta(x_vec: np.ndarray, w: BlockWeights, cache: KVCache, pos: int,
                       meter: CostMeter | None = None, layer: int = 0) -> np.ndarray:
    """Single-token block contribution: decode-step output minus the input."""
    return block_decode_step(x_vec, w, cache, pos, meter=meter, layer=layer) - x_vec
