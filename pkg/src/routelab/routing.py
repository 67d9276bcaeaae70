"""Token selection and the causal routers that approximate it at decode time.

Selection over a full sequence looks at every token's gate at once, which is
fine for training and teacher-forced scoring but not available while
generating. A small causal MLP per routed layer is therefore distilled
against the selection mask and takes over at decode time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from routelab.tensor import (
    Tensor,
    add,
    concat_lastaxis,
    matmul,
    reshape,
    sigmoid,
    silu,
)


class ConfigError(ValueError):
    """A routing hyperparameter is out of its valid range."""


@dataclass
class RoutingDecision:
    """Outcome of selecting tokens at one routed layer for one sequence."""

    selected: np.ndarray          # sorted ascending token indices
    mask: np.ndarray              # float32 0/1, length T
    gates: np.ndarray             # gate values the selection was based on, length T
    capacity_used: int

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float32)


def topk_capacity(t: int, gamma: float) -> int:
    """floor(gamma * T), clamped to at least one token."""
    if gamma <= 0 or gamma > 1:
        raise ConfigError(f"capacity fraction must be in (0, 1], got {gamma}")
    return max(1, math.floor(gamma * t))


def topk_select(gates: np.ndarray, gamma: float) -> RoutingDecision:
    """Pick the k = floor(gamma*T) highest-gated tokens.

    Ties break toward the earliest index so selection is deterministic.
    """
    gates = np.asarray(gates)
    t = gates.shape[0]
    if t < 1:
        raise ConfigError("topk_select: empty gate vector")
    k = topk_capacity(t, gamma)
    # stable sort on descending gate value; stability gives earliest-index ties
    order = np.argsort(-gates, kind="stable")
    selected = np.sort(order[:k])
    mask = np.zeros(t, dtype=np.float32)
    mask[selected] = 1.0
    return RoutingDecision(selected=selected, mask=mask, gates=np.asarray(gates, dtype=np.float32), capacity_used=k)


def threshold_select(gates: np.ndarray, g_th: float) -> RoutingDecision:
    """Pick every token whose gate meets the threshold (boundary inclusive)."""
    gates = np.asarray(gates)
    selected = np.flatnonzero(gates >= g_th)
    mask = np.zeros(gates.shape[0], dtype=np.float32)
    mask[selected] = 1.0
    return RoutingDecision(selected=selected, mask=mask, gates=np.asarray(gates, dtype=np.float32),
                           capacity_used=int(selected.size))


def distillation_targets(decision: RoutingDecision) -> np.ndarray:
    """The binary selection mask as a constant training target."""
    return decision.mask.copy()


@dataclass
class CausalRouterWeights:
    """Two-layer MLP scoring each token's chance of selection.

    Input is the token's own pre-layer state (depth routing) or the current
    and previous pre-layer states concatenated (temporal routing).
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(in_dim: int, hidden: int, rng: np.random.Generator, init_std: float = 0.02) -> "CausalRouterWeights":
        return CausalRouterWeights(
            w1=Tensor(rng.normal(0.0, init_std, (in_dim, hidden)).astype(np.float32), requires_grad=True),
            b1=Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
            w2=Tensor(rng.normal(0.0, init_std, (hidden, 1)).astype(np.float32), requires_grad=True),
            b2=Tensor(np.zeros(1, dtype=np.float32), requires_grad=True),
        )

    def params(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


def causal_router_logits(inputs: Tensor, w: CausalRouterWeights) -> Tensor:
    """Pre-sigmoid selection scores, one per token."""
    h = silu(add(matmul(inputs, w.w1), w.b1))
    out = add(matmul(h, w.w2), w.b2)
    return out  # (..., T, 1)


def causal_router_forward(inputs: Tensor, w: CausalRouterWeights) -> Tensor:
    """Per-token selection probabilities. Causality holds by construction:

    the score at position t reads only that row of ``inputs``, so it can only
    depend on states from positions <= t.
    """
    logits = causal_router_logits(inputs, w)
    return reshape(sigmoid(logits), logits.data.shape[:-1])


def stt_router_inputs(x: Tensor) -> Tensor:
    """[x_t || x_{t-1}] rows for the temporal router; t=0 pairs with zeros.

    Callers pass a detached state; the router is trained on its own loss and
    must not shape the backbone through its inputs.
    """
    prev = np.zeros_like(x.data)
    prev[..., 1:, :] = x.data[..., :-1, :]
    return concat_lastaxis(x, Tensor(prev))


@dataclass
class ModRouterWeights:
    """Single linear scorer for the depth-skip baseline."""

    w: Tensor

    @staticmethod
    def create(d: int, rng: np.random.Generator, init_std: float = 0.02) -> "ModRouterWeights":
        return ModRouterWeights(w=Tensor(rng.normal(0.0, init_std, (d, 1)).astype(np.float32), requires_grad=True))

    def params(self) -> list[tuple[str, Tensor]]:
        return [("w", self.w)]


def mod_baseline_gates(x: Tensor, router: ModRouterWeights) -> Tensor:
    """Raw linear importance scores; they also multiply the block delta."""
    scores = matmul(x, router.w)
    return reshape(scores, scores.data.shape[:-1])
