"""Surprise signals that drive token routing.

Hidden states are treated as means of isotropic Gaussians with shared
variance, under which the divergence between two beliefs collapses to a
scaled squared distance between their mean vectors. That gives two cheap
per-token signals:

* static surprise  ``d_st = mean(delta^2)``  - how much the block moved the
  token, i.e. surprise under the hypothesis that nothing changes;
* change surprise  ``d_ch = mean((delta - predicted)^2)`` - the same move
  measured against a learned prediction of it.

Two gating criteria combine them. The expected-change signal fires when the
prediction explains the update better than stasis; the unexpected-change
signal fires when static surprise spikes above its own running average. A
probabilistic OR merges both into one continuous gate in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from routelab.tensor import (
    Tensor,
    add,
    constant,
    log,
    mul,
    rowwise_mean_square,
    scale,
    sigmoid,
    sub,
)


@dataclass
class SurpriseBundle:
    """Per-token routing signals for one layer (tensors over the token axis)."""

    d_st: Tensor
    d_ch: Tensor
    ce: Tensor
    cu: Tensor
    g_cont: Tensor


@dataclass
class RouterParams:
    """Learnable gate parameters plus the schedule-driven temperatures.

    ``o_ce`` (prediction offset) and ``m_cu`` (novelty multiplier) are scalar
    tensors so the optimizer can move them; both must stay positive.
    ``beta_ce`` / ``beta_cu`` are plain floats unless betas are learnable.
    """

    o_ce: Tensor
    m_cu: Tensor
    beta_ce: float | Tensor
    beta_cu: float | Tensor
    ma_decay: float = 0.9


def kl_isotropic(mu_p: np.ndarray, mu_q: np.ndarray, k: float) -> float:
    """Divergence between two isotropic Gaussians with shared variance ``k``.

    Equals ||mu_p - mu_q||^2 / (2k); computed in float64 since this doubles
    as a numeric reference.
    """
    if k <= 0:
        raise ValueError(f"kl_isotropic: variance k must be positive, got {k}")
    mu_p = np.asarray(mu_p, dtype=np.float64)
    mu_q = np.asarray(mu_q, dtype=np.float64)
    if mu_p.shape != mu_q.shape:
        raise ValueError(f"kl_isotropic: mean shapes differ, {mu_p.shape} vs {mu_q.shape}")
    diff = mu_p - mu_q
    return float(diff @ diff) / (2.0 * float(k))


def static_surprise(delta: Tensor) -> Tensor:
    """Per-token mean squared block residual."""
    return rowwise_mean_square(delta)


def change_surprise(delta: Tensor, predicted: Tensor) -> Tensor:
    """Per-token mean squared error between the residual and its prediction."""
    return rowwise_mean_square(sub(delta, predicted))


def causal_moving_average(d_st: np.ndarray, decay: float, init: float | None = None) -> np.ndarray:
    """Exponential moving average along the token axis, strictly causal.

    ``ma_t = decay * ma_{t-1} + (1 - decay) * d_st_t`` with ``ma_{-1}`` set to
    ``init`` (defaults to the first value, so ``ma_0 == d_st_0``). Operates on
    plain arrays: the average is a target statistic, not a gradient path.
    """
    if not 0.0 < decay < 1.0:
        raise ValueError(f"causal_moving_average: decay must be in (0,1), got {decay}")
    d = np.asarray(d_st, dtype=np.float32)
    out = np.empty_like(d)
    prev = d[..., 0] if init is None else np.full(d.shape[:-1], init, dtype=np.float32)
    for t in range(d.shape[-1]):
        prev = decay * prev + (1.0 - decay) * d[..., t]
        out[..., t] = prev
    return out


def gating_signals(d_st: Tensor, d_ch: Tensor, ma: np.ndarray, params: RouterParams) -> tuple[Tensor, Tensor]:
    """Expected-change and unexpected-change signals.

    ``ce = d_st - (d_ch - log(o_ce))`` and ``cu = d_st - m_cu * ma``, with the
    moving average entering as a frozen constant.
    """
    ce = sub(d_st, sub(d_ch, log(params.o_ce)))
    cu = sub(d_st, mul(params.m_cu, constant(ma)))
    return ce, cu


def probabilistic_or_gate(ce: Tensor, cu: Tensor, beta_ce, beta_cu) -> Tensor:
    """g = a + b - a*b with a = sigmoid(beta_ce * ce), b = sigmoid(beta_cu * cu)."""
    a = sigmoid(mul(ce, beta_ce) if isinstance(beta_ce, Tensor) else scale(ce, beta_ce))
    b = sigmoid(mul(cu, beta_cu) if isinstance(beta_cu, Tensor) else scale(cu, beta_cu))
    return sub(add(a, b), mul(a, b))


def surprise_bundle(
    delta: Tensor,
    predicted: Tensor,
    params: RouterParams,
    ma: np.ndarray | None = None,
) -> SurpriseBundle:
    """Full signal path from residuals to the continuous gate."""
    d_st = static_surprise(delta)
    d_ch = change_surprise(delta, predicted)
    if ma is None:
        ma = causal_moving_average(d_st.data, params.ma_decay)
    ce, cu = gating_signals(d_st, d_ch, ma, params)
    g = probabilistic_or_gate(ce, cu, params.beta_ce, params.beta_cu)
    return SurpriseBundle(d_st=d_st, d_ch=d_ch, ce=ce, cu=cu, g_cont=g)
