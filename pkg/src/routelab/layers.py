"""The routed layer types.

Three ways of skipping work, all sharing the surprise machinery:

* decision + dynamic pair: the decision layer runs a full block and a cheap
  parallel predictor of its own residual; the following dynamic layer turns
  those signals into gates and runs its block only on the Top-K tokens.
* temporal (stt) layer: one unified layer whose predictor forecasts the
  current token's residual from the previous token's processed state; routing
  is Top-K or thresholded on the gate.
* depth-skip (mod) baseline: a plain learned linear score, Top-K, and the raw
  score multiplying the block contribution.

During training the temporal layer computes the full block for every token
(the true residuals feed the signals and the predictor target); the saving is
realised at decode time through the causal router. The dynamic layer's block,
by contrast, genuinely runs on the selected subset even in training, since
its signals come from the decision layer.

Everything here works on (B, T, d) activations; selection happens per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from routelab.surprise import RouterParams, SurpriseBundle, surprise_bundle
from routelab.routing import (
    CausalRouterWeights,
    ModRouterWeights,
    RoutingDecision,
    causal_router_logits,
    distillation_targets,
    mod_baseline_gates,
    stt_router_inputs,
    threshold_select,
    topk_select,
)
from routelab.tensor import (
    Tensor,
    add,
    bce_with_logits,
    constant,
    gather_tokens,
    masked_residual_add,
    matmul,
    mse,
    mul,
    reshape,
    scale_rows,
    scatter_tokens,
    shift_tokens,
    silu,
    stop_gradient,
)
from routelab.transformer import (
    BlockWeights,
    CostMeter,
    _silu_np,
    block_forward,
    block_parts,
    causal_pairs,
    subset_block_delta,
)


@dataclass
class ResidualPredictorWeights:
    """Two-layer MLP d -> ceil(f*d) -> d forecasting a block residual.

    Serves both the parallel prior (input: the token's own pre-block state)
    and the transition predictor (input: the previous token's processed
    state); only the wiring differs.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(d: int, prior_factor: float, rng: np.random.Generator,
               init_std: float = 0.02) -> "ResidualPredictorWeights":
        hidden = math.ceil(prior_factor * d)
        return ResidualPredictorWeights(
            w1=Tensor(rng.normal(0.0, init_std, (d, hidden)).astype(np.float32), requires_grad=True),
            b1=Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
            w2=Tensor(rng.normal(0.0, init_std, (hidden, d)).astype(np.float32), requires_grad=True),
            b2=Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        return add(matmul(silu(add(matmul(x, self.w1), self.b1)), self.w2), self.b2)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        h = _silu_np(x @ self.w1.data + self.b1.data)
        return h @ self.w2.data + self.b2.data

    def params(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


@dataclass
class GateParams:
    """Learned routing biases for one layer; kept positive after each update."""

    o_ce: Tensor
    m_cu: Tensor
    beta_ce_scale: Tensor | None = None   # only when betas are learnable
    beta_cu_scale: Tensor | None = None

    @staticmethod
    def create(learnable_betas: bool = False) -> "GateParams":
        gp = GateParams(
            o_ce=Tensor(np.float32(1.0), requires_grad=True),
            m_cu=Tensor(np.float32(1.0), requires_grad=True),
        )
        if learnable_betas:
            gp.beta_ce_scale = Tensor(np.float32(1.0), requires_grad=True)
            gp.beta_cu_scale = Tensor(np.float32(1.0), requires_grad=True)
        return gp

    def params(self) -> list[tuple[str, Tensor]]:
        out = [("o_ce", self.o_ce), ("m_cu", self.m_cu)]
        if self.beta_ce_scale is not None:
            out += [("beta_ce_scale", self.beta_ce_scale), ("beta_cu_scale", self.beta_cu_scale)]
        return out

    def router_params(self, betas: tuple[float, float], ma_decay: float) -> RouterParams:
        b_ce, b_cu = betas
        if self.beta_ce_scale is not None:
            b_ce = mul(self.beta_ce_scale, constant(b_ce))
            b_cu = mul(self.beta_cu_scale, constant(b_cu))
        return RouterParams(o_ce=self.o_ce, m_cu=self.m_cu, beta_ce=b_ce, beta_cu=b_cu,
                            ma_decay=ma_decay)


@dataclass
class LayerOutput:
    """What one layer hands back to the stack."""

    x: Tensor
    bundle: SurpriseBundle | None = None
    decisions: list[RoutingDecision] | None = None
    l_pred: Tensor | None = None
    l_causal: Tensor | None = None
    capacity_frac: float | None = None
    cr_probs: np.ndarray | None = None


def _gather_scalars(values: Tensor, idx: np.ndarray) -> Tensor:
    """Differentiable gather of per-token scalars: (..., T) at (..., k)."""
    expanded = reshape(values, values.data.shape + (1,))
    picked = gather_tokens(expanded, idx)
    return reshape(picked, idx.shape)


def _select_rows(gates: np.ndarray, mode: str, gamma: float, g_th: float) -> list[RoutingDecision]:
    flat = gates.reshape(-1, gates.shape[-1])
    if mode == "fixed":
        return [topk_select(row, gamma) for row in flat]
    return [threshold_select(row, g_th) for row in flat]


def _mask_from(decisions: list[RoutingDecision], shape: tuple) -> np.ndarray:
    return np.stack([d.mask for d in decisions]).reshape(shape)


def _causal_loss(inputs: Tensor, cr: CausalRouterWeights, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """BCE of the causal router against the selection mask (inputs detached)."""
    logits = causal_router_logits(inputs, cr)
    flat_logits = reshape(logits, logits.data.shape[:-1])
    loss = bce_with_logits(flat_logits, mask)
    probs = 1.0 / (1.0 + np.exp(-flat_logits.data))
    return loss, probs


class DenseLayer:
    kind = "dense"

    def __init__(self, cfg, rng):
        self.block = BlockWeights.create(cfg.d, cfg.heads, cfg.ffn_hidden(), rng, cfg.init_std)

    def params(self):
        return [(f"block.{n}", p) for n, p in self.block.params()]

    def forward(self, x: Tensor, ctx, meter: CostMeter | None, layer: int) -> LayerOutput:
        return LayerOutput(x=block_forward(x, self.block, meter=meter, layer=layer))


class DecisionLayer:
    """Full block plus a parallel residual prior; emits signals, never routes."""

    kind = "decision"

    def __init__(self, cfg, rng):
        self.block = BlockWeights.create(cfg.d, cfg.heads, cfg.ffn_hidden(), rng, cfg.init_std)
        self.prior = ResidualPredictorWeights.create(cfg.d, cfg.prior_factor, rng,
                                                     cfg.predictor_init_std)

    def params(self):
        out = [(f"block.{n}", p) for n, p in self.block.params()]
        out += [(f"prior.{n}", p) for n, p in self.prior.params()]
        return out

    def forward_parts(self, x: Tensor, meter, layer):
        attn, ffn = block_parts(x, self.block)
        delta = add(attn, ffn)
        x_post = add(x, delta)
        delta_hat = self.prior.forward(x)
        l_prior = mse(delta_hat, stop_gradient(delta))
        if meter is not None:
            t = x.data.shape[-2]
            rows = int(np.prod(x.data.shape[:-2], dtype=np.int64)) if x.data.ndim > 2 else 1
            meter.add_pairs(layer, rows * causal_pairs(t, self.block.heads))
            meter.add_kv(layer, rows * t)
        return x_post, delta, delta_hat, l_prior


class DynamicLayer:
    """Routes on the preceding decision layer's surprise signals."""

    kind = "dynamic"

    def __init__(self, cfg, rng):
        self.block = BlockWeights.create(cfg.d, cfg.heads, cfg.ffn_hidden(), rng, cfg.init_std)
        self.gate = GateParams.create(cfg.learnable_betas)
        self.cr = CausalRouterWeights.create(cfg.d, max(1, cfg.d // 2), rng, cfg.init_std)
        self.gamma = cfg.gamma
        self.ma_decay = cfg.ma_decay

    def params(self):
        out = [(f"block.{n}", p) for n, p in self.block.params()]
        out += [(f"gate.{n}", p) for n, p in self.gate.params()]
        out += [(f"cr.{n}", p) for n, p in self.cr.params()]
        return out

    def forward(self, x: Tensor, delta: Tensor, delta_hat: Tensor,
                betas: tuple[float, float], meter: CostMeter | None = None,
                layer: int = 0) -> LayerOutput:
        t = x.data.shape[-2]
        params = self.gate.router_params(betas, self.ma_decay)
        bundle = surprise_bundle(delta, delta_hat, params)
        decisions = _select_rows(bundle.g_cont.data, "fixed", self.gamma, 0.0)
        k = decisions[0].capacity_used
        idx = np.stack([d.selected for d in decisions]).reshape(x.data.shape[:-2] + (k,))

        if meter is not None:
            rows = len(decisions)
            meter.add_pairs(layer, rows * causal_pairs(k, self.block.heads))
            meter.add_kv(layer, rows * k)
        x_s, dyn_delta = subset_block_delta(x, idx, self.block)
        g_sel = _gather_scalars(bundle.g_cont, idx)
        y = scatter_tokens(x, idx, add(x_s, scale_rows(dyn_delta, g_sel)))

        mask = _mask_from(decisions, x.data.shape[:-1])
        l_causal, cr_probs = _causal_loss(stop_gradient(x), self.cr, mask)
        return LayerOutput(x=y, bundle=bundle, decisions=decisions, l_causal=l_causal,
                           capacity_frac=k / t, cr_probs=cr_probs)


class SttLayer:
    """Unified temporal layer: transition predictor, gate, and its own block."""

    kind = "stt"

    def __init__(self, cfg, rng):
        self.block = BlockWeights.create(cfg.d, cfg.heads, cfg.ffn_hidden(), rng, cfg.init_std)
        self.tpn = ResidualPredictorWeights.create(cfg.d, cfg.prior_factor, rng,
                                                   cfg.predictor_init_std)
        self.gate = GateParams.create(cfg.learnable_betas)
        self.cr = CausalRouterWeights.create(2 * cfg.d, max(1, cfg.d // 2), rng, cfg.init_std)
        self.gamma = cfg.gamma
        self.g_th = cfg.g_th
        self.ma_decay = cfg.ma_decay

    def params(self):
        out = [(f"block.{n}", p) for n, p in self.block.params()]
        out += [(f"tpn.{n}", p) for n, p in self.tpn.params()]
        out += [(f"gate.{n}", p) for n, p in self.gate.params()]
        out += [(f"cr.{n}", p) for n, p in self.cr.params()]
        return out

    def forward(self, x: Tensor, mode: str, betas: tuple[float, float],
                meter: CostMeter | None = None, layer: int = 0) -> LayerOutput:
        t = x.data.shape[-2]
        attn, ffn = block_parts(x, self.block)
        delta = add(attn, ffn)
        x_post = add(x, delta)
        # temporal prior: predict this token's residual from the previous
        # token's processed state (zeros for the first token)
        delta_hat = self.tpn.forward(shift_tokens(x_post))
        l_pred = mse(delta_hat, stop_gradient(delta))

        params = self.gate.router_params(betas, self.ma_decay)
        bundle = surprise_bundle(delta, delta_hat, params)
        decisions = _select_rows(bundle.g_cont.data, mode, self.gamma, self.g_th)
        mask = _mask_from(decisions, x.data.shape[:-1])
        y = masked_residual_add(x, scale_rows(delta, bundle.g_cont), mask)

        if meter is not None:
            # training computes the block densely; the meter reports the
            # routed cost this forward *commits to*, i.e. what decode pays
            for d in decisions:
                meter.add_pairs(layer, causal_pairs(d.capacity_used, self.block.heads))
                meter.add_kv(layer, d.capacity_used)
        l_causal, cr_probs = _causal_loss(stt_router_inputs(stop_gradient(x)), self.cr, mask)
        cap = float(np.mean([d.capacity_used for d in decisions])) / t
        return LayerOutput(x=y, bundle=bundle, decisions=decisions, l_pred=l_pred,
                           l_causal=l_causal, capacity_frac=cap, cr_probs=cr_probs)


class ModLayer:
    """Depth-skip baseline: linear score, Top-K, raw score scales the delta."""

    kind = "mod"

    def __init__(self, cfg, rng):
        self.block = BlockWeights.create(cfg.d, cfg.heads, cfg.ffn_hidden(), rng, cfg.init_std)
        self.router = ModRouterWeights.create(cfg.d, rng, cfg.init_std)
        self.cr = CausalRouterWeights.create(cfg.d, max(1, cfg.d // 2), rng, cfg.init_std)
        self.gamma = cfg.gamma

    def params(self):
        out = [(f"block.{n}", p) for n, p in self.block.params()]
        out += [(f"modr.{n}", p) for n, p in self.router.params()]
        out += [(f"cr.{n}", p) for n, p in self.cr.params()]
        return out

    def forward(self, x: Tensor, meter: CostMeter | None = None, layer: int = 0) -> LayerOutput:
        t = x.data.shape[-2]
        scores = mod_baseline_gates(x, self.router)
        decisions = _select_rows(scores.data, "fixed", self.gamma, 0.0)
        k = decisions[0].capacity_used
        idx = np.stack([d.selected for d in decisions]).reshape(x.data.shape[:-2] + (k,))

        if meter is not None:
            rows = len(decisions)
            meter.add_pairs(layer, rows * causal_pairs(k, self.block.heads))
            meter.add_kv(layer, rows * k)
        x_s, delta = subset_block_delta(x, idx, self.block)
        r_sel = _gather_scalars(scores, idx)
        y = scatter_tokens(x, idx, add(x_s, scale_rows(delta, r_sel)))

        mask = _mask_from(decisions, x.data.shape[:-1])
        l_causal, cr_probs = _causal_loss(stop_gradient(x), self.cr, mask)
        return LayerOutput(x=y, decisions=decisions, l_causal=l_causal, capacity_frac=k / t,
                           cr_probs=cr_probs)


def make_layer(kind: str, cfg, rng):
    if kind == "dense":
        return DenseLayer(cfg, rng)
    if kind == "decision":
        return DecisionLayer(cfg, rng)
    if kind == "dynamic":
        return DynamicLayer(cfg, rng)
    if kind == "stt":
        return SttLayer(cfg, rng)
    if kind == "mod":
        return ModLayer(cfg, rng)
    raise ValueError(f"unknown layer kind {kind!r}")
