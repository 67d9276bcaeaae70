"""The stacked language model: embeddings, routed layers, decode loop.

Training and teacher-forced scoring run the whole sequence in parallel;
generation runs token by token through per-layer KV caches with the causal
routers making every skip decision (selection over the full sequence is not
available autoregressively, so a router threshold of 0.5 stands in for it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from routelab.config import ModelConfig
from routelab.layers import (
    DecisionLayer,
    DenseLayer,
    DynamicLayer,
    LayerOutput,
    ModLayer,
    SttLayer,
    make_layer,
)
from routelab.tensor import (
    Tensor,
    add,
    cross_entropy,
    embedding,
    gather_tokens,
    matmul,
    mean_all,
    rms_norm,
    scale,
)
from routelab.transformer import CostMeter, KVCache, _silu_np, block_decode_delta


IGNORE_INDEX = -1


class InputError(ValueError):
    """A token id or position fell outside the model's ranges."""


@dataclass
class ForwardResult:
    logits: Tensor
    loss_lm: Tensor | None
    l_pred: Tensor | None
    l_causal: Tensor | None
    l_greg: Tensor | None
    layer_records: list
    outputs: list  # LayerOutput per layer (None for plain dense)


def _mean_terms(terms: list[Tensor]) -> Tensor | None:
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(terms))


class RoutedLM:
    """Decoder-only byte model with a configurable routed-layer pattern."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.pattern = cfg.resolved_pattern()
        rng = np.random.default_rng(cfg.seed)
        std = cfg.init_std
        self.embed = Tensor(rng.normal(0.0, std, (cfg.vocab, cfg.d)).astype(np.float32),
                            requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, std, (cfg.seq_len, cfg.d)).astype(np.float32),
                          requires_grad=True)
        self.layers = [make_layer(kind, cfg, rng) for kind in self.pattern]
        self.final_norm = Tensor(np.ones(cfg.d, dtype=np.float32), requires_grad=True)
        self.head = Tensor(rng.normal(0.0, std, (cfg.d, cfg.vocab)).astype(np.float32),
                           requires_grad=True)

    # --- parameters --------------------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [("embed.table", self.embed), ("embed.pos", self.pos)]
        for i, layer in enumerate(self.layers):
            out += [(f"layer{i}.{n}", p) for n, p in layer.params()]
        out += [("final.norm", self.final_norm), ("final.head", self.head)]
        return out

    @staticmethod
    def group_of(name: str) -> str:
        if ".prior." in name or ".tpn." in name:
            return "predictor"
        if ".gate." in name or ".cr." in name or ".modr." in name:
            return "router"
        return "backbone"

    def clamp_gate_params(self, floor: float = 1e-3) -> None:
        """Keep the learned gate biases positive after optimizer updates."""
        for layer in self.layers:
            gate = getattr(layer, "gate", None)
            if gate is None:
                continue
            np.maximum(gate.o_ce.data, floor, out=gate.o_ce.data)
            np.maximum(gate.m_cu.data, floor, out=gate.m_cu.data)

    def load_state(self, arrays: dict) -> None:
        for name, param in self.named_params():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            src = arrays[name]
            if src.shape != param.data.shape:
                raise ValueError(f"parameter {name!r}: checkpoint shape {src.shape} "
                                 f"!= model shape {param.data.shape}")
            param.data = src.astype(np.float32).copy()

    # --- parallel forward ---------------------------------------------------

    def forward(self, tokens: np.ndarray, targets: np.ndarray | None = None,
                betas: tuple[float, float] = (1.0, 1.0),
                meter: CostMeter | None = None) -> ForwardResult:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.max(initial=0) >= self.cfg.vocab or tokens.min(initial=0) < 0:
            raise InputError(f"token id out of range for vocabulary {self.cfg.vocab}")
        t = tokens.shape[-1]
        if t > self.cfg.seq_len:
            raise InputError(f"sequence length {t} exceeds configured {self.cfg.seq_len}")

        x = add(embedding(self.embed, tokens), gather_tokens(self.pos, np.arange(t)))

        mode = self.cfg.routing_mode()
        pred_terms, causal_terms, greg_terms = [], [], []
        layer_records, outputs = [], []
        pending = None  # (delta, delta_hat) from a decision layer
        for i, layer in enumerate(self.layers):
            if isinstance(layer, DenseLayer):
                out = layer.forward(x, None, meter, i)
            elif isinstance(layer, DecisionLayer):
                x_post, delta, delta_hat, l_prior = layer.forward_parts(x, meter, i)
                pending = (delta, delta_hat)
                out = LayerOutput(x=x_post, l_pred=l_prior)
            elif isinstance(layer, DynamicLayer):
                assert pending is not None, "pattern validation guarantees a preceding decision layer"
                delta, delta_hat = pending
                pending = None
                out = layer.forward(x, delta, delta_hat, betas, meter, i)
            elif isinstance(layer, SttLayer):
                out = layer.forward(x, mode, betas, meter, i)
            elif isinstance(layer, ModLayer):
                out = layer.forward(x, meter, i)
            else:  # pragma: no cover
                raise AssertionError(f"unhandled layer kind {layer.kind}")
            x = out.x
            outputs.append(out)
            if out.l_pred is not None:
                pred_terms.append(out.l_pred)
            if out.l_causal is not None:
                causal_terms.append(out.l_causal)
            if out.bundle is not None:
                greg_terms.append(mean_all(out.bundle.g_cont))
            layer_records.append(self._record(i, layer, out))

        logits = matmul(rms_norm(x, self.final_norm), self.head)
        loss_lm = None
        if targets is not None:
            loss_lm = cross_entropy(logits, targets, ignore_index=IGNORE_INDEX)
        return ForwardResult(
            logits=logits,
            loss_lm=loss_lm,
            l_pred=_mean_terms(pred_terms),
            l_causal=_mean_terms(causal_terms),
            l_greg=_mean_terms(greg_terms),
            layer_records=layer_records,
            outputs=outputs,
        )

    @staticmethod
    def _record(i: int, layer, out: LayerOutput) -> dict | None:
        if out.bundle is None and out.decisions is None:
            return None
        rec = {"index": i, "kind": layer.kind, "d_st_mean": None, "d_ch_mean": None,
               "ce_fire_rate": None, "cu_fire_rate": None, "capacity": out.capacity_frac}
        if out.bundle is not None:
            rec["d_st_mean"] = float(out.bundle.d_st.data.mean())
            rec["d_ch_mean"] = float(out.bundle.d_ch.data.mean())
            rec["ce_fire_rate"] = float(np.mean(out.bundle.ce.data > 0))
            rec["cu_fire_rate"] = float(np.mean(out.bundle.cu.data > 0))
        return rec

    # --- decode -------------------------------------------------------------

    def decode_init(self, betas: tuple[float, float] | None = None) -> "DecodeState":
        if betas is None:
            betas = (self.cfg.beta_end, self.cfg.beta_end)
        return DecodeState(
            pos=0,
            betas=betas,
            layer_states=[_LayerDecodeState(cache=KVCache()) for _ in self.layers],
        )

    def decode_step(self, state: "DecodeState", token_id: int,
                    meter: CostMeter | None = None) -> np.ndarray:
        """Advance one token through the stack; returns next-token logits.

        Routed layers consult their causal router; a bypassed token leaves no
        KV entry and is invisible to later tokens at that layer.
        """
        if not 0 <= token_id < self.cfg.vocab:
            raise InputError(f"token id {token_id} out of range for vocabulary {self.cfg.vocab}")
        if state.pos >= self.cfg.seq_len:
            raise InputError(f"position {state.pos} exceeds configured length {self.cfg.seq_len}")
        pos = state.pos
        x = self.embed.data[token_id] + self.pos.data[pos]

        pending = None
        for i, layer in enumerate(self.layers):
            ls = state.layer_states[i]
            if isinstance(layer, DenseLayer):
                x = x + block_decode_delta(x, layer.block, ls.cache, pos, meter, i)
            elif isinstance(layer, DecisionLayer):
                delta = block_decode_delta(x, layer.block, ls.cache, pos, meter, i)
                delta_hat = layer.prior.forward_np(x)
                pending = (delta, delta_hat)
                x = x + delta
            elif isinstance(layer, DynamicLayer):
                assert pending is not None
                dec_delta, dec_delta_hat = pending
                pending = None
                d = dec_delta.shape[-1]
                d_st = float(np.mean(dec_delta ** 2))
                d_ch = float(np.mean((dec_delta - dec_delta_hat) ** 2))
                ls.ma = d_st if ls.ma is None else (
                    layer.ma_decay * ls.ma + (1 - layer.ma_decay) * d_st)
                g = _gate_value(d_st, d_ch, ls.ma, layer.gate, state.betas)
                if _router_prob(x, layer.cr) >= 0.5:
                    delta = block_decode_delta(x, layer.block, ls.cache, pos, meter, i)
                    x = x + g * delta
                    ls.executed += 1
            elif isinstance(layer, SttLayer):
                x_in = x
                cr_in = np.concatenate([x_in, ls.prev_input if ls.prev_input is not None
                                        else np.zeros_like(x_in)])
                if _router_prob(cr_in, layer.cr) >= 0.5:
                    delta = block_decode_delta(x, layer.block, ls.cache, pos, meter, i)
                    tpn_in = ls.prev_output if ls.prev_output is not None else np.zeros_like(x)
                    delta_hat = layer.tpn.forward_np(tpn_in)
                    d_st = float(np.mean(delta ** 2))
                    d_ch = float(np.mean((delta - delta_hat) ** 2))
                    ls.ma = d_st if ls.ma is None else (
                        layer.ma_decay * ls.ma + (1 - layer.ma_decay) * d_st)
                    g = _gate_value(d_st, d_ch, ls.ma, layer.gate, state.betas)
                    x = x + g * delta
                    ls.executed += 1
                ls.prev_input = x_in
                ls.prev_output = x
            elif isinstance(layer, ModLayer):
                if _router_prob(x, layer.cr) >= 0.5:
                    r = float(x @ layer.router.w.data[:, 0])
                    delta = block_decode_delta(x, layer.block, ls.cache, pos, meter, i)
                    x = x + r * delta
                    ls.executed += 1
            else:  # pragma: no cover
                raise AssertionError(f"unhandled layer kind {layer.kind}")

        state.pos += 1
        ms = np.mean(np.square(x))
        xn = x / np.sqrt(ms + np.float32(1e-6)) * self.final_norm.data
        return xn @ self.head.data

    def generate(self, prompt: list[int], n_new: int, temperature: float = 1.0,
                 rng: np.random.Generator | None = None,
                 meter: CostMeter | None = None) -> list[int]:
        """Autoregressive sampling through the causal-router decode path."""
        if rng is None:
            rng = np.random.default_rng(self.cfg.seed)
        state = self.decode_init()
        logits = None
        for tok in prompt:
            logits = self.decode_step(state, int(tok), meter)
        out = []
        for _ in range(n_new):
            if logits is None:
                raise InputError("generate needs at least one prompt token")
            if temperature <= 0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                z = z - z.max()
                p = np.exp(z, dtype=np.float64)
                p /= p.sum()
                nxt = int(rng.choice(len(p), p=p))
            out.append(nxt)
            if state.pos >= self.cfg.seq_len:
                break
            logits = self.decode_step(state, nxt, meter)
        return out


def _sigmoid_scalar(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _router_prob(x_vec: np.ndarray, cr) -> float:
    h = _silu_np(x_vec @ cr.w1.data + cr.b1.data)
    logit = float(h @ cr.w2.data[:, 0] + cr.b2.data[0])
    return _sigmoid_scalar(logit)


def _gate_value(d_st: float, d_ch: float, ma: float, gate, betas: tuple[float, float]) -> float:
    o_ce = float(gate.o_ce.data)
    m_cu = float(gate.m_cu.data)
    b_ce, b_cu = betas
    if gate.beta_ce_scale is not None:
        b_ce *= float(gate.beta_ce_scale.data)
        b_cu *= float(gate.beta_cu_scale.data)
    ce = d_st - (d_ch - math.log(o_ce))
    cu = d_st - m_cu * ma
    a = _sigmoid_scalar(b_ce * ce)
    b = _sigmoid_scalar(b_cu * cu)
    return a + b - a * b


@dataclass
class _LayerDecodeState:
    cache: KVCache
    ma: float | None = None
    prev_input: np.ndarray | None = None
    prev_output: np.ndarray | None = None
    executed: int = 0


@dataclass
class DecodeState:
    pos: int
    betas: tuple[float, float]
    layer_states: list[_LayerDecodeState] = field(default_factory=list)
