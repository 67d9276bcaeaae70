"""Loss assembly, AdamW with per-group learning rates, schedules, train loop.

Telemetry is one JSON object per step (schema field ``1``):

    {"schema": 1, "step": 0, "loss_lm": ..., "loss_pred": ..., "loss_causal": ...,
     "loss_greg": ..., "layer": [{"index": 1, "kind": "stt", "d_st_mean": ...,
     "d_ch_mean": ..., "ce_fire_rate": ..., "cu_fire_rate": ..., "capacity": ...}]}

A "fire" for telemetry purposes means the squashed signal clears 0.5, i.e.
the raw signal is positive. Runs are bit-reproducible: a single seeded
generator drives init and shuffling, and the loop is single-threaded.
"""

from __future__ import annotations

import json
import math
import tempfile
from dataclasses import dataclass

import numpy as np

from routelab.config import ModelConfig
from routelab.checkpoint import save_checkpoint
from routelab.data import ingest_corpus, make_synthetic_corpus
from routelab.model import RoutedLM
from routelab.tensor import Tape, Tensor, add, mean_all, scale

TELEMETRY_SCHEMA = 1


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; a diagnostic record was emitted before aborting."""


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def g_reg_loss(gates: Tensor) -> Tensor:
    """Mean gate value: an L1 pull toward sparsity on probabilities."""
    return mean_all(gates)


def total_loss(lm: Tensor, pred: Tensor | None, causal: Tensor | None,
               greg: Tensor | None, lambdas: tuple[float, float, float]) -> Tensor:
    """lm + l_pred*lambda_pred + l_causal*lambda_causal + l_greg*lambda_g_reg."""
    lam_pred, lam_causal, lam_greg = lambdas
    total = lm
    if pred is not None and lam_pred != 0:
        total = add(total, scale(pred, lam_pred))
    if causal is not None and lam_causal != 0:
        total = add(total, scale(causal, lam_causal))
    if greg is not None and lam_greg != 0:
        total = add(total, scale(greg, lam_greg))
    return total


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def lr_schedule(step: int, total: int, warmup_frac: float) -> float:
    """Linear warmup to 1, then cosine decay to 0 at ``total``."""
    warmup = max(1, round(total * warmup_frac))
    if step < warmup:
        return step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def beta_schedule(step: int, total: int, start: float = 0.1, end: float = 100.0,
                  warmup_steps: int = 100) -> tuple[float, float]:
    """Hold at ``start`` through warmup, then cosine-rise to ``end``.

    Returns the pair (beta for the expected-change signal, beta for the
    unexpected-change signal); both follow the same schedule.
    """
    if step < warmup_steps:
        b = start
    elif step >= total:
        b = end
    else:
        u = (step - warmup_steps) / max(1, total - warmup_steps)
        b = start + (end - start) * 0.5 * (1.0 - math.cos(math.pi * u))
    return b, b


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adamw_step(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               lr: float, betas: tuple[float, float] = (0.9, 0.95),
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One decoupled-weight-decay Adam update, in place. ``t`` is 1-based."""
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * np.square(g)
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    if weight_decay:
        p -= lr * weight_decay * p
    p -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    """Per-group learning rates; decay skips vectors and scalars (norm gains,
    biases, gate offsets), matching usual transformer practice."""

    def __init__(self, named_params, group_of, group_lrs: dict,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.named_params = list(named_params)
        self.group_of = group_of
        self.group_lrs = dict(group_lrs)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.state = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                      for name, p in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr_mult: float = 1.0) -> None:
        self.t += 1
        for name, p in self.named_params:
            if p.grad is None:
                continue
            m, v = self.state[name]
            lr = self.group_lrs[self.group_of(name)] * lr_mult
            wd = self.weight_decay if p.data.ndim >= 2 else 0.0
            adamw_step(p.data, p.grad, m, v, self.t, lr, self.betas, self.eps, wd)


# ---------------------------------------------------------------------------
# train loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RoutedLM
    telemetry: list
    checkpoint_path: str | None = None
    steps_run: int = 0


def telemetry_record(step: int, loss_lm: float, loss_pred, loss_causal, loss_greg,
                     layer_records: list) -> dict:
    return {
        "schema": TELEMETRY_SCHEMA,
        "step": step,
        "loss_lm": loss_lm,
        "loss_pred": loss_pred,
        "loss_causal": loss_causal,
        "loss_greg": loss_greg,
        "layer": [r for r in layer_records if r is not None],
    }


def train(cfg: ModelConfig, corpus_path=None, checkpoint_path=None,
          telemetry_path=None, stop_fn=None) -> TrainResult:
    """Run the configured number of steps over the corpus.

    With no corpus path, a 64 KiB synthetic corpus generated from the run
    seed is used. ``stop_fn(step, record)`` may end the run early (the
    checkpoint is still written). Telemetry is returned and, when a path is
    given, streamed to it as JSON lines.
    """
    cfg.validate()
    model = RoutedLM(cfg)

    if corpus_path is None:
        tmp = tempfile.NamedTemporaryFile(suffix=".bin", delete=False)
        tmp.write(make_synthetic_corpus(seed=cfg.seed))
        tmp.close()
        corpus_path = tmp.name
    batches = ingest_corpus(corpus_path, cfg.seq_len, cfg.batch_size, cfg.seed)

    opt = AdamW(model.named_params(), model.group_of, {
        "backbone": cfg.lr_backbone,
        "predictor": cfg.lr_predictor,
        "router": cfg.lr_router,
    })
    lambdas = (cfg.lambda_pred, cfg.lambda_causal, cfg.lambda_g_reg)
    use_greg = cfg.g_reg_mode == "always" or (
        cfg.g_reg_mode == "auto" and cfg.routing_mode() == "threshold")

    telemetry = []
    sink = open(telemetry_path, "w") if telemetry_path else None
    steps_run = 0
    try:
        for step in range(cfg.total_steps):
            betas = beta_schedule(step, cfg.total_steps, cfg.beta_start, cfg.beta_end,
                                  cfg.beta_warmup_steps)
            lr_mult = lr_schedule(step, cfg.total_steps, cfg.warmup_frac)

            opt.zero_grad()
            accum_record = None
            for _ in range(cfg.grad_accum):
                batch = next(batches)
                with Tape() as tape:
                    res = model.forward(batch.inputs, batch.targets, betas=betas)
                    greg = res.l_greg if use_greg else None
                    loss = total_loss(res.loss_lm, res.l_pred, res.l_causal, greg, lambdas)
                    if cfg.grad_accum > 1:
                        loss = scale(loss, 1.0 / cfg.grad_accum)
                    tape.backward(loss)
                accum_record = telemetry_record(
                    step,
                    float(res.loss_lm.data),
                    float(res.l_pred.data) if res.l_pred is not None else None,
                    float(res.l_causal.data) if res.l_causal is not None else None,
                    float(res.l_greg.data) if res.l_greg is not None else None,
                    res.layer_records,
                )
                if not np.isfinite(loss.data):
                    diag = {"schema": TELEMETRY_SCHEMA, "step": step, "event": "nan_abort",
                            "loss_lm": float(res.loss_lm.data)}
                    telemetry.append(diag)
                    if sink:
                        sink.write(json.dumps(diag) + "\n")
                    raise TrainingDiverged(f"non-finite loss at step {step}")

            opt.step(lr_mult)
            model.clamp_gate_params()

            telemetry.append(accum_record)
            if sink:
                sink.write(json.dumps(accum_record) + "\n")
            steps_run = step + 1
            if stop_fn is not None and stop_fn(step, accum_record):
                break
    finally:
        if sink:
            sink.close()

    if checkpoint_path:
        save_checkpoint(checkpoint_path,
                        cfg, [(n, p.data) for n, p in model.named_params()])
    return TrainResult(model=model, telemetry=telemetry,
                       checkpoint_path=str(checkpoint_path) if checkpoint_path else None,
                       steps_run=steps_run)
