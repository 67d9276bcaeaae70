"""Analytic cost model, measured runtime costs, and telemetry summaries.

The cost unit is the "causal score pair": one (query token, attended
position) score evaluation per head. A dense causal layer over T tokens
costs heads * T*(T+1)/2 of them; a routed layer keeping k tokens costs
heads * k*(k+1)/2, because bypassed tokens neither query nor get attended.
Interleaving routed layers with full blocks halves whatever a routed layer
saves, hence the (1 - gamma^2)/2 attention figure and (1 - gamma)/2 for the
KV cache.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from routelab.data import blocks_from_bytes, load_corpus, targets_for
from routelab.model import RoutedLM
from routelab.routing import ConfigError, topk_capacity
from routelab.transformer import CostMeter, causal_pairs

ROUTED_KINDS = ("dynamic", "stt", "mod")


# ---------------------------------------------------------------------------
# closed-form savings
# ---------------------------------------------------------------------------

def attention_savings_fixed(gamma: float, interleaved: bool = True) -> float:
    """Attention saving for fixed-capacity routing at fraction ``gamma``."""
    if gamma <= 0 or gamma > 1:
        raise ConfigError(f"gamma must be in (0, 1], got {gamma}")
    per_layer = 1.0 - gamma * gamma
    return per_layer / 2.0 if interleaved else per_layer


def attention_savings_dynamic(gamma_bar: float) -> float:
    """Interleaved attention saving at a learned mean capacity ``gamma_bar``."""
    if gamma_bar < 0 or gamma_bar > 1:
        raise ConfigError(f"gamma_bar must be in [0, 1], got {gamma_bar}")
    return (1.0 - gamma_bar * gamma_bar) / 2.0


def gamma_bar_from_attention_saving(saving: float) -> float:
    """Invert the interleaved dynamic-saving formula."""
    inner = 1.0 - 2.0 * saving
    if inner < 0:
        raise ConfigError(f"saving {saving} exceeds the interleaved maximum of 0.5")
    return math.sqrt(inner)


def kv_savings(gamma_bar: float, interleaved: bool = True) -> float:
    """KV-cache saving: routed layers hold gamma_bar * T entries instead of T."""
    if gamma_bar < 0 or gamma_bar > 1:
        raise ConfigError(f"gamma_bar must be in [0, 1], got {gamma_bar}")
    per_layer = 1.0 - gamma_bar
    return per_layer / 2.0 if interleaved else per_layer


# ---------------------------------------------------------------------------
# report over a concrete layer pattern
# ---------------------------------------------------------------------------

@dataclass
class SavingsReport:
    pattern: list
    per_layer_attention_cost: list      # relative to a dense layer
    attention_workload: float
    attention_saving: float
    kv_entries_per_layer: list          # fraction of T retained per layer
    kv_saving: float
    gamma_bar: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def savings_report(pattern, gamma: float,
                   realized_capacity: list | None = None) -> SavingsReport:
    """Analytic report for a stack layout.

    ``realized_capacity`` optionally gives the measured per-layer kept
    fraction (routed layers only, in pattern order) from a dynamic-capacity
    run; otherwise every routed layer uses ``gamma``.
    """
    pattern = list(pattern)
    caps = list(realized_capacity) if realized_capacity is not None else None
    cap_iter = iter(caps) if caps is not None else None
    per_cost, per_kv, routed_caps = [], [], []
    for kind in pattern:
        if kind in ROUTED_KINDS:
            c = next(cap_iter) if cap_iter is not None else gamma
            routed_caps.append(c)
            per_cost.append(c * c)
            per_kv.append(c)
        else:
            per_cost.append(1.0)
            per_kv.append(1.0)
    workload = sum(per_cost) / len(per_cost)
    kv_frac = sum(per_kv) / len(per_kv)
    return SavingsReport(
        pattern=pattern,
        per_layer_attention_cost=per_cost,
        attention_workload=workload,
        attention_saving=1.0 - workload,
        kv_entries_per_layer=per_kv,
        kv_saving=1.0 - kv_frac,
        gamma_bar=float(np.mean(routed_caps)) if routed_caps else None,
    )


def expected_costs(pattern, t: int, heads: int, gamma: float, rows: int = 1):
    """Analytic per-layer pair and KV-entry counts for a fixed-capacity pass."""
    k = topk_capacity(t, gamma)
    pairs, kv = {}, {}
    for i, kind in enumerate(pattern):
        if kind in ROUTED_KINDS:
            pairs[i] = rows * causal_pairs(k, heads)
            kv[i] = rows * k
        else:
            pairs[i] = rows * causal_pairs(t, heads)
            kv[i] = rows * t
    return pairs, kv


# ---------------------------------------------------------------------------
# measured costs and scoring
# ---------------------------------------------------------------------------

def _corpus_blocks(corpus, seq_len: int, max_blocks: int | None):
    if isinstance(corpus, (str, Path)):
        blocks = blocks_from_bytes(load_corpus(corpus), seq_len)
    else:
        blocks = np.asarray(corpus)
    if max_blocks is not None:
        blocks = blocks[:max_blocks]
    return blocks


def measure_runtime_costs(model: RoutedLM, corpus, routing: str = "non_causal",
                          max_blocks: int | None = 4) -> dict:
    """Count actual attention pairs and KV entries over corpus blocks.

    ``non_causal``: one parallel pass per batch of blocks with full-sequence
    selection; the committed routed cost is counted. ``causal``: token-by-
    token decode through the causal routers, counting every score actually
    evaluated. The report carries the analytic counts next to the measured
    ones, both from the configured gamma and from the realized capacities.
    """
    cfg = model.cfg
    blocks = _corpus_blocks(corpus, cfg.seq_len, max_blocks)
    t = blocks.shape[1]
    meter = CostMeter()
    pattern = model.pattern
    row_counts: dict[int, list] = {i: [] for i in range(len(pattern))}

    if routing == "non_causal":
        res = model.forward(blocks, betas=(cfg.beta_end, cfg.beta_end), meter=meter)
        for i, out in enumerate(res.outputs):
            if out.decisions is not None:
                row_counts[i] = [d.capacity_used for d in out.decisions]
            else:
                row_counts[i] = [t] * len(blocks)
    elif routing == "causal":
        for row in blocks:
            state = model.decode_init()
            for tok in row:
                model.decode_step(state, int(tok), meter=meter)
            for i, ls in enumerate(state.layer_states):
                row_counts[i].append(len(ls.cache))
    else:
        raise ConfigError(f"routing must be non_causal or causal, got {routing!r}")

    rows = len(blocks)
    analytic_pairs, analytic_kv = expected_costs(pattern, t, cfg.heads, cfg.gamma, rows)
    dense_pairs = rows * causal_pairs(t, cfg.heads) * len(pattern)

    per_layer = []
    routed_fracs = []
    for i, kind in enumerate(pattern):
        measured = meter.attn_pairs.get(i, 0)
        counts = row_counts[i]
        realized = int(sum(counts))
        realized_pairs = sum(causal_pairs(c, cfg.heads) for c in counts)
        per_layer.append({
            "index": i,
            "kind": kind,
            "measured_pairs": measured,
            "analytic_pairs": analytic_pairs[i],
            "analytic_pairs_realized": realized_pairs,
            "kv_entries": meter.kv_entries.get(i, 0),
            "analytic_kv": analytic_kv[i],
            "capacity_frac": realized / (rows * t),
        })
        if kind in ROUTED_KINDS:
            routed_fracs.append(realized / (rows * t))
    total_measured = meter.total_pairs()
    total_analytic = sum(analytic_pairs.values())
    return {
        "routing": routing,
        "blocks": rows,
        "seq_len": t,
        "heads": cfg.heads,
        "per_layer": per_layer,
        "total_measured_pairs": total_measured,
        "total_analytic_pairs": total_analytic,
        "pairs_delta": total_measured - total_analytic,
        "dense_baseline_pairs": dense_pairs,
        "measured_workload_frac": total_measured / dense_pairs,
        "measured_saving_frac": 1.0 - total_measured / dense_pairs,
        "gamma_bar_realized": float(np.mean(routed_fracs)) if routed_fracs else None,
    }


def eval_perplexity(model: RoutedLM, corpus, routing: str = "non_causal",
                    max_blocks: int | None = None) -> float:
    """Mean next-byte negative log-likelihood (nats/byte) over corpus blocks."""
    cfg = model.cfg
    blocks = _corpus_blocks(corpus, cfg.seq_len, max_blocks)
    betas = (cfg.beta_end, cfg.beta_end)
    total_nll = 0.0
    total_count = 0
    if routing == "non_causal":
        for start in range(0, len(blocks), max(1, cfg.batch_size)):
            chunk = blocks[start:start + max(1, cfg.batch_size)]
            res = model.forward(chunk, targets_for(chunk), betas=betas)
            n = chunk.size - len(chunk)  # last column carries no target
            total_nll += float(res.loss_lm.data) * n
            total_count += n
    elif routing == "causal":
        for row in blocks:
            state = model.decode_init(betas=betas)
            for t in range(len(row) - 1):
                logits = model.decode_step(state, int(row[t]))
                z = logits - logits.max()
                total_nll += float(np.log(np.exp(z).sum()) - z[int(row[t + 1])])
                total_count += 1
    else:
        raise ConfigError(f"routing must be non_causal or causal, got {routing!r}")
    return total_nll / total_count


def causal_router_agreement(model: RoutedLM, corpus, max_blocks: int | None = 8) -> dict:
    """How often each causal router reproduces the full-sequence selection."""
    cfg = model.cfg
    blocks = _corpus_blocks(corpus, cfg.seq_len, max_blocks)
    betas = (cfg.beta_end, cfg.beta_end)
    stats = {}
    for start in range(0, len(blocks), max(1, cfg.batch_size)):
        chunk = blocks[start:start + max(1, cfg.batch_size)]
        res = model.forward(chunk, betas=betas)
        for i, out in enumerate(res.outputs):
            if out.decisions is None or out.cr_probs is None:
                continue
            mask = np.stack([d.mask for d in out.decisions]).reshape(out.cr_probs.shape)
            pred = (out.cr_probs >= 0.5).astype(np.float32)
            s = stats.setdefault(i, {"tp": 0, "fp": 0, "fn": 0, "tn": 0,
                                     "kind": model.pattern[i]})
            s["tp"] += int(np.sum((pred == 1) & (mask == 1)))
            s["fp"] += int(np.sum((pred == 1) & (mask == 0)))
            s["fn"] += int(np.sum((pred == 0) & (mask == 1)))
            s["tn"] += int(np.sum((pred == 0) & (mask == 0)))
    per_layer = []
    for i in sorted(stats):
        s = stats[i]
        n = s["tp"] + s["fp"] + s["fn"] + s["tn"]
        acc = (s["tp"] + s["tn"]) / n if n else 0.0
        denom = 2 * s["tp"] + s["fp"] + s["fn"]
        f1 = 2 * s["tp"] / denom if denom else 0.0
        per_layer.append({"index": i, "kind": s["kind"], "accuracy": acc, "f1": f1})
    mean_acc = float(np.mean([p["accuracy"] for p in per_layer])) if per_layer else 0.0
    mean_f1 = float(np.mean([p["f1"] for p in per_layer])) if per_layer else 0.0
    return {"per_layer": per_layer, "mean_accuracy": mean_acc, "mean_f1": mean_f1}


# ---------------------------------------------------------------------------
# telemetry analysis
# ---------------------------------------------------------------------------

def load_telemetry(path) -> list:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def analyze_telemetry(records) -> dict:
    """Summarise a telemetry stream.

    Produces the signal-dominance trajectory (share of gate activity from the
    expected-change signal), per-layer mean realized capacity, loss curves,
    and first/last-decile aggregates of the dominance share and prediction
    loss.
    """
    if isinstance(records, (str, Path)):
        records = load_telemetry(records)
    records = [r for r in records if "event" not in r]
    steps, dominance, losses = [], [], []
    capacity_by_layer: dict[int, list] = {}
    kind_by_layer: dict[int, str] = {}
    for rec in records:
        steps.append(rec["step"])
        ce_rates = [l["ce_fire_rate"] for l in rec.get("layer", []) if l.get("ce_fire_rate") is not None]
        cu_rates = [l["cu_fire_rate"] for l in rec.get("layer", []) if l.get("cu_fire_rate") is not None]
        ce = float(np.mean(ce_rates)) if ce_rates else None
        cu = float(np.mean(cu_rates)) if cu_rates else None
        share = ce / (ce + cu) if ce is not None and cu is not None and (ce + cu) > 0 else None
        dominance.append({"step": rec["step"], "ce_fire_rate": ce, "cu_fire_rate": cu,
                          "ce_share": share})
        losses.append({"step": rec["step"], "loss_lm": rec.get("loss_lm"),
                       "loss_pred": rec.get("loss_pred"), "loss_causal": rec.get("loss_causal"),
                       "loss_greg": rec.get("loss_greg")})
        for l in rec.get("layer", []):
            if l.get("capacity") is not None:
                capacity_by_layer.setdefault(l["index"], []).append(l["capacity"])
                kind_by_layer[l["index"]] = l.get("kind")

    n = len(records)
    decile = max(1, n // 10)

    def _mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    summary = {
        "steps": n,
        "dominance": dominance,
        "losses": losses,
        "capacity_profile": [
            {"index": i, "kind": kind_by_layer.get(i), "mean_capacity": float(np.mean(v))}
            for i, v in sorted(capacity_by_layer.items())
        ],
        "ce_share_first_decile": _mean([d["ce_share"] for d in dominance[:decile]]),
        "ce_share_last_decile": _mean([d["ce_share"] for d in dominance[-decile:]]),
        "loss_pred_first_decile": _mean([l["loss_pred"] for l in losses[:decile]]),
        "loss_pred_last_decile": _mean([l["loss_pred"] for l in losses[-decile:]]),
        "loss_lm_first": losses[0]["loss_lm"] if losses else None,
        "loss_lm_last": losses[-1]["loss_lm"] if losses else None,
    }
    return summary


def write_analysis_csv(summary: dict, out_dir) -> list:
    """Write dominance/capacity/loss tables as CSV files; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    p = out_dir / "dominance.csv"
    with open(p, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "ce_fire_rate", "cu_fire_rate", "ce_share"])
        w.writeheader()
        w.writerows(summary["dominance"])
    paths.append(p)

    p = out_dir / "capacity_profile.csv"
    with open(p, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["index", "kind", "mean_capacity"])
        w.writeheader()
        w.writerows(summary["capacity_profile"])
    paths.append(p)

    p = out_dir / "losses.csv"
    with open(p, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["step", "loss_lm", "loss_pred", "loss_causal", "loss_greg"])
        w.writeheader()
        w.writerows(summary["losses"])
    paths.append(p)
    return [str(x) for x in paths]
