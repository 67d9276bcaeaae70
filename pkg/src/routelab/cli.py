"""Command line entry points: train, eval, generate, analyze, savings.

Every subcommand takes ``--config`` (key=value file) plus flag overrides and
emits machine-readable JSON on stdout; ``--out`` redirects file outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from routelab.analysis import (
    analyze_telemetry,
    causal_router_agreement,
    eval_perplexity,
    measure_runtime_costs,
    savings_report,
    write_analysis_csv,
)
from routelab.checkpoint import load_model
from routelab.config import ModelConfig, build_pattern
from routelab.data import make_synthetic_corpus
from routelab.training import train


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="total training steps")
    p.add_argument("--variant", type=str, default=None,
                   choices=["dense", "mod", "sdt", "stt_fixed", "stt_threshold"])
    p.add_argument("--gamma", type=float, default=None, help="fixed capacity fraction")
    p.add_argument("--g-th", dest="g_th", type=float, default=None,
                   help="gate threshold for variable capacity")
    p.add_argument("--prior-factor", dest="prior_factor", type=float, default=None,
                   help="predictor hidden width as a fraction of d")
    p.add_argument("--out", type=str, default=None, help="output path (or directory)")
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)


_OVERRIDE_KEYS = {
    "seed": "seed",
    "steps": "total_steps",
    "variant": "variant",
    "gamma": "gamma",
    "g_th": "g_th",
    "prior_factor": "prior_factor",
    "d": "d",
    "heads": "heads",
    "layers": "layers",
    "seq_len": "seq_len",
    "batch_size": "batch_size",
}


def _build_config(args) -> ModelConfig:
    cfg = ModelConfig.from_file(args.config) if args.config else ModelConfig()
    overrides = {}
    for attr, key in _OVERRIDE_KEYS.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    cfg.apply_overrides(overrides)
    cfg.validate()
    return cfg


def _resolve_corpus(args, cfg) -> str:
    """Return a corpus path; synthesise one next to the outputs if absent."""
    if args.corpus:
        return args.corpus
    path = Path(args.out or ".") if (args.out and Path(args.out).suffix == "") else Path(".")
    path.mkdir(parents=True, exist_ok=True)
    corpus = path / f"synthetic_{cfg.seed}.bin"
    if not corpus.exists():
        corpus.write_bytes(make_synthetic_corpus(seed=cfg.seed))
    return str(corpus)


def _emit(obj, args) -> None:
    text = json.dumps(obj, indent=2)
    if args.out and Path(args.out).suffix == ".json":
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out) if args.out else Path(f"runs/{cfg.variant}")
    if out.suffix:  # treat as a file path stem
        out = out.parent / out.stem
    out.mkdir(parents=True, exist_ok=True)
    corpus = _resolve_corpus(args, cfg)
    ckpt = out / "model.ckpt"
    telem = out / "telemetry.jsonl"
    result = train(cfg, corpus_path=corpus, checkpoint_path=str(ckpt),
                   telemetry_path=str(telem))
    last = result.telemetry[-1] if result.telemetry else {}
    print(json.dumps({
        "checkpoint": str(ckpt),
        "telemetry": str(telem),
        "corpus": corpus,
        "steps_run": result.steps_run,
        "final": last,
    }, indent=2))
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    corpus = args.corpus or _resolve_corpus(args, model.cfg)
    nats = eval_perplexity(model, corpus, routing=args.routing,
                           max_blocks=args.max_blocks)
    _emit({"routing": args.routing, "nats_per_byte": nats, "corpus": corpus}, args)
    return 0


def cmd_generate(args) -> int:
    model = load_model(args.ckpt)
    prompt = list(args.prompt.encode("utf-8")) if args.prompt else [0]
    rng = np.random.default_rng(args.seed if args.seed is not None else model.cfg.seed)
    tokens = model.generate(prompt, args.length, temperature=args.temperature, rng=rng)
    raw = bytes(tokens)
    if args.out:
        Path(args.out).write_bytes(raw)
    print(json.dumps({
        "prompt_bytes": len(prompt),
        "generated_bytes": len(raw),
        "text": raw.decode("utf-8", errors="backslashreplace"),
        "out": args.out,
    }, indent=2))
    return 0


def cmd_analyze(args) -> int:
    summary = analyze_telemetry(args.telemetry)
    csv_paths = []
    if args.out:
        csv_paths = write_analysis_csv(summary, args.out)
    print(json.dumps({
        "steps": summary["steps"],
        "ce_share_first_decile": summary["ce_share_first_decile"],
        "ce_share_last_decile": summary["ce_share_last_decile"],
        "loss_pred_first_decile": summary["loss_pred_first_decile"],
        "loss_pred_last_decile": summary["loss_pred_last_decile"],
        "loss_lm_first": summary["loss_lm_first"],
        "loss_lm_last": summary["loss_lm_last"],
        "capacity_profile": summary["capacity_profile"],
        "csv": csv_paths,
    }, indent=2))
    return 0


def cmd_savings(args) -> int:
    if args.ckpt:
        model = load_model(args.ckpt)
        corpus = args.corpus or _resolve_corpus(args, model.cfg)
        report = measure_runtime_costs(model, corpus, routing=args.routing,
                                       max_blocks=args.max_blocks)
        if args.agreement:
            report["router_agreement"] = causal_router_agreement(model, corpus)
        _emit(report, args)
        return 0
    cfg = _build_config(args)
    realized = None
    if args.telemetry:
        summary = analyze_telemetry(args.telemetry)
        realized = [row["mean_capacity"] for row in summary["capacity_profile"]]
    pattern = cfg.resolved_pattern()
    report = savings_report(pattern, cfg.gamma, realized_capacity=realized)
    _emit(json.loads(report.to_json()), args)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="routelab",
        description="surprise-routed conditional-computation transformer lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a variant and write checkpoint + telemetry")
    _add_common(p)
    p.add_argument("--corpus", type=str, default=None, help="byte corpus path (synthetic if absent)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="teacher-forced nats/byte under either routing mode")
    _add_common(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--routing", type=str, default="non_causal", choices=["non_causal", "causal"])
    p.add_argument("--max-blocks", dest="max_blocks", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="autoregressive decoding through the causal routers")
    _add_common(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--prompt", type=str, default=None)
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("analyze", help="summarise a telemetry stream; write CSVs with --out")
    _add_common(p)
    p.add_argument("--telemetry", type=str, required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("savings", help="analytic savings report, or measured with --ckpt")
    _add_common(p)
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--telemetry", type=str, default=None,
                   help="use realized per-layer capacities from this stream")
    p.add_argument("--routing", type=str, default="non_causal", choices=["non_causal", "causal"])
    p.add_argument("--max-blocks", dest="max_blocks", type=int, default=4)
    p.add_argument("--agreement", action="store_true",
                   help="include causal-router agreement in the measured report")
    p.set_defaults(fn=cmd_savings)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
