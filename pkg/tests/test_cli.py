import json

import pytest

from routelab.cli import main
from routelab.data import make_synthetic_corpus


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.bin"
    corpus.write_bytes(make_synthetic_corpus(16384, seed=5))
    cfgfile = root / "tiny.cfg"
    cfgfile.write_text("\n".join([
        "d = 16", "heads = 2", "layers = 2", "seq_len = 32", "batch_size = 4",
        "total_steps = 6", "variant = stt_fixed", "init_std = 0.1",
    ]) + "\n")
    return root


@pytest.fixture(scope="module")
def trained(workdir, tmp_path_factory):
    out = workdir / "run"
    rc = main(["train", "--config", str(workdir / "tiny.cfg"),
               "--corpus", str(workdir / "corpus.bin"), "--out", str(out)])
    assert rc == 0
    return out


def test_train_outputs(trained, capsys):
    assert (trained / "model.ckpt").exists()
    assert (trained / "telemetry.jsonl").exists()
    lines = (trained / "telemetry.jsonl").read_text().splitlines()
    assert len(lines) == 6


def test_eval_subcommand(trained, workdir, capsys):
    rc = main(["eval", "--ckpt", str(trained / "model.ckpt"),
               "--corpus", str(workdir / "corpus.bin"), "--routing", "non_causal",
               "--max-blocks", "4"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["nats_per_byte"] > 0


def test_eval_causal_routing(trained, workdir, capsys):
    rc = main(["eval", "--ckpt", str(trained / "model.ckpt"),
               "--corpus", str(workdir / "corpus.bin"), "--routing", "causal",
               "--max-blocks", "1"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["routing"] == "causal"


def test_generate_subcommand(trained, workdir, capsys):
    raw = workdir / "gen.bin"
    rc = main(["generate", "--ckpt", str(trained / "model.ckpt"),
               "--prompt", "ab", "--length", "12", "--temperature", "0.8",
               "--out", str(raw)])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["generated_bytes"] == 12
    assert raw.stat().st_size == 12


def test_analyze_subcommand(trained, workdir, capsys):
    rc = main(["analyze", "--telemetry", str(trained / "telemetry.jsonl"),
               "--out", str(workdir / "csv")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["steps"] == 6
    assert (workdir / "csv" / "dominance.csv").exists()
    assert (workdir / "csv" / "capacity_profile.csv").exists()
    assert (workdir / "csv" / "losses.csv").exists()


def test_savings_analytic(capsys):
    rc = main(["savings", "--variant", "sdt", "--gamma", "0.5"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["attention_saving"] == 0.375
    assert out["kv_saving"] == 0.25
    assert out["attention_workload"] + out["attention_saving"] == 1.0


def test_savings_measured(trained, workdir, capsys):
    rc = main(["savings", "--ckpt", str(trained / "model.ckpt"),
               "--corpus", str(workdir / "corpus.bin"), "--routing", "non_causal",
               "--max-blocks", "2", "--agreement"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["pairs_delta"] == 0
    assert "router_agreement" in out


def test_savings_from_telemetry(trained, capsys):
    rc = main(["savings", "--variant", "stt_threshold", "--layers", "2",
               "--telemetry", str(trained / "telemetry.jsonl")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["per_layer_attention_cost"]) == 2


def test_cli_flag_overrides(workdir, capsys):
    rc = main(["savings", "--config", str(workdir / "tiny.cfg"),
               "--variant", "mod", "--gamma", "0.25"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["per_layer_attention_cost"][1] == 0.0625
