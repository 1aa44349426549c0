import hashlib
import json
import os
import signal
import subprocess
import socket
import sys

import numpy as np
import pytest

from mtlsplit.cli import main
from mtlsplit.model import MtlModel, ModelConfig, load_checkpoint, predict_all, save_checkpoint
from mtlsplit.synth import FactorSpec, generate, load_dataset

SMALL = {
    "seed": 3,
    "dataset": {"image_size": [8, 8], "factors": [["object-hue", 3], ["object-shape", 2]],
                "samples_per_combination": 5, "noise_fraction": 0.15},
    "model": {"backbone_widths": [16], "feature_len": 8, "head_hidden_width": 6},
    "epochs": 2,
    "batch_size": 8,
    "finetune": {"alpha": 0.05, "eta": 0.0, "epochs": 2, "kind": "sgd"},
}


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_gen_data_default_benchmark(tmp_path, capsys):
    out = tmp_path / "d.mtld"
    assert main(["gen-data", "--out", str(out)]) == 0
    assert len(load_dataset(out)) == 1920
    assert "K=1920" in capsys.readouterr().out


def test_gen_data_rejects_zero_samples(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"dataset": {**SMALL["dataset"], "samples_per_combination": 0}}))
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "x.mtld")]) == 1


def test_gen_data_unsupported_factor_is_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"dataset": {**SMALL["dataset"], "factors": [["object-shape", 6]]}}))
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "x.mtld")]) == 1


def test_gen_data_is_deterministic(tmp_path, cfg_path):
    a, b = tmp_path / "a.mtld", tmp_path / "b.mtld"
    main(["gen-data", "--config", cfg_path, "--out", str(a)])
    main(["gen-data", "--config", cfg_path, "--out", str(b)])
    assert digest(a) == digest(b)
    main(["gen-data", "--config", cfg_path, "--seed", "4", "--out", str(b)])
    assert digest(a) != digest(b)


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["train", "--mode", "bogus"])
    assert info.value.code == 1
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1


def test_missing_dataset_is_runtime_error(tmp_path, cfg_path):
    assert main(["train", "--config", cfg_path, "--dataset", str(tmp_path / "nope.mtld"),
                 "--out", str(tmp_path / "r")]) == 2


def test_train_zero_epochs_saves_initialization(tmp_path, cfg_path):
    out = tmp_path / "r"
    assert main(["train", "--config", cfg_path, "--mode", "mtl", "--epochs", "0", "--out", str(out)]) == 0
    ckpt = load_checkpoint(out / "mtl.ckpt")
    ref = MtlModel.init(ckpt.config, SMALL["seed"])
    assert all(ckpt.params[k].tobytes() == v.tobytes() for k, v in ref.params.items())


def test_train_stl_mtl_and_delta(tmp_path, cfg_path, capsys):
    out = tmp_path / "r"
    assert main(["train", "--config", cfg_path, "--mode", "stl", "--out", str(out)]) == 0
    assert main(["train", "--config", cfg_path, "--mode", "mtl", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("stl-*.ckpt")) == ["stl-0-object-hue.ckpt", "stl-1-object-shape.ckpt"]
    mtl = json.loads((out / "mtl.metrics.json").read_text())
    stl = json.loads((out / "stl.metrics.json").read_text())
    assert len(mtl["accuracies"]) == 2 and len(mtl["epoch_losses"]) == 2
    assert set(mtl) >= {"seed", "config_digest", "epoch_losses", "accuracies", "wall_clock_seconds"}
    capsys.readouterr()
    assert main(["report-delta", str(out / "stl.metrics.json"), str(out / "mtl.metrics.json")]) == 0
    table = capsys.readouterr().out
    for name, s, m in zip(mtl["tasks"], stl["accuracies"], mtl["accuracies"]):
        assert f"{round(m - s, 2):+.2f}" in table, name


def test_train_is_reproducible(tmp_path, cfg_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["train", "--config", cfg_path, "--out", str(a)])
    main(["train", "--config", cfg_path, "--out", str(b)])
    assert digest(a / "mtl.ckpt") == digest(b / "mtl.ckpt")
    ma, mb = (json.loads((d / "mtl.metrics.json").read_text()) for d in (a, b))
    ma.pop("wall_clock_seconds"), mb.pop("wall_clock_seconds")
    assert ma == mb


def test_report_delta_rejects_non_metrics(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{}")
    assert main(["report-delta", str(p), str(p)]) == 2


class TestFinetune:
    def trained(self, tmp_path, cfg_path, tasks=None):
        cfg = dict(SMALL)
        if tasks:
            cfg = {**SMALL, "model": {**SMALL["model"], "tasks": tasks}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        main(["train", "--config", str(p), "--out", str(tmp_path / "r")])
        return str(tmp_path / "r" / "mtl.ckpt")

    def test_eta_zero_keeps_backbone(self, tmp_path, cfg_path):
        ckpt = self.trained(tmp_path, cfg_path)
        out = tmp_path / "ft.ckpt"
        assert main(["finetune", "--config", cfg_path, "--checkpoint", ckpt, "--eta", "0", "--out", str(out)]) == 0
        a, b = load_checkpoint(ckpt), load_checkpoint(out)
        for n in a.backbone_names():
            assert a.params[n].tobytes() == b.params[n].tobytes()
        assert any(a.params[n].tobytes() != b.params[n].tobytes() for n in a.head_names(0))

    def test_add_task(self, tmp_path, cfg_path):
        ckpt = self.trained(tmp_path, cfg_path, tasks=["object-hue"])
        out = tmp_path / "ft.ckpt"
        assert main(["finetune", "--config", cfg_path, "--checkpoint", ckpt, "--add-task", "object-shape",
                     "--out", str(out)]) == 0
        m = load_checkpoint(out)
        assert m.n_tasks == 2 and m.config.tasks[1] == ("object-shape", 2)

    def test_nonpositive_alpha(self, tmp_path, cfg_path):
        ckpt = self.trained(tmp_path, cfg_path)
        assert main(["finetune", "--config", cfg_path, "--checkpoint", ckpt, "--alpha", "0"]) == 1


def test_serve_edge_subprocess_roundtrip_and_sigint(tmp_path, cfg_path):
    run = tmp_path / "r"
    main(["train", "--config", cfg_path, "--out", str(run)])
    ckpt = run / "mtl.ckpt"
    port = free_port()
    env = {**os.environ, "PYTHONUNBUFFERED": "1"}
    srv = subprocess.Popen([sys.executable, "-m", "mtlsplit", "serve", "--config", cfg_path, "--checkpoint",
                            str(ckpt), "--listen", f"127.0.0.1:{port}"],
                           stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
    try:
        line = srv.stdout.readline()
        assert "listening" in line
        out = tmp_path / "edge.json"
        edge = subprocess.run([sys.executable, "-m", "mtlsplit", "edge", "--config", cfg_path, "--checkpoint",
                               str(ckpt), "--connect", f"127.0.0.1:{port}", "--out", str(out)],
                              capture_output=True, text=True, env=env, timeout=60)
        assert edge.returncode == 0, edge.stderr
        doc = json.loads(out.read_text())
        model = load_checkpoint(ckpt)
        ds = generate(FactorSpec.from_dict(SMALL["dataset"]), SMALL["seed"])
        local = [[int(np.argmax(l.data)) for l in predict_all(model, x)] for x in ds.images]
        assert doc["predictions"] == local and doc["n"] == len(ds)
    finally:
        srv.send_signal(signal.SIGINT)
        try:
            code = srv.wait(10)
        except subprocess.TimeoutExpired:
            srv.kill()
            raise
    assert code == 0


def test_edge_without_server_exits_two(tmp_path, cfg_path):
    model = MtlModel.init(generate_cfg(), 0)
    save_checkpoint(model, tmp_path / "m.ckpt")
    code = main(["edge", "--config", cfg_path, "--checkpoint", str(tmp_path / "m.ckpt"),
                 "--connect", f"127.0.0.1:{free_port()}", "--out", str(tmp_path / "e.json")])
    assert code == 2


def generate_cfg():
    return ModelConfig(input_shape=(8, 8, 3), backbone_widths=(16,), feature_len=8, head_hidden_width=6,
                       tasks=(("object-hue", 3), ("object-shape", 2)))


def test_simulate(tmp_path, cfg_path, capsys):
    main(["train", "--config", cfg_path, "--out", str(tmp_path / "r")])
    capsys.readouterr()
    assert main(["simulate", "--config", cfg_path, "--json", "--n-inputs", "10",
                 "--checkpoint", str(tmp_path / "r" / "mtl.ckpt")]) == 0
    doc = json.loads(capsys.readouterr().out)
    loc, roc, sc = doc["reports"]
    assert loc["total_seconds"] == 0.0
    assert roc["request_payload_bytes"] == 8 * 8 * 3 * 4 and sc["request_payload_bytes"] == 8 * 4
    assert doc["measured_SC"]["n"] == 10
    assert doc["measured_SC"]["bytes"] < doc["measured_RoC"]["bytes"]


class TestAnalyze:
    def test_reference_rows_text(self, capsys):
        assert main(["analyze"]) == 0
        out = capsys.readouterr().out
        for v in ("727.66", "3467.54", "3.58", "15.45", "120.53"):
            assert v in out
        assert "unit: MB" in out

    def test_binary_json(self, capsys):
        assert main(["analyze", "--unit", "binary", "--json"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert [r["zb_size"] for r in doc["table4"]] == ["0.21", "1.55"]
        roc = [r for r in doc["paradigms"] if r["paradigm"] == "RoC"][0]
        assert roc["transfer_per_input"] == "114.95 MiB" and roc["latency"] == "96.43 s"
        assert any("0.107" in n for n in doc["notes"])

    def test_zero_inputs(self, capsys):
        assert main(["analyze", "--json", "--n-inputs", "0"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert all(r["latency"] == "0.00 s" for r in doc["paradigms"])

    def test_desk_checkpoint(self, tmp_path, capsys):
        save_checkpoint(MtlModel.init(generate_cfg(), 0), tmp_path / "desk.ckpt")
        assert main(["analyze", "--json", "--checkpoint", str(tmp_path / "desk.ckpt"),
                     "--n-inputs", "10", "--input-shape", "8x8x3"]) == 0
        doc = json.loads(capsys.readouterr().out)
        row = doc["table4"][-1]
        # 192*16+16 + 16*8+8 parameters, 4 bytes each
        assert row["model"] == "desk" and row["params_size"] == f"{(192 * 16 + 16 + 16 * 8 + 8) * 4 / 1e6:.2f}"
        sc = [r for r in doc["paradigms"] if r["model"] == "desk" and r["paradigm"] == "SC"][0]
        assert sc["latency"] == f"{10 * 32 / 125e6:.2f} s"

    def test_malformed_descriptor(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"name": "x", "param_count": 3}))
        assert main(["analyze", "--descriptors", str(p)]) == 2
        assert "fwd_bwd_activation_bytes" in capsys.readouterr().err
