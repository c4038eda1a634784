from __future__ import annotations

import json
import threading

import pytest

from tsas.backends import MockBackend, make_server
from tsas.cli import main
from tsas.core import QaExample
from tsas.data import export_jsonl


@pytest.fixture
def gold(tmp_path):
    path = tmp_path / "gold.jsonl"
    export_jsonl([QaExample("e0", "q", "d", ("sony",)), QaExample("e1", "q", "d", ("paris",))], path)
    return path


def write_preds(path, preds):
    path.write_text("".join(json.dumps({"id": k, "prediction": v}) + "\n" for k, v in preds.items()))


def test_evaluate(tmp_path, gold, capsys):
    pred = tmp_path / "p.jsonl"
    write_preds(pred, {"e0": "sony music", "e1": "Paris."})
    assert main(["evaluate", "--pred", str(pred), "--gold", str(gold)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"em": 50.0, "f1": 83.3333, "n": 2}


def test_evaluate_missing_prediction_is_one_line_error(tmp_path, gold, capsys):
    pred = tmp_path / "p.jsonl"
    write_preds(pred, {"e0": "sony"})
    assert main(["evaluate", "--pred", str(pred), "--gold", str(gold)]) == 1
    err = capsys.readouterr().err.strip()
    assert err.count("\n") == 0 and err.startswith("error: MetricError:") and "e1" in err


def test_usage_errors_exit_2(capsys):
    for argv in (["frobnicate"], ["evaluate", "--bogus"], []):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2


def test_synth_ingest_adapt_report(tmp_path, capsys):
    corpus = tmp_path / "c"
    assert main(["--seed", "3", "synth", "--out", str(corpus), "--num-train", "40", "--num-test", "12"]) == 0
    assert main(["ingest", str(corpus / "test.jsonl"), "--out", str(tmp_path / "t.jsonl")]) == 0
    assert (tmp_path / "t.jsonl").read_bytes() == (corpus / "test.jsonl").read_bytes()
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("pretrain:\n  epochs: 1\nrun:\n  train:\n    epochs: 1\n    learning_rate: 0.03\n")
    run = tmp_path / "run"
    argv = ["--config", str(cfg), "--seed", "3", "adapt", "--variant", "tsas", "--n", "3", "--tau", "0.5",
            "--train", str(corpus / "train.jsonl"), "--test", str(tmp_path / "t.jsonl"), "--out", str(run)]
    assert main(argv) == 0
    eff = json.loads((run / "config.json").read_text())
    assert eff["pretrain"]["epochs"] == 1 and eff["run"]["train"]["epochs"] == 1
    assert eff["run"]["sampling"]["n"] == 3 and eff["run"]["filter"]["tau"] == 0.5
    assert eff["run"]["sampling"]["base_seed"] == 3
    for name in ("report.json", "pseudo_dataset.jsonl", "checkpoint_before.npz", "predictions.jsonl"):
        assert (run / name).exists()
    capsys.readouterr()
    assert main(["report", str(run)]) == 0
    assert "tsas" in capsys.readouterr().out
    # predictions written by adapt can be scored directly
    assert main(["evaluate", "--pred", str(run / "predictions.jsonl"), "--gold", str(tmp_path / "t.jsonl")]) == 0
    em = json.loads(capsys.readouterr().out)["em"]
    assert em == pytest.approx(json.loads((run / "report.json").read_text())["em_after"], abs=1e-4)
    # checkpoint reuse and a sweep
    sweep_dir = tmp_path / "sweep"
    assert main(["--config", str(cfg), "sweep", "--param", "tau", "--values", "0,1", "--n", "3",
                 "--checkpoint", str(run / "checkpoint_before.npz"), "--test", str(tmp_path / "t.jsonl"), "--out", str(sweep_dir)]) == 0
    assert (sweep_dir / "sweep.csv").read_text().startswith("tau,em,f1,retention")


def test_adapt_against_untrainable_http_backend(tmp_path, gold, capsys, monkeypatch):
    server = make_server(MockBackend(default="sony"))
    threading.Thread(target=server.serve_forever, daemon=True).start()
    monkeypatch.setenv("TSAS_BASE_URL", f"http://127.0.0.1:{server.server_address[1]}")
    try:
        run = tmp_path / "run"
        rc = main(["adapt", "--backend", "http", "--variant", "tsas", "--test", str(gold), "--out", str(run)])
        assert rc == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: CapabilityError:") and "\n" not in err
        assert (run / "config.json").exists()  # written before any work
        assert main(["adapt", "--backend", "http", "--variant", "naive", "--test", str(gold), "--out", str(run)]) == 0
        assert json.loads((run / "report.json").read_text())["em_after"] == 50.0
    finally:
        server.shutdown()
        server.server_close()


def test_bad_config_file(tmp_path, gold, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("- just\n- a list\n")
    assert main(["--config", str(cfg), "adapt", "--test", str(gold), "--out", str(tmp_path / "r")]) == 1
    assert "must hold a mapping" in capsys.readouterr().err
