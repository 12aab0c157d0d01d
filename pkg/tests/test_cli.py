import io
import json
import subprocess
import sys

import pytest

from turntake.cli import main
from turntake.config import ABLATION_ROWS
from turntake.dataio import read_dataset
from turntake.quantserve import load_model

TINY = ["--set", "d=4", "--set", "bilstm_width=8", "--set", "transformer_hidden=8", "--set", "n_layers=1",
        "--set", "n_heads=2", "--set", "lr=0.001"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--seed", "7", "--duration", "150", "--out", str(root / "corpus")]) == 0
    return root


@pytest.fixture(scope="module")
def dataset(workdir):
    c = workdir / "corpus"
    out = workdir / "d.cttk"
    assert main(["windows", "--frames", str(c / "frames.jsonl"), "--log", str(c / "log.jsonl"),
                 "--labels", str(c / "labels.jsonl"), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def model(workdir, dataset):
    out = workdir / "m.cttm"
    assert main(["train", "--data", str(dataset), "--epochs", "2", "--seed", "1", "--out", str(out), *TINY]) == 0
    return out


def test_synth_is_deterministic(workdir, tmp_path):
    assert main(["synth", "--seed", "7", "--duration", "150", "--out", str(tmp_path)]) == 0
    for name in ("frames.jsonl", "log.jsonl", "labels.jsonl", "synth.json"):
        assert (tmp_path / name).read_bytes() == (workdir / "corpus" / name).read_bytes(), name


def test_label_matches_synth_labels(workdir, tmp_path, capsys):
    out = tmp_path / "labels.jsonl"
    c = workdir / "corpus"
    assert main(["label", "--log", str(c / "log.jsonl"), "--duration", "150", "--out", str(out)]) == 0
    assert out.read_bytes() == (c / "labels.jsonl").read_bytes()
    online = tmp_path / "online.jsonl"
    assert main(["label", "--log", str(c / "log.jsonl"), "--duration", "150", "--online", "--out", str(online)]) == 0
    assert online.read_bytes() == out.read_bytes()
    assert "class1" in capsys.readouterr().out


def test_windows_dataset(dataset):
    batch = read_dataset(dataset)
    assert len(batch) > 100 and batch.text.shape[1:] == (35, 768)


def test_train_writes_model_history_and_config(model, capsys):
    assert load_model(model).config.d == 4
    hist = [json.loads(x) for x in open(str(model) + ".history.jsonl")]
    assert [h["epoch"] for h in hist] == [1, 2]
    assert json.loads(open(str(model) + ".config.json").read())["seed"] == 1


def test_eval_prints_report(model, dataset, tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["eval", "--model", str(model), "--data", str(dataset), "--split", "test", "--out", str(out)]) == 0
    printed = capsys.readouterr()
    assert "macro_f1" in printed.out and "config:" in printed.err
    assert 0 <= json.loads(out.read_text())["macro_f1"] <= 1


def test_train_resume_from_checkpoint(workdir, dataset, tmp_path):
    ck = tmp_path / "ck.cttm"
    assert main(["train", "--data", str(dataset), "--epochs", "1", "--seed", "1", "--checkpoint", str(ck),
                 "--out", str(tmp_path / "a.cttm"), *TINY]) == 0
    assert main(["train", "--data", str(dataset), "--epochs", "2", "--seed", "1", "--resume", str(ck),
                 "--out", str(tmp_path / "b.cttm"), *TINY]) == 0
    assert (tmp_path / "b.cttm").read_bytes() == (workdir / "m.cttm").read_bytes()


def test_ablate_table(dataset, tmp_path, capsys):
    out = tmp_path / "abl.json"
    assert main(["ablate", "--data", str(dataset), "--epochs", "1", "--out", str(out), *TINY]) == 0
    printed = capsys.readouterr().out
    for label in ABLATION_ROWS.values():
        assert label in printed
    assert [r["row"] for r in json.loads(out.read_text())] == list(ABLATION_ROWS.values())


def test_quantize_and_bench(model, tmp_path, capsys):
    q = tmp_path / "q.cttm"
    assert main(["quantize", "--model", str(model), "--out", str(q)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["fp16_bytes"] < info["fp32_bytes"]
    assert main(["bench", "--model", str(q), "--windows", "2", "--repetitions", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["dtype"] == "fp16"
    assert main(["bench", "--windows", "2", "--repetitions", "1", *TINY]) == 0


def test_serve_stdio(model, workdir, monkeypatch, capsys):
    from turntake.dataio import parse_feature_stream, parse_utterance_log
    from turntake.server import replay_records

    c = workdir / "corpus"
    frames = parse_feature_stream(c / "frames.jsonl")[:12]
    events = [e for e in parse_utterance_log(c / "log.jsonl") if e.start < 12]
    text = "".join(json.dumps(r) + "\n" for r in replay_records(frames, events)) + "garbage\n"
    monkeypatch.setattr(sys, "stdin", io.StringIO(text))
    assert main(["serve", "--model", str(model), "--overflow", "block"]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [r["t"] for r in lines if "t" in r] == list(range(5, 13))
    assert "error" in lines[-1]


@pytest.mark.parametrize("argv,code", [
    ([], 1),
    (["nonsense"], 1),
    (["train"], 1),
    (["train", "--data", "x", "--out", "y", "--set", "nope=1"], 1),
    (["train", "--data", "x", "--out", "y", "--set", "d=-3"], 1),
    (["eval", "--model", "/nonexistent.cttm", "--data", "/nonexistent.cttk"], 2),
    (["serve", "--model", "m", "--endpoint", "udp://x"], 1),
])
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code


def test_corrupt_model_is_a_data_error(tmp_path, dataset):
    bad = tmp_path / "bad.cttm"
    bad.write_bytes(b"CTTM" + bytes(20))
    assert main(["eval", "--model", str(bad), "--data", str(dataset)]) == 2


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "turntake.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("synth", "label", "windows", "train", "eval", "ablate", "quantize", "bench", "serve"):
        assert cmd in r.stdout
    r = subprocess.run([sys.executable, "-m", "turntake.cli", "frobnicate"], capture_output=True, text=True)
    assert r.returncode == 1 and "usage" in r.stderr
