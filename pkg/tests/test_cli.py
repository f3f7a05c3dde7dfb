import json
import subprocess
import sys

import pytest

from semiprune import data
from semiprune.cli import run_cli


def run(capsys, *argv):
    code = run_cli([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run_cli(["synth", "--classes", "3", "--joints", "5", "--frames", "8", "--samples", "6",
                    "--out", str(root / "ds")]) == 0
    cfg = data.load_config(data.DESK_CONFIG).to_dict()
    cfg["arch"].update(heads=2, filters=4)
    cfg["train"].update(epochs=150, batch_size=3)
    cfg["prune"]["target_rate"] = 0.7
    (root / "cfg.json").write_text(json.dumps(cfg))
    base = json.loads(json.dumps(cfg))
    base["prune"]["target_rate"] = None
    (root / "base.json").write_text(json.dumps(base))
    return root


def test_train_compact_bench_maskimg(workspace, capsys):
    w = workspace
    code, out, _ = run(capsys, "train", "--config", w / "cfg.json", "--data", w / "ds", "--out", w / "run")
    assert code == 0
    assert out.splitlines()[0].startswith("Pruning rate | Accuracy (%) | SpeedUp | Observation")
    rep = json.loads((w / "run" / "report.json").read_text())
    assert abs(rep["achieved_rate"] - 0.7) <= 0.02
    hist = (w / "run" / "history.jsonl").read_text().splitlines()
    assert len(hist) == 150 and json.loads(hist[-1])["epoch"] == 150

    code, out, _ = run(capsys, "compact", "--checkpoint", w / "run" / "pruned.json", "--out", w / "plan.json")
    assert code == 0 and json.loads(out)["max_abs_diff"] <= 1e-9

    code, out, _ = run(capsys, "bench", "--checkpoint", w / "run" / "pruned.json", "--plan", w / "plan.json",
                       "--batch", 8, "--repeats", 5)
    assert code == 0 and json.loads(out)["speedup"] > 0

    code, out, _ = run(capsys, "maskimg", "--checkpoint", w / "run" / "pruned.json", "--out", w / "img", "--grid")
    assert code == 0 and len(out.splitlines()) == 3


def test_eval_matches_history(workspace, capsys):
    w = workspace
    assert run(capsys, "train", "--config", w / "base.json", "--data", w / "ds", "--out", w / "base")[0] == 0
    last = json.loads((w / "base" / "history.jsonl").read_text().splitlines()[-1])
    code, out, _ = run(capsys, "eval", "--checkpoint", w / "base" / "checkpoint.json", "--data", w / "ds")
    assert code == 0 and json.loads(out)["accuracy"] == last["test_accuracy"]
    code, out, _ = run(capsys, "eval", "--checkpoint", w / "base" / "checkpoint.json", "--data", w / "ds",
                       "--split", "train")
    assert json.loads(out)["accuracy"] == last["accuracy"]


def test_stop_and_resume(workspace, capsys):
    w = workspace
    args = ("--config", w / "cfg.json", "--data", w / "ds")
    assert run(capsys, "train", *args, "--out", w / "full", "--epochs", 6)[0] == 0
    assert run(capsys, "train", *args, "--out", w / "half", "--epochs", 6, "--stop-after", 3)[0] == 0
    assert len((w / "half" / "history.jsonl").read_text().splitlines()) == 3
    assert run(capsys, "train", *args, "--out", w / "half", "--epochs", 6,
               "--resume", w / "half" / "checkpoint.json")[0] == 0
    a = (w / "full" / "history.jsonl").read_text()
    b = (w / "half" / "history.jsonl").read_text()
    assert a == b


def test_gradcheck_exit_zero(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seeds", 2)
    assert code == 0 and json.loads(out)["failed"] == 0


@pytest.mark.parametrize("argv", [[], ["nosuch"], ["synth"], ["train", "--bogus"], ["eval", "--split", "dev",
                                                                                    "--checkpoint", "x", "--data", "y"]])
def test_usage_errors(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert err.count("\n") == 1 and err.startswith("semiprune: usage: ")


def test_runtime_errors(workspace, capsys, tmp_path):
    w = workspace
    cases = [
        ["eval", "--checkpoint", tmp_path / "missing.json", "--data", w / "ds"],
        ["train", "--config", tmp_path / "missing.json", "--data", w / "ds", "--out", tmp_path / "o"],
        ["compact", "--checkpoint", w / "base" / "checkpoint.json", "--out", tmp_path / "p.json"],
        ["train", "--config", w / "cfg.json", "--data", tmp_path, "--out", tmp_path / "o"],
        ["bench", "--checkpoint", w / "run" / "pruned.json", "--plan", w / "plan.json", "--repeats", 2],
    ]
    for argv in cases:
        code, _, err = run(capsys, *argv)
        assert code == 1, argv
        assert err.count("\n") == 1 and err.startswith("semiprune: ") and ": " in err[len("semiprune: "):]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "semiprune.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stderr.startswith("semiprune: usage:")


def test_report_table_format():
    from semiprune.report import ReportRow, render_table
    lines = render_table([ReportRow(0.98, 0.8615, 607, "Semi-structured (+ rank optimization)"),
                          ReportRow(0.9, 1.0, 3.456, "Structured")]).splitlines()
    assert lines[0] == "Pruning rate | Accuracy (%) | SpeedUp | Observation"
    assert lines[2] == "98%          | 86.15        | 607×    | Semi-structured (+ rank optimization)"
    assert lines[3].startswith("90%          | 100.00       | 3.46×   | Structured")
    assert set(lines[1]) <= {"-", "+"}
