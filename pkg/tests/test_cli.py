import hashlib
import json
import os
import subprocess
import sys
import time

import pytest

from kmtsim.cli import config_hash, main
from kmtsim.config import example_document


def write_config(path, **edits):
    doc = example_document(8, 100)
    for dotted, value in edits.items():
        sec, key = dotted.split(".")
        doc[sec][key] = value
    path.write_text(json.dumps(doc, indent=1))
    return path


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir()) if p.is_file()}


def test_validate_accepts_lambda_below_lambda_star(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", **{"model.lambda": 0.5})
    assert main(["validate", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "lambda_star 0.5671432904" in out and "admissible" in out


def test_validate_warns_above_lambda_star(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", **{"model.lambda": 0.6})
    assert main(["validate", "--config", str(cfg)]) == 1
    assert "EXCEEDS lambda_star" in capsys.readouterr().out


def test_validate_rejects_small_n_min(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", **{"blocking.n_min": 2})
    assert main(["validate", "--config", str(cfg)]) == 2
    assert "n_min > 2C_max/C_min" in capsys.readouterr().err


def test_validate_rejects_unknown_keys(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", **{"experiment.replicatons": 5})
    assert main(["validate", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "experiment" in err and "replicatons" in err


def test_validate_reports_json_position(tmp_path, capsys):
    bad = tmp_path / "c.json"
    bad.write_text('{\n  "model": {"n": 8,\n  }\n}')
    assert main(["validate", "--config", str(bad)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_validate_missing_file(tmp_path):
    assert main(["validate", "--config", str(tmp_path / "absent.json")]) == 2


def test_bad_arguments_are_config_errors():
    assert main(["run"]) == 2
    assert main(["frobnicate"]) == 2


def test_config_hash_stable_under_key_order():
    doc = example_document()
    shuffled = {k: dict(reversed(list(v.items()))) for k, v in reversed(list(doc.items()))}
    assert config_hash(doc) == config_hash(shuffled)
    assert config_hash(doc) != config_hash(example_document(16))


def test_smoke_run_and_report(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "missing" / "nested"
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "kmtsim", "run", "--config", str(cfg), "--out", str(out),
                           "--workers", "1"], capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    assert elapsed < 10
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"summary", "replications", "diagnostics", "coupling"}
    for v in manifest["outputs"].values():
        assert (out / v["path"]).is_file()
    assert manifest["seed"] == 1 and manifest["workers"] == 1
    assert manifest["elapsed_seconds"] < 10
    rows = (out / "replications.csv").read_text().splitlines()
    assert rows[0] == "rep,f_id,S_n" and len(rows) == 1 + 100 * 20

    assert main(["report", str(out)]) == 0
    first = digest(out / "report")
    assert {"report.txt", "tail_curves.csv", "tail_curves.png", "mgf.png"} <= set(first)
    assert main(["report", str(out)]) == 0
    assert digest(out / "report") == first
    assert (out / "report" / "tail_curves.csv").read_text().startswith("# x battery_max")


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--workers", "1", "--seed", "9"]) in (0, 1)
    assert json.loads((tmp_path / "a" / "summary.json").read_text())["seed"] == 9


def test_worker_count_does_not_change_results(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json", **{"experiment.chunk_size": 25})
    monkeypatch.delenv("KMTSIM_WORKERS", raising=False)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "w1"), "--workers", "1"]) == 0
    monkeypatch.setenv("KMTSIM_WORKERS", "8")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "w8"), "--workers", "1"]) == 0
    a = tmp_path / "w1" / "summary.json"
    b = tmp_path / "w8" / "summary.json"
    assert a.read_bytes() == b.read_bytes()
    assert json.loads((tmp_path / "w8" / "manifest.json").read_text())["workers"] == 8


def test_bad_worker_env(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json")
    monkeypatch.setenv("KMTSIM_WORKERS", "many")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_unwritable_output_is_io_error(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "--config", str(cfg), "--out", str(blocker / "sub"), "--workers", "1"]) == 3


def test_report_on_empty_dir(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert "manifest.json" in capsys.readouterr().err


def test_report_lists_missing_and_changed_files(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == 0
    (out / "coupling.csv").write_text("tampered\n")
    assert main(["report", str(out)]) == 2
    assert "hash mismatch" in capsys.readouterr().err
    (out / "coupling.csv").unlink()
    assert main(["report", str(out)]) == 2
    assert "coupling.csv" in capsys.readouterr().err


def test_sweep_and_report(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", **{"experiment.replications": 200})
    out = tmp_path / "s"
    code = main(["sweep", "--config", str(cfg), "--out", str(out), "--workers", "1", "--n", "16", "32", "64"])
    assert code in (0, 1)
    sweep = json.loads((out / "sweep.json").read_text())
    assert [r["n"] for r in sweep["table"]["rows"]] == [16, 32, 64]
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    text = capsys.readouterr().out
    assert "growth exponent" in text
    lines = (out / "report" / "scaling.csv").read_text().strip().splitlines()
    assert lines[0].startswith("n,") and len(lines) == 4
    assert (out / "report" / "scaling.png").is_file()


@pytest.mark.skipif(os.name != "posix", reason="console script path")
def test_console_script_help():
    proc = subprocess.run(["kmtsim", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("validate", "run", "report", "sweep"):
        assert sub in proc.stdout
