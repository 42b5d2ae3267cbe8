import json
import shutil
import subprocess
from importlib import resources
from pathlib import Path

import pytest

from lcmcodec.cli import EXIT_CORRUPT, EXIT_DIVERGED, EXIT_INPUT, EXIT_INVARIANT, EXIT_OK, main
from lcmcodec.training import TrainingDivergence

SAMPLE = Path(resources.files("lcmcodec") / "data" / "sample.ply")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "model.lcmw"
    assert main(["init-weights", str(path), "--seed", "0"]) == EXIT_OK
    return path


@pytest.fixture(scope="module")
def encoded(weights, tmp_path_factory):
    path = tmp_path_factory.mktemp("enc") / "sample.lcm"
    assert main(["encode", str(SAMPLE), str(weights), str(path), "-L", "256"]) == EXIT_OK
    return path


def test_encode_decode_inspect(capsys, weights, tmp_path):
    out = tmp_path / "s.lcm"
    code, stdout, _ = run(capsys, "encode", SAMPLE, weights, out, "--window", 256)
    assert code == EXIT_OK
    stats = json.loads(stdout)
    assert stats["bytes_total"] == out.stat().st_size
    assert stats["n_gaussians"] == 1000
    assert set(stats) == {"n_gaussians", "bytes_total", "bytes_per_section", "bits_per_gaussian", "seconds"}
    assert stats["bits_per_gaussian"] == pytest.approx(8 * out.stat().st_size / 1000)

    code, stdout, _ = run(capsys, "inspect", out, "--json")
    rate = json.loads(stdout)
    assert code == EXIT_OK and rate["total_bytes"] == out.stat().st_size
    assert rate["header_bytes"] + sum(r["bytes"] for r in rate["sections"].values()) == out.stat().st_size

    code, stdout, _ = run(capsys, "inspect", out)
    lines = stdout.splitlines()
    assert code == EXIT_OK and any(line.startswith("TOTAL") and str(out.stat().st_size) in line for line in lines)
    assert sum(line.startswith(("GEOM", "CLR", "POSITIONS", "DIV")) for line in lines) == 8

    ply = tmp_path / "back.ply"
    code, stdout, _ = run(capsys, "decode", out, weights, ply)
    assert code == EXIT_OK and json.loads(stdout)["n_gaussians"] == 1000
    assert ply.read_bytes().startswith(b"ply\n")


def test_encoding_is_idempotent(capsys, weights, encoded, tmp_path):
    again = tmp_path / "again.lcm"
    run(capsys, "encode", SAMPLE, weights, again, "-L", 256, "--threads", 1)
    assert again.read_bytes() == encoded.read_bytes()


def test_missing_weights(capsys, tmp_path):
    code, _, err = run(capsys, "encode", SAMPLE, tmp_path / "nope.lcmw", tmp_path / "o.lcm")
    assert code == EXIT_INPUT and "weights not found" in err


def test_missing_input(capsys, weights, tmp_path):
    code, _, err = run(capsys, "encode", tmp_path / "nope.ply", weights, tmp_path / "o.lcm")
    assert code == EXIT_INPUT and "cannot read" in err


def test_bad_ply(capsys, weights, tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    code, _, _ = run(capsys, "encode", bad, weights, tmp_path / "o.lcm")
    assert code == EXIT_INPUT


def test_truncated_stream(capsys, weights, encoded, tmp_path):
    cut = tmp_path / "cut.lcm"
    cut.write_bytes(encoded.read_bytes()[:-100])
    code, _, err = run(capsys, "decode", cut, weights, tmp_path / "o.ply")
    assert code == EXIT_CORRUPT and "corrupt stream" in err
    code, _, _ = run(capsys, "inspect", cut)
    assert code == EXIT_CORRUPT


def test_bad_thread_count(capsys, weights, tmp_path, monkeypatch):
    monkeypatch.setenv("LCM_THREADS", "many")
    code, _, err = run(capsys, "encode", SAMPLE, weights, tmp_path / "o.lcm")
    assert code == EXIT_INPUT and "thread" in err


def test_selftest_green_and_fault_detected(capsys):
    code, stdout, _ = run(capsys, "selftest")
    summary = json.loads(stdout)
    assert code == EXIT_OK and summary["ok"] and not summary["failed"]
    code, stdout, err = run(capsys, "selftest", "--debug-flip-cdf-count")
    summary = json.loads(stdout)
    assert code == EXIT_INVARIANT
    assert summary["failed"] == ["cdf_quantization"]
    assert "cdf_quantization" in err


def test_selftest_unknown_suite(capsys):
    code, _, err = run(capsys, "selftest", "--only", "everything")
    assert code == EXIT_INPUT and "unknown suite" in err


def test_init_weights_config(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"width": 16, "heads": 2}))
    code, stdout, _ = run(capsys, "init-weights", tmp_path / "w.lcmw", "--config", cfg)
    assert code == EXIT_OK and json.loads(stdout)["parameters"] > 0
    cfg.write_text(json.dumps({"depth": 3}))
    code, _, err = run(capsys, "init-weights", tmp_path / "w.lcmw", "--config", cfg)
    assert code == EXIT_INPUT and "unknown model config" in err


def test_train_toy_all_stages(capsys, tmp_path):
    code, stdout, _ = run(capsys, "train-toy", tmp_path, "--steps", 2, "--scenes", 2, "--n", 64, "-L", 64,
                          "--checkpoint-every", 1)
    report = json.loads(stdout)
    assert code == EXIT_OK and list(report["stages"]) == ["lossy_init", "lossless_init", "joint"]
    assert (tmp_path / "joint.lcmw").is_file()
    assert (tmp_path / "checkpoints" / "joint_000002.lcmw").is_file()
    assert len((tmp_path / "train_log.jsonl").read_text().splitlines()) == 6


def test_train_toy_stage_needs_resume(capsys, tmp_path):
    code, _, err = run(capsys, "train-toy", tmp_path, "--stage", "joint")
    assert code == EXIT_INPUT and "--resume" in err


def test_train_toy_divergence_exit(capsys, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TrainingDivergence("lossy_init", 3, "loss is nan")

    monkeypatch.setattr("lcmcodec.training.train_stage", boom)
    code, _, err = run(capsys, "train-toy", tmp_path, "--steps", 1, "--scenes", 1, "--n", 32, "-L", 32)
    assert code == EXIT_DIVERGED and "lossy_init" in err


def test_ablate_report(capsys):
    code, stdout, _ = run(capsys, "ablate", "context_len", "--context-len", 16, "--steps", 1, "--scenes", 1,
                          "--n", 64)
    report = json.loads(stdout)
    assert code == EXIT_OK
    assert report["mode"] == "context_len(16)"
    assert report["ratio"] == pytest.approx(report["variant_bits_per_gaussian"] / report["full_bits_per_gaussian"])


def test_ablate_rejects_unknown_mode(capsys):
    code, _, err = run(capsys, "ablate", "no_attention")
    assert code == EXIT_INPUT and "unknown mode" in err


@pytest.mark.skipif(shutil.which("lcm") is None, reason="console script not installed")
def test_console_script(encoded):
    res = subprocess.run(["lcm", "inspect", str(encoded), "--json"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["total_bytes"] == encoded.stat().st_size
