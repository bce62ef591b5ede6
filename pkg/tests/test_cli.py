import json

import pytest
from click.testing import CliRunner

from blockpred.cli import main
from blockpred.evaluation import load_report


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, **overrides):
    cfg = {
        "seed": 7,
        "out_dir": "out",
        "cache_dir": "cache",
        "scenarios": ["out/synth"],
        "window": {"r": 8, "stride": 1, "r_prime_values": [1]},
        "features": {"length": 28},
        "detector": {
            "kind": "oracle",
            "noise": {"jitter_std": 0.01, "miss_prob": 0.05, "false_positive_rate": 0.1},
        },
        "model": {"hidden_dim": 16, "num_layers": 2},
        "train": {"learning_rate": 0.001, "batch_size": 32, "epochs": 3},
        "simulate": {
            "duration_s": 60.0,
            "sample_rate_hz": 10.0,
            "object_rate": 0.4,
            "scenario_id": "synth",
            "image_size": [48, 32],
            "seed": 7,
        },
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def test_help_lists_flags(runner):
    for cmd in ("simulate", "build-dataset", "extract-features", "train", "evaluate", "sweep"):
        result = runner.invoke(main, [cmd, "--help"])
        assert result.exit_code == 0
        assert "--config" in result.output
        assert "--seed" in result.output
        assert "--out" in result.output


def test_full_pipeline(runner, tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"

    run_ok(runner, ["simulate", "--config", str(cfg)])
    assert (out / "synth" / "manifest.csv").exists()
    assert (out / "synth" / "ground_truth.jsonl").exists()
    assert (out / "synth" / "frames" / "frame_00000.png").exists()
    assert (out / "run_config.json").exists()

    result = run_ok(runner, ["build-dataset", "--config", str(cfg)])
    assert (out / "listing_r1.jsonl").exists()
    assert (out / "dataset_summary.json").exists()
    assert "synth" in result.output

    result = run_ok(runner, ["extract-features", "--config", str(cfg)])
    caches = list((tmp_path / "cache").glob("features_*.jsonl"))
    assert len(caches) == 1

    result = run_ok(runner, ["train", "--config", str(cfg), "--r-prime", "1"])
    assert (out / "model_r1.npz").exists()
    assert (out / "train_log_r1.csv").exists()
    assert "val_f1" in result.output

    result = run_ok(runner, ["evaluate", "--config", str(cfg)])
    reports = load_report(out / "report.json")
    assert len(reports) == 1
    assert reports[0].scenario_id == "synth"
    assert (out / "sweep_combined.png").exists()
    assert (out / "confusion_1.png").exists()


def test_missing_manifest_exit_2(runner, tmp_path):
    cfg = write_config(tmp_path, scenarios=["nowhere/missing.csv"])
    result = runner.invoke(main, ["build-dataset", "--config", str(cfg)])
    assert result.exit_code == 2
    assert "missing.csv" in result.output


def test_missing_config_exit_2(runner, tmp_path):
    result = runner.invoke(main, ["build-dataset", "--config", str(tmp_path / "nope.json")])
    assert result.exit_code == 2


def test_evaluate_before_train_exit_3(runner, tmp_path):
    cfg = write_config(tmp_path)
    run_ok(runner, ["simulate", "--config", str(cfg)])
    run_ok(runner, ["build-dataset", "--config", str(cfg)])
    result = runner.invoke(main, ["evaluate", "--config", str(cfg)])
    assert result.exit_code == 3
    assert "train" in result.output


def test_build_dataset_before_simulate_exit_2(runner, tmp_path):
    cfg = write_config(tmp_path)
    result = runner.invoke(main, ["build-dataset", "--config", str(cfg)])
    assert result.exit_code == 2  # manifest does not exist yet


def test_extract_before_build_exit_3(runner, tmp_path):
    cfg = write_config(tmp_path)
    run_ok(runner, ["simulate", "--config", str(cfg)])
    result = runner.invoke(main, ["extract-features", "--config", str(cfg)])
    assert result.exit_code == 3
    assert "build-dataset" in result.output


def test_train_without_features_exit_3(runner, tmp_path):
    cfg = write_config(tmp_path)
    run_ok(runner, ["simulate", "--config", str(cfg)])
    run_ok(runner, ["build-dataset", "--config", str(cfg)])
    result = runner.invoke(main, ["train", "--config", str(cfg), "--r-prime", "1"])
    assert result.exit_code == 3
    assert "extract-features" in result.output


def test_build_dataset_rerun_identical_bytes(runner, tmp_path):
    cfg = write_config(tmp_path)
    run_ok(runner, ["simulate", "--config", str(cfg)])
    run_ok(runner, ["build-dataset", "--config", str(cfg)])
    first = (tmp_path / "out" / "listing_r1.jsonl").read_bytes()
    run_ok(runner, ["build-dataset", "--config", str(cfg)])
    assert (tmp_path / "out" / "listing_r1.jsonl").read_bytes() == first


def test_lock_file_blocks_concurrent_writes(runner, tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    out.mkdir()
    (out / ".blockpred.lock").write_text("12345\n")
    result = runner.invoke(main, ["simulate", "--config", str(cfg)])
    assert result.exit_code == 2
    assert "locked" in result.output


def test_cache_dir_env_override(runner, tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    alt_cache = tmp_path / "alt_cache"
    monkeypatch.setenv("BLOCKPRED_CACHE_DIR", str(alt_cache))
    run_ok(runner, ["simulate", "--config", str(cfg)])
    run_ok(runner, ["build-dataset", "--config", str(cfg)])
    run_ok(runner, ["extract-features", "--config", str(cfg)])
    assert list(alt_cache.glob("features_*.jsonl"))
    assert not (tmp_path / "cache").exists()


def test_noisy_detector_override(runner, tmp_path):
    cfg = write_config(tmp_path)
    run_ok(runner, ["simulate", "--config", str(cfg)])
    run_ok(runner, ["build-dataset", "--config", str(cfg)])
    run_ok(runner, ["extract-features", "--config", str(cfg), "--detector", "noisy"])
    caches = list((tmp_path / "cache").glob("features_*.jsonl"))
    assert len(caches) == 1
    run_ok(runner, ["extract-features", "--config", str(cfg), "--detector", "oracle"])
    assert len(list((tmp_path / "cache").glob("features_*.jsonl"))) == 2


def test_external_detector_without_backend_exit_2(runner, tmp_path, monkeypatch):
    monkeypatch.delenv("BLOCKPRED_BACKEND_URL", raising=False)
    cfg = write_config(tmp_path)
    run_ok(runner, ["simulate", "--config", str(cfg)])
    run_ok(runner, ["build-dataset", "--config", str(cfg)])
    result = runner.invoke(main, ["extract-features", "--config", str(cfg), "--detector", "external"])
    assert result.exit_code == 2


def test_unreachable_external_backend_exit_4(runner, tmp_path):
    cfg = write_config(tmp_path, detector={"kind": "external", "url": "http://127.0.0.1:1", "timeout_s": 0.5})
    run_ok(runner, ["simulate", "--config", str(cfg)])
    run_ok(runner, ["build-dataset", "--config", str(cfg)])
    result = runner.invoke(main, ["extract-features", "--config", str(cfg)])
    assert result.exit_code == 4


def test_sweep_command(runner, tmp_path):
    cfg = write_config(
        tmp_path,
        window={"r": 8, "stride": 1, "r_prime_values": [1, 2]},
        train={"learning_rate": 0.001, "batch_size": 32, "epochs": 2},
    )
    out = tmp_path / "out"
    run_ok(runner, ["simulate", "--config", str(cfg)])
    run_ok(runner, ["build-dataset", "--config", str(cfg)])
    run_ok(runner, ["extract-features", "--config", str(cfg)])
    run_ok(runner, ["sweep", "--config", str(cfg)])
    reports = load_report(out / "report.json")
    assert {r.r_prime for r in reports} == {1, 2}
    assert (out / "model_r1.npz").exists() and (out / "model_r2.npz").exists()


def test_scenario_filter_unknown_exit_2(runner, tmp_path):
    cfg = write_config(tmp_path)
    run_ok(runner, ["simulate", "--config", str(cfg)])
    result = runner.invoke(main, ["build-dataset", "--config", str(cfg), "--scenario", "ghost"])
    assert result.exit_code == 2
