"""End-to-end runs of every CLI subcommand on tiny synthetic configs."""

import json

import pytest

from exae.cli import DEFAULT_CONFIG, level_configs_from, load_config, main


def tiny_config(tmp_path, **overrides):
    cfg = {
        "data": {
            "source": "synth",
            "classes": 2,
            "dim": 6,
            "per_class": 12,
            "spread": 0.08,
            "split": {"per_class_train": 8},
        },
        "stack": {
            "sizes": [6, 4, 3],
            "excl_weight": 2.0,
            "n_neighbors": 2,
            "epochs": 2,
            "batch_size": 8,
        },
        "finetune": {"epochs": 2, "band": 0.6},
        "experiment": {"trials": 2, "base_seed": 0},
        "output": {"dir": str(tmp_path / "out")},
    }
    for key, val in overrides.items():
        cfg[key] = {**cfg.get(key, {}), **val}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_defaults_cover_documented_operating_point():
    cfg = load_config(None)
    assert cfg["stack"]["excl_weight"] == 7.0
    assert cfg["stack"]["n_neighbors"] == 6
    assert cfg["finetune"]["band"] == 0.6
    assert cfg["eval"]["knn_k"] == 1
    assert cfg["experiment"]["trials"] == 10
    # default chain gives three levels ending at width 128
    levels = level_configs_from(cfg, 784)
    assert len(levels) == 3
    assert levels[-1].latent_dim == 128


def test_user_config_merges_over_defaults(tmp_path):
    path = tiny_config(tmp_path)
    cfg = load_config(str(path))
    assert cfg["stack"]["sizes"] == [6, 4, 3]
    assert cfg["stack"]["lr"] == 0.05  # untouched default
    assert cfg["experiment"]["trials"] == 2


def test_level_configs_respect_overrides():
    cfg = load_config(None)
    cfg["stack"]["sizes"] = [8, 4, 2]
    cfg["stack"]["levels"] = [{"epochs": 9}, {"lr": 0.01}]
    levels = level_configs_from(cfg, 8)
    assert levels[0].epochs == 9
    assert levels[1].lr == 0.01
    assert levels[0].output_activation == "sigmoid"
    assert levels[1].output_activation == "relu"  # reconstructs codes


def test_synth_writes_idx_fixture(tmp_path, capsys):
    path = tiny_config(tmp_path)
    assert main(["--config", str(path), "synth"]) == 0
    out = tmp_path / "out"
    assert (out / "synth-images-idx3-ubyte").exists()
    assert (out / "synth-labels-idx1-ubyte").exists()

    from exae.dataio import load_idx

    ds = load_idx(out / "synth-images-idx3-ubyte", out / "synth-labels-idx1-ubyte")
    assert ds.n == 24


def test_train_stack_finetune_eval_pipeline(tmp_path, capsys):
    path = tiny_config(tmp_path)
    out = tmp_path / "out"

    assert main(["--config", str(path), "train"]) == 0
    assert (out / "model.ckpt").exists()
    assert (out / "train-metrics.csv").exists()

    assert main(["--config", str(path), "stack"]) == 0
    assert (out / "stack.ckpt").exists()

    assert main(["--config", str(path), "finetune", str(out / "stack.ckpt")]) == 0
    assert (out / "finetuned.ckpt").exists()

    assert main(["--config", str(path), "eval", str(out / "finetuned.ckpt")]) == 0
    captured = capsys.readouterr()
    assert "accuracy:" in captured.out


def test_experiment_command(tmp_path, capsys):
    path = tiny_config(tmp_path)
    assert main(["--config", str(path), "experiment"]) == 0
    out = tmp_path / "out"
    assert (out / "metrics.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["completed"] == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--cases", "1", "--seed", "0"]) == 0
    assert "OK" in capsys.readouterr().out


def test_unknown_source_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"data": {"source": "nope"}}))
    with pytest.raises(ValueError, match="source"):
        main(["--config", str(path), "synth"])


def test_defaults_are_not_mutated_between_loads():
    one = load_config(None)
    one["stack"]["excl_weight"] = 99.0
    assert DEFAULT_CONFIG["stack"]["excl_weight"] == 7.0
    assert load_config(None)["stack"]["excl_weight"] == 7.0
