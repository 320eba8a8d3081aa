import json

import numpy as np
import pytest

from siamlab import cli
from siamlab.config import PRESETS, SWEEPS, ConfigError, config_from_dict, parse_config, preset_config
from siamlab.nn import load_checkpoint


def test_empty_document_gives_baseline_defaults():
    cfg = parse_config("")
    assert (cfg.optim.base_lr, cfg.optim.weight_decay, cfg.optim.momentum) == (0.05, 1e-4, 0.9)
    assert cfg.model.output_dim == 64 and cfg.model.predictor_hidden is None
    assert cfg.loss.stop_grad and cfg.loss.symmetry == "symmetric"


def test_table4a_preset_turns_bn_off():
    cfg = parse_config("preset: table4a")
    assert not cfg.model.bn_hidden and not cfg.model.bn_output


def test_unknown_key_names_the_key():
    with pytest.raises(ConfigError, match="optim.bsae_lr"):
        parse_config("optim:\n  bsae_lr: 0.1\n")
    with pytest.raises(ConfigError, match="'modle'"):
        parse_config("modle: {}")


def test_invalid_value_names_the_field():
    with pytest.raises(ConfigError, match="symmetry"):
        parse_config("loss: {symmetry: sideways}")
    with pytest.raises(ConfigError):
        parse_config("optim: [1, 2")
    with pytest.raises(ConfigError):
        parse_config("preset: nope")


def test_config_round_trips_through_json():
    cfg = preset_config("table4c-noaffine", {"seed": 9})
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_cifar_preset_hyperparameters():
    cfg = preset_config("cifar10")
    assert (cfg.optim.base_lr, cfg.optim.weight_decay, cfg.optim.batch_size) == (0.03, 5e-4, 512)
    assert cfg.dataset.kind == "cifar10" and cfg.model.backbone == "conv"


def test_table2c_constant_predictor_lr():
    assert preset_config("table2c").optim.predictor_lr_policy == "constant"


def test_sweeps_name_real_presets():
    assert SWEEPS["table2"] == ["table2a", "table2b", "table2c"]
    assert all(p in PRESETS for members in SWEEPS.values() for p in members)


def tiny_config_text(name="fig2-stopgrad-on", **extra):
    doc = {
        "preset": name,
        "dataset": {"samples_per_class": 8, "test_per_class": 4, "num_classes": 3, "dim": 6},
        "model": {"backbone_widths": [16], "projection_hidden": 16, "output_dim": 8},
        "optim": {"batch_size": 8, "epochs": 4},
        "diagnostics": {"knn_k": 5, "knn_every": 4, "verdict": {"window": 5}},
    }
    doc.update(extra)
    return json.dumps(doc)


def test_cli_run_writes_artifacts(tmp_path, capsys):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(tiny_config_text())
    out = tmp_path / "out"
    code = cli.main(["--config", str(cfg_path), "--out", str(out), "--seed", "3"])
    summary = json.loads((out / "summary.json").read_text())
    assert code == cli.EXIT_CODES[summary["verdict"]]
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 13  # 12 steps plus the probe line
    first = json.loads(lines[0])
    assert set(first) == {"step", "epoch", "lr", "loss", "output_std", "knn_acc", "wallclock_ms"}
    assert json.loads(lines[-1])["kind"] == "probe"
    assert summary["probe_acc"] is not None and summary["final_knn_acc"] is not None
    assert json.loads((out / "config.json").read_text())["seed"] == 3
    model, extra = load_checkpoint(out / "checkpoint.npz")
    assert model.d == 8 and extra["steps"] == 12
    assert '"verdict"' in capsys.readouterr().out


def test_summary_is_recomputable_from_metrics(tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(tiny_config_text())
    cli.main(["--config", str(cfg_path), "--out", str(tmp_path / "o")])
    written = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert cli.summarize(tmp_path / "o") == written


def test_cli_rerun_is_bit_identical(tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(tiny_config_text())
    cli.main(["--config", str(cfg_path), "--out", str(tmp_path / "a")])
    # feeding the resolved config back reproduces the run
    cli.main(["--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")])

    def strip(p):
        return [{k: v for k, v in json.loads(l).items() if k != "wallclock_ms"} for l in p.read_text().splitlines()]

    assert strip(tmp_path / "a" / "metrics.jsonl") == strip(tmp_path / "b" / "metrics.jsonl")
    with np.load(tmp_path / "a" / "checkpoint.npz") as za, np.load(tmp_path / "b" / "checkpoint.npz") as zb:
        for k in za.files:
            if k != "__meta__":
                assert za[k].tobytes() == zb[k].tobytes()


def test_cli_alternating_run_saves_bank(tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(tiny_config_text("hyp-multistep-k10"))
    cli.main(["--config", str(cfg_path), "--out", str(tmp_path / "h")])
    with np.load(tmp_path / "h" / "eta_bank.npz") as z:
        assert z["values"].shape == (24, 8) and z["initialized"].all()


def test_cli_diverged_exit_code(tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(tiny_config_text(optim={"batch_size": 8, "epochs": 4, "base_lr": 1e200}))
    assert cli.main(["--config", str(cfg_path), "--out", str(tmp_path / "d")]) == cli.EXIT_CODES["diverged"]


def test_cli_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("optim: {lr: 1}\n")
    assert cli.main(["--config", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_CODES["usage"]
    assert "optim.lr" in capsys.readouterr().err
    assert cli.main(["--preset", "nope"]) == cli.EXIT_CODES["usage"]
    with pytest.raises(SystemExit) as exc:
        cli.main(["--preset", "toy", "--sweep", "fig2"])
    assert exc.value.code == 2
    assert cli.main(["--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_CODES["error"]


def test_list_presets(capsys):
    assert cli.main(["--list-presets"]) == 0
    out = capsys.readouterr().out
    assert "fig2-stopgrad-off" in out and "sweep table2: table2a table2b table2c" in out


def test_exit_codes_are_distinct():
    assert len(set(cli.EXIT_CODES.values())) == len(cli.EXIT_CODES)
    assert cli.EXIT_CODES["healthy"] == 0


def test_yaml_exponent_without_dot_is_a_number():
    assert parse_config("optim: {weight_decay: 1e-4, base_lr: 5e-2}").optim.weight_decay == 1e-4
    with pytest.raises(ConfigError, match="expected a number"):
        parse_config("optim: {base_lr: fast}")
