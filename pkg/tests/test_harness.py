import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from mobandit import toy
from mobandit.harness import cli, config, io, presets, verify

GOLDEN = Path(__file__).parent / "golden"


def _small_config(**train):
    return {
        "env": {"num_prompts": 1, "vocab_size": 2, "out_len": 2, "num_objectives": 2},
        "rewards": {"mode": "random", "seed": 3},
        "policy": {"init": "random", "seed": 1},
        "train": {"group_size": 4, "batch_prompts": 2, "steps": 5, **train},
        "controller": {"tag": "ctwa", "targets": [0.05, 0.05]},
        "output": {"path": "out.csv"},
    }


def _write_yaml(path, data):
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


class TestConfig:
    def test_round_trip(self):
        cfg = config.parse_config(_small_config())
        again = config.parse_config(yaml.safe_load(config.dump_config(cfg)))
        assert again == cfg

    @pytest.mark.parametrize("section", ["env", "train", "controller", "output", None])
    def test_unknown_keys_rejected(self, section):
        data = _small_config()
        (data if section is None else data[section])["bogus"] = 1
        with pytest.raises(config.ConfigError, match="bogus"):
            config.parse_config(data)

    def test_error_has_dotted_path(self):
        data = _small_config()
        data["train"]["eps_clip"] = 2.0
        with pytest.raises(config.ConfigError, match=r"train\.eps_clip"):
            config.parse_config(data)

    def test_target_length_checked(self):
        data = _small_config()
        data["controller"]["targets"] = [0.1]
        with pytest.raises(config.ConfigError, match="targets"):
            config.parse_config(data)

    def test_preset_env_mismatch(self):
        data = _small_config()
        data["rewards"] = {"mode": "preset", "name": "interference"}
        with pytest.raises(config.ConfigError, match="does not match"):
            config.parse_config(data).reward_table()

    def test_output_dir_env(self, monkeypatch, tmp_path):
        cfg = config.parse_config(_small_config())
        monkeypatch.setenv(config.OUTPUT_DIR_ENV, str(tmp_path))
        assert cfg.output_path() == tmp_path / "out.csv"
        assert cfg.output_path("/abs/x.csv") == Path("/abs/x.csv")

    def test_every_preset_parses(self):
        for name in presets.EXPERIMENT_PRESETS:
            cfg = config.preset_config(name)
            cfg.reward_table()
            cfg.initial_policy()
            cfg.train_config()


class TestPresets:
    def test_reference_hyperparameters(self):
        b = presets.REFERENCE_HYPERPARAMS
        assert b["ctwa"] == {"init_weights": [0.333, 0.333, 0.334], "weight_lr": 0.05, "targets": [0.15, 0.08, 0.08], "ema_rate": 0.1}
        assert b["gradnorm"] == {"alpha": 1.5, "weight_lr": 0.025}
        assert b["lagrangian"]["targets"] == [0.9, 0.9] and b["lagrangian"]["dual_lr"] == 0.01
        assert b["shared"]["learning_rate"] == 1e-6
        assert b["shared"]["group_size"] == 16 and b["shared"]["batch_prompts"] == 32
        assert b["shared"]["eps_clip"] == 0.2 and b["shared"]["beta_kl"] == 0.001

    def test_ctwa_preset_uses_reference_controller(self):
        cfg = config.preset_config("interference-ctwa")
        assert cfg.controller.targets == [0.15, 0.08, 0.08]
        assert cfg.train.learning_rate == presets.INTERFERENCE_LEARNING_RATE

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            presets.experiment_preset("nope")


class TestIo:
    def test_golden_csv_header(self, tmp_path):
        out = tmp_path / "t.csv"
        with io.TrajectoryWriter(out, 3):
            pass
        assert out.read_bytes() == (GOLDEN / "trajectory_m3.csv").read_bytes()

    def test_golden_jsonl_keys(self, tmp_path):
        cfg = config.parse_config(_small_config())
        data = _small_config()
        data["output"] = {"path": str(tmp_path / "t2.jsonl"), "format": "jsonl"}
        assert cli.main(["run", _write_yaml(tmp_path / "d.yaml", data)]) == 0
        rows = io.read_jsonl(tmp_path / "t2.jsonl")
        assert len(rows) == cfg.train.steps
        expected = json.loads((GOLDEN / "trajectory_m2_keys.json").read_text())
        assert all(list(r) == expected for r in rows)

    def test_fmt(self):
        assert io.fmt(0.1) == "0.10000000000000001"
        assert io.fmt(float("nan")) == "nan"
        assert io.fmt(np.int64(3)) == "3"

    def test_moving_average(self):
        np.testing.assert_allclose(io.moving_average([1.0, 3.0, 5.0, 7.0], 2), [1.0, 2.0, 4.0, 6.0])
        np.testing.assert_array_equal(io.moving_average([1.0, 2.0], 1), [1.0, 2.0])


class TestCli:
    def test_run_zero_steps_header_only(self, tmp_path):
        path = _write_yaml(tmp_path / "c.yaml", _small_config(steps=0))
        out = tmp_path / "z.csv"
        assert cli.main(["run", path, "--output", str(out)]) == 0
        header, data = io.read_csv(out)
        assert header == io.columns(2)
        assert data.shape == (0, len(header))

    def test_byte_identical_reruns(self, tmp_path):
        outs = [tmp_path / f"{i}.csv" for i in range(2)]
        for out in outs:
            assert cli.main(["run", "two-mode-reinforce", "--seed", "4", "--output", str(out)]) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()

    def test_seed_changes_grpo_output(self, tmp_path):
        path = _write_yaml(tmp_path / "c.yaml", _small_config())
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        cli.main(["run", path, "--seed", "1", "--output", str(a)])
        cli.main(["run", path, "--seed", "2", "--output", str(b)])
        assert a.read_bytes() != b.read_bytes()

    def test_usage_errors(self, tmp_path, capsys):
        assert cli.main([]) == 2
        assert cli.main(["verify", "nonsense"]) == 2
        assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 2
        bad = tmp_path / "bad.yaml"
        bad.write_text("env: [unclosed", encoding="utf-8")
        assert cli.main(["run", str(bad)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_numerical_abort_exit_code(self, tmp_path):
        data = _small_config()
        data["policy"] = {"init": "logits", "logits": [float("nan")] * 6}
        out = tmp_path / "abort.csv"
        assert cli.main(["run", _write_yaml(tmp_path / "c.yaml", data), "--output", str(out)]) == 3
        dump = json.loads((tmp_path / "abort.csv.abort.json").read_text())
        assert dump["step"] == 1

    def test_toy_matches_golden(self, tmp_path):
        out = tmp_path / "toy.csv"
        assert cli.main(["toy", "--steps", "2", "--out", str(out)]) == 0
        assert out.read_bytes() == (GOLDEN / "toy_default_3.csv").read_bytes()

    def test_toy_invalid_p0(self):
        assert cli.main(["toy", "--p0", "1.0"]) == 2

    def test_sweep(self, capsys):
        assert cli.main(["sweep", "interference-linear"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "objective,eta,residual,ratio,verdict"
        ratios = [float(l.split(",")[3]) for l in lines[1:] if l.split(",")[3]]
        assert all(0.15 <= r <= 0.35 for r in ratios)

    def test_sweep_rejects_non_decreasing_etas(self):
        assert cli.main(["sweep", "interference-linear", "--etas", "1e-2", "1e-2", "5e-3"]) == 2
        assert cli.main(["sweep", "interference-linear", "--etas", "1e-2", "5e-3"]) == 2

    def test_verify_single_suite(self, capsys):
        assert cli.main(["verify", "controllers"]) == 0
        assert "[PASS] controllers" in capsys.readouterr().out


class TestNegativeControl:
    def test_sign_flip_is_caught(self, monkeypatch, capsys):
        original = toy.closed_form_covariance
        monkeypatch.setattr(toy, "closed_form_covariance", lambda cfg, p: -original(cfg, p))
        assert cli.main(["verify", "all"]) == 1
        out = capsys.readouterr().out
        assert "[FAIL] toy" in out
        assert "failed suites: toy" in out

    def test_broken_tilt_is_caught(self, monkeypatch):
        from mobandit import calculus as calc

        original = calc.exponential_tilt
        monkeypatch.setattr(calc, "exponential_tilt", lambda p, s, eta: original(p, s, 0.5 * eta))
        assert not verify.suite_tilt(n=10).passed
