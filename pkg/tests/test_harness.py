import json

import numpy as np
import pytest

import phaselab as pl
from phaselab.cli import main as cli_main
from phaselab.harness import (
    ExperimentConfig,
    cmd_compare,
    cmd_eval,
    cmd_gen_flow,
    cmd_train,
    cmd_transfer,
    config_from_dict,
    load_config,
)


def tiny_config(tmp_path, **over):
    data = {
        "sim": {"episode_length": 200},
        "flow": {"name": None, "rates": [240.0] * 8, "duration": 200.0},
        "frap": {"demand_dim": 8, "conv_channels": 8},
        "train": {
            "max_learner_steps": 8,
            "batch_size": 8,
            "warmup_transitions": 8,
            "n_actors": 1,
            "eval_period": 4,
            "sync": True,
        },
        "out_dir": str(tmp_path / "out"),
        "seed": 0,
    }
    for key, value in over.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return config_from_dict(data)


class TestConfig:
    def test_defaults_validate(self):
        cfg = ExperimentConfig()
        assert cfg.build_table().n_phases == 8

    def test_four_phase_table(self):
        cfg = config_from_dict({"phase_set": "4-phase"})
        assert cfg.build_table().n_phases == 4

    def test_cross_field_validation(self):
        with pytest.raises(ValueError):
            config_from_dict({"phase_set": "4-phase", "approaches": 3})
        with pytest.raises(ValueError):
            config_from_dict({"agent": "nope"})
        with pytest.raises(ValueError):
            config_from_dict({"flow": {"name": "balanced-8", "path": "x.csv"}})
        with pytest.raises(ValueError):
            config_from_dict({"train": {"gamma": 1.0}})
        with pytest.raises(ValueError):
            config_from_dict({"sim": {"yellow": 5, "all_red": 5}})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            config_from_dict({"bogus": 1})
        with pytest.raises(ValueError, match="unknown"):
            config_from_dict({"train": {"bogus": 1}})

    def test_load_config_with_overrides(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 3, "train": {"batch_size": 16}}))
        cfg = load_config(path, {"seed": 9, "train.sync": True, "out_dir": None})
        assert cfg.seed == 9
        assert cfg.train.batch_size == 16
        assert cfg.train.sync is True


class TestCommands:
    def test_train_writes_artifacts(self, tmp_path):
        cfg = tiny_config(tmp_path)
        paths = cmd_train(cfg)
        out = tmp_path / "out"
        assert paths["checkpoint"].exists()
        assert (out / "ckpt.json").exists()
        assert (out / "ckpt.meta.json").exists()
        assert (out / "config.json").exists()
        assert (out / "table.json").exists()
        curve = paths["curve"].read_text().splitlines()
        assert curve[0] == "learner_step,eval_travel_time,exited_count"
        assert curve[1].startswith("0,")
        assert curve[-1].startswith("8,")

    def test_eval_emits_metrics(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        paths = cmd_train(cfg)
        metrics = cmd_eval(cfg, paths["checkpoint"])
        assert (tmp_path / "out" / "vehicles.csv").exists()
        assert (tmp_path / "out" / "intervals.csv").exists()
        assert "avg_travel_time" in capsys.readouterr().out
        assert metrics.exited_count >= 0

    def test_compare_single_method_one_row(self, tmp_path):
        cfg = tiny_config(tmp_path)
        rows = cmd_compare(cfg, ["fixedtime"])
        table = (tmp_path / "out" / "compare.csv").read_text().splitlines()
        assert len(rows) == 1
        assert table[0] == "method,avg_travel_time,exited_count"
        assert len(table) == 2
        assert table[1].startswith("fixedtime,")

    def test_compare_identical_flow_across_methods(self, tmp_path):
        cfg = tiny_config(tmp_path)
        rows = cmd_compare(cfg, ["fixedtime", "formula", "sotl"])
        assert len(rows) == 3
        # same flow: every method sees the same vehicle population
        entered = {m.exited_count + m.in_network_count for _, m in rows}
        assert len(entered) == 1

    def test_transfer_identity_matches_eval(self, tmp_path):
        cfg = tiny_config(tmp_path)
        paths = cmd_train(cfg)
        eval_metrics = cmd_eval(cfg, paths["checkpoint"])
        results = cmd_transfer(cfg, paths["checkpoint"], "rot180")
        assert results["original"] == eval_metrics.avg_travel_time
        ident = cmd_transfer(cfg, paths["checkpoint"], "flip")
        assert set(ident) == {"original", "transferred"}
        assert (tmp_path / "out" / "transfer.csv").exists()

    def test_gen_flow_roundtrip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        path = cmd_gen_flow(cfg, tmp_path / "flow.csv")
        flow = pl.parse_flow_csv(path, n_movements=8)
        assert len(flow) > 0

    def test_eval_rejects_mismatched_checkpoint(self, tmp_path):
        cfg = tiny_config(tmp_path)
        paths = cmd_train(cfg)
        four = tiny_config(tmp_path, phase_set="4-phase")
        with pytest.raises(ValueError, match="phases"):
            cmd_eval(four, paths["checkpoint"])


class TestCli:
    def test_full_cli_flow(self, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(
            json.dumps(
                {
                    "sim": {"episode_length": 200},
                    "flow": {"name": None, "rates": [240.0] * 8, "duration": 200.0},
                    "frap": {"demand_dim": 8, "conv_channels": 8},
                    "train": {
                        "max_learner_steps": 4,
                        "batch_size": 8,
                        "warmup_transitions": 8,
                        "n_actors": 1,
                        "eval_period": 4,
                    },
                    "out_dir": str(tmp_path / "out"),
                }
            )
        )
        rc = cli_main(["train", "--config", str(config_path), "--sync"])
        assert rc == 0
        ckpt = str(tmp_path / "out" / "ckpt.bin")
        assert cli_main(["eval", "--config", str(config_path), "--checkpoint", ckpt]) == 0
        assert (
            cli_main(
                ["compare", "--config", str(config_path), "--method", f"fixedtime,frap={ckpt}"]
            )
            == 0
        )
        assert (
            cli_main(
                ["transfer", "--config", str(config_path), "--checkpoint", ckpt, "--op", "flip"]
            )
            == 0
        )
        assert cli_main(["gen-flow", "--config", str(config_path), "--flow-out", str(tmp_path / "f.csv")]) == 0
        out = capsys.readouterr().out
        assert "checkpoint:" in out

    def test_cli_error_exit_codes(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"agent": "bogus"}))
        assert cli_main(["train", "--config", str(bad)]) == 1
        assert cli_main(["eval", "--config", str(bad), "--checkpoint", "x"]) == 1
        good = tmp_path / "good.json"
        good.write_text(json.dumps({}))
        assert cli_main(["eval", "--config", str(good), "--checkpoint", "/nonexistent.bin"]) == 1

    def test_compare_requires_checkpoint_for_rl(self, tmp_path):
        cfg = tiny_config(tmp_path)
        with pytest.raises(ValueError, match="checkpoint"):
            cmd_compare(cfg, ["frap"])
