import json
import os
import stat

import numpy as np
import pytest

from sigma_match import cli
from sigma_match.config import KEYS, RunConfig, format_config, get_value, load_config, parse_config
from sigma_match.errors import ConfigError
from sigma_match.tensorio import read_container, write_container

# Hyperparameters stated for the method, frozen here so defaults cannot drift.
METHOD_DEFAULTS = {
    "loss.lambda1": 0.1,
    "loss.lambda2": 0.1,
    "sampling.tau_fg": 0.5,
    "sampling.tau_bg": 0.05,
    "graph.edge_drop": 0.1,
    "sinkhorn.iterations": 20,
    "sampling.max_nodes": 100,
    "optim.lr": 0.0025,
    "optim.momentum": 0.9,
    "optim.weight_decay": 5e-4,
    "loss.grl_coeff": 1.0,
    "model.disc_hidden": 256,
    "loss.qc_mode": "squared",
}


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestConfig:
    def test_defaults_match_frozen_table(self):
        cfg = RunConfig()
        for key, value in METHOD_DEFAULTS.items():
            assert get_value(cfg, key) == value, key

    def test_round_trip(self):
        cfg = parse_config("seed = 3\nloss.lambda1 = 0.05\nscenario.source_classes = 1,2,4\n")
        again = parse_config(format_config(cfg))
        assert format_config(again) == format_config(cfg)
        assert again.scenario.source_classes == (1, 2, 4)
        assert again.lambda1 == 0.05 and again.seed == 3

    def test_every_key_settable(self):
        text = format_config(RunConfig())
        assert len(text.strip().splitlines()) == len(KEYS)

    def test_unknown_key_lists_accepted(self):
        with pytest.raises(ConfigError, match="loss.lambda1"):
            parse_config("loss.lambda9 = 1")

    def test_bad_enum_names_choices(self):
        with pytest.raises(ConfigError, match="squared, literal"):
            parse_config("loss.qc_mode = cubed")

    def test_bad_number(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config("seed = seven")

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# header\n\nseed = 9  # trailing\n")
        assert cfg.seed == 9

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("seed 9")

    def test_validation(self):
        with pytest.raises(ConfigError):
            parse_config("sampling.tau_bg = 0.6").validate()

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")


class TestContainer:
    def test_round_trip(self, tmp_path):
        tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.zeros((0, 4))}
        write_container(tmp_path / "x.sgmt", tensors, {"step": 4})
        back, meta = read_container(tmp_path / "x.sgmt")
        assert meta == {"step": 4}
        for k, v in tensors.items():
            np.testing.assert_array_equal(back[k], v)
            assert back[k].shape == v.shape

    def test_bad_magic(self, tmp_path):
        (tmp_path / "y").write_bytes(b"nope")
        with pytest.raises(ValueError):
            read_container(tmp_path / "y")


class TestCLI:
    def test_run_artifacts_and_determinism(self, tmp_path):
        cfg = write(tmp_path, "train.eval_every = 2\ntrain.eval_batches = 1\n"
                              "loss.lambda1 = 0.05\nloss.lambda2 = 0.05\n")
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["run", "--config", cfg, "--out", str(out), "--steps", "4", "--seed", "7"]) == 0
            outs.append(out)
        for f in ("config.txt", "metrics.jsonl", "checkpoint.sgmt", "summary.json", "loss_curves.csv"):
            assert (outs[0] / f).exists(), f
        assert (outs[0] / "metrics.jsonl").read_bytes() == (outs[1] / "metrics.jsonl").read_bytes()
        ta, _ = read_container(outs[0] / "checkpoint.sgmt")
        tb, _ = read_container(outs[1] / "checkpoint.sgmt")
        assert ta.keys() == tb.keys()
        for k in ta:
            np.testing.assert_array_equal(ta[k], tb[k])
        summary = json.loads((outs[0] / "summary.json").read_text())
        assert summary["weights"] == "lambda1=0.05,lambda2=0.05"
        lines = (outs[0] / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 4
        echo = load_config(outs[0] / "config.txt")
        assert echo.seed == 7 and echo.steps == 4

    def test_config_error_exit(self, tmp_path, capsys):
        cfg = write(tmp_path, "loss.bogus = 1\n")
        assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "loss.bogus" in capsys.readouterr().err

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
    def test_unwritable_out(self, tmp_path):
        locked = tmp_path / "locked"
        locked.mkdir()
        locked.chmod(stat.S_IRUSR | stat.S_IXUSR)
        cfg = write(tmp_path, "")
        assert cli.main(["run", "--config", cfg, "--out", str(locked / "x"), "--steps", "1"]) == 2

    def test_out_is_a_file(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        cfg = write(tmp_path, "")
        assert cli.main(["run", "--config", cfg, "--out", str(blocker / "x"), "--steps", "1"]) == 2
        assert "not writable" in capsys.readouterr().err

    def test_nonfinite_exit(self, tmp_path, monkeypatch):
        import sigma_match.engine as eng

        real = eng.forward

        def poisoned(params, inputs, cfg, training=True):
            params["cls.fc2.bias"].data[:] = np.nan
            return real(params, inputs, cfg, training)

        monkeypatch.setattr(eng, "forward", poisoned)
        cfg = write(tmp_path, "")
        out = tmp_path / "o"
        assert cli.main(["run", "--config", cfg, "--out", str(out), "--steps", "2"]) == 3
        assert "losses" in json.loads((out / "failure.json").read_text())

    def test_gradcheck_pass_and_corruption(self, tmp_path, capsys):
        cfg = write(tmp_path, "gradcheck.instances = 1\ngradcheck.entries = 3\n")
        assert cli.main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "g")]) == 0
        bad = write(tmp_path, "gradcheck.instances = 1\ngradcheck.entries = 3\n"
                              "gradcheck.corrupt_group = aff\n", "bad.cfg")
        assert cli.main(["gradcheck", "--config", bad, "--out", str(tmp_path / "h")]) == 1
        assert "aff" in capsys.readouterr().err

    def test_oracle_limits(self, tmp_path):
        cfg = write(tmp_path, "oracle.size = 10\n")
        assert cli.main(["oracle", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_oracle_report(self, tmp_path):
        cfg = write(tmp_path, "oracle.instances = 10\n")
        assert cli.main(["oracle", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        doc = json.loads((tmp_path / "o" / "oracle.json").read_text())
        assert doc["identity_agreement"] == 1.0
        assert doc["residual_unit_temperature"]["max"] < 1e-6

    def test_eval_from_checkpoint(self, tmp_path):
        cfg = write(tmp_path, "train.eval_batches = 1\n")
        out = tmp_path / "r"
        assert cli.main(["run", "--config", cfg, "--out", str(out), "--steps", "2"]) == 0
        assert cli.main(["eval", "--config", cfg, "--out", str(out)]) == 0
        doc = json.loads((out / "eval.json").read_text())
        assert doc["step"] == 2

    def test_qc_mode_flag(self, tmp_path):
        cfg = write(tmp_path, "train.eval_batches = 1\n")
        out = tmp_path / "q"
        assert cli.main(["run", "--config", cfg, "--out", str(out), "--steps", "1",
                         "--qc-mode", "literal"]) == 0
        assert load_config(out / "config.txt").qc_mode == "literal"
