"""CLI tests: config resolution and snapshots, artifact layout, exit
code mapping, and the train-then-eval reproducibility contract."""

import json
from pathlib import Path

import pytest

from dgreader import cli
from dgreader.gradcheck import GradCheckReport

DATA = Path(__file__).parent / "data"

TINY_MODEL_SETS = [
    "--set", "reader.hidden=8",
    "--set", "embed.word_dim=8",
    "--set", "embed.char_dim=4",
    "--set", "embed.char_hidden=4",
    "--set", "embed.char_out=4",
]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = cli.main(["gen-synth", "--out", str(out), "--samples", "20", "--seed", "1",
                     "--vocab-size", "24", "--doc-len", "8", "12", "--qry-len", "4", "6",
                     "--candidates", "3"])
    assert code == 0
    return out / "synth.jsonl"


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("trained")
    code = cli.main([
        "train", "--out", str(out), "--seed", "3",
        "--set", f"data.train={corpus}", "--set", f"data.dev={corpus}",
        "--set", "hp.epochs=4", "--set", "hp.lr=0.01", "--set", "hp.batch_size=8",
        *TINY_MODEL_SETS,
    ])
    assert code == 0
    return out


class TestConfig:
    def test_file_parsing_and_override_order(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("# comment\nreader.hops = 1\nhp.lr = 0.01\n")
        args = cli.build_parser().parse_args(
            ["train", "--out", "x", "--config", str(cfg_file),
             "--preset", "ga-reader", "--set", "reader.hops=3"]
        )
        cfg = cli.resolve_config(args)
        assert cfg["reader.hops"] == 3  # --set beats the file
        assert cfg["hp.lr"] == 0.01
        assert cfg["reader.query_gating"] is False  # preset applied

    def test_unknown_key_named(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("reader.hopz = 1\n")
        args = cli.build_parser().parse_args(["train", "--out", "x", "--config", str(cfg_file)])
        with pytest.raises(cli.ConfigError, match="reader.hopz"):
            cli.resolve_config(args)

    def test_bad_value_type_named(self):
        args = cli.build_parser().parse_args(["train", "--out", "x", "--set", "reader.hops=two"])
        with pytest.raises(cli.ConfigError, match="reader.hops"):
            cli.resolve_config(args)

    def test_snapshot_round_trips(self, trained):
        snapshot = trained / "config.txt"
        loaded = cli.load_config_file(snapshot)
        assert loaded["hp.epochs"] == 4
        assert loaded["seed"] == 3
        assert set(loaded) == set(cli.CONFIG_DEFAULTS)

    def test_preset_flags_in_snapshot(self, tmp_path, corpus):
        out = tmp_path / "ga"
        code = cli.main([
            "train", "--out", str(out), "--preset", "ga-reader",
            "--set", f"data.train={corpus}", "--set", f"data.dev={corpus}",
            "--set", "hp.epochs=1", *TINY_MODEL_SETS,
        ])
        assert code == 0
        cfg = cli.load_config_file(out / "config.txt")
        assert cfg["reader.query_gating"] is False
        assert cfg["reader.dependent_query"] is False
        assert cfg["reader.carry_query_state"] is False


class TestGenSynth:
    def test_repeat_runs_byte_identical(self, tmp_path):
        argv = ["gen-synth", "--samples", "12", "--seed", "9", "--vocab-size", "24",
                "--candidates", "3", "--doc-len", "8", "12", "--qry-len", "4", "6"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(argv + ["--out", str(a)]) == 0
        assert cli.main(argv + ["--out", str(b)]) == 0
        assert (a / "synth.jsonl").read_bytes() == (b / "synth.jsonl").read_bytes()

    def test_infeasible_config_is_usage_error(self, tmp_path, capsys):
        code = cli.main(["gen-synth", "--out", str(tmp_path / "x"),
                         "--samples", "5", "--vocab-size", "8", "--candidates", "7"])
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestTrainEval:
    def test_artifacts_written(self, trained):
        for name in ("config.txt", "vocab.txt", "vocab.txt.chars",
                     "train_log.csv", "model.ckpt", "summary.json"):
            assert (trained / name).exists(), name
        log = (trained / "train_log.csv").read_text().splitlines()
        assert log[0] == "epoch,train_loss,dev_acc,seconds"

    def test_eval_reproduces_best_dev_acc(self, trained, corpus, capsys):
        summary = json.loads((trained / "summary.json").read_text())
        code = cli.main([
            "eval", "--config", str(trained / "config.txt"),
            "--checkpoint", str(trained / "model.ckpt"),
            "--vocab", str(trained / "vocab.txt"),
            "--data", str(corpus),
        ])
        assert code == 0
        result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert result["accuracy"] == summary["best_dev_acc"]

    def test_missing_checkpoint_names_flag(self, trained, corpus, capsys):
        code = cli.main([
            "eval", "--config", str(trained / "config.txt"),
            "--checkpoint", "/no/such/file.ckpt",
            "--vocab", str(trained / "vocab.txt"),
            "--data", str(corpus),
        ])
        assert code == 1
        assert "--checkpoint" in capsys.readouterr().err

    def test_missing_train_data_key(self, tmp_path, capsys):
        code = cli.main(["train", "--out", str(tmp_path / "x"), "--set", "hp.epochs=1"])
        assert code == 1
        assert "data.train" in capsys.readouterr().err


@pytest.fixture(scope="module")
def predictions(tmp_path_factory, trained, corpus):
    out = tmp_path_factory.mktemp("preds")
    code = cli.main([
        "predict", "--config", str(trained / "config.txt"),
        "--checkpoint", str(trained / "model.ckpt"),
        "--vocab", str(trained / "vocab.txt"),
        "--data", str(corpus), "--out", str(out),
    ])
    assert code == 0
    return out / "predictions.jsonl"


class TestPredictAndAnalyze:

    def test_prediction_records_complete(self, predictions):
        lines = predictions.read_text().splitlines()
        assert len(lines) == 20
        first = json.loads(lines[0])
        assert first["sample_id"] == "0"
        assert first["correct"] in (True, False)

    def test_length_analysis(self, predictions, capsys, tmp_path):
        code = cli.main(["analyze", "length", "--predictions", str(predictions),
                         "--centers", "8,12", "--out", str(tmp_path / "len")])
        assert code == 0
        out = capsys.readouterr().out
        assert out.startswith("center,count,accuracy\n")
        assert (tmp_path / "len" / "length_document.csv").read_text() == out

    def test_mcnemar_between_identical_dumps(self, predictions, capsys):
        with pytest.warns(UserWarning):
            code = cli.main(["analyze", "mcnemar", "--a", str(predictions),
                             "--b", str(predictions)])
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result == {"b": 0, "c": 0, "p_value": 1.0}

    def test_attention_export_files(self, trained, corpus, tmp_path, capsys):
        out = tmp_path / "att"
        code = cli.main([
            "analyze", "attention", "--config", str(trained / "config.txt"),
            "--checkpoint", str(trained / "model.ckpt"),
            "--vocab", str(trained / "vocab.txt"),
            "--data", str(corpus), "--index", "1", "--out", str(out),
        ])
        assert code == 0
        payload = json.loads((out / "attention_1.json").read_text())
        assert len(payload["layers"]) == 2
        svg = (out / "attention_1.svg").read_text()
        assert svg.startswith("<svg")

    def test_attention_index_out_of_range(self, trained, corpus, tmp_path, capsys):
        code = cli.main([
            "analyze", "attention", "--config", str(trained / "config.txt"),
            "--checkpoint", str(trained / "model.ckpt"),
            "--vocab", str(trained / "vocab.txt"),
            "--data", str(corpus), "--index", "99", "--out", str(tmp_path / "x"),
        ])
        assert code == 1
        assert "--index" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_passes_on_fresh_model(self, capsys):
        # full preset sweep lives in the acceptance suite; one CLI pass
        # here keeps this file quick
        assert cli.main(["gradcheck", "--seed", "7"]) == 0
        assert "max rel error" in capsys.readouterr().out

    def test_failure_maps_to_exit_three(self, monkeypatch, capsys):
        def fake_check(loss_fn, params, grads, **kw):
            return GradCheckReport(
                max_rel_error=1.0, worst_param="w", tolerance=1e-4,
                per_param={"w": 1.0},
            )
        monkeypatch.setattr(cli, "check_gradients", fake_check)
        assert cli.main(["gradcheck"]) == 3
        assert "gradient check failed" in capsys.readouterr().err


class TestDisambiguateCommand:
    def test_golden_file_stdout(self, capsys):
        code = cli.main(["disambiguate", "--set", "data.format=cbt",
                         "--data", str(DATA / "rule_example.cbt")])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        decision = json.loads(lines[0])
        assert decision["status"] == "disambiguated"
        assert decision["answer"] == "Skunk"
        summary = json.loads(lines[-1])
        assert summary["solved"] == 1 and summary["correct"] == 1

    def test_out_dir_gets_decisions_file(self, tmp_path, capsys):
        out = tmp_path / "rules"
        code = cli.main(["disambiguate", "--set", "data.format=cbt",
                         "--data", str(DATA / "rule_example.cbt"), "--out", str(out)])
        assert code == 0
        assert (out / "decisions.jsonl").read_text().count("\n") == 1


class TestExitCodes:
    def test_unknown_command_is_usage_error(self, capsys):
        assert cli.main(["bogus"]) == 1

    def test_no_command_is_usage_error(self, capsys):
        assert cli.main([]) == 1

    def test_help_exits_zero(self, capsys):
        assert cli.main(["--help"]) == 0

    def test_contract_violation_maps_to_two(self, tmp_path, trained, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"document": ["a"], "query": ["b"], "candidates": ["a"]}\n')
        code = cli.main([
            "eval", "--config", str(trained / "config.txt"),
            "--checkpoint", str(trained / "model.ckpt"),
            "--vocab", str(trained / "vocab.txt"),
            "--data", str(bad),
        ])
        assert code == 2
        assert "line 1" in capsys.readouterr().err

    def test_unknown_set_key_is_usage_error(self, capsys):
        assert cli.main(["gradcheck", "--set", "nope=1"]) == 1
        assert "nope" in capsys.readouterr().err
