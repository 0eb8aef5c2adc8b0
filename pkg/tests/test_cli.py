"""Tests for CLI functionality."""

import json

import pytest
from typer.testing import CliRunner

from contextgate import cli as cli_module
from contextgate.attention import AttentionKind
from contextgate.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, cli, cli_main
from contextgate.data import SyntheticSpec, generate_dataset
from contextgate.errors import NumericalError
from contextgate.evaluation import COMPARISON_COLUMNS
from contextgate.training import ExperimentConfig, TrainConfig, TrainingLog
from tests import tiny_model_config

runner = CliRunner()


@pytest.fixture
def dataset_dir(tmp_path):
    """A 3-class synthetic dataset with 4 images per class at 16x16."""
    out = tmp_path / "data"
    generate_dataset(SyntheticSpec(samples_per_class=[4, 4, 4], image_size=(16, 16), seed=1), out)
    return out


@pytest.fixture
def experiment_file(tmp_path):
    """An experiment configuration sized for the tiny test model."""
    experiment = ExperimentConfig(
        model=tiny_model_config(), train=TrainConfig(epochs=1, batch_size=4, seed=2)
    )
    path = tmp_path / "experiment.json"
    path.write_text(experiment.to_json())
    return path


@pytest.fixture
def trained_dir(tmp_path, dataset_dir, experiment_file):
    """Output directory of a finished ``train`` run."""
    out = tmp_path / "run"
    result = runner.invoke(
        cli,
        ["train", "--data", str(dataset_dir), "--out", str(out), "--config", str(experiment_file)],
    )
    assert result.exit_code == 0, result.output
    return out


class TestCLIGenData:
    """Tests for the gen-data command."""

    def test_gen_data_from_config(self, tmp_path):
        spec = SyntheticSpec(samples_per_class=[2, 2, 2], image_size=(12, 12))
        config = tmp_path / "spec.json"
        config.write_text(spec.to_json())
        out = tmp_path / "generated"

        result = runner.invoke(
            cli, ["gen-data", "--out", str(out), "--config", str(config), "--seed", "9"]
        )

        assert result.exit_code == 0
        assert "Wrote 6 images" in result.stdout
        assert (out / "manifest.csv").exists()
        assert SyntheticSpec.load_json(out / "spec.json").seed == 9

    def test_gen_data_unknown_preset(self, tmp_path):
        code = cli_main(["gen-data", "--out", str(tmp_path / "x"), "--preset", "huge"])
        assert code == EXIT_USAGE

    def test_gen_data_invalid_config(self, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text('{"num_classes": 1}')
        code = cli_main(["gen-data", "--out", str(tmp_path / "x"), "--config", str(config)])
        assert code == EXIT_DATA


class TestCLITrain:
    """Tests for the train command."""

    def test_train_writes_checkpoint_and_log(self, trained_dir):
        assert (trained_dir / "best.ckpt").exists()
        assert (trained_dir / "experiment.json").exists()
        log = TrainingLog.read(trained_dir / "train_log.jsonl")
        assert [r.epoch for r in log.records] == [1]

    def test_train_epochs_override(self, tmp_path, dataset_dir, experiment_file):
        out = tmp_path / "run2"
        result = runner.invoke(
            cli,
            [
                "train",
                "--data",
                str(dataset_dir / "manifest.csv"),
                "--out",
                str(out),
                "--config",
                str(experiment_file),
                "--epochs",
                "2",
                "-vv",
            ],
        )

        assert result.exit_code == 0
        assert "Best validation accuracy" in result.stdout
        saved = ExperimentConfig.load_json(out / "experiment.json")
        assert saved.train.epochs == 2

    def test_train_missing_data(self, tmp_path, experiment_file):
        code = cli_main(
            [
                "train",
                "--data",
                str(tmp_path / "nowhere"),
                "--out",
                str(tmp_path / "run"),
                "--config",
                str(experiment_file),
            ]
        )
        assert code == EXIT_DATA

    def test_train_numerical_failure(self, tmp_path, dataset_dir, experiment_file, monkeypatch):
        def diverge(*args, **kwargs):
            raise NumericalError("Non-finite gradient", parameter="attention.w_c")

        monkeypatch.setattr(cli_module, "fit", diverge)
        code = cli_main(
            [
                "train",
                "--data",
                str(dataset_dir),
                "--out",
                str(tmp_path / "run"),
                "--config",
                str(experiment_file),
            ]
        )
        assert code == EXIT_NUMERIC


class TestCLIEval:
    """Tests for the eval command."""

    def test_eval_writes_report(self, tmp_path, dataset_dir, trained_dir):
        report_dir = tmp_path / "report"
        result = runner.invoke(
            cli,
            [
                "eval",
                "--checkpoint",
                str(trained_dir / "best.ckpt"),
                "--data",
                str(dataset_dir),
                "--out",
                str(report_dir),
                "--split",
                "train",
            ],
        )

        assert result.exit_code == 0
        assert "Macro" in result.stdout
        assert "Kappa" in result.stdout
        metrics = json.loads((report_dir / "metrics.json").read_text())
        assert sum(map(sum, metrics["confusion"])) == 9
        assert (report_dir / "report.txt").read_text() == result.stdout

    def test_eval_corrupt_checkpoint(self, tmp_path, dataset_dir):
        checkpoint = tmp_path / "broken.ckpt"
        checkpoint.write_bytes(b"GCGM\x01\x00")
        code = cli_main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset_dir)])
        assert code == EXIT_DATA

    def test_eval_unknown_split(self, dataset_dir, trained_dir):
        code = cli_main(
            [
                "eval",
                "--checkpoint",
                str(trained_dir / "best.ckpt"),
                "--data",
                str(dataset_dir),
                "--split",
                "holdout",
            ]
        )
        assert code == EXIT_USAGE


class TestCLIExplain:
    """Tests for the explain command."""

    def test_explain_writes_heatmaps(self, tmp_path, dataset_dir, trained_dir):
        out = tmp_path / "maps"
        result = runner.invoke(
            cli,
            [
                "explain",
                "--checkpoint",
                str(trained_dir / "best.ckpt"),
                "--image",
                str(dataset_dir / "img_0001.ppm"),
                "--image",
                str(dataset_dir / "img_0005.ppm"),
                "--out",
                str(out),
            ],
        )

        assert result.exit_code == 0
        assert (out / "img_0001.gate.pgm").exists()
        assert (out / "img_0001.overlay.ppm").exists()
        assert (out / "img_0005.gate.pgm").exists()

    def test_explain_spatial_map_channel(self, tmp_path, dataset_dir, trained_dir):
        out = tmp_path / "maps"
        result = runner.invoke(
            cli,
            [
                "explain",
                "--checkpoint",
                str(trained_dir / "best.ckpt"),
                "--image",
                str(dataset_dir / "img_0001.ppm"),
                "--out",
                str(out),
                "--channel",
                "spatial_map",
            ],
        )

        assert result.exit_code == 0
        assert (out / "img_0001.spatial_map.pgm").exists()

    def test_explain_without_attention_map(self, tmp_path, dataset_dir):
        from contextgate.checkpoint import save_checkpoint
        from contextgate.model import build_model

        checkpoint = save_checkpoint(
            build_model(tiny_model_config(attention=AttentionKind.NONE)), tmp_path / "none.ckpt"
        )
        code = cli_main(
            [
                "explain",
                "--checkpoint",
                str(checkpoint),
                "--image",
                str(dataset_dir / "img_0001.ppm"),
                "--out",
                str(tmp_path / "maps"),
            ]
        )
        assert code == EXIT_USAGE


class TestCLICompare:
    """Tests for the compare command."""

    def test_compare_writes_table(self, tmp_path, dataset_dir, experiment_file):
        out = tmp_path / "comparison"
        result = runner.invoke(
            cli,
            [
                "compare",
                "--data",
                str(dataset_dir),
                "--out",
                str(out),
                "--config",
                str(experiment_file),
                "--variants",
                "none, gcg",
                "--workers",
                "2",
            ],
        )

        assert result.exit_code == 0
        lines = (out / "comparison.csv").read_text().splitlines()
        assert lines[0] == ",".join(COMPARISON_COLUMNS)
        assert [line.split(",")[0] for line in lines[1:]] == ["none", "gcg"]
        assert result.stdout.splitlines()[0] == lines[0]
        assert (out / "comparison.json").exists()

    def test_compare_unknown_variant(self, tmp_path, dataset_dir):
        code = cli_main(["compare", "--data", str(dataset_dir), "--variants", "gcg,lstm"])
        assert code == EXIT_USAGE


class TestCLISchema:
    """Tests for the schema command."""

    @pytest.mark.parametrize("target", ["experiment", "synthetic"])
    def test_schema_prints_json(self, target, tmp_path):
        out = tmp_path / "schema.json"
        result = runner.invoke(cli, ["schema", target, "--out", str(out)])

        assert result.exit_code == 0
        schema = json.loads(result.stdout)
        assert "properties" in schema
        assert json.loads(out.read_text()) == schema

    def test_schema_unknown_target(self):
        assert cli_main(["schema", "pipeline"]) == EXIT_USAGE


class TestCLIMain:
    """Tests for exit code translation."""

    def test_help(self):
        assert cli_main(["--help"]) == EXIT_OK

    def test_unknown_command(self):
        assert cli_main(["deploy"]) == EXIT_USAGE

    def test_without_typer(self, monkeypatch, capsys):
        monkeypatch.setattr(cli_module, "HAS_TYPER", False)
        assert cli_main(["schema", "model"]) == EXIT_USAGE
        assert "requires typer" in capsys.readouterr().err

        with pytest.raises(SystemExit) as exit_info:
            cli_module.main()
        assert exit_info.value.code == EXIT_USAGE


class TestCLIDeterminism:
    """Same seed and configuration through the whole pipeline."""

    def run_pipeline(self, root, experiment_file):
        data, run, report = root / "data", root / "run", root / "report"
        spec = root / "spec.json"
        spec.parent.mkdir(parents=True, exist_ok=True)
        spec.write_text(SyntheticSpec(samples_per_class=[4, 4, 4], image_size=(16, 16)).to_json())
        commands = [
            ["gen-data", "--out", str(data), "--config", str(spec), "--seed", "3"],
            ["train", "--data", str(data), "--out", str(run), "--config", str(experiment_file)],
            ["eval", "--checkpoint", str(run / "best.ckpt"), "--data", str(data)]
            + ["--out", str(report), "--split", "train"],
        ]
        for command in commands:
            result = runner.invoke(cli, command)
            assert result.exit_code == 0, result.output
        log = [
            {key: value for key, value in json.loads(line).items() if key != "timestamp"}
            for line in (run / "train_log.jsonl").read_text().splitlines()
        ]
        return (
            (data / "manifest.csv").read_bytes(),
            (run / "best.ckpt").read_bytes(),
            log,
            (report / "metrics.json").read_text(),
        )

    def test_pipeline_is_reproducible(self, tmp_path, experiment_file):
        first = self.run_pipeline(tmp_path / "first", experiment_file)
        second = self.run_pipeline(tmp_path / "second", experiment_file)
        assert first == second

    def test_compare_every_kind(self, tmp_path, dataset_dir, experiment_file):
        out = tmp_path / "all"
        args = ["compare", "--data", str(dataset_dir), "--out", str(out)]
        result = runner.invoke(cli, args + ["--config", str(experiment_file), "--workers", "3"])

        assert result.exit_code == 0, result.output
        rows = [line.split(",") for line in result.stdout.splitlines()[1:]]
        assert [row[0] for row in rows] == [kind.value for kind in AttentionKind]
        assert all(len(row) == len(COMPARISON_COLUMNS) for row in rows)


@pytest.mark.slow
class TestEndToEnd:
    """Synthetic task learned from scratch through the CLI."""

    def test_desk_task_reaches_ninety_percent(self, tmp_path):
        data = tmp_path / "data"
        generate_dataset(SyntheticSpec.desk(seed=0), data)
        experiment = ExperimentConfig(
            model=tiny_model_config(
                input_size=(64, 64, 3),
                backbone_channels=[8, 16, 16, 16],
                feature_depth=16,
                head_widths=[32, 16],
            ),
            train=TrainConfig(epochs=30, batch_size=16, learning_rate=1e-3, seed=0),
        )
        assert experiment.model.bn_momentum == 0.99
        assert experiment.model.backbone_bn_momentum == 0.9
        config = tmp_path / "experiment.json"
        config.write_text(experiment.to_json())

        out = tmp_path / "run"
        assert cli_main(
            ["train", "--data", str(data), "--out", str(out), "--config", str(config)]
        ) == EXIT_OK
        log = TrainingLog.read(out / "train_log.jsonl")
        assert len(log.records) == 30
        assert log.best_val_accuracy >= 0.9
        assert log.records[-1].train_loss < log.records[0].train_loss

        report = tmp_path / "report"
        assert cli_main(
            ["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(data)]
            + ["--out", str(report)]
        ) == EXIT_OK
        assert json.loads((report / "metrics.json").read_text())["accuracy"] >= 0.9
