"""
Command-line interface for contextgate.

Subcommands wrap the library: ``gen-data`` renders a synthetic dataset, ``train`` fits a model
with hold-out checkpointing, ``eval`` scores a checkpoint, ``explain`` writes attention
heatmaps, ``compare`` runs the attention comparison harness and ``schema`` prints the JSON
schema of a configuration file.

Exit codes: 0 success, 1 usage error, 2 data/configuration/checkpoint error, 3 numerical
failure during training.
"""

import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence

try:
    import click
    import typer  # type: ignore[import-not-found]
    from typing_extensions import Annotated

    HAS_TYPER = True
except ImportError:
    HAS_TYPER = False

from contextgate.attention import AttentionKind
from contextgate.checkpoint import load_checkpoint
from contextgate.data import (
    MANIFEST_NAME,
    DatasetManifest,
    Split,
    SyntheticSpec,
    generate_dataset,
    load_dataset,
    load_image,
)
from contextgate.errors import ContextGateError, NumericalError
from contextgate.evaluation import (
    HeatmapChannel,
    compare_attention_variants,
    compute_metrics,
    export_heatmap,
    write_heatmap,
)
from contextgate.model import Model, build_model, model_forward
from contextgate.training import LOG_NAME, ExperimentConfig, fit

context_settings = {
    "help_option_names": ["-h", "--help"],
}

logger = logging.getLogger()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def set_logger_level(verbosity: int, default: int = logging.ERROR) -> None:
    """
    Set the logger level based on the level of verbosity

    level = default - 10*verbosity

    default         = 40 = logging.ERROR
    level with -v   = 30 = logging.WARNING
    level with -vv  = 20 = logging.INFO
    level with -vvv = 10 = logging.DEBUG
    """
    logger.setLevel(default - 10 * verbosity)


def _manifest_path(data: Path) -> Path:
    return data / MANIFEST_NAME if data.is_dir() else data


def _experiment(config: Optional[Path], seed: Optional[int]) -> ExperimentConfig:
    experiment = ExperimentConfig.load_json(config) if config else ExperimentConfig()
    if seed is not None:
        experiment = experiment.model_copy(
            update={"train": experiment.train.model_copy(update={"seed": seed})}
        )
    return experiment


def _class_names(model: Model, data: Optional[Path]) -> Optional[List[str]]:
    if data is None:
        return None
    names = DatasetManifest.read(_manifest_path(data)).class_names
    return names if names and len(names) == model.config.num_classes else None


if HAS_TYPER:
    # CLI functions are thin wrappers around core library functions
    cli = typer.Typer(context_settings=context_settings, no_args_is_help=True)

    Seed = Annotated[Optional[int], typer.Option("--seed", help="Master random seed")]
    Config = Annotated[Optional[Path], typer.Option("--config", help="JSON configuration file")]
    Verbosity = Annotated[int, typer.Option("--verbose", "-v", count=True)]

    @cli.command("gen-data")
    def cli_gen_data(
        out: Annotated[Path, typer.Option("--out", help="Dataset directory")],
        seed: Seed = None,
        config: Config = None,
        preset: Annotated[str, typer.Option(help="desk (3 classes) or dr7 (7 grades)")] = "desk",
        verbosity: Verbosity = 0,
    ) -> None:
        """Render a synthetic lesion dataset with its manifest."""
        set_logger_level(verbosity)
        if config:
            spec = SyntheticSpec.load_json(config)
        elif preset == "desk":
            spec = SyntheticSpec.desk()
        elif preset == "dr7":
            spec = SyntheticSpec.dr7()
        else:
            raise click.BadParameter(f"unknown preset {preset!r}", param_hint="--preset")
        if seed is not None:
            spec = spec.model_copy(update={"seed": seed})
        manifest = generate_dataset(spec, out)
        print(f"Wrote {len(manifest.records)} images to {out}")

    @cli.command("train")
    def cli_train(
        data: Annotated[Path, typer.Option("--data", help="Dataset directory or manifest")],
        out: Annotated[Path, typer.Option("--out", help="Output directory")],
        seed: Seed = None,
        config: Config = None,
        epochs: Annotated[Optional[int], typer.Option(min=1)] = None,
        verbosity: Verbosity = 0,
    ) -> None:
        """Train a classifier, keeping the checkpoint with the best hold-out accuracy."""
        set_logger_level(verbosity)
        experiment = _experiment(config, seed)
        if epochs is not None:
            experiment = experiment.model_copy(
                update={"train": experiment.train.model_copy(update={"epochs": epochs})}
            )
        model_config, train_config = experiment.model, experiment.train
        splits = load_dataset(
            _manifest_path(data), model_config.input_size[:2], model_config.num_classes
        )
        out.mkdir(parents=True, exist_ok=True)
        (out / "experiment.json").write_text(experiment.to_json())
        model = build_model(model_config, seed=train_config.seed)
        log = fit(model, splits[Split.TRAIN], splits[Split.VAL], train_config, out)
        print(
            f"Best validation accuracy {log.best_val_accuracy:.4f} at epoch {log.best_epoch}; "
            f"checkpoint {log.checkpoint_path}, log {out / LOG_NAME}"
        )

    @cli.command("eval")
    def cli_eval(
        checkpoint: Annotated[Path, typer.Option("--checkpoint")],
        data: Annotated[Path, typer.Option("--data", help="Dataset directory or manifest")],
        out: Annotated[Optional[Path], typer.Option("--out", help="Report directory")] = None,
        split: Annotated[Split, typer.Option("--split")] = Split.VAL,
        seed: Seed = None,
        config: Config = None,
        verbosity: Verbosity = 0,
    ) -> None:
        """Score a checkpoint on one split; writes metrics.json and report.txt."""
        set_logger_level(verbosity)
        batch_size = _experiment(config, seed).train.batch_size
        model = load_checkpoint(checkpoint)
        dataset = load_dataset(
            _manifest_path(data), model.config.input_size[:2], model.config.num_classes
        )[split]
        report = compute_metrics(dataset.labels, model.predict(dataset.images, batch_size))
        table = report.format_table(_class_names(model, data))
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "metrics.json").write_text(report.to_json() + "\n")
            (out / "report.txt").write_text(table)
        print(table, end="")

    @cli.command("explain")
    def cli_explain(
        checkpoint: Annotated[Path, typer.Option("--checkpoint")],
        images: Annotated[List[Path], typer.Option("--image", help="PPM/PGM image, repeatable")],
        out: Annotated[Path, typer.Option("--out", help="Heatmap directory")],
        channel: Annotated[Optional[HeatmapChannel], typer.Option("--channel")] = None,
        seed: Seed = None,
        config: Config = None,
        verbosity: Verbosity = 0,
    ) -> None:
        """Write attention heatmaps ({stem}.{channel}.pgm, {stem}.overlay.ppm) per image."""
        set_logger_level(verbosity)
        _experiment(config, seed)  # validates --config
        model = load_checkpoint(checkpoint)
        height, width = model.config.input_size[:2]
        for path in images:
            pixels = load_image(path, (height, width))
            probs, artifacts = model_forward(model, pixels)
            if artifacts is None:
                raise click.UsageError(
                    f"Attention kind '{model.config.attention.value}' has no map to explain"
                )
            chosen = channel or (
                HeatmapChannel.GATE if artifacts.gate is not None else HeatmapChannel.SPATIAL_MAP
            )
            heatmap = export_heatmap(artifacts, (height, width), chosen, pixels)
            for written in write_heatmap(heatmap, out, path.stem, chosen):
                print(written)
            logger.info("Explained image", extra={"image": str(path), "probs": probs.tolist()})

    @cli.command("compare")
    def cli_compare(
        data: Annotated[Path, typer.Option("--data", help="Dataset directory or manifest")],
        out: Annotated[Path, typer.Option("--out", help="Output directory")] = Path("comparison"),
        variants: Annotated[
            str, typer.Option(help="Comma-separated attention kinds")
        ] = ",".join(kind.value for kind in AttentionKind),
        workers: Annotated[int, typer.Option(min=1)] = 1,
        seed: Seed = None,
        config: Config = None,
        verbosity: Verbosity = 0,
    ) -> None:
        """Train one model per attention kind and write comparison.csv / comparison.json."""
        set_logger_level(verbosity)
        experiment = _experiment(config, seed)
        kinds = [v.strip() for v in variants.split(",") if v.strip()]
        try:
            parsed = [AttentionKind.parse(kind) for kind in kinds]
        except ContextGateError as e:
            raise click.BadParameter(str(e), param_hint="--variants") from e
        splits = load_dataset(
            _manifest_path(data), experiment.model.input_size[:2], experiment.model.num_classes
        )
        table = compare_attention_variants(
            splits[Split.TRAIN],
            splits[Split.VAL],
            parsed,
            experiment.model,
            experiment.train,
            out,
            max_workers=workers,
            test=splits[Split.TEST],
        )
        print(table.to_csv(), end="")

    @cli.command("schema")
    def cli_schema(
        target: Annotated[str, typer.Argument(help="experiment or synthetic")] = "experiment",
        out: Annotated[Optional[Path], typer.Option("--out")] = None,
        verbosity: Verbosity = 0,
    ) -> None:
        """Print the JSON schema of a --config file."""
        set_logger_level(verbosity)
        models = {"experiment": ExperimentConfig, "synthetic": SyntheticSpec}
        if target not in models:
            raise click.BadParameter(f"expected one of {sorted(models)}", param_hint="TARGET")
        schema = json.dumps(models[target].model_json_schema(), indent=2, sort_keys=True)
        if out is not None:
            out.write_text(schema + "\n")
        print(schema)


def _missing_typer() -> None:
    print(
        "Error: CLI functionality requires typer.\n"
        "Install with: pip install 'contextgate[cli]'",
        file=sys.stderr,
    )


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and translate failures into exit codes instead of tracebacks."""
    if not HAS_TYPER:
        _missing_typer()
        return EXIT_USAGE
    try:
        args = list(argv) if argv is not None else None
        result = cli(args=args, standalone_mode=False, prog_name="contextgate")
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    except NumericalError as e:
        logger.error("Training aborted: %s", e, extra={"parameter": e.parameter})
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContextGateError, FileNotFoundError) as e:
        logger.error("%s", e)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_DATA
    return result if isinstance(result, int) else EXIT_OK


def main():
    if not HAS_TYPER:
        _missing_typer()
        sys.exit(EXIT_USAGE)

    # Configure log file path (cross-platform and configurable)
    log_file = os.getenv(
        "CONTEXTGATE_LOG_FILE", os.path.join(tempfile.gettempdir(), "contextgate.log")
    )

    logging.basicConfig(
        level=logging.NOTSET,
        format="%(asctime)s %(name)-12s %(levelname)-8s %(message)s",
        datefmt="%m-%d %H:%M",
        handlers=[logging.FileHandler(log_file), logging.StreamHandler()],
    )
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
