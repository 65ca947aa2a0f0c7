import logging
import re
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import numpy as np

from src.components.MessageBox.message_box import MessageBox
from src.components.ReportTable.report_table import ReportTable
from src.modules.cardionet import EnsembleParams, predict_batch
from src.modules.config import RunConfig, format_config, load_config
from src.modules.errors import CardioLabelError, CheckpointError, IngestionError
from src.modules.labels import CATEGORY_NAMES, GROUP_NAMES, Location
from src.modules.pipeline import (
    CONFIG_NAME,
    SPLITS_NAME,
    STORE_NAME,
    load_patient_recordings,
    patient_accuracy_row,
    prepare_dataset,
    write_synthetic_dataset,
)
from src.modules.saliency import export_saliency, input_saliency, segment_contributions
from src.modules.storage import load_checkpoint, read_sample_store, write_sample_store
from src.modules.synthetic import SynthSpec
from src.modules.train_eval import (
    POOLED,
    POSITION_INDEPENDENT,
    REGIMES,
    CrossValidationResult,
    SplitPlan,
    compute_metrics,
    cross_validate,
    make_splits,
    metrics_table,
    mislabelled,
    model_directory_name,
    patient_level_predict,
    regime_partitions,
)
from src.modules.utils import assess_paths, configure_logging, construct_destination_file_path

logger = logging.getLogger("src.cli")

CSV_FLOAT_FORMAT = "%.12g"


class CardioLabelGroup(click.Group):
    """Command group that turns library failures into one `error=<ClassName> message=<text>` line and exit code 1."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (CardioLabelError, OSError) as error:
            MessageBox().set_exception(error).show()
            ctx.exit(1)


def resolve_config(config_path: Optional[str], data_dir: Optional[Path] = None, **overrides) -> Tuple[RunConfig, bool]:
    """Configuration from --config, else from a prepared data directory, else defaults; CLI flags win.

    Returns:
        Tuple[RunConfig, bool]: The configuration and whether it came from a file.
    """
    if config_path is None and data_dir is not None and (data_dir / CONFIG_NAME).is_file():
        config_path = str(data_dir / CONFIG_NAME)
    return load_config(config_path).override(**overrides), config_path is not None


def echo_table(table: ReportTable) -> None:
    click.echo(table.render())
    click.echo()


def write_frame(frame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def load_prepared(data_dir: Path) -> Tuple[list, SplitPlan]:
    message = assess_paths(str(data_dir / STORE_NAME), (".bin",), str(data_dir))
    if message:
        raise IngestionError(message)
    samples = read_sample_store(data_dir / STORE_NAME)
    plan = SplitPlan.from_json((data_dir / SPLITS_NAME).read_text(encoding="utf-8")).validate(len(samples))
    return samples, plan


def fold_checkpoints(directory: Path) -> List[Path]:
    def index(path: Path) -> int:
        return int(re.search(r"fold_(\d+)", path.stem).group(1))

    return sorted(directory.glob("fold_*.ckpt"), key=index)


def load_final_models(models_dir: Path, regime: str, location: Optional[str], expected) -> Dict[str, EnsembleParams]:
    """Final model per location directory, or the pooled one under ALL/."""
    if regime == POSITION_INDEPENDENT:
        keys = [POOLED]
    elif location:
        keys = [Location.parse(location).value]
    else:
        keys = [loc.value for loc in Location if (models_dir / loc.value / "final.ckpt").is_file()]
    models = {}
    for key in keys:
        path = models_dir / model_directory_name(key) / "final.ckpt"
        if not path.is_file():
            raise CheckpointError(f"missing checkpoint {path}")
        models[key] = load_checkpoint(path, expected).params
    if not models:
        raise CheckpointError(f"no final checkpoints under {models_dir}")
    return models


@click.group(cls=CardioLabelGroup, name="cardiolabel")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
@click.option("--quiet", "-q", is_flag=True, help="Hide progress bars.")
@click.pass_context
def cli(ctx: click.Context, verbose: bool, quiet: bool) -> None:
    """Heart-sound murmur multilabelling: synthesize, prepare, train, evaluate, predict and explain."""
    configure_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj["progress"] = not quiet


@cli.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Dataset directory to create.")
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--patients", default=20, show_default=True, type=click.IntRange(min=1))
@click.option("--murmur-prevalence", default=0.5, show_default=True, type=float)
@click.option("--unknown-prevalence", default=0.0, show_default=True, type=float)
@click.option("--segments-per-recording", default=12, show_default=True, type=click.IntRange(min=1))
@click.option("--noise-level", default=0.01, show_default=True, type=float)
@click.option("--location", "locations", multiple=True, help="Auscultation point to record; repeatable. Default AV, PV, TV, MV.")
@click.pass_context
def synth(ctx, out, seed, patients, murmur_prevalence, unknown_prevalence, segments_per_recording, noise_level, locations):
    """Write a seeded synthetic dataset (audio, segmentation, labels, manifest)."""
    spec = SynthSpec(
        n_patients=patients,
        murmur_prevalence=murmur_prevalence,
        unknown_prevalence=unknown_prevalence,
        segments_per_recording=segments_per_recording,
        noise_level=noise_level,
        locations=tuple(locations) or SynthSpec.locations,
    )
    manifest = write_synthetic_dataset(Path(out), spec, seed, ctx.obj["progress"])
    click.echo(f"manifest: {manifest}")


@cli.command()
@click.option("--manifest", type=click.Path(dir_okay=False), help="Dataset manifest; overrides the config file.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--seed", type=click.IntRange(min=0))
@click.option("--out", type=click.Path(file_okay=False), help="Directory for the sample store and reports.")
@click.pass_context
def prepare(ctx, manifest, config_path, seed, out):
    """Extract, resample and standardize segments, build samples and hold out a test split."""
    config, _ = resolve_config(config_path, seed=seed, manifest=manifest, output_dir=out)
    if not config.manifest:
        raise IngestionError("no manifest given (use --manifest or the manifest key)")
    out_dir = Path(config.output_dir)
    message = assess_paths(config.manifest, (".json",), str(out_dir))
    if message:
        raise IngestionError(message)

    dataset = prepare_dataset(
        Path(config.manifest),
        config.segments_per_sample,
        config.segment_length,
        config.standardize,
        config.seed,
        ctx.obj["progress"],
    )
    if not dataset.samples:
        raise IngestionError("no samples could be built", config.manifest)
    plan = make_splits(dataset.samples, config.folds, config.holdout_fraction, config.seed, config.stratify)

    out_dir.mkdir(parents=True, exist_ok=True)
    write_sample_store(out_dir / STORE_NAME, dataset.samples)
    (out_dir / SPLITS_NAME).write_text(plan.to_json(), encoding="utf-8")
    recorded = config.override(manifest=str(Path(config.manifest).resolve()), output_dir=str(out_dir))
    (out_dir / CONFIG_NAME).write_text(format_config(recorded), encoding="utf-8")

    for title, frame, name in (
        ("Samples per location", dataset.location_counts(), "location_counts.csv"),
        ("Label distribution (murmur present)", dataset.label_distribution(), "label_distribution.csv"),
        ("Dataset summary", dataset.summary(), "dataset_summary.csv"),
    ):
        table = ReportTable.from_frame(frame).set_title(title)
        table.to_csv(out_dir / name)
        echo_table(table)
    click.echo(f"{len(dataset.samples)} samples, {len(plan.holdout)} held out, {plan.k} folds -> {out_dir}")


@cli.command()
@click.option("--data", "data_dir", type=click.Path(file_okay=False), help="Prepared directory; defaults to the configured output_dir.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--seed", type=click.IntRange(min=0))
@click.option("--out", type=click.Path(file_okay=False), help="Directory receiving checkpoints and histories.")
@click.option("--regime", type=click.Choice(REGIMES))
@click.option("--location", help="Train only this location.")
@click.pass_context
def train(ctx, data_dir, config_path, seed, out, regime, location):
    """Cross-validate per regime and write fold and final checkpoints."""
    data_dir = Path(data_dir or load_config(config_path).output_dir)
    config, _ = resolve_config(config_path, data_dir, seed=seed, regime=regime, output_dir=out)
    samples, plan = load_prepared(data_dir)
    out_dir = Path(config.output_dir)

    summary = ReportTable(["model", "fold", "epochs", "train_loss", "train_macro_f1", "val_macro_f1"]).set_title("Training")
    for key, indices in regime_partitions(samples, config.regime, location).items():
        target = out_dir / model_directory_name(key)
        result = cross_validate(
            samples,
            plan.restrict(indices),
            config.net_config,
            config.seed,
            config.train_config(ctx.obj["progress"]),
            config.folds_to_run,
            config.train_final,
            target,
        )
        histories = [(f"fold_{fold}", history) for fold, history in enumerate(result.fold_histories)]
        if result.final_history is not None:
            histories.append(("final", result.final_history))
        for fold, history in histories:
            write_frame(history, target / f"history_{fold}.csv")
            last = history.iloc[-1]
            summary.add_row({
                "model": model_directory_name(key),
                "fold": fold,
                "epochs": int(last["epoch"]),
                "train_loss": float(last["train_loss"]),
                "train_macro_f1": float(last["train_macro_f1"]),
                "val_macro_f1": float(last["val_macro_f1"]) if "val_macro_f1" in history else float("nan"),
            })
    (out_dir / CONFIG_NAME).parent.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_NAME).write_text(format_config(config), encoding="utf-8")
    echo_table(summary)


@cli.command("eval")
@click.option("--data", "data_dir", type=click.Path(file_okay=False), help="Prepared directory; defaults to the configured output_dir.")
@click.option("--models", "models_dir", type=click.Path(file_okay=False), help="Training output directory; defaults to --out.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), help="Directory receiving metric CSVs.")
@click.option("--regime", type=click.Choice(REGIMES))
@click.option("--location", help="Evaluate only this location.")
@click.option("--manifest", type=click.Path(dir_okay=False), help="Manifest for patient-level accuracy; defaults to the configured one.")
def evaluate(data_dir, models_dir, config_path, out, regime, location, manifest):
    """Sample-level metrics per fold and on the holdout, mislabelled samples and patient-level accuracy."""
    data_dir = Path(data_dir or load_config(config_path).output_dir)
    config, from_file = resolve_config(config_path, data_dir, regime=regime, output_dir=out, manifest=manifest)
    expected = config.net_config if from_file else None
    samples, plan = load_prepared(data_dir)
    out_dir = Path(config.output_dir)
    models_dir = Path(models_dir) if models_dir else out_dir

    fold_models: Dict[str, List[EnsembleParams]] = {}
    final_models: Dict[str, EnsembleParams] = {}
    holdout_recordings = set()
    for key, indices in regime_partitions(samples, config.regime, location).items():
        name = model_directory_name(key)
        sub_plan = plan.restrict(indices)
        checkpoints = fold_checkpoints(models_dir / name)
        final_path = models_dir / name / "final.ckpt"
        if not checkpoints and not final_path.is_file():
            raise CheckpointError(f"no checkpoints under {models_dir / name}")
        result = CrossValidationResult([load_checkpoint(path, expected).params for path in checkpoints], [])
        if final_path.is_file():
            result.final_model = load_checkpoint(final_path, expected).params
            final_models[key] = result.final_model
        fold_models[key] = result.fold_models

        table = ReportTable.from_frame(metrics_table(result, samples, sub_plan, config.batch_size)).set_title(f"Sample-level metrics ({name})")
        write_frame(table.to_frame(), out_dir / name / "metrics.csv")
        echo_table(table)

        holdout = [samples[index] for index in sub_plan.holdout]
        holdout_recordings |= {sample.recording_id for sample in holdout}
        if result.final_model is not None and holdout:
            predictions = predict_batch(result.final_model, np.stack([sample.segments for sample in holdout]), config.batch_size)
            report = compute_metrics(predictions, [sample.labels for sample in holdout])
            write_frame(report.to_frame(), out_dir / name / "metrics_by_group.csv")
            write_frame(mislabelled(holdout, predictions), out_dir / name / "mislabelled.csv")

    if not config.manifest or not holdout_recordings:
        logger.warning("patient-level accuracy skipped: %s", "no manifest" if not config.manifest else "empty holdout")
        return
    recordings, patients = load_patient_recordings(
        Path(config.manifest), config.segment_length, config.standardize, recording_ids=holdout_recordings
    )
    if not recordings:
        logger.warning("patient-level accuracy skipped: no holdout patients in %s", config.manifest)
        return
    patient_table = ReportTable().set_title("Patient-level accuracy")
    fold_count = min(len(models) for models in fold_models.values())
    for fold in range(fold_count):
        models = {key: fold_models[key][fold] for key in fold_models}
        patient_table.add_row(patient_accuracy_row(f"fold_{fold}", models, recordings, patients))
    if fold_count:
        averages = patient_table.to_frame().drop(columns="split").mean().to_dict()
        patient_table.add_row({"split": "Avg", **averages})
    if len(final_models) == len(fold_models):
        patient_table.add_row(patient_accuracy_row("TD", final_models, recordings, patients))
    write_frame(patient_table.to_frame(), out_dir / "patient_accuracy.csv")
    echo_table(patient_table)


@cli.command()
@click.option("--patient", required=True, help="Patient id to label.")
@click.option("--manifest", type=click.Path(dir_okay=False), help="Manifest listing the patient's recordings.")
@click.option("--models", "models_dir", type=click.Path(file_okay=False), help="Training output directory; defaults to --out.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--regime", type=click.Choice(REGIMES))
@click.option("--location", help="Use only this location's model and recordings.")
def predict(patient, manifest, models_dir, config_path, out, regime, location):
    """Label one patient by mode vote over windows of their recordings."""
    models_dir = Path(models_dir or out or load_config(config_path).output_dir)
    config, from_file = resolve_config(config_path, models_dir, regime=regime, manifest=manifest)
    if not config.manifest:
        raise IngestionError("no manifest given (use --manifest or the manifest key)")
    models = load_final_models(models_dir, config.regime, location, config.net_config if from_file else None)
    segment_length = next(iter(models.values())).config.segment_length

    recordings, _ = load_patient_recordings(Path(config.manifest), segment_length, config.standardize, patient_ids={patient})
    chosen = recordings.get(patient, [])
    if location:
        chosen = [recording for recording in chosen if recording.location is Location.parse(location)]
    if not chosen:
        raise IngestionError(f"no recordings for patient {patient}", config.manifest)

    started = time.perf_counter()
    labels = patient_level_predict(models, chosen)
    logger.info("%s prediction for patient %s took %.3f s", config.regime, patient, time.perf_counter() - started)
    for group, value in zip(GROUP_NAMES, labels.as_tuple()):
        click.echo(f"{group.capitalize()}: {CATEGORY_NAMES[group][value]}")


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False, exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--sample", "sample_index", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--group", default="timing", show_default=True, type=click.Choice(GROUP_NAMES + ("all",)))
@click.option("--class-index", type=click.IntRange(min=0), help="Target class; the predicted class by default.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def saliency(checkpoint, data_dir, sample_index, group, class_index, out):
    """Write input-gradient saliency and per-segment contributions for one prepared sample."""
    samples = read_sample_store(Path(data_dir) / STORE_NAME)
    if sample_index >= len(samples):
        raise IngestionError(f"sample {sample_index} out of range, store holds {len(samples)}", data_dir)
    sample = samples[sample_index]
    params = load_checkpoint(checkpoint).params

    table = ReportTable(["group", "class", "top_segment", "contribution_pct", "file"]).set_title(
        f"Saliency of sample {sample_index} (patient {sample.patient_id}, {Location(sample.location).value})"
    )
    for name in GROUP_NAMES if group == "all" else (group,):
        saliency_map = input_saliency(params, sample.segments, name, class_index)
        contributions = segment_contributions(saliency_map)
        path = construct_destination_file_path(str(Path(out) / "saliency"), f"sample_{sample_index}", "csv", name)
        export_saliency(saliency_map, contributions, path)
        segment, share = contributions.most_contributing
        table.add_row({
            "group": name,
            "class": CATEGORY_NAMES[name][saliency_map.class_index],
            "top_segment": segment,
            "contribution_pct": share,
            "file": path,
        })
    echo_table(table)


if __name__ == "__main__":
    cli()
