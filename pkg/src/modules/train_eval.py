"""Training, cross-validation, sample-level metrics and patient-level voting."""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.components.ProgressBar.progress_bar import ProgressBar

from .autodiff import Parameter, backward
from .cardionet import EnsembleParams, NetConfig, ensemble_forward, init_params, joint_loss, predict_batch
from .errors import ConfigError, IngestionError, LabelError, ShapeError, TrainingError
from .labels import GROUP_NAMES, GROUP_WIDTHS, LabelSet, Location, decode_labels
from .pcg_data import Sample, window_segments
from .storage import save_checkpoint

logger = logging.getLogger(__name__)

POOLED = "*"
POSITION_DEPENDENT = "PositionDependent"
POSITION_INDEPENDENT = "PositionIndependent"
REGIMES = (POSITION_DEPENDENT, POSITION_INDEPENDENT)


@dataclass
class AdamState:
    """Bias-corrected Adam moments, keyed by parameter name."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], grads: Optional[Sequence[np.ndarray]], state: AdamState) -> AdamState:
    """Apply one Adam update in place.

    Args:
        params (Sequence[Parameter]): Parameters to update.
        grads (Sequence[np.ndarray], optional): Gradients aligned with `params`; each parameter's `.grad` when None.
        state (AdamState): Moments and step counter, updated in place.

    Returns:
        AdamState: The same state object.
    """
    grads = [param.grad for param in params] if grads is None else list(grads)
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    for param, grad in zip(params, grads):
        if np.shape(grad) != param.shape:
            raise ShapeError(f"gradient of {param.name} has shape {np.shape(grad)}, expected {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter {param.name} at step {state.t + 1}")

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for param, grad in zip(params, grads):
        m = state.m.get(param.name, np.zeros_like(param.data))
        v = state.v.get(param.name, np.zeros_like(param.data))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * np.square(grad)
        state.m[param.name], state.v[param.name] = m, v
        param.data = param.data - state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return state


@dataclass
class SplitPlan:
    """Holdout indices and k disjoint fold index lists over the rest."""

    holdout: List[int]
    folds: List[List[int]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def non_holdout(self) -> List[int]:
        return sorted(index for fold in self.folds for index in fold)

    def training_indices(self, fold: int) -> List[int]:
        return sorted(index for position, other in enumerate(self.folds) if position != fold for index in other)

    def restrict(self, keep: Sequence[int]) -> SplitPlan:
        """The same plan limited to the sample indices in `keep`."""
        wanted = set(keep)
        return SplitPlan(
            [index for index in self.holdout if index in wanted],
            [[index for index in fold if index in wanted] for fold in self.folds],
        )

    def validate(self, total: Optional[int] = None) -> SplitPlan:
        seen = list(self.holdout) + [index for fold in self.folds for index in fold]
        if len(seen) != len(set(seen)):
            raise ConfigError("split plan holdout and folds overlap")
        if total is not None and sorted(seen) != list(range(total)):
            raise ConfigError(f"split plan does not cover exactly {total} samples")
        return self

    def to_json(self) -> str:
        return json.dumps({"holdout": self.holdout, "folds": self.folds}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> SplitPlan:
        try:
            payload = json.loads(text)
            plan = cls([int(i) for i in payload["holdout"]], [[int(i) for i in fold] for fold in payload["folds"]])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as error:
            raise ConfigError(f"malformed split plan: {error}") from error
        return plan.validate()


def _recording_key(sample: Sample) -> str:
    return sample.recording_id or f"{sample.patient_id}_{Location(sample.location).value}"


def make_splits(
    samples: Sequence[Sample],
    k: int = 10,
    holdout_fraction: float = 0.1,
    seed: int = 0,
    stratify: bool = False,
) -> SplitPlan:
    """Hold out a fraction of every location's recordings, then fold the rest.

    Holdout is drawn whole recordings at a time, so samples cut from one
    recording never straddle the holdout boundary. The rest is dealt to the
    folds round-robin one location after another, which spreads every
    location evenly over the folds.

    Args:
        samples (Sequence[Sample]): Samples to split.
        k (int, optional): Number of folds.
        holdout_fraction (float, optional): Share of each location's samples held out.
        seed (int, optional): Shuffle seed.
        stratify (bool, optional): Also deal murmur and normal samples separately, in label order.

    Returns:
        SplitPlan: Disjoint holdout and folds covering every sample.
    """
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    if not 0.0 <= holdout_fraction < 1.0:
        raise ConfigError(f"holdout_fraction must lie in [0, 1), got {holdout_fraction}")
    rng = np.random.default_rng(seed)

    by_location: Dict[str, Dict[str, List[int]]] = OrderedDict()
    for index, sample in enumerate(samples):
        recordings = by_location.setdefault(Location(sample.location).value, OrderedDict())
        recordings.setdefault(_recording_key(sample), []).append(index)

    holdout: List[int] = []
    for recordings in by_location.values():
        groups = list(recordings.values())
        target = round(holdout_fraction * sum(len(group) for group in groups))
        taken = 0
        for position in rng.permutation(len(groups)):
            if taken >= target:
                break
            holdout += groups[position]
            taken += len(groups[position])

    held = set(holdout)
    rest = np.array([index for index in range(len(samples)) if index not in held], dtype=int)
    if len(rest) < k:
        raise ConfigError(f"{len(rest)} non-holdout samples cannot fill {k} folds")
    rest = rest[rng.permutation(len(rest))]
    rank = {location: position for position, location in enumerate(by_location)}

    def deal_key(index: int) -> tuple:
        sample = samples[index]
        location = rank[Location(sample.location).value]
        if stratify:
            return (sample.labels.is_murmur, location, sample.labels.as_tuple())
        return (location,)

    # Stable sort keeps the shuffled order within a key.
    ordered = sorted(rest.tolist(), key=deal_key)
    folds = [ordered[position::k] for position in range(k)]
    plan = SplitPlan(sorted(holdout), [sorted(fold) for fold in folds])
    logger.debug("split %d samples: %d holdout, folds of %s", len(samples), len(holdout), [len(f) for f in plan.folds])
    return plan.validate(len(samples))


@dataclass
class GroupMetrics:
    precision: float
    sensitivity: float
    specificity: float
    f1: float


@dataclass
class MetricsReport:
    """Per-group metrics with unweighted means over the five groups."""

    groups: Dict[str, GroupMetrics]

    def macro(self, name: str) -> float:
        return float(np.mean([getattr(metrics, name) for metrics in self.groups.values()]))

    @property
    def macro_f1(self) -> float:
        return self.macro("f1")

    def as_row(self) -> Dict[str, float]:
        return {name: self.macro(name) for name in ("precision", "sensitivity", "specificity", "f1")}

    def to_frame(self) -> pd.DataFrame:
        rows = [{"group": group, **vars(metrics)} for group, metrics in self.groups.items()]
        rows.append({"group": "macro", **self.as_row()})
        return pd.DataFrame(rows, columns=["group", "precision", "sensitivity", "specificity", "f1"])


def _ratio(numerator: int, denominator: int, empty: float = 0.0) -> float:
    return numerator / denominator if denominator else empty


def _harmonic(precision: float, sensitivity: float) -> float:
    return _ratio(2 * precision * sensitivity, precision + sensitivity) if precision + sensitivity else 0.0


def compute_metrics(predictions: Sequence[LabelSet], truths: Sequence[LabelSet]) -> MetricsReport:
    """One-vs-rest precision, sensitivity and specificity per class, averaged per group.

    Classes absent from both truths and predictions are skipped. A group's F1
    is the harmonic mean of its precision and sensitivity.

    Args:
        predictions (Sequence[LabelSet]): Predicted labels.
        truths (Sequence[LabelSet]): True labels, aligned with `predictions`.

    Returns:
        MetricsReport: Per-group and macro metrics.
    """
    if len(predictions) != len(truths):
        raise LabelError(f"{len(predictions)} predictions for {len(truths)} truths")
    if not truths:
        raise LabelError("cannot compute metrics on an empty set")
    predicted = np.array([labels.as_tuple() for labels in predictions])
    actual = np.array([labels.as_tuple() for labels in truths])

    groups = {}
    for position, (group, width) in enumerate(zip(GROUP_NAMES, GROUP_WIDTHS)):
        rates = []
        for category in range(width):
            is_pred, is_true = predicted[:, position] == category, actual[:, position] == category
            if not is_pred.any() and not is_true.any():
                continue
            tp = int(np.sum(is_pred & is_true))
            fp = int(np.sum(is_pred & ~is_true))
            fn = int(np.sum(~is_pred & is_true))
            tn = int(np.sum(~is_pred & ~is_true))
            # A class present in every sample has no negatives to misclassify.
            rates.append((_ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(tn, tn + fp, empty=1.0)))
        precision, sensitivity, specificity = (float(value) for value in np.mean(rates, axis=0))
        groups[group] = GroupMetrics(precision, sensitivity, specificity, _harmonic(precision, sensitivity))
    return MetricsReport(groups)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 30
    # Epochs without validation-loss improvement before stopping; 0 never stops early.
    patience: int = 0
    show_progress: bool = False

    def validate(self) -> TrainConfig:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError(f"invalid training settings {self}")
        return self


def _stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, List[LabelSet]]:
    return np.stack([sample.segments for sample in samples]), [sample.labels for sample in samples]


def evaluate_loss(params: EnsembleParams, samples: Sequence[Sample], batch_size: int = 32) -> Tuple[float, List[LabelSet]]:
    """Mean joint loss and predictions over a sample set, without updating parameters."""
    inputs, labels = _stack(samples)
    total, predictions = 0.0, []
    for start in range(0, len(samples), batch_size):
        output = ensemble_forward(params, inputs[start : start + batch_size])
        batch_labels = labels[start : start + batch_size]
        total += joint_loss(output, batch_labels, params.config.global_weight).item() * len(batch_labels)
        predictions += [decode_labels(row) for row in np.concatenate(output.group_probs, axis=1)]
    return total / len(samples), predictions


def train(
    config: NetConfig,
    train_samples: Sequence[Sample],
    validation_samples: Sequence[Sample] = (),
    seed: int = 0,
    settings: TrainConfig = TrainConfig(),
) -> Tuple[EnsembleParams, pd.DataFrame]:
    """Fit a fresh network with Adam on minibatches of the joint loss.

    Args:
        config (NetConfig): Architecture and global loss weight.
        train_samples (Sequence[Sample]): Training samples.
        validation_samples (Sequence[Sample], optional): Samples scored after every epoch.
        seed (int, optional): Seed for initialisation and per-epoch shuffling.
        settings (TrainConfig, optional): Optimiser and loop settings.

    Returns:
        Tuple[EnsembleParams, pd.DataFrame]: Trained parameters and one history row per epoch.
    """
    settings.validate()
    if not train_samples:
        raise ConfigError("training set is empty")
    params = init_params(config, seed)
    state = AdamState(learning_rate=settings.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    inputs, labels = _stack(train_samples)

    rows, best_loss, stale = [], np.inf, 0
    epochs = ProgressBar(range(1, settings.max_epochs + 1)).set_name("epochs").set_unit("epoch").set_enabled(settings.show_progress)
    for epoch in epochs:
        order = rng.permutation(len(train_samples))
        total, predictions, truths = 0.0, [], []
        for start in range(0, len(order), settings.batch_size):
            batch = order[start : start + settings.batch_size]
            batch_labels = [labels[index] for index in batch]
            params.zero_grad()
            output = ensemble_forward(params, inputs[batch])
            loss = joint_loss(output, batch_labels, config.global_weight)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss diverged at epoch {epoch}, batch starting at {start}")
            backward(loss)
            adam_step(params.parameters(), None, state)
            total += loss.item() * len(batch)
            predictions += [decode_labels(row) for row in np.concatenate(output.group_probs, axis=1)]
            truths += batch_labels

        row = {
            "epoch": epoch,
            "train_loss": total / len(order),
            "train_macro_f1": compute_metrics(predictions, truths).macro_f1,
        }
        if validation_samples:
            val_loss, val_predictions = evaluate_loss(params, validation_samples, settings.batch_size)
            row["val_loss"] = val_loss
            row["val_macro_f1"] = compute_metrics(val_predictions, [sample.labels for sample in validation_samples]).macro_f1
        rows.append(row)
        logger.info(
            "epoch %d: %s", epoch, " ".join(f"{key}={value:.4f}" for key, value in row.items() if key != "epoch")
        )

        if settings.patience and validation_samples:
            if row["val_loss"] < best_loss:
                best_loss, stale = row["val_loss"], 0
            else:
                stale += 1
                if stale >= settings.patience:
                    logger.info("early stop after epoch %d: no validation improvement for %d epochs", epoch, stale)
                    break
    return params, pd.DataFrame(rows)


@dataclass
class CrossValidationResult:
    fold_models: List[EnsembleParams]
    fold_histories: List[pd.DataFrame]
    final_model: Optional[EnsembleParams] = None
    final_history: Optional[pd.DataFrame] = None


def cross_validate(
    samples: Sequence[Sample],
    plan: SplitPlan,
    config: NetConfig,
    seed: int = 0,
    settings: TrainConfig = TrainConfig(),
    folds_to_run: int = 0,
    train_final: bool = True,
    out_dir: Optional[Union[str, Path]] = None,
) -> CrossValidationResult:
    """Train one model per fold, validated on that fold, and optionally a final model on all non-holdout samples.

    Args:
        samples (Sequence[Sample]): Every sample the plan indexes into.
        plan (SplitPlan): Holdout and folds.
        config (NetConfig): Architecture.
        seed (int, optional): Root seed; fold i trains with seed + i, the final model with seed + k.
        settings (TrainConfig, optional): Training loop settings.
        folds_to_run (int, optional): Train only the first n folds; 0 trains all.
        train_final (bool, optional): Also train on the full non-holdout set.
        out_dir (Union[str, Path], optional): Directory receiving fold_<i>.ckpt and final.ckpt.

    Returns:
        CrossValidationResult: Fold models, histories and the final model.
    """
    count = plan.k if folds_to_run <= 0 else min(folds_to_run, plan.k)
    result = CrossValidationResult([], [])
    for fold in range(count):
        training = [samples[index] for index in plan.training_indices(fold)]
        validation = [samples[index] for index in plan.folds[fold]]
        logger.info("fold %d/%d: %d training, %d validation samples", fold + 1, plan.k, len(training), len(validation))
        params, history = train(config, training, validation, seed + fold, settings)
        result.fold_models.append(params)
        result.fold_histories.append(history)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / f"fold_{fold}.ckpt", params, history, seed + fold, {"fold": fold})

    if train_final:
        training = [samples[index] for index in plan.non_holdout()]
        logger.info("final model: %d training samples", len(training))
        result.final_model, result.final_history = train(config, training, (), seed + plan.k, settings)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "final.ckpt", result.final_model, result.final_history, seed + plan.k, {"fold": "final"})
    return result


def regime_partitions(samples: Sequence[Sample], regime: str, location: Optional[str] = None) -> Dict[str, List[int]]:
    """Sample indices per model: one entry per location, or one pooled entry.

    Args:
        samples (Sequence[Sample]): Every sample.
        regime (str): PositionDependent or PositionIndependent.
        location (str, optional): Keep only this location.

    Returns:
        Dict[str, List[int]]: Indices keyed by location code, or by POOLED.
    """
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
    wanted = Location.parse(location).value if location else None
    selected = [index for index, sample in enumerate(samples) if wanted is None or Location(sample.location).value == wanted]
    if regime == POSITION_INDEPENDENT:
        return {POOLED: selected}
    partitions: Dict[str, List[int]] = OrderedDict()
    for index in selected:
        partitions.setdefault(Location(samples[index].location).value, []).append(index)
    return partitions


def model_directory_name(key: str) -> str:
    return "ALL" if key == POOLED else key


def metrics_table(
    result: CrossValidationResult, samples: Sequence[Sample], plan: SplitPlan, batch_size: int = 32
) -> pd.DataFrame:
    """One metrics row per fold (on its validation fold), their average, and the final model on the holdout (TD)."""
    rows = []
    for fold, params in enumerate(result.fold_models):
        validation = [samples[index] for index in plan.folds[fold]]
        if not validation:
            continue
        predictions = predict_batch(params, np.stack([sample.segments for sample in validation]), batch_size)
        rows.append({"split": f"fold_{fold}", **compute_metrics(predictions, [s.labels for s in validation]).as_row()})
    frame = pd.DataFrame(rows, columns=["split", "precision", "sensitivity", "specificity", "f1"])
    if rows:
        average = frame.drop(columns="split").mean().to_dict()
        frame = pd.concat([frame, pd.DataFrame([{"split": "Avg", **average}])], ignore_index=True)
    holdout = [samples[index] for index in plan.holdout]
    if result.final_model is not None and holdout:
        predictions = predict_batch(result.final_model, np.stack([sample.segments for sample in holdout]), batch_size)
        td = {"split": "TD", **compute_metrics(predictions, [s.labels for s in holdout]).as_row()}
        frame = pd.concat([frame, pd.DataFrame([td])], ignore_index=True)
    return frame


def mislabelled(samples: Sequence[Sample], predictions: Sequence[LabelSet]) -> pd.DataFrame:
    """One row per sample whose prediction differs from its labels."""
    rows = []
    for sample, predicted in zip(samples, predictions):
        if predicted == sample.labels:
            continue
        wrong = [group for group, a, b in zip(GROUP_NAMES, predicted.as_tuple(), sample.labels.as_tuple()) if a != b]
        rows.append({
            "patient_id": sample.patient_id,
            "location": Location(sample.location).value,
            "recording_id": sample.recording_id,
            "pad_count": sample.pad_count,
            "true": "/".join(sample.labels.names().values()),
            "predicted": "/".join(predicted.names().values()),
            "groups_in_error": ",".join(wrong),
        })
    columns = ["patient_id", "location", "recording_id", "pad_count", "true", "predicted", "groups_in_error"]
    return pd.DataFrame(rows, columns=columns)


def mode_vote(votes: Sequence[int]) -> int:
    """Most frequent class; ties go to the lowest class index."""
    if len(votes) == 0:
        raise LabelError("cannot take the mode of zero votes")
    return int(np.argmax(np.bincount(np.asarray(votes, dtype=int))))


@dataclass
class PatientRecording:
    location: Location
    segments: List[np.ndarray] = field(repr=False)
    murmur_present: bool = False


def _model_for(models_by_location: Mapping[str, EnsembleParams], location: Location) -> EnsembleParams:
    models = {key if key == POOLED else Location.parse(str(getattr(key, "value", key))).value: model
              for key, model in models_by_location.items()}
    model = models.get(Location(location).value, models.get(POOLED))
    if model is None:
        raise ConfigError(f"no model for location {Location(location).value} and no pooled model")
    return model


def patient_level_predict(
    models_by_location: Mapping[str, EnsembleParams], patient_recordings: Sequence[PatientRecording]
) -> LabelSet:
    """Mode vote over non-overlapping windows of a patient's recordings.

    Only murmur-present recordings vote when there are any; otherwise every
    recording votes. Each window is predicted by the model of its recording's
    location, or by the pooled model keyed POOLED.

    Args:
        models_by_location (Mapping[str, EnsembleParams]): Models keyed by location code or POOLED.
        patient_recordings (Sequence[PatientRecording]): The patient's recordings.

    Returns:
        LabelSet: Per-group mode of the window predictions.
    """
    chosen = [recording for recording in patient_recordings if recording.murmur_present] or list(patient_recordings)
    votes: List[LabelSet] = []
    for recording in chosen:
        if not recording.segments:
            continue
        model = _model_for(models_by_location, recording.location)
        windows = window_segments(recording.segments, model.config.segments_per_sample)
        votes += predict_batch(model, np.stack([matrix for matrix, _ in windows]))
    if not votes:
        raise IngestionError("patient has no segments to predict")
    table = np.array([labels.as_tuple() for labels in votes])
    return LabelSet.from_tuple([mode_vote(table[:, position]) for position in range(len(GROUP_NAMES))])


def patient_accuracy(pred_sets: Sequence[LabelSet], truth_sets: Sequence[LabelSet]) -> Dict[str, float]:
    """Fraction of patients whose group value matches, per group, plus their average."""
    if len(pred_sets) != len(truth_sets):
        raise LabelError(f"{len(pred_sets)} predictions for {len(truth_sets)} patients")
    if not truth_sets:
        raise LabelError("cannot compute accuracy on zero patients")
    predicted = np.array([labels.as_tuple() for labels in pred_sets])
    actual = np.array([labels.as_tuple() for labels in truth_sets])
    accuracy = {group: float(np.mean(predicted[:, position] == actual[:, position])) for position, group in enumerate(GROUP_NAMES)}
    accuracy["average"] = float(np.mean(list(accuracy.values())))
    return accuracy

