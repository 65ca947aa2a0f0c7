import math
from collections import Counter
from dataclasses import replace
from itertools import combinations_with_replacement

import numpy as np
import pytest

from src.modules.autodiff import Parameter, backward, mul, total
from src.modules.cardionet import init_params
from src.modules.errors import ConfigError, IngestionError, LabelError, TrainingError
from src.modules.labels import GROUP_NAMES, GROUP_WIDTHS, NORMAL, LabelSet, Location
from src.modules.train_eval import (
    POOLED,
    POSITION_DEPENDENT,
    POSITION_INDEPENDENT,
    AdamState,
    PatientRecording,
    SplitPlan,
    TrainConfig,
    adam_step,
    compute_metrics,
    cross_validate,
    make_splits,
    metrics_table,
    mislabelled,
    mode_vote,
    patient_accuracy,
    patient_level_predict,
    regime_partitions,
    train,
)

QUICK = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=1)


def test_adam_zero_gradient_is_a_fixed_point():
    param = Parameter("p", np.array([0.5, -1.5, 2.0]))
    adam_step([param], [np.zeros(3)], AdamState())
    np.testing.assert_array_equal(param.data, [0.5, -1.5, 2.0])


def test_adam_first_step_follows_the_gradient_sign():
    param = Parameter("p", np.array([1.0, 1.0, 1.0]))
    state = adam_step([param], [np.array([3.0, -0.5, 1e-3])], AdamState(learning_rate=0.01))
    np.testing.assert_allclose(1.0 - param.data, [0.01, -0.01, 0.01], rtol=1e-4)
    assert state.t == 1


def test_adam_matches_a_scalar_reference_trace():
    x = Parameter("x", np.array([1.0]))
    state = AdamState(learning_rate=1e-4)
    reference, m, v = 1.0, 0.0, 0.0
    for step in range(1, 1001):
        x.zero_grad()
        backward(total(mul(x, x)))
        adam_step([x], None, state)

        g = 2.0 * reference
        m = 0.9 * m + (1.0 - 0.9) * g
        v = 0.999 * v + (1.0 - 0.999) * np.square(g)
        reference -= 1e-4 * (m / (1 - 0.9**step)) / (math.sqrt(v / (1 - 0.999**step)) + 1e-8)
    assert abs(x.data[0] - reference) < 1e-10
    assert reference < 1.0


def test_adam_rejects_non_finite_gradients():
    param = Parameter("p", np.ones(2))
    with pytest.raises(TrainingError, match="parameter p"):
        adam_step([param], [np.array([1.0, np.nan])], AdamState())


def test_splits_are_disjoint_and_cover(sample_factory, tiny_config):
    samples = sample_factory(120, tiny_config)
    plan = make_splits(samples, k=10, holdout_fraction=0.1, seed=3)
    assert len(plan.holdout) == 12
    everything = plan.holdout + [index for fold in plan.folds for index in fold]
    assert sorted(everything) == list(range(120))
    assert set(plan.holdout).isdisjoint(plan.training_indices(0))


def test_hundred_samples_give_folds_of_ten(sample_factory, tiny_config):
    plan = make_splits(sample_factory(100, tiny_config), k=10, holdout_fraction=0.0)
    assert [len(fold) for fold in plan.folds] == [10] * 10
    assert plan.holdout == []


def test_holdout_is_drawn_per_location(sample_factory, tiny_config):
    samples = sample_factory(80, tiny_config)
    plan = make_splits(samples, k=5, holdout_fraction=0.25, seed=1)
    counts = Counter(samples[index].location for index in plan.holdout)
    assert counts == {location: 5 for location in list(Location)[:4]}


def test_same_seed_same_plan(sample_factory, tiny_config):
    samples = sample_factory(60, tiny_config)
    assert make_splits(samples, k=4, seed=9) == make_splits(samples, k=4, seed=9)
    assert make_splits(samples, k=4, seed=9) != make_splits(samples, k=4, seed=10)


def test_recordings_never_straddle_the_holdout(sample_factory, tiny_config):
    samples = [
        replace(sample, recording_id=f"{sample.location.value}_{index // 20}")
        for index, sample in enumerate(sample_factory(120, tiny_config))
    ]
    plan = make_splits(samples, k=5, holdout_fraction=0.2, seed=2)
    held = set(plan.holdout)
    by_recording = {}
    for index, sample in enumerate(samples):
        by_recording.setdefault(sample.recording_id, set()).add(index in held)
    assert all(len(sides) == 1 for sides in by_recording.values())


def test_stratified_folds_balance_murmurs(sample_factory, tiny_config):
    samples = sample_factory(60, tiny_config, murmur_every=3)
    plan = make_splits(samples, k=5, holdout_fraction=0.0, stratify=True)
    murmurs = [sum(samples[index].labels.is_murmur for index in fold) for fold in plan.folds]
    assert max(murmurs) - min(murmurs) <= 1


def test_split_errors(sample_factory, tiny_config):
    samples = sample_factory(5, tiny_config)
    with pytest.raises(ConfigError, match="cannot fill"):
        make_splits(samples, k=10, holdout_fraction=0.0)
    with pytest.raises(ConfigError):
        make_splits(samples, k=1)
    with pytest.raises(ConfigError):
        make_splits(samples, k=2, holdout_fraction=1.0)


def test_split_plan_json(sample_factory, tiny_config):
    plan = make_splits(sample_factory(40, tiny_config), k=4, seed=5)
    assert SplitPlan.from_json(plan.to_json()) == plan
    with pytest.raises(ConfigError, match="malformed split plan"):
        SplitPlan.from_json('{"holdout": [1]}')
    with pytest.raises(ConfigError, match="overlap"):
        SplitPlan.from_json('{"holdout": [1], "folds": [[1, 2], [3]]}')


def test_split_plan_restrict():
    plan = SplitPlan([0, 5], [[1, 2], [3, 4]])
    assert plan.restrict([0, 2, 3]) == SplitPlan([0], [[2], [3]])
    assert plan.training_indices(1) == [1, 2]
    assert plan.non_holdout() == [1, 2, 3, 4]


def timing_only(values):
    return [LabelSet(timing=value) for value in values]


def test_perfect_predictions_score_one():
    truths = [LabelSet(), LabelSet(1, 2, 3, 4, 1), LabelSet(2, 1, 1, 1, 3)]
    row = compute_metrics(truths, truths).as_row()
    assert row == {"precision": 1.0, "sensitivity": 1.0, "specificity": 1.0, "f1": 1.0}
    assert compute_metrics([NORMAL] * 3, [NORMAL] * 3).macro_f1 == 1.0


def test_hand_counted_timing_metrics():
    report = compute_metrics(timing_only([0, 1, 2, 2]), timing_only([0, 1, 1, 2]))
    timing = report.groups["timing"]
    assert timing.precision == pytest.approx(2.5 / 3)
    assert timing.sensitivity == pytest.approx(2.5 / 3)
    assert timing.specificity == pytest.approx((1 + 1 + 2 / 3) / 3)
    assert timing.f1 == pytest.approx(2.5 / 3)
    assert report.groups["pitch"].f1 == 1.0
    assert list(report.to_frame()["group"]) == list(GROUP_NAMES) + ["macro"]


def test_metrics_length_errors():
    with pytest.raises(LabelError):
        compute_metrics([NORMAL], [NORMAL, NORMAL])
    with pytest.raises(LabelError):
        compute_metrics([], [])


def brute_force_metrics(predictions, truths):
    expected = {}
    for position, (group, width) in enumerate(zip(GROUP_NAMES, GROUP_WIDTHS)):
        confusion = np.zeros((width, width), dtype=int)
        for predicted, actual in zip(predictions, truths):
            confusion[actual.as_tuple()[position], predicted.as_tuple()[position]] += 1
        rates = []
        for category in range(width):
            tp = confusion[category, category]
            fp = confusion[:, category].sum() - tp
            fn = confusion[category, :].sum() - tp
            tn = confusion.sum() - tp - fp - fn
            if tp + fp + fn == 0:
                continue
            rates.append((
                tp / (tp + fp) if tp + fp else 0.0,
                tp / (tp + fn) if tp + fn else 0.0,
                tn / (tn + fp) if tn + fp else 1.0,
            ))
        precision = sum(rate[0] for rate in rates) / len(rates)
        sensitivity = sum(rate[1] for rate in rates) / len(rates)
        specificity = sum(rate[2] for rate in rates) / len(rates)
        f1 = 2 * precision * sensitivity / (precision + sensitivity) if precision + sensitivity else 0.0
        expected[group] = (precision, sensitivity, specificity, f1)
    return expected


def test_metrics_agree_with_a_confusion_counter():
    rng = np.random.default_rng(0)

    def draw():
        return LabelSet.from_tuple([int(rng.integers(width)) for width in GROUP_WIDTHS])

    for _ in range(1000):
        size = int(rng.integers(1, 12))
        predictions, truths = [draw() for _ in range(size)], [draw() for _ in range(size)]
        report = compute_metrics(predictions, truths)
        for group, values in brute_force_metrics(predictions, truths).items():
            metrics = report.groups[group]
            actual = (metrics.precision, metrics.sensitivity, metrics.specificity, metrics.f1)
            assert np.allclose(actual, values, rtol=0, atol=1e-12)


def test_mode_vote_exhaustive():
    for size in range(1, 7):
        for votes in combinations_with_replacement(range(5), size):
            counts = Counter(votes)
            best = max(counts.values())
            expected = min(category for category, count in counts.items() if count == best)
            assert mode_vote(votes) == expected
            assert mode_vote(votes[::-1]) == expected


def test_mode_vote_examples():
    assert mode_vote([2, 2, 0]) == 2
    assert mode_vote([3, 1]) == 1
    with pytest.raises(LabelError):
        mode_vote([])


def test_patient_accuracy():
    truths = [LabelSet(1, 1, 1, 1, 1)] * 4
    predictions = truths[:3] + [LabelSet(2, 1, 1, 1, 1)]
    accuracy = patient_accuracy(predictions, truths)
    assert accuracy["timing"] == 0.75
    assert all(accuracy[group] == 1.0 for group in GROUP_NAMES[1:])
    assert accuracy["average"] == pytest.approx(0.95)
    assert patient_accuracy(truths, truths)["average"] == 1.0
    with pytest.raises(LabelError):
        patient_accuracy(truths, truths[:2])


def forced(config, labels, seed=0):
    params = init_params(config, seed)
    for group, value in zip(GROUP_NAMES, labels.as_tuple()):
        head = params.blocks[group].head
        head.w.data[:] = 0.0
        head.b.data[:] = 0.0
        head.b.data[value] = 5.0
    return params


def segments(count, config, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=config.segment_length) for _ in range(count)]


def test_single_window_prediction_is_verbatim(tiny_config):
    labels = LabelSet(3, 2, 1, 4, 2)
    recording = PatientRecording(Location.AV, segments(2, tiny_config), True)
    assert patient_level_predict({"AV": forced(tiny_config, labels)}, [recording]) == labels


def test_murmur_recordings_outvote_and_exclude_the_rest(tiny_config):
    murmur = LabelSet(2, 2, 2, 2, 2)
    models = {"AV": forced(tiny_config, murmur), "MV": forced(tiny_config, NORMAL)}
    av = PatientRecording(Location.AV, segments(4, tiny_config), True)
    mv = PatientRecording(Location.MV, segments(2, tiny_config, 1), True)
    assert patient_level_predict(models, [av, mv]) == murmur

    mv.murmur_present, av.murmur_present = True, False
    assert patient_level_predict(models, [av, mv]) == NORMAL

    mv.murmur_present = False
    assert patient_level_predict(models, [mv, av]) == murmur


def test_pooled_model_serves_every_location(tiny_config):
    labels = LabelSet(1, 3, 2, 2, 1)
    recordings = [PatientRecording(Location.TV, segments(5, tiny_config)), PatientRecording(Location.PHC, segments(1, tiny_config))]
    assert patient_level_predict({POOLED: forced(tiny_config, labels)}, recordings) == labels


def test_patient_prediction_errors(tiny_config):
    with pytest.raises(IngestionError, match="no segments"):
        patient_level_predict({POOLED: forced(tiny_config, NORMAL)}, [PatientRecording(Location.AV, [])])
    with pytest.raises(ConfigError, match="no model for location TV"):
        patient_level_predict({"AV": forced(tiny_config, NORMAL)}, [PatientRecording(Location.TV, segments(2, tiny_config))])


def test_training_without_validation(sample_factory, tiny_config):
    _, history = train(tiny_config, sample_factory(8, tiny_config), (), seed=0, settings=QUICK)
    assert list(history.columns) == ["epoch", "train_loss", "train_macro_f1"]
    assert len(history) == 1
    assert np.isfinite(history["train_loss"][0]) and history["train_loss"][0] > 0


def test_training_records_validation_and_is_seeded(sample_factory, tiny_config):
    samples = sample_factory(12, tiny_config)
    settings = replace(QUICK, max_epochs=2)
    params, history = train(tiny_config, samples[:8], samples[8:], seed=4, settings=settings)
    assert {"val_loss", "val_macro_f1"} <= set(history.columns)
    assert list(history["epoch"]) == [1, 2]
    again, _ = train(tiny_config, samples[:8], samples[8:], seed=4, settings=settings)
    for name, values in params.state_dict().items():
        np.testing.assert_array_equal(values, again.state_dict()[name])


def test_training_rejects_bad_input(sample_factory, tiny_config):
    with pytest.raises(ConfigError, match="empty"):
        train(tiny_config, [], settings=QUICK)
    with pytest.raises(ConfigError):
        train(tiny_config, sample_factory(2, tiny_config), settings=TrainConfig(batch_size=0))


def test_cross_validation_writes_checkpoints_and_metrics(sample_factory, tiny_config, tmp_path):
    samples = sample_factory(16, tiny_config)
    plan = make_splits(samples, k=2, holdout_fraction=0.25, seed=0)
    result = cross_validate(samples, plan, tiny_config, seed=0, settings=QUICK, out_dir=tmp_path)
    assert len(result.fold_models) == 2
    assert result.final_model is not None
    assert sorted(path.name for path in tmp_path.iterdir()) == ["final.ckpt", "fold_0.ckpt", "fold_1.ckpt"]

    table = metrics_table(result, samples, plan)
    assert list(table["split"]) == ["fold_0", "fold_1", "Avg", "TD"]
    values = table.drop(columns="split").to_numpy()
    assert ((values >= 0) & (values <= 1)).all()
    np.testing.assert_allclose(values[2], values[:2].mean(axis=0))


def test_cross_validation_can_stop_early(sample_factory, tiny_config):
    samples = sample_factory(12, tiny_config)
    plan = make_splits(samples, k=3, holdout_fraction=0.0)
    result = cross_validate(samples, plan, tiny_config, settings=QUICK, folds_to_run=1, train_final=False)
    assert len(result.fold_models) == 1
    assert result.final_model is None
    assert list(metrics_table(result, samples, plan)["split"]) == ["fold_0", "Avg"]


def test_regime_partitions(sample_factory, tiny_config):
    samples = sample_factory(8, tiny_config)
    assert regime_partitions(samples, POSITION_INDEPENDENT) == {POOLED: list(range(8))}
    dependent = regime_partitions(samples, POSITION_DEPENDENT)
    assert dependent == {"AV": [0, 4], "PV": [1, 5], "TV": [2, 6], "MV": [3, 7]}
    assert list(dependent) == ["AV", "PV", "TV", "MV"]
    assert regime_partitions(samples, POSITION_DEPENDENT, "tv") == {"TV": [2, 6]}
    assert regime_partitions(samples, POSITION_INDEPENDENT, "MV") == {POOLED: [3, 7]}
    with pytest.raises(ConfigError):
        regime_partitions(samples, "Pooled")


def test_mislabelled_lists_wrong_groups(sample_factory, tiny_config):
    samples = sample_factory(3, tiny_config)
    predictions = [samples[0].labels, replace(samples[1].labels, timing=2, grading=1), samples[2].labels]
    frame = mislabelled(samples, predictions)
    assert len(frame) == 1
    assert frame["groups_in_error"][0] == "timing,grading"
    assert frame["recording_id"][0] == samples[1].recording_id


def test_every_location_is_spread_over_the_folds(sample_factory, tiny_config):
    samples = sample_factory(60, tiny_config)
    plan = make_splits(samples, k=4, holdout_fraction=0.0, seed=8)
    for fold in plan.folds:
        counts = Counter(samples[index].location for index in fold)
        assert set(counts.values()) <= {3, 4}
