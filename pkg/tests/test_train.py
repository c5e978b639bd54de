import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from augment3d.augment import Compose, FlipX, NoAugment, Rotate, Scale
from augment3d.data import SynthSpec, synth_dataset
from augment3d.nn import Model, ModelConfig, forward
from augment3d.rng import RngStream
from augment3d.train import (
    EARLY_STOP,
    FIXED,
    Dataset,
    EarlyStopping,
    EmptyClass,
    ExperimentReport,
    FoldResult,
    ModeMismatch,
    SplitSpec,
    TrainOptions,
    accuracy,
    compare_to_baseline,
    cross_validate,
    largest_remainder,
    run_fold,
    sample_std,
    stratified_split,
    train_model,
    tta_evaluate,
)
from augment3d.volume import Volume3

SHAPE = (8, 8, 8)
TINY = ModelConfig(SHAPE, (2, 2, 4), pool_after=(2,))


@pytest.fixture(scope="module")
def tiny_data():
    return Dataset.from_pairs(synth_dataset(SynthSpec(n_subjects=20, shape=SHAPE, seed=3)))


def _report(label, accs, mode=FIXED):
    folds = [FoldResult(i, a, 0, 1, [], 0.0) for i, a in enumerate(accs)]
    return ExperimentReport(label, mode, folds)


# -- splitting


def test_largest_remainder():
    assert largest_remainder(1112, (0.7, 0.15, 0.15)) == [778, 167, 167]
    assert largest_remainder(10, (0.7, 0.15, 0.15)) == [7, 2, 1]
    assert largest_remainder(20, (0.7, 0.15, 0.15)) == [14, 3, 3]


def test_split_full_scale():
    labels = np.array([1] * 539 + [0] * 573)
    tr, va, te = stratified_split(labels, SplitSpec(seed=0))
    assert (len(tr), len(va), len(te)) == (778, 167, 167)
    for part, ratio in zip((tr, va, te), (0.7, 0.15, 0.15)):
        for c, n in ((1, 539), (0, 573)):
            assert abs((labels[part] == c).sum() - n * ratio) <= 1


def test_split_small_balanced():
    labels = np.array([0, 1] * 5)
    tr, va, te = stratified_split(labels, SplitSpec(seed=1))
    assert (len(tr), len(va), len(te)) == (7, 2, 1)
    assert set(labels[va]) == {0, 1}


def test_split_determinism_and_seed_dependence():
    labels = np.array([0] * 30 + [1] * 20)
    a = stratified_split(labels, SplitSpec(seed=5))
    b = stratified_split(labels, SplitSpec(seed=5))
    c = stratified_split(labels, SplitSpec(seed=6))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_split_errors():
    with pytest.raises(EmptyClass):
        stratified_split(np.ones(10, dtype=int))
    with pytest.raises(ValueError):
        SplitSpec(ratios=(0.5, 0.3, 0.3))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(1, 200), st.integers(0, 2**31))
def test_split_properties(n0, n1, seed):
    labels = np.array([0] * n0 + [1] * n1)
    rng = RngStream(seed).permutation(len(labels))
    labels = labels[rng]
    parts = stratified_split(labels, SplitSpec(seed=seed))
    joined = np.concatenate(parts)
    assert sorted(joined.tolist()) == list(range(len(labels)))
    assert [len(p) for p in parts] == largest_remainder(len(labels), (0.7, 0.15, 0.15))
    for part, ratio in zip(parts, (0.7, 0.15, 0.15)):
        for c, n in ((0, n0), (1, n1)):
            assert abs((labels[part] == c).sum() - n * ratio) < 1 + 1e-9


# -- training loop


def test_early_stopping_counter():
    es = EarlyStopping(patience=2)
    assert es.update(1, 0.5) and not es.update(2, 0.5)
    assert not es.should_stop
    es.update(3, 0.4)
    assert es.should_stop and es.best_epoch == 1


def test_early_stop_scripted(tiny_data):
    script = [0.5, 0.7] + [0.6] * 100
    snapshots = {}
    tr, va = tiny_data.subset(range(14)), tiny_data.subset(range(14, 17))
    model = Model.init(TINY, RngStream(0))
    history, best = train_model(
        model,
        tr,
        va,
        NoAugment(),
        EARLY_STOP,
        RngStream(0, ("train",)),
        TrainOptions(lr=1e-3),
        val_metric=lambda m, epoch: script[epoch - 1],
        on_epoch=lambda m, rec: snapshots.setdefault(rec.epoch, m.copy()),
    )
    assert len(history) == 52 and best == 2
    assert model.equals(snapshots[2])
    assert not model.equals(snapshots[52])


def test_fixed_mode_runs_all_epochs(tiny_data):
    model = Model.init(TINY, RngStream(0))
    opts = TrainOptions(epochs=150, patience=1, batch_size=8)
    history, _ = train_model(model, tiny_data.subset(range(8)), tiny_data.subset(range(8, 12)), NoAugment(), FIXED, RngStream(1), opts)
    assert len(history) == 150
    assert [h.epoch for h in history] == list(range(1, 151))


def test_run_fold_deterministic_across_workers(tiny_data):
    spec = Compose((FlipX(), Rotate(15)))
    a = run_fold(tiny_data, TINY, spec, FIXED, 7, TrainOptions(epochs=3, workers=1))
    b = run_fold(tiny_data, TINY, spec, FIXED, 7, TrainOptions(epochs=3, workers=4))
    assert a.history == b.history and a.test_acc == b.test_acc
    assert a.model.equals(b.model)


def test_cross_validate_reuses_completed(tiny_data):
    opts = TrainOptions(epochs=2)
    full = cross_validate(tiny_data, TINY, NoAugment(), FIXED, 10, n_folds=2, options=opts)
    seen = []
    again = cross_validate(
        tiny_data, TINY, NoAugment(), FIXED, 10, n_folds=2, options=opts, completed={0: full.folds[0]}, on_fold=seen.append
    )
    assert [f.fold for f in seen] == [1]
    assert again.accuracies == full.accuracies
    assert full.label == "none"


# -- reporting


def test_accuracy_threshold():
    assert accuracy([0.5, 0.49, 0.9], [1, 0, 0]) == pytest.approx(2 / 3)


def test_report_statistics():
    r = _report("x", [0.6, 0.7])
    assert r.mean == pytest.approx(0.65)
    assert r.std == pytest.approx(0.0707, abs=1e-4)
    assert sample_std([0.5]) == 0.0


def test_report_csv_deterministic(tmp_path):
    r = _report("x", [0.6, 0.7, 0.8125])
    r.write_summary_csv(tmp_path / "a.csv")
    _report("x", [0.6, 0.7, 0.8125]).write_summary_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    row = (tmp_path / "a.csv").read_text().splitlines()[1].split(",")
    assert float(row[2]) == r.mean and float(row[3]) == r.std


def test_compare_to_baseline():
    base = _report("none", [0.5, 0.6])
    assert compare_to_baseline(_report("a", [0.55, 0.65]), base) == pytest.approx(5.0)
    assert compare_to_baseline(base, base) == 0.0
    with pytest.raises(ModeMismatch):
        compare_to_baseline(_report("a", [0.5, 0.6], EARLY_STOP), base)
    with pytest.raises(ModeMismatch):
        compare_to_baseline(_report("a", [0.5, 0.6, 0.7]), base)


# -- test-time augmentation


def test_tta_no_augment_equals_forward(rng):
    model = Model.init(TINY, RngStream(2))
    vol = Volume3(rng.normal(size=SHAPE))
    assert tta_evaluate(model, vol, NoAugment(), 10, RngStream(0)) == forward(model, vol)


def test_tta_single_copy_and_average(rng):
    from augment3d.augment import apply_pipeline

    model = Model.init(TINY, RngStream(2))
    vol = Volume3(rng.normal(size=SHAPE))
    spec = Scale(0.1)
    one = tta_evaluate(model, vol, spec, 1, RngStream(4))
    assert one == forward(model, apply_pipeline(vol, spec, RngStream(4).child(0)))
    avg = tta_evaluate(model, vol, spec, 5, RngStream(4))
    ref = np.mean([forward(model, apply_pipeline(vol, spec, RngStream(4).child(i))) for i in range(5)])
    assert avg == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        tta_evaluate(model, vol, spec, 0, RngStream(4))
