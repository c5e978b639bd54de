"""Experiment protocol: stratified 70/15/15 splits, training with early
stopping or a fixed epoch budget, repeated-split cross validation,
test-time augmentation and mean/std reporting.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import AugmentSpec, NoAugment, apply_pipeline, spec_label
from .nn import AdamState, Model, ModelConfig, adam_step, bce_loss, forward, predict
from .nn import backward_with_probs
from .rng import RngStream
from .volume import Volume3

log = logging.getLogger(__name__)

EARLY_STOP = "early-stop"
FIXED = "fixed"
MODES = (EARLY_STOP, FIXED)
THRESHOLD = 0.5

FOLD_CSV_HEADER = ["spec", "mode", "fold", "test_acc", "best_epoch", "epochs_run", "seconds"]
SUMMARY_CSV_HEADER = ["spec", "mode", "mean_acc", "std_acc", "delta_pp_vs_baseline"]


class EmptyClass(ValueError):
    pass


class ModeMismatch(ValueError):
    pass


# -- data container -----------------------------------------------------------


@dataclass
class Dataset:
    volumes: List[Volume3]
    labels: np.ndarray  # 1 = positive (ASD), 0 = negative (control)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.volumes) != len(self.labels):
            raise ValueError(f"{len(self.volumes)} volumes but {len(self.labels)} labels")

    def __len__(self):
        return len(self.volumes)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[Volume3, int]]) -> "Dataset":
        return cls([v for v, _ in pairs], np.array([y for _, y in pairs]))

    def subset(self, idx) -> "Dataset":
        return Dataset([self.volumes[i] for i in idx], self.labels[np.asarray(idx, dtype=np.int64)])

    @property
    def shape(self):
        return self.volumes[0].shape


# -- splitting ----------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        if len(self.ratios) != 3 or min(self.ratios) <= 0:
            raise ValueError(f"split ratios must be three positive numbers, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(self.ratios)}")


def largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    """Apportion ``total`` by ``ratios``; leftover units go to the largest
    fractional parts (earlier entries win ties)."""
    quotas = [total * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _apportion(class_sizes: Sequence[int], set_sizes: Sequence[int], ratios) -> np.ndarray:
    """Integer (class x set) table with the given margins, each cell within
    one of its proportional quota ``n_class * ratio``."""
    quotas = np.array([[n * r for r in ratios] for n in class_sizes])
    table = np.floor(quotas).astype(np.int64)
    frac = quotas - table
    row_def = np.asarray(class_sizes) - table.sum(axis=1)
    col_def = np.asarray(set_sizes) - table.sum(axis=0)
    # Ryser-style fill: biggest row deficits first, each into the columns
    # with the most remaining room (ties by fractional part, then order)
    for c in sorted(range(len(class_sizes)), key=lambda c: (-row_def[c], c)):
        cols = sorted(range(len(set_sizes)), key=lambda s: (-col_def[s], -frac[c, s], s))
        for s in cols[: row_def[c]]:
            if col_def[s] <= 0:
                raise RuntimeError("split apportionment failed")  # unreachable for valid margins
            table[c, s] += 1
            col_def[s] -= 1
        row_def[c] = 0
    return table


def stratified_split(labels, spec: SplitSpec = SplitSpec(), rng: Optional[RngStream] = None):
    """Disjoint, exhaustive train/val/test index arrays.

    Set sizes come from largest-remainder rounding of the ratios over all
    samples; with ``stratify`` each class contributes to each set within
    one sample of its proportional share.

    Raises:
        EmptyClass: if either label is absent.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = rng or RngStream(spec.seed, ("split",))
    classes = [0, 1]
    members = {c: np.flatnonzero(labels == c) for c in classes}
    for c in classes:
        if len(members[c]) == 0:
            raise EmptyClass(f"no samples with label {c}")
    if len(members[0]) + len(members[1]) != len(labels):
        raise ValueError("labels must be 0 or 1")

    set_sizes = largest_remainder(len(labels), spec.ratios)
    sets: List[List[int]] = [[], [], []]
    if spec.stratify:
        table = _apportion([len(members[c]) for c in classes], set_sizes, spec.ratios)
        for ci, c in enumerate(classes):
            perm = members[c][rng.child("class", c).permutation(len(members[c]))]
            start = 0
            for s in range(3):
                sets[s].extend(perm[start : start + table[ci, s]].tolist())
                start += table[ci, s]
    else:
        perm = rng.child("all").permutation(len(labels))
        start = 0
        for s in range(3):
            sets[s].extend(perm[start : start + set_sizes[s]].tolist())
            start += set_sizes[s]
    return tuple(np.array(sorted(s), dtype=np.int64) for s in sets)


# -- training -----------------------------------------------------------------


@dataclass
class TrainOptions:
    epochs: int = 150  # fixed mode
    patience: int = 50
    max_epochs: int = 1000  # early-stop ceiling
    batch_size: int = 16
    lr: float = 1e-5
    workers: int = 1
    split: SplitSpec = field(default_factory=SplitSpec)
    tta_k: int = 0  # >0 also reports a TTA test accuracy


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


class EarlyStopping:
    """Tracks the best validation accuracy; strict improvements only.

    ``should_stop`` turns true once ``patience`` epochs have passed since
    the last improvement.
    """

    def __init__(self, patience: int = 50):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


def accuracy(probs, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    pred = (np.asarray(probs) >= THRESHOLD).astype(np.int64)
    return int((pred == labels).sum()) / len(labels)


def _augment_batch(vols, idx, spec, rng, epoch, pool):
    if isinstance(spec, NoAugment):
        return [vols[i].data for i in idx]

    def one(i):
        return apply_pipeline(vols[i], spec, rng.child(epoch, int(i))).data

    if pool is None:
        return [one(i) for i in idx]
    return list(pool.map(one, idx))


def evaluate(model: Model, data: Dataset, batch_size: int = 16) -> Tuple[float, float]:
    """``(loss, accuracy)`` on un-augmented volumes."""
    probs = predict(model, data.volumes, batch_size=batch_size)
    return bce_loss(probs, data.labels), accuracy(probs, data.labels)


def train_model(
    model: Model,
    train: Dataset,
    val: Dataset,
    spec: AugmentSpec,
    mode: str,
    rng: RngStream,
    options: TrainOptions = TrainOptions(),
    val_metric: Optional[Callable[[Model, int], float]] = None,
    on_epoch: Optional[Callable[[Model, EpochRecord], None]] = None,
):
    """Train in place; return ``(history, best_epoch)``.

    Training volumes are augmented per epoch with substream
    ``rng.child("aug").child(epoch, sample_index)``; validation volumes
    never are. In early-stop mode the weights of the best validation
    epoch are restored before returning.

    ``val_metric`` replaces the validation accuracy used for early
    stopping (its value is also recorded in the history).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    adam = AdamState.for_model(model, lr=options.lr)
    stopper = EarlyStopping(options.patience)
    best_state = model.state()
    history: List[EpochRecord] = []
    aug_rng = rng.child("aug")
    limit = options.epochs if mode == FIXED else options.max_epochs
    pool = ThreadPoolExecutor(options.workers) if options.workers > 1 else None
    bs = options.batch_size
    try:
        for epoch in range(1, limit + 1):
            order = rng.child("shuffle", epoch).permutation(len(train))
            loss_sum, correct = 0.0, 0
            for start in range(0, len(order), bs):
                idx = order[start : start + bs]
                x = np.stack(_augment_batch(train.volumes, idx, spec, aug_rng, epoch, pool))
                y = train.labels[idx]
                grads, loss, probs = backward_with_probs(model, x, y)
                adam_step(model, grads, adam)
                loss_sum += loss * len(idx)
                correct += int(((probs >= THRESHOLD).astype(np.int64) == y).sum())

            val_loss, val_acc = evaluate(model, val, bs)
            if val_metric is not None:
                val_acc = float(val_metric(model, epoch))
            rec = EpochRecord(epoch, loss_sum / len(train), correct / len(train), val_loss, val_acc)
            history.append(rec)
            if stopper.update(epoch, val_acc):
                best_state = model.state()
            if on_epoch is not None:
                on_epoch(model, rec)
            log.debug("epoch %d loss %.4f acc %.3f val_acc %.3f", epoch, rec.train_loss, rec.train_acc, val_acc)
            if mode == EARLY_STOP and stopper.should_stop:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    if mode == EARLY_STOP:
        model.load_state(best_state)
    return history, stopper.best_epoch


# -- folds and reports --------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    test_acc: float
    best_epoch: int
    epochs_run: int
    history: List[EpochRecord]
    seconds: float
    n_test: int = 0
    n_correct: int = 0
    tta_acc: Optional[float] = None
    model: Optional[Model] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("model")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FoldResult":
        d = dict(d)
        d["history"] = [EpochRecord(**h) for h in d["history"]]
        return cls(**d)


def run_fold(
    dataset: Dataset,
    model_config: ModelConfig,
    aug_spec: AugmentSpec,
    mode: str,
    fold_seed: int,
    options: TrainOptions = TrainOptions(),
    fold: int = 0,
    **train_kwargs,
) -> FoldResult:
    """One split-train-test cycle driven entirely by ``fold_seed``."""
    t0 = time.perf_counter()
    split = SplitSpec(options.split.ratios, fold_seed, options.split.stratify)
    tr, va, te = stratified_split(dataset.labels, split, RngStream(fold_seed, ("split",)))
    if min(len(tr), len(va), len(te)) == 0:
        raise ValueError(f"empty split: {len(tr)}/{len(va)}/{len(te)}")
    model = Model.init(model_config, RngStream(fold_seed, ("init",)))
    history, best_epoch = train_model(
        model,
        dataset.subset(tr),
        dataset.subset(va),
        aug_spec,
        mode,
        RngStream(fold_seed, ("train",)),
        options,
        **train_kwargs,
    )
    test = dataset.subset(te)
    probs = predict(model, test.volumes, options.batch_size)
    n_correct = int(((probs >= THRESHOLD).astype(np.int64) == test.labels).sum())
    tta_acc = None
    if options.tta_k > 0:
        tta_rng = RngStream(fold_seed, ("tta",))
        tta_probs = [
            tta_evaluate(model, v, aug_spec, options.tta_k, tta_rng.child(i)) for i, v in enumerate(test.volumes)
        ]
        tta_acc = accuracy(tta_probs, test.labels)
    return FoldResult(
        fold=fold,
        test_acc=n_correct / len(te),
        best_epoch=best_epoch,
        epochs_run=len(history),
        history=history,
        seconds=time.perf_counter() - t0,
        n_test=len(te),
        n_correct=n_correct,
        tta_acc=tta_acc,
        model=model,
    )


def sample_std(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(np.std(v, ddof=1))


@dataclass
class ExperimentReport:
    label: str
    mode: str
    folds: List[FoldResult]
    delta_pp: Optional[float] = None

    @property
    def accuracies(self) -> List[float]:
        return [f.test_acc for f in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return sample_std(self.accuracies)

    def write_folds_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FOLD_CSV_HEADER)
            for f in self.folds:
                w.writerow([self.label, self.mode, f.fold, repr(f.test_acc), f.best_epoch, f.epochs_run, f"{f.seconds:.3f}"])

    def summary_row(self) -> List[str]:
        delta = "" if self.delta_pp is None else repr(self.delta_pp)
        return [self.label, self.mode, repr(self.mean), repr(self.std), delta]

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SUMMARY_CSV_HEADER)
            w.writerow(self.summary_row())


def cross_validate(
    dataset: Dataset,
    config: ModelConfig,
    aug_spec: AugmentSpec,
    mode: str,
    base_seed: int,
    n_folds: int = 10,
    options: TrainOptions = TrainOptions(),
    label: Optional[str] = None,
    completed: Optional[Dict[int, FoldResult]] = None,
    on_fold: Optional[Callable[[FoldResult], None]] = None,
) -> ExperimentReport:
    """Repeated independent stratified splits, fold ``k`` seeded ``base_seed + k``.

    Folds present in ``completed`` are reused instead of retrained.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    completed = completed or {}
    folds = []
    for k in range(n_folds):
        if k in completed:
            log.info("fold %d already complete, skipping", k)
            folds.append(completed[k])
            continue
        log.info("fold %d/%d (%s, %s)", k + 1, n_folds, label or spec_label(aug_spec), mode)
        res = run_fold(dataset, config, aug_spec, mode, base_seed + k, options, fold=k)
        log.info("fold %d test accuracy %.4f after %d epochs", k, res.test_acc, res.epochs_run)
        if on_fold is not None:
            on_fold(res)
        folds.append(res)
    return ExperimentReport(label or spec_label(aug_spec), mode, folds)


def tta_evaluate(model: Model, vol: Volume3, aug_spec: AugmentSpec, k: int, rng: RngStream) -> float:
    """Mean prediction over ``k`` independently augmented copies of ``vol``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if isinstance(aug_spec, NoAugment):
        return forward(model, vol)
    copies = [apply_pipeline(vol, aug_spec, rng.child(i)) for i in range(k)]
    if k == 1:
        return forward(model, copies[0])
    return float(np.mean(predict(model, copies)))


def compare_to_baseline(report: ExperimentReport, baseline: ExperimentReport) -> float:
    """Difference of mean test accuracy in percentage units."""
    if report.mode != baseline.mode:
        raise ModeMismatch(f"cannot compare {report.mode} with {baseline.mode}")
    if len(report.folds) != len(baseline.folds):
        raise ModeMismatch(f"fold counts differ: {len(report.folds)} vs {len(baseline.folds)}")
    return (report.mean - baseline.mean) * 100.0
