"""
Cross-validated training of the exemplar network.

Every round holds out the patients of one fold for testing. Of the remaining
patients one more is held out for model selection. Normalization parameters
and the exemplar pool come from the training patients only.
"""
import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ModelConfig, RunConfig, TrainingConfig
from .data import DatasetBundle
from .errors import ContractError, DataError, NonFiniteError
from .index import ExemplarIndex
from .model import EgnModel
from .objectives import (
    Folds,
    MetricReport,
    NormalizationParams,
    evaluate,
    l2_loss,
    normalize_targets,
    pcc_loss,
)
from .optim import AdamW, learning_rate
from .tensor import Tape, Tensor, backward

__all__ = (
    "FoldSplit",
    "PreparedFold",
    "EpochRecord",
    "FoldResult",
    "split_fold",
    "prepare_fold",
    "train_fold",
    "predict",
    "run_cross_validation",
    "evaluate_run",
    "folds_from_patients",
    "write_loss_curve",
)

logger = logging.getLogger(__name__)

# Below this many training patients nobody is spared for validation: the
# remaining training windows would find no cross-patient exemplars.
MIN_PATIENTS_FOR_VALIDATION = 3


@dataclass
class FoldSplit:
    """
    Bundle rows of one cross-validation round.

    :param validation_patient: Training patient held out for model selection,
        or None when there are too few training patients.
    """

    fold: int
    train_rows: np.ndarray
    validation_rows: np.ndarray
    test_rows: np.ndarray
    validation_patient: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fold": self.fold,
            "validation_patient": self.validation_patient,
            "train": len(self.train_rows),
            "validation": len(self.validation_rows),
            "test": len(self.test_rows),
        }


def split_fold(bundle: DatasetBundle, folds: Folds, fold: int) -> FoldSplit:
    """
    Test rows are the windows of `fold`. The training patient with the
    largest id becomes the validation patient.
    """
    if fold not in set(folds.patient_fold.values()):
        raise ContractError(f"There is no fold {fold!r}.")
    test_rows = folds.test_rows(fold)
    training_patients = sorted(p for p, f in folds.patient_fold.items() if f != fold)
    if len(training_patients) < MIN_PATIENTS_FOR_VALIDATION:
        return FoldSplit(fold, folds.train_rows(fold), np.zeros(0, dtype=np.int64), test_rows)

    held_out = training_patients[-1]
    in_training = folds.window_fold != fold
    validation_mask = in_training & (bundle.patient_ids == held_out)
    return FoldSplit(
        fold=fold,
        train_rows=np.flatnonzero(in_training & ~validation_mask),
        validation_rows=np.flatnonzero(validation_mask),
        test_rows=test_rows,
        validation_patient=held_out,
    )


def folds_from_patients(bundle: DatasetBundle, patient_fold: Dict[int, int]) -> Folds:
    "Rebuild `Folds` from a stored patient-to-fold assignment."
    missing = [p for p in bundle.patients() if p not in patient_fold]
    if missing:
        raise DataError(f"Patients {missing!r} have no fold assignment.")
    window_fold = np.array([patient_fold[int(p)] for p in bundle.patient_ids], dtype=np.int64)
    return Folds(patient_fold=dict(patient_fold), window_fold=window_fold)


@dataclass
class PreparedFold:
    """
    Everything one round trains and evaluates on, aligned with the bundle
    rows.

    :param targets: (N, M) expression normalized with the fold's parameters.
    :param views: (N, D) global views.
    :param exemplars: (N, k) positions into `pool`.
    """

    split: FoldSplit
    params: NormalizationParams
    targets: np.ndarray
    views: np.ndarray
    pool: ExemplarIndex
    exemplars: np.ndarray
    distances: np.ndarray
    metric: str

    def batch(self, bundle: DatasetBundle, rows: np.ndarray) -> Tuple[np.ndarray, ...]:
        "``(windows, views, exemplar views, exemplar expressions, targets)``"
        positions = self.exemplars[rows]
        return (
            bundle.windows[rows],
            self.views[rows],
            self.pool.views[positions],
            self.pool.expressions[positions],
            self.targets[rows],
        )


def prepare_fold(
    bundle: DatasetBundle,
    index: ExemplarIndex,
    split: FoldSplit,
    k: int,
    metric: str = "l2",
) -> PreparedFold:
    """
    Normalize with parameters fitted on the training and validation rows,
    then retrieve k exemplars for every window from the training rows.

    :param index: Global views of every window of `bundle`. Its stored
        expressions are replaced by the fold's normalized targets.
    """
    training_rows = np.sort(np.concatenate([split.train_rows, split.validation_rows]))
    _, params = normalize_targets(bundle.raw_expression[training_rows])
    targets, _ = normalize_targets(bundle.raw_expression, params)

    views = index.subset(bundle.window_ids).views
    pool = index.subset(bundle.window_ids[split.train_rows]).with_expressions(
        targets[split.train_rows]
    )
    exemplars, distances = pool.retrieve_all(
        views, bundle.patient_ids, k, metric, window_ids=bundle.window_ids
    )
    logger.info(
        "fold %d: %d train, %d validation, %d test windows; %d-entry exemplar pool",
        split.fold,
        len(split.train_rows),
        len(split.validation_rows),
        len(split.test_rows),
        len(pool),
    )
    return PreparedFold(split, params, targets, views, pool, exemplars, distances, metric)


@dataclass
class EpochRecord:
    fold: int
    epoch: int
    lr: float
    loss: float
    l2: float
    pcc: float
    validation_pcc_at_m: float


@dataclass
class FoldResult:
    """
    :param predictions: (T, M) normalized predictions for the test rows of
        the selected model.
    """

    fold: int
    model: EgnModel
    prepared: PreparedFold
    best_epoch: int
    predictions: np.ndarray
    log: List[EpochRecord] = field(default_factory=list)

    @property
    def targets(self) -> np.ndarray:
        return self.prepared.targets[self.prepared.split.test_rows]


def predict(
    model: EgnModel,
    bundle: DatasetBundle,
    prepared: PreparedFold,
    rows: np.ndarray,
    batch_size: int = 64,
) -> np.ndarray:
    "Normalized predictions (len(rows), M). Nothing is recorded for gradients."
    parts = []
    for start in range(0, len(rows), batch_size):
        batch = prepared.batch(bundle, rows[start : start + batch_size])
        windows, views, ex_views, ex_expr, _ = batch
        parts.append(model(windows, views, ex_views, ex_expr).numpy())
    if not parts:
        return np.zeros((0, bundle.num_genes))
    return np.concatenate(parts, axis=0)


def _batches(rows: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """
    Consecutive slices of `rows`. A trailing single row is folded into the
    previous batch, the correlation loss needs two.
    """
    batches = [rows[i : i + batch_size] for i in range(0, len(rows), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def _validation_score(
    model: EgnModel, bundle: DatasetBundle, prepared: PreparedFold
) -> float:
    rows = prepared.split.validation_rows
    if len(rows) < 2:
        return float("nan")
    predictions = predict(model, bundle, prepared, rows)
    try:
        return evaluate(predictions, prepared.targets[rows]).pcc_at_m
    except DataError:
        return float("nan")


def train_fold(
    bundle: DatasetBundle,
    prepared: PreparedFold,
    model_config: ModelConfig,
    training: TrainingConfig,
    seed: int = 0,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> FoldResult:
    """
    Train one model on ``L_2 + L_pcc`` and keep the parameters of the epoch
    with the best validation PCC@M (the last epoch without a validation
    patient).

    :param on_epoch: Called after every epoch with its log row.
    """
    fold = prepared.split.fold
    train_rows = prepared.split.train_rows
    if len(train_rows) < 2:
        raise ContractError(f"Fold {fold} has {len(train_rows)} training windows, need at least 2.")

    model = EgnModel(model_config, variant=training.variant, seed=seed)
    optimizer = AdamW(model.parameters(), lr=training.lr, weight_decay=training.weight_decay)

    log: List[EpochRecord] = []
    best_score = -np.inf
    best_epoch = -1
    best_state: Dict[str, np.ndarray] = {}

    for epoch in range(training.epochs):
        optimizer.lr = learning_rate(training.scheduler, epoch, training.epochs, training.lr)
        order = np.random.default_rng([seed, fold, epoch]).permutation(train_rows)
        totals = np.zeros(3)
        batches = _batches(order, training.batch_size)

        for step, rows in enumerate(batches):
            windows, views, ex_views, ex_expr, targets = prepared.batch(bundle, rows)
            optimizer.zero_grad()
            with Tape():
                prediction = model(Tensor(windows), views, ex_views, ex_expr)
                l2 = l2_loss(prediction, targets)
                pcc = pcc_loss(prediction, targets)
                loss = l2 + pcc
                if not np.isfinite(loss.item()):
                    where = f"fold {fold}, epoch {epoch}, step {step}"
                    logger.error("Training loss became %r at %s", loss.item(), where)
                    raise NonFiniteError(
                        f"Training loss is {loss.item()!r} at {where}.", where=where
                    )
                backward(loss)
            optimizer.step()
            totals += (loss.item(), l2.item(), pcc.item())

        loss_mean, l2_mean, pcc_mean = (float(v) for v in totals / len(batches))
        score = _validation_score(model, bundle, prepared)
        record = EpochRecord(fold, epoch, optimizer.lr, loss_mean, l2_mean, pcc_mean, score)
        log.append(record)
        logger.info(
            "fold %d epoch %d: lr %.3g, loss %.5f (l2 %.5f, pcc %.5f), validation PCC@M %.4f",
            fold, epoch, record.lr, loss_mean, l2_mean, pcc_mean, score,
        )
        if on_epoch is not None:
            on_epoch(record)

        # NaN scores never win; without validation the last epoch does.
        if np.isnan(score):
            score = -np.inf if len(prepared.split.validation_rows) >= 2 else float(epoch)
        if score > best_score or best_epoch < 0:
            best_score = score
            best_epoch = epoch
            best_state = model.state_dict()

    model.load_state_dict(best_state)
    logger.info("fold %d: selected epoch %d", fold, best_epoch)
    predictions = predict(model, bundle, prepared, prepared.split.test_rows)
    return FoldResult(fold, model, prepared, best_epoch, predictions, log)


def run_cross_validation(
    bundle: DatasetBundle,
    index: ExemplarIndex,
    folds: Folds,
    config: RunConfig,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> List[FoldResult]:
    "Train and test one model per fold, in fold order."
    results = []
    for fold in sorted(set(folds.patient_fold.values())):
        split = split_fold(bundle, folds, fold)
        prepared = prepare_fold(bundle, index, split, config.retrieval.k, config.retrieval.metric)
        results.append(
            train_fold(
                bundle,
                prepared,
                config.model,
                config.training,
                seed=config.training.seed,
                on_epoch=on_epoch,
            )
        )
    return results


def evaluate_run(
    predictions: Sequence[np.ndarray], targets: Sequence[np.ndarray], genes: Sequence[str] = ()
) -> Tuple[MetricReport, List[MetricReport]]:
    """
    Per-fold metrics, and their combination over the run.

    Folds are normalized differently, so correlations are never computed
    across folds: the run's per-gene correlation is the mean over the folds
    where that gene is defined, and MSE and MAE are window-weighted means.
    """
    if len(predictions) != len(targets) or not len(predictions):
        raise ContractError("evaluate_run() needs one prediction matrix per fold.")
    per_fold = [evaluate(p, t, genes) for p, t in zip(predictions, targets)]

    weights = np.array([len(t) for t in targets], dtype=np.float64)
    table = np.array([report.pcc for report in per_fold])
    defined = ~np.isnan(table)
    counts = defined.sum(axis=0)
    pcc = np.full(table.shape[1], np.nan)
    pcc[counts > 0] = np.where(defined, table, 0.0).sum(axis=0)[counts > 0] / counts[counts > 0]
    values = pcc[~np.isnan(pcc)]

    overall = MetricReport(
        mse=float(np.average([r.mse for r in per_fold], weights=weights)),
        mae=float(np.average([r.mae for r in per_fold], weights=weights)),
        pcc=pcc,
        pcc_at_f=float(np.percentile(values, 25)),
        pcc_at_s=float(np.median(values)),
        pcc_at_m=float(np.mean(values)),
        undefined_genes=[int(g) for g in np.flatnonzero(counts == 0)],
        genes=list(genes),
    )
    return overall, per_fold


def write_loss_curve(rows: Sequence[Any], path: str) -> None:
    "One CSV line per dataclass row, columns in field order."
    if not rows:
        raise ContractError("There are no epochs to write.")
    names = [f.name for f in dataclasses.fields(rows[0])]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(names)
        for row in rows:
            writer.writerow(
                [repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(row)]
            )
