"""
Target normalization, training losses and evaluation metrics.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import canonical_json
from .data import DatasetBundle
from .errors import ConfigError, ContractError, DataError, DimensionError
from .tensor import Tensor, as_tensor

__all__ = (
    "EPSILON",
    "NormalizationParams",
    "fit_normalization",
    "normalize_targets",
    "denormalize_targets",
    "l2_loss",
    "pcc_loss",
    "loss_total",
    "pearson_per_gene",
    "MetricReport",
    "evaluate",
    "Folds",
    "make_folds",
)

logger = logging.getLogger(__name__)

EPSILON = 1e-8


@dataclass
class NormalizationParams:
    "Per-gene range of ``log1p`` expression on the training windows."

    minimum: np.ndarray
    maximum: np.ndarray
    eps: float = EPSILON

    def to_dict(self) -> Dict[str, Any]:
        return {
            "minimum": self.minimum.tolist(),
            "maximum": self.maximum.tolist(),
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "NormalizationParams":
        return cls(
            minimum=np.asarray(values["minimum"], dtype=np.float64),
            maximum=np.asarray(values["maximum"], dtype=np.float64),
            eps=float(values["eps"]),
        )


def _check_raw(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise DimensionError(f"Expression must be an (N, M) matrix, got shape {raw.shape}.")
    if raw.size and raw.min() < 0:
        row, gene = np.argwhere(raw < 0)[0]
        raise DataError(f"Negative expression at row {row}, gene {gene}: {raw[row, gene]!r}.")
    return raw


def fit_normalization(raw: np.ndarray) -> NormalizationParams:
    logged = np.log1p(_check_raw(raw))
    if not len(logged):
        raise DataError("Cannot fit normalization on zero windows.")
    return NormalizationParams(minimum=logged.min(axis=0), maximum=logged.max(axis=0))


def normalize_targets(
    raw: np.ndarray, params: Optional[NormalizationParams] = None
) -> Tuple[np.ndarray, NormalizationParams]:
    """
    ``log1p`` followed by a per-gene min-max scaling.

    :param params: Reuse these (fitted on the training windows) instead of
        fitting on `raw`. Values of other windows may then fall outside [0, 1].
    """
    raw = _check_raw(raw)
    if params is None:
        params = fit_normalization(raw)
    if params.minimum.shape != (raw.shape[1],):
        raise DimensionError(
            f"Normalization is for {params.minimum.shape[0]} genes, data has {raw.shape[1]}."
        )
    scale = params.maximum - params.minimum + params.eps
    return (np.log1p(raw) - params.minimum) / scale, params


def denormalize_targets(normalized: np.ndarray, params: NormalizationParams) -> np.ndarray:
    scale = params.maximum - params.minimum + params.eps
    return np.expm1(np.asarray(normalized, dtype=np.float64) * scale + params.minimum)


def _check_batch(prediction: Tensor, target: np.ndarray) -> None:
    if prediction.shape != target.shape or prediction.ndim != 2:
        raise DimensionError(
            f"Prediction {prediction.shape} and target {target.shape} must be equal (B, M) shapes."
        )


def l2_loss(prediction: Tensor, target: np.ndarray) -> Tensor:
    "Mean squared error over all cells."
    target = np.asarray(target, dtype=np.float64)
    _check_batch(prediction, target)
    diff = prediction - target
    return (diff * diff).mean()


def pcc_loss(prediction: Tensor, target: np.ndarray, eps: float = EPSILON) -> Tensor:
    """
    Mean over genes of ``1 - pcc_g``, the correlation taken across the batch.

    Genes whose target is constant in the batch count as uncorrelated, so
    they contribute 1.
    """
    target = np.asarray(target, dtype=np.float64)
    _check_batch(prediction, target)
    if target.shape[0] < 2:
        raise ContractError(
            f"The correlation loss needs a batch of at least 2, got {target.shape[0]}."
        )

    varying = np.ptp(target, axis=0) > 0
    t = np.where(varying, target - target.mean(axis=0), 0.0)
    t_norm = np.sqrt((t * t).sum(axis=0))

    p = prediction - prediction.mean(axis=0, keepdims=True)
    p_norm = ((p * p).sum(axis=0) + eps * eps).sqrt()
    pcc = (p * t).sum(axis=0) / (p_norm * t_norm + eps)
    return (1.0 - pcc).mean()


def loss_total(prediction: Tensor, target: np.ndarray) -> Tensor:
    "``L_2 + L_pcc``."
    prediction = as_tensor(prediction)
    return l2_loss(prediction, target) + pcc_loss(prediction, target)


def pearson_per_gene(predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """
    Correlation of every gene column across windows. NaN where the target
    is constant; 0 where only the prediction is.
    """
    p = predictions - predictions.mean(axis=0)
    t = targets - targets.mean(axis=0)
    result = np.full(targets.shape[1], np.nan)
    for g in range(targets.shape[1]):
        if np.ptp(targets[:, g]) == 0:
            continue
        if np.ptp(predictions[:, g]) == 0:
            result[g] = 0.0
            continue
        denominator = math.sqrt(float(p[:, g] @ p[:, g]) * float(t[:, g] @ t[:, g]))
        result[g] = min(1.0, max(-1.0, float(p[:, g] @ t[:, g]) / denominator))
    return result


@dataclass
class MetricReport:
    """
    :param pcc: Per-gene correlation, NaN for genes listed in
        `undefined_genes`.
    """

    mse: float
    mae: float
    pcc: np.ndarray
    pcc_at_f: float
    pcc_at_s: float
    pcc_at_m: float
    undefined_genes: List[int] = field(default_factory=list)
    genes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mse": self.mse,
            "mae": self.mae,
            "pcc_at_f": self.pcc_at_f,
            "pcc_at_s": self.pcc_at_s,
            "pcc_at_m": self.pcc_at_m,
            "pcc": [None if math.isnan(v) else float(v) for v in self.pcc],
            "undefined_genes": list(self.undefined_genes),
            "genes": list(self.genes),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def write_json(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    def write_csv(self, path: str) -> None:
        "One row per gene, then one summary row."
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(
                ["row", "gene", "pcc", "mse", "mae", "pcc_at_f", "pcc_at_s", "pcc_at_m"]
            )
            for g, value in enumerate(self.pcc):
                name = self.genes[g] if g < len(self.genes) else str(g)
                cell = "" if math.isnan(value) else repr(float(value))
                writer.writerow(["gene", name, cell] + [""] * 5)
            writer.writerow(
                ["summary", "", ""]
                + [
                    repr(v)
                    for v in (self.mse, self.mae, self.pcc_at_f, self.pcc_at_s, self.pcc_at_m)
                ]
            )


def evaluate(
    predictions: np.ndarray, targets: np.ndarray, genes: Sequence[str] = ()
) -> MetricReport:
    """
    MSE and MAE over all cells, and the first quartile (linear
    interpolation), median and mean of the per-gene correlations.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 2:
        raise DimensionError(
            f"Predictions {predictions.shape} and targets {targets.shape} must be equal (N, M) shapes."
        )
    if targets.shape[0] < 2:
        raise ContractError(f"evaluate() needs at least 2 windows, got {targets.shape[0]}.")

    diff = predictions - targets
    pcc = pearson_per_gene(predictions, targets)
    undefined = [int(g) for g in np.flatnonzero(np.isnan(pcc))]
    defined = pcc[~np.isnan(pcc)]
    if not len(defined):
        raise DataError("Every gene has a constant target; correlations are undefined.")
    if undefined:
        logger.warning(
            "%d genes with constant targets left out of the correlations", len(undefined)
        )

    return MetricReport(
        mse=float(np.mean(diff * diff)),
        mae=float(np.mean(np.abs(diff))),
        pcc=pcc,
        pcc_at_f=float(np.percentile(defined, 25)),
        pcc_at_s=float(np.median(defined)),
        pcc_at_m=float(np.mean(defined)),
        undefined_genes=undefined,
        genes=list(genes),
    )


class Folds(NamedTuple):
    patient_fold: Dict[int, int]
    window_fold: np.ndarray

    def test_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.window_fold == fold)

    def train_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.window_fold != fold)


def make_folds(bundle: DatasetBundle, n_folds: int) -> Folds:
    """
    Partition the patients into `n_folds` groups, dealing them round-robin in
    order of decreasing window count (ties by patient id).
    """
    patients = bundle.patients()
    if n_folds < 1 or n_folds > len(patients):
        raise ConfigError(
            [f"Cannot make {n_folds} folds from {len(patients)} patients."]
        )
    sizes = {p: int(np.sum(bundle.patient_ids == p)) for p in patients}
    order = sorted(patients, key=lambda p: (-sizes[p], p))
    patient_fold = {p: i % n_folds for i, p in enumerate(order)}
    window_fold = np.array([patient_fold[int(p)] for p in bundle.patient_ids], dtype=np.int64)
    return Folds(patient_fold=patient_fold, window_fold=window_fold)
