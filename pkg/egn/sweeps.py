"""
Ablation sweeps: the same cross-validated run repeated over a grid of
settings and training seeds.
"""
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import linear_probe, ridge_baseline
from .config import VARIANTS, RunConfig
from .data import DatasetBundle
from .errors import ConfigError
from .index import ExemplarIndex
from .objectives import Folds, normalize_targets
from .training import evaluate_run, run_cross_validation, split_fold

__all__ = (
    "SWEEP_KINDS",
    "SweepRow",
    "sweep_settings",
    "run_setting",
    "run_sweep",
    "summarize",
    "write_sweep",
)

logger = logging.getLogger(__name__)

SWEEP_KINDS = ("k", "variant", "metric", "eb")
RIDGE_COLOUR = "ridge_colour"
RIDGE_VIEW = "ridge_view"
RIDGE_VIEW_SHUFFLED = "ridge_view_shuffled"
REFERENCES = (RIDGE_COLOUR, RIDGE_VIEW, RIDGE_VIEW_SHUFFLED)

Setting = Tuple[str, List[str]]


@dataclass
class SweepRow:
    kind: str
    setting: str
    seed: int
    pcc_at_f: float
    pcc_at_s: float
    pcc_at_m: float
    mse: float
    mae: float


def sweep_settings(kind: str) -> List[Setting]:
    """
    ``(name, overrides)`` for every setting of a sweep. The variant sweep
    ends with the reference regressors, which take no overrides.
    """
    if kind == "k":
        return [(f"k={k}", [f"retrieval.k={k}", f"model.num_exemplars={k}"]) for k in (1, 2, 4, 8)]
    if kind == "variant":
        return [(v, [f"training.variant={v}"]) for v in VARIANTS] + [(r, []) for r in REFERENCES]
    if kind == "metric":
        return [(m, [f"retrieval.metric={m}"]) for m in ("l2", "l1", "cosine")]
    if kind == "eb":
        return [
            (
                f"heads={heads},dim={dim},every={every}",
                [f"model.eb_heads={heads}", f"model.eb_head_dim={dim}", f"model.eb_frequency={every}"],
            )
            for heads in (2, 4)
            for dim in (8, 16)
            for every in (1, 2)
        ]
    raise ConfigError([f"Unknown sweep {kind!r}; expected one of {SWEEP_KINDS!r}."])


def _reference_run(
    name: str, seed: int, bundle: DatasetBundle, index: ExemplarIndex, folds: Folds
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    Per fold, fit a reference regressor on the training and validation
    patients and predict the test patients. Targets are normalized with the
    training rows only.
    """
    # Global views in bundle row order.
    views = index.subset(bundle.window_ids).views
    predictions, targets = [], []
    for fold in sorted(set(folds.patient_fold.values())):
        split = split_fold(bundle, folds, fold)
        training_rows = np.sort(np.concatenate([split.train_rows, split.validation_rows]))
        test_rows = split.test_rows
        fitted, params = normalize_targets(bundle.raw_expression[training_rows])
        test_targets, _ = normalize_targets(bundle.raw_expression[test_rows], params)

        if name == RIDGE_COLOUR:
            predicted = ridge_baseline(
                bundle.windows[training_rows], fitted, bundle.windows[test_rows]
            )
        else:
            on_views, control = linear_probe(
                views[training_rows], fitted, views[test_rows], seed=seed
            )
            predicted = on_views if name == RIDGE_VIEW else control
        predictions.append(predicted)
        targets.append(test_targets)
    return predictions, targets


def run_setting(
    kind: str,
    name: str,
    overrides: List[str],
    seed: int,
    config: RunConfig,
    bundle: DatasetBundle,
    index: ExemplarIndex,
    folds: Folds,
) -> SweepRow:
    "One cross-validated run of one setting."
    if kind == "variant" and name in REFERENCES:
        predictions, targets = _reference_run(name, seed, bundle, index, folds)
    else:
        run_config = config.with_overrides(overrides + [f"training.seed={seed}"]).validate()
        results = run_cross_validation(bundle, index, folds, run_config)
        predictions = [r.predictions for r in results]
        targets = [r.targets for r in results]
    report, _ = evaluate_run(predictions, targets, bundle.genes)
    logger.info("sweep %s, %s, seed %d: PCC@M %.4f", kind, name, seed, report.pcc_at_m)
    return SweepRow(
        kind, name, seed, report.pcc_at_f, report.pcc_at_s, report.pcc_at_m, report.mse, report.mae
    )


def run_sweep(
    kind: str,
    seeds: Sequence[int],
    config: RunConfig,
    bundle: DatasetBundle,
    index: ExemplarIndex,
    folds: Folds,
    workers: int = 1,
    on_row: Optional[Callable[[SweepRow], None]] = None,
) -> List[SweepRow]:
    """
    Every setting of `kind` for every seed. With more than one worker the
    runs go to a process pool; rows come back in grid order either way.
    """
    jobs = [
        (kind, name, overrides, seed)
        for name, overrides in sweep_settings(kind)
        for seed in seeds
    ]
    rows: List[SweepRow] = []
    if workers <= 1:
        for job in jobs:
            rows.append(run_setting(*job, config, bundle, index, folds))
            if on_row is not None:
                on_row(rows[-1])
        return rows

    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_setting, *job, config, bundle, index, folds) for job in jobs]
        for future in futures:
            rows.append(future.result())
            if on_row is not None:
                on_row(rows[-1])
    return rows


def summarize(rows: Sequence[SweepRow]) -> List[Tuple[str, int, float, float]]:
    "``(setting, runs, median PCC@M, interquartile range)`` in first-seen order."
    names: List[str] = []
    for row in rows:
        if row.setting not in names:
            names.append(row.setting)
    result = []
    for name in names:
        values = np.array([r.pcc_at_m for r in rows if r.setting == name])
        q1, q3 = np.percentile(values, [25, 75])
        result.append((name, len(values), float(np.median(values)), float(q3 - q1)))
    return result


def write_sweep(rows: Sequence[SweepRow], path: str, summary_path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["kind", "setting", "seed", "pcc_at_f", "pcc_at_s", "pcc_at_m", "mse", "mae"]
        )
        for r in rows:
            writer.writerow(
                [r.kind, r.setting, r.seed]
                + [repr(v) for v in (r.pcc_at_f, r.pcc_at_s, r.pcc_at_m, r.mse, r.mae)]
            )
    with open(summary_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["setting", "runs", "median_pcc_at_m", "iqr_pcc_at_m"])
        for name, runs, median, iqr in summarize(rows):
            writer.writerow([name, runs, repr(median), repr(iqr)])
