"""
Command line interface.

Every command reads its inputs from and writes its artifacts below the
configured output directory::

    egn gen-data
    egn train-extractor
    egn build-index
    egn retrieve --window-id 17
    egn train --variant full
    egn eval --run-name full
    egn gradcheck
    egn sweep --kind k --seeds 0,1,2
"""
import argparse
import contextlib
import json
import logging
import os
import sys
from typing import Callable, Iterator, List, Optional

import numpy as np
from prompt_toolkit import HTML, print_formatted_text
from prompt_toolkit.output import Output, create_output
from prompt_toolkit.output.plain_text import PlainTextOutput
from prompt_toolkit.shortcuts import ProgressBar

from .checkpoint import canonical_json, write_atomic
from .config import VARIANTS, RunConfig
from .data import MANIFEST_NAME, DatasetBundle, ingest_external, load_bundle, save_bundle
from .errors import EgnError
from .extractor import ExtractorModel, train_extractor
from .gradcheck import gradcheck
from .index import ExemplarIndex, build_index
from .model import EgnModel
from .objectives import loss_total, make_folds, normalize_targets
from .sweeps import SWEEP_KINDS, run_sweep, write_sweep
from .synth import gene_skewness, generate
from .training import (
    evaluate_run,
    folds_from_patients,
    predict,
    prepare_fold,
    run_cross_validation,
    split_fold,
    write_loss_curve,
)
from .utils import get_worker_count, output_path, require_artifact, run_lock

__all__ = ("main", "build_parser")

logger = logging.getLogger(__name__)


class Layout:
    "Artifact paths below one output directory."

    def __init__(self, output_dir: str) -> None:
        self.output_dir = output_dir
        self.config = output_path(output_dir, "config.json")
        self.data_dir = output_path(output_dir, "data")
        self.manifest = output_path(output_dir, "data", MANIFEST_NAME)
        self.extractor = output_path(output_dir, "extractor", "extractor.egnx")
        self.extractor_curve = output_path(output_dir, "extractor", "loss_curve.csv")
        self.index = output_path(output_dir, "index", "index.egni")
        self.gradcheck = output_path(output_dir, "gradcheck", "report.json")

    def run(self, name: str, *parts: str) -> str:
        return output_path(self.output_dir, "runs", name, *parts)

    def sweep(self, name: str) -> str:
        return output_path(self.output_dir, "sweeps", name)


def _output() -> Output:
    if sys.stdout.isatty():
        return create_output()
    return PlainTextOutput(sys.stdout)


def _say(template: str, *args: object) -> None:
    print_formatted_text(HTML(template).format(*args), output=_output())


@contextlib.contextmanager
def _progress(title: str, total: int) -> Iterator[Callable[[], None]]:
    "Yield a function to call once per completed step."
    if not sys.stdout.isatty():
        yield lambda: None
        return
    with ProgressBar(title=title) as bar:
        counter = bar(label=title, total=total)
        yield counter.item_completed
        counter.done = True


def _makedirs_for(path: str) -> str:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    return path


def _load_data(layout: Layout) -> DatasetBundle:
    require_artifact(layout.manifest, "gen-data")
    return load_bundle(layout.data_dir)


# Commands.


def cmd_gen_data(config: RunConfig, args: argparse.Namespace) -> int:
    layout = Layout(config.output_dir)
    data = config.data
    if data.source == "synthetic":
        bundle = generate(
            seed=data.seed,
            n_patients=data.n_patients,
            windows_per_patient=data.windows_per_patient,
            num_genes=config.model.num_genes,
            image_size=config.model.image_size,
            skew_fraction=data.skew_fraction,
            slides_per_patient=data.slides_per_patient,
            motifs_per_window=data.motifs_per_window,
        )
    else:
        bundle = ingest_external(
            data.manifest_path, config.model.image_size, config.model.num_genes
        )

    save_bundle(bundle, layout.data_dir)
    config.save(layout.config)
    skew = gene_skewness(bundle.raw_expression)
    _say(
        "<b>{}</b> windows of <b>{}</b> patients, {} genes (median skewness {:.2f}) written to {}",
        len(bundle),
        len(bundle.patients()),
        bundle.num_genes,
        float(np.median(skew)),
        layout.data_dir,
    )
    return 0


def cmd_train_extractor(config: RunConfig, args: argparse.Namespace) -> int:
    layout = Layout(config.output_dir)
    bundle = _load_data(layout)
    with _progress("extractor", config.extractor.epochs) as tick:
        model, log = train_extractor(
            bundle.windows,
            config.extractor,
            image_size=config.model.image_size,
            style_dim=config.model.style_dim,
            seed=config.data.seed,
            on_epoch=lambda row: tick(),
        )
    model.save(_makedirs_for(layout.extractor))
    write_loss_curve(log, layout.extractor_curve)
    _say("Extractor trained, final L1 <b>{:.5f}</b>; written to {}", log[-1].l1, layout.extractor)
    return 0


def cmd_build_index(config: RunConfig, args: argparse.Namespace) -> int:
    layout = Layout(config.output_dir)
    bundle = _load_data(layout)
    extractor = ExtractorModel.load(require_artifact(layout.extractor, "train-extractor"))
    targets, _ = normalize_targets(bundle.raw_expression)
    index = build_index(bundle, extractor, targets)
    index.save(_makedirs_for(layout.index))
    _say("Index of <b>{}</b> entries written to {}", len(index), layout.index)
    return 0


def cmd_retrieve(config: RunConfig, args: argparse.Namespace) -> int:
    layout = Layout(config.output_dir)
    index = ExemplarIndex.load(require_artifact(layout.index, "build-index"))
    entry = index.subset([args.window_id]).entry(0)
    result = index.query(
        entry.global_view,
        entry.patient_id,
        config.retrieval.k,
        config.retrieval.metric,
        query_window_id=entry.window_id,
    )
    _say(
        "Window <b>{}</b> (patient {}), {} nearest by {}:",
        entry.window_id, entry.patient_id, len(result), config.retrieval.metric,
    )
    for window_id, patient_id, distance in zip(
        result.window_ids, result.patient_ids, result.distances
    ):
        _say(
            "  window {:>6}  patient {:>4}  distance {:.6f}",
            int(window_id), int(patient_id), float(distance),
        )
    return 0


def _run_name(config: RunConfig, args: argparse.Namespace) -> str:
    return getattr(args, "run_name", None) or config.training.run_name or config.training.variant


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    layout = Layout(config.output_dir)
    bundle = _load_data(layout)
    require_artifact(layout.extractor, "train-extractor")
    index = ExemplarIndex.load(require_artifact(layout.index, "build-index"))
    name = _run_name(config, args)
    folds = make_folds(bundle, config.data.n_folds)

    total = config.training.epochs * config.data.n_folds
    with _progress(f"train {name}", total) as tick:
        results = run_cross_validation(bundle, index, folds, config, on_epoch=lambda row: tick())

    config.save(_makedirs_for(layout.run(name, "config.json")))
    for result in results:
        result.model.save(layout.run(name, f"model_fold{result.fold}.egnm"))
    write_loss_curve([row for r in results for row in r.log], layout.run(name, "loss_curve.csv"))
    record = {
        "patient_fold": {str(p): f for p, f in sorted(folds.patient_fold.items())},
        "folds": [
            dict(
                r.prepared.split.to_dict(),
                best_epoch=r.best_epoch,
                normalization=r.prepared.params.to_dict(),
            )
            for r in results
        ],
    }
    write_atomic(layout.run(name, "folds.json"), canonical_json(record).encode("utf-8"))

    for r in results:
        _say("fold {}: best epoch <b>{}</b> of {}", r.fold, r.best_epoch, config.training.epochs)
    _say("Run <b>{}</b> written to {}", name, layout.run(name))
    return 0


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    layout = Layout(config.output_dir)
    bundle = _load_data(layout)
    name = _run_name(config, args)
    with open(require_artifact(layout.run(name, "folds.json"), "train")) as f:
        record = json.load(f)
    run_config = RunConfig.load(layout.run(name, "config.json"))
    index = ExemplarIndex.load(require_artifact(layout.index, "build-index"))
    folds = folds_from_patients(bundle, {int(p): int(f) for p, f in record["patient_fold"].items()})

    predictions: List[np.ndarray] = []
    targets: List[np.ndarray] = []
    for fold in sorted(set(folds.patient_fold.values())):
        model = EgnModel.load(require_artifact(layout.run(name, f"model_fold{fold}.egnm"), "train"))
        split = split_fold(bundle, folds, fold)
        prepared = prepare_fold(
            bundle, index, split, run_config.retrieval.k, run_config.retrieval.metric
        )
        predictions.append(predict(model, bundle, prepared, split.test_rows))
        targets.append(prepared.targets[split.test_rows])

    overall, per_fold = evaluate_run(predictions, targets, bundle.genes)
    metrics = dict(overall.to_dict(), folds=[r.to_dict() for r in per_fold])
    write_atomic(layout.run(name, "metrics.json"), canonical_json(metrics).encode("utf-8"))
    overall.write_csv(layout.run(name, "metrics.csv"))
    _say(
        "<b>{}</b>: PCC@F {:.4f}  PCC@S {:.4f}  PCC@M <b>{:.4f}</b>  MSE {:.5f}  MAE {:.5f}",
        name, overall.pcc_at_f, overall.pcc_at_s, overall.pcc_at_m, overall.mse, overall.mae,
    )
    return 0


def cmd_gradcheck(config: RunConfig, args: argparse.Namespace) -> int:
    """
    Finite-difference check of every parameter group of a small full model.
    Zero-initialized output projections get random values first, so that
    the gradients behind them are not trivially zero.
    """
    layout = Layout(config.output_dir)
    model_config = RunConfig.preset("toy").model
    model = EgnModel(model_config, "full", seed=config.data.seed)
    rng = np.random.default_rng(config.data.seed)
    for _, p in model.named_parameters():
        if not np.any(p.data):
            p.data = rng.normal(0.0, 0.1, p.shape)

    c = model_config
    batch = 3
    windows = rng.uniform(0.0, 1.0, (batch, 3, c.image_size, c.image_size))
    views = rng.normal(0.0, 1.0, (batch, c.style_dim))
    ex_views = rng.normal(0.0, 1.0, (batch, c.num_exemplars, c.style_dim))
    ex_expr = rng.uniform(0.0, 1.0, (batch, c.num_exemplars, c.num_genes))
    targets = rng.uniform(0.0, 1.0, (batch, c.num_genes))

    report = gradcheck(
        lambda: loss_total(model(windows, views, ex_views, ex_expr), targets),
        model.named_parameters(),
        seed=config.data.seed,
    )
    write_atomic(_makedirs_for(layout.gradcheck), canonical_json(report.to_dict()).encode("utf-8"))
    if report.passed:
        _say(
            "gradcheck <ansigreen>passed</ansigreen>: {} coordinates ({} on kinks skipped), "
            "max relative error {:.2e}",
            report.checked, report.skipped, report.max_rel_error,
        )
        return 0
    for group in report.groups:
        if not group.passed:
            _say(
                "  <ansired>{}</ansired>: max relative error {:.2e}",
                group.name,
                group.max_rel_error,
            )
    _say("gradcheck <ansired>failed</ansired>; see {}", layout.gradcheck)
    return 1


def cmd_sweep(config: RunConfig, args: argparse.Namespace) -> int:
    layout = Layout(config.output_dir)
    bundle = _load_data(layout)
    index = ExemplarIndex.load(require_artifact(layout.index, "build-index"))
    folds = make_folds(bundle, config.data.n_folds)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    rows = run_sweep(
        args.kind,
        seeds,
        config,
        bundle,
        index,
        folds,
        workers=get_worker_count(),
        on_row=lambda row: _say(
            "  {:<24} seed {:>3}  PCC@M {:.4f}", row.setting, row.seed, row.pcc_at_m
        ),
    )
    path = _makedirs_for(layout.sweep(f"{args.kind}.csv"))
    write_sweep(rows, path, layout.sweep(f"{args.kind}_summary.csv"))
    _say("Sweep <b>{}</b> written to {}", args.kind, path)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-extractor": cmd_train_extractor,
    "build-index": cmd_build_index,
    "retrieve": cmd_retrieve,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (default: the preset)")
    common.add_argument("--preset", default="desk", choices=("desk", "full", "toy"))
    common.add_argument("--seed", type=int, help="data seed")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE"
    )
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="egn", description="Exemplar guided expression prediction."
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-extractor", "build-index", "gradcheck"):
        commands.add_parser(name, parents=[common])

    retrieve = commands.add_parser("retrieve", parents=[common])
    retrieve.add_argument("--window-id", type=int, required=True)

    train = commands.add_parser("train", parents=[common])
    train.add_argument("--variant", choices=VARIANTS)
    train.add_argument("--run-name")

    evaluate = commands.add_parser("eval", parents=[common])
    evaluate.add_argument("--run-name")
    evaluate.add_argument("--variant", choices=VARIANTS)

    sweep = commands.add_parser("sweep", parents=[common])
    sweep.add_argument("--kind", choices=SWEEP_KINDS, required=True)
    sweep.add_argument("--seeds", default="0,1,2")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig.preset(args.preset)
    overrides = list(args.overrides)
    if getattr(args, "variant", None):
        overrides.append(f"training.variant={args.variant}")
    return config.with_overrides(overrides, seed=args.seed).validate()


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        config = load_config(args)
        with run_lock(config.output_dir):
            return COMMANDS[args.command](config, args)
    except EgnError as e:
        _say("<ansired>error:</ansired> {}", str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
