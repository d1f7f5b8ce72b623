import numpy as np
import pytest

import egn.training
from egn.errors import ContractError, DataError, NonFiniteError
from egn.index import ExemplarIndex
from egn.objectives import fit_normalization, make_folds
from egn.synth import generate
from egn.training import (
    EpochRecord,
    evaluate_run,
    folds_from_patients,
    prepare_fold,
    run_cross_validation,
    split_fold,
    train_fold,
    write_loss_curve,
)


def _index(bundle, style_dim, seed=0):
    views = np.random.default_rng(seed).normal(size=(len(bundle), style_dim))
    return ExemplarIndex(
        bundle.window_ids, bundle.patient_ids, views, np.zeros((len(bundle), bundle.num_genes))
    )


@pytest.fixture
def six_patients(toy_config):
    return generate(
        seed=3,
        n_patients=6,
        windows_per_patient=6,
        num_genes=toy_config.model.num_genes,
        image_size=toy_config.model.image_size,
        skew_fraction=0.25,
    )


def _prepared(bundle, config, fold=0, n_folds=2):
    folds = make_folds(bundle, n_folds)
    split = split_fold(bundle, folds, fold)
    index = _index(bundle, config.model.style_dim)
    return prepare_fold(bundle, index, split, config.retrieval.k, config.retrieval.metric)


class TestSplit:
    def test_two_training_patients_have_no_validation(self, toy_bundle):
        folds = make_folds(toy_bundle, 2)
        split = split_fold(toy_bundle, folds, 1)
        assert split.validation_patient is None
        assert len(split.validation_rows) == 0
        np.testing.assert_array_equal(split.train_rows, folds.train_rows(1))

    def test_validation_patient_is_largest_training_id(self, six_patients):
        folds = make_folds(six_patients, 2)
        split = split_fold(six_patients, folds, 0)
        training = sorted(p for p, f in folds.patient_fold.items() if f != 0)
        assert split.validation_patient == training[-1]
        assert set(six_patients.patient_ids[split.validation_rows]) == {training[-1]}
        rows = np.concatenate([split.train_rows, split.validation_rows, split.test_rows])
        np.testing.assert_array_equal(np.sort(rows), np.arange(len(six_patients)))
        assert split.to_dict()["validation"] == 6

    def test_unknown_fold(self, toy_bundle):
        with pytest.raises(ContractError):
            split_fold(toy_bundle, make_folds(toy_bundle, 2), 5)

    def test_folds_from_patients(self, toy_bundle):
        folds = make_folds(toy_bundle, 2)
        again = folds_from_patients(toy_bundle, folds.patient_fold)
        np.testing.assert_array_equal(again.window_fold, folds.window_fold)
        with pytest.raises(DataError):
            folds_from_patients(toy_bundle, {0: 0})


class TestPrepare:
    def test_normalization_from_training_rows(self, six_patients, toy_config):
        prepared = _prepared(six_patients, toy_config)
        split = prepared.split
        seen = np.sort(np.concatenate([split.train_rows, split.validation_rows]))
        expected = fit_normalization(six_patients.raw_expression[seen])
        np.testing.assert_array_equal(prepared.params.minimum, expected.minimum)
        np.testing.assert_array_equal(prepared.params.maximum, expected.maximum)

    def test_pool_holds_training_windows_only(self, six_patients, toy_config):
        prepared = _prepared(six_patients, toy_config)
        train_ids = six_patients.window_ids[prepared.split.train_rows]
        np.testing.assert_array_equal(prepared.pool.window_ids, train_ids)
        np.testing.assert_array_equal(
            prepared.pool.expressions, prepared.targets[prepared.split.train_rows]
        )

    def test_exemplars_come_from_other_patients(self, six_patients, toy_config):
        prepared = _prepared(six_patients, toy_config)
        assert prepared.exemplars.shape == (len(six_patients), toy_config.retrieval.k)
        for row, positions in enumerate(prepared.exemplars):
            patients = prepared.pool.patient_ids[positions]
            assert six_patients.patient_ids[row] not in patients

    def test_batch(self, six_patients, toy_config):
        prepared = _prepared(six_patients, toy_config)
        windows, views, ex_views, ex_expr, targets = prepared.batch(six_patients, np.array([0, 5]))
        k, c = toy_config.retrieval.k, toy_config.model
        assert windows.shape == (2, 3, c.image_size, c.image_size)
        assert views.shape == (2, c.style_dim)
        assert ex_views.shape == (2, k, c.style_dim)
        assert ex_expr.shape == targets.shape[:1] + (k, c.num_genes)


class TestTrainFold:
    def test_without_validation_last_epoch_wins(self, toy_bundle, toy_config):
        prepared = _prepared(toy_bundle, toy_config)
        seen = []
        result = train_fold(
            toy_bundle, prepared, toy_config.model, toy_config.training, on_epoch=seen.append
        )
        assert [r.epoch for r in result.log] == [0, 1]
        assert seen == result.log
        assert result.best_epoch == 1
        assert all(np.isnan(r.validation_pcc_at_m) for r in result.log)
        assert result.predictions.shape == result.targets.shape
        assert result.targets.shape == (len(prepared.split.test_rows), toy_bundle.num_genes)

    def test_best_validation_epoch_is_kept(self, six_patients, toy_config):
        prepared = _prepared(six_patients, toy_config)
        training = toy_config.training
        training.epochs = 3
        result = train_fold(six_patients, prepared, toy_config.model, training)
        scores = [r.validation_pcc_at_m for r in result.log]
        expected = 0 if np.all(np.isnan(scores)) else int(np.nanargmax(scores))
        assert result.best_epoch == expected

    def test_deterministic(self, toy_bundle, toy_config):
        prepared = _prepared(toy_bundle, toy_config)
        a = train_fold(toy_bundle, prepared, toy_config.model, toy_config.training, seed=2)
        b = train_fold(toy_bundle, prepared, toy_config.model, toy_config.training, seed=2)
        np.testing.assert_array_equal(a.predictions, b.predictions)

    def test_learning_rate_follows_schedule(self, toy_bundle, toy_config):
        prepared = _prepared(toy_bundle, toy_config)
        result = train_fold(toy_bundle, prepared, toy_config.model, toy_config.training)
        assert result.log[0].lr == pytest.approx(toy_config.training.lr)
        assert result.log[1].lr < result.log[0].lr

    def test_non_finite_loss(self, toy_bundle, toy_config, monkeypatch):
        prepared = _prepared(toy_bundle, toy_config)
        l2 = egn.training.l2_loss
        monkeypatch.setattr(egn.training, "l2_loss", lambda p, t: l2(p, t) * np.nan)
        with pytest.raises(NonFiniteError) as info:
            train_fold(toy_bundle, prepared, toy_config.model, toy_config.training)
        assert info.value.where == "fold 0, epoch 0, step 0"

    def test_batches_never_end_with_one_row(self):
        sizes = [len(b) for b in egn.training._batches(np.arange(9), 4)]
        assert sizes == [4, 5]
        assert [len(b) for b in egn.training._batches(np.arange(8), 4)] == [4, 4]

    def test_cross_validation_covers_every_window(self, toy_bundle, toy_config):
        folds = make_folds(toy_bundle, 2)
        index = _index(toy_bundle, toy_config.model.style_dim)
        results = run_cross_validation(toy_bundle, index, folds, toy_config)
        assert [r.fold for r in results] == [0, 1]
        rows = np.concatenate([r.prepared.split.test_rows for r in results])
        np.testing.assert_array_equal(np.sort(rows), np.arange(len(toy_bundle)))


def _correlated(rs, repeats=1):
    u = np.tile([1.0, -1.0, 1.0, -1.0], repeats)
    v = np.tile([1.0, 1.0, -1.0, -1.0], repeats)
    u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
    targets = np.stack([u] * len(rs), axis=1)
    predictions = np.stack([r * u + np.sqrt(1 - r * r) * v for r in rs], axis=1)
    return predictions, targets


class TestEvaluateRun:
    def test_per_gene_mean_over_defined_folds(self):
        first = _correlated([0.2, 0.4])
        second_predictions, second_targets = _correlated([0.6, 0.9], repeats=2)
        second_targets[:, 1] = 0.3
        overall, per_fold = evaluate_run(
            [first[0], second_predictions], [first[1], second_targets], genes=["a", "b"]
        )
        np.testing.assert_allclose(overall.pcc, [0.4, 0.4], atol=1e-9)
        assert overall.undefined_genes == []
        assert per_fold[1].undefined_genes == [1]
        expected_mse = (4 * per_fold[0].mse + 8 * per_fold[1].mse) / 12
        assert overall.mse == pytest.approx(expected_mse)
        assert overall.pcc_at_m == pytest.approx(0.4)

    def test_needs_folds(self):
        with pytest.raises(ContractError):
            evaluate_run([], [])


class TestLossCurve:
    def test_csv(self, tmp_path):
        path = tmp_path / "loss.csv"
        write_loss_curve([EpochRecord(0, 0, 0.001, 1.5, 0.5, 1.0, 0.25)], str(path))
        assert path.read_text().splitlines() == [
            "fold,epoch,lr,loss,l2,pcc,validation_pcc_at_m",
            "0,0,0.001,1.5,0.5,1.0,0.25",
        ]

    def test_empty(self, tmp_path):
        with pytest.raises(ContractError):
            write_loss_curve([], str(tmp_path / "loss.csv"))
