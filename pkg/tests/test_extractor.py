import math

import numpy as np
import pytest

from egn.baselines import linear_probe
from egn.config import ExtractorConfig, RunConfig
from egn.errors import CheckpointError, ContractError, DimensionError
from egn.extractor import (
    ExtractorModel,
    GlobalView,
    adversarial_losses,
    reconstruction_loss,
    train_extractor,
)
from egn.gradcheck import gradcheck
from egn.objectives import evaluate, normalize_targets
from egn.synth import generate
from egn.tensor import Tensor


@pytest.fixture
def model():
    return ExtractorModel(image_size=16, style_dim=4, base_channels=2, seed=3)


@pytest.fixture
def windows(rng):
    return rng.uniform(size=(5, 3, 16, 16))


class TestExtractorModel:
    def test_encode(self, model, windows):
        view = model.encode(windows[0], window_id=7, patient_id=2)
        assert isinstance(view, GlobalView)
        assert view.vector.shape == (4,)
        assert (view.source_window_id, view.patient_id) == (7, 2)

    def test_encode_batch_matches_single(self, model, windows):
        batch = model.encode_batch(windows)
        assert batch.shape == (5, 4)
        for row, window in zip(batch, windows):
            np.testing.assert_allclose(row, model.encode(window).vector, atol=1e-12)

    def test_decode_range(self, model, windows):
        image = model.decode(model.encode(windows[1]))
        assert image.shape == (3, 16, 16)
        assert image.min() >= 0.0 and image.max() <= 1.0

    def test_shape_errors(self, model):
        with pytest.raises(DimensionError):
            model.encode(np.zeros((3, 8, 8)))
        with pytest.raises(DimensionError):
            model.decode(np.zeros(5))
        with pytest.raises(DimensionError):
            ExtractorModel(image_size=24, style_dim=4)

    def test_same_seed_same_weights(self):
        a = ExtractorModel(16, 4, 2, seed=1).state_dict()
        b = ExtractorModel(16, 4, 2, seed=1).state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_save_load(self, model, windows, tmp_path):
        path = str(tmp_path / "extractor.egnx")
        model.save(path)
        loaded = ExtractorModel.load(path)
        assert loaded.config_echo() == model.config_echo()
        np.testing.assert_array_equal(
            loaded.encode_batch(windows), model.encode_batch(windows)
        )

    def test_load_rejects_other_magic(self, tmp_path):
        path = tmp_path / "x.egnx"
        path.write_bytes(b"EGNM" + b"\0" * 16)
        with pytest.raises(CheckpointError):
            ExtractorModel.load(str(path))

    def test_gradient(self, windows):
        model = ExtractorModel(16, 3, 1, seed=0)
        x = windows[:2]

        def closure():
            diff = model(Tensor(x)) - x
            return (diff * diff).mean()

        report = gradcheck(closure, model.named_parameters(), max_coords=150)
        assert report.passed


class TestLosses:
    def test_reconstruction_is_mean_absolute_error(self):
        x = np.zeros((1, 3, 2, 2))
        x_hat = np.full((1, 3, 2, 2), 0.25)
        assert reconstruction_loss(x, x_hat).item() == pytest.approx(0.25)

    def test_reconstruction_shapes(self):
        with pytest.raises(DimensionError):
            reconstruction_loss(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 4, 4)))

    def test_adversarial_needs_discriminator(self, model, windows):
        x = Tensor(windows)
        with pytest.raises(ContractError):
            adversarial_losses(x, x, model.discriminator)

    def test_adversarial_terms_positive(self, windows):
        model = ExtractorModel(16, 4, 2, adversarial=True)
        x = Tensor(windows)
        generator, discriminator = adversarial_losses(x, model(x), model.discriminator)
        assert generator.item() > 0 and discriminator.item() > 0

    def test_silent_discriminator_gives_log_two(self, windows):
        model = ExtractorModel(16, 4, 2, adversarial=True)
        model.discriminator.logit.weight.data[:] = 0.0
        model.discriminator.logit.bias.data[:] = 0.0
        x = Tensor(windows)
        generator, discriminator = adversarial_losses(x, model(x), model.discriminator)
        assert generator.item() == pytest.approx(math.log(2.0), rel=1e-12)
        assert discriminator.item() == pytest.approx(2.0 * math.log(2.0), rel=1e-12)


class TestTraining:
    def test_reconstruction_improves(self):
        windows = np.full((4, 3, 16, 16), 0.85)
        config = ExtractorConfig(epochs=10, batch_size=4, lr=1e-2, base_channels=2)
        seen = []
        model, log = train_extractor(windows, config, 16, 4, seed=0, on_epoch=seen.append)
        assert [row.epoch for row in log] == list(range(10))
        assert seen == log
        assert log[-1].l1 < log[0].l1
        assert all(row.discriminator == 0.0 for row in log)

    def test_adversarial_training_logs_both_terms(self, windows):
        config = ExtractorConfig(epochs=1, batch_size=3, base_channels=2, adversarial=True)
        model, log = train_extractor(windows, config, 16, 4)
        assert model.discriminator is not None
        assert log[0].generator > 0 and log[0].discriminator > 0

    def test_deterministic(self, windows):
        config = ExtractorConfig(epochs=1, batch_size=2, base_channels=2)
        a, _ = train_extractor(windows, config, 16, 4, seed=5)
        b, _ = train_extractor(windows, config, 16, 4, seed=5)
        np.testing.assert_array_equal(a.encode_batch(windows), b.encode_batch(windows))

    def test_no_windows(self):
        with pytest.raises(ContractError):
            train_extractor(np.zeros((0, 3, 16, 16)), ExtractorConfig(), 16, 4)


def _desk_bundle(seed, n_patients, windows_per_patient):
    config = RunConfig.preset("desk")
    return config, generate(
        seed=seed,
        n_patients=n_patients,
        windows_per_patient=windows_per_patient,
        num_genes=config.model.num_genes,
        image_size=config.model.image_size,
        skew_fraction=config.data.skew_fraction,
    )


@pytest.fixture(scope="module")
def held_out_run():
    "An extractor trained on five desk-scale patients; the sixth is held out."
    config, bundle = _desk_bundle(0, 6, 60)
    held_out = bundle.patient_ids == bundle.patient_ids.max()
    extractor, log = train_extractor(
        bundle.windows[~held_out],
        config.extractor,
        config.model.image_size,
        config.model.style_dim,
        seed=0,
    )
    return bundle, held_out, extractor, log


@pytest.mark.slow
class TestTrainedExtractor:
    def test_loss_falls_over_two_hundred_windows(self):
        config, bundle = _desk_bundle(1, 4, 50)
        assert len(bundle) == 200
        _, log = train_extractor(
            bundle.windows, config.extractor, config.model.image_size, config.model.style_dim
        )
        assert len(log) == 20
        assert log[-1].l1 < log[0].l1

    def test_held_out_decode_beats_mean_image(self, held_out_run):
        bundle, held_out, extractor, log = held_out_run
        assert log[-1].l1 < log[0].l1
        windows = bundle.windows[held_out]
        decoded = extractor(Tensor(windows)).numpy()
        mean_image = bundle.windows[~held_out].mean(axis=0)
        assert np.abs(decoded - windows).mean() < np.abs(mean_image - windows).mean()

    def test_views_carry_expression(self, held_out_run):
        bundle, held_out, extractor, _ = held_out_run
        views = extractor.encode_batch(bundle.windows)
        fitted, params = normalize_targets(bundle.raw_expression[~held_out])
        targets, _ = normalize_targets(bundle.raw_expression[held_out], params)
        predicted, control = linear_probe(views[~held_out], fitted, views[held_out])
        assert evaluate(predicted, targets).pcc_at_m > evaluate(control, targets).pcc_at_m
