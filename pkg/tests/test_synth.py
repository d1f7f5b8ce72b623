import numpy as np
import pytest

from egn.errors import ConfigError
from egn.synth import (
    MotifSpec,
    expression_from_counts,
    gene_skewness,
    generate,
    make_motifs,
    motif_details,
)


def _small(seed=0, **kwargs):
    settings = dict(
        seed=seed, n_patients=3, windows_per_patient=10, num_genes=8, image_size=16, skew_fraction=0.25
    )
    settings.update(kwargs)
    return generate(**settings)


class TestGenerate:
    def test_deterministic(self):
        a, b = _small(), _small()
        np.testing.assert_array_equal(a.windows, b.windows)
        np.testing.assert_array_equal(a.raw_expression, b.raw_expression)
        assert not np.array_equal(a.windows, _small(seed=1).windows)

    def test_structure(self):
        bundle = _small(slides_per_patient=2)
        assert bundle.windows.shape == (30, 3, 16, 16)
        assert bundle.raw_expression.shape == (30, 8)
        assert 0.0 <= bundle.windows.min() and bundle.windows.max() <= 1.0
        assert bundle.raw_expression.min() > 0.0
        assert len(np.unique(bundle.slide_ids)) == 6
        for slide in np.unique(bundle.slide_ids):
            assert len(np.unique(bundle.patient_ids[bundle.slide_ids == slide])) == 1

    def test_expression_follows_counts(self):
        bundle = _small()
        motifs, counts, skewed, noise = motif_details(bundle)
        np.testing.assert_allclose(
            bundle.raw_expression, expression_from_counts(counts, motifs, skewed, noise)
        )
        assert skewed.sum() == 2

    def test_skewed_genes_have_longer_tails(self):
        bundle = _small(windows_per_patient=60, skew_fraction=0.5, motifs_per_window=8.0)
        _, _, skewed, _ = motif_details(bundle)
        skew = gene_skewness(bundle.raw_expression)
        assert np.median(skew[skewed]) > np.median(skew[~skewed])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_skew_fraction_sets_the_tails(self, seed):
        desk = dict(seed=seed, n_patients=6, windows_per_patient=60, num_genes=16, image_size=32)
        plain = gene_skewness(generate(skew_fraction=0.0, **desk).raw_expression)
        assert np.all(np.abs(plain) < 2.0)
        skewed = gene_skewness(generate(skew_fraction=0.5, **desk).raw_expression)
        assert np.mean(skewed > 2.0) >= 0.4

    def test_motifs_show_up_in_pixels(self):
        bundle = _small(motifs_per_window=0.0)
        _, counts, _, _ = motif_details(bundle)
        assert counts.sum() == 0
        # Without motifs every window is background texture.
        assert np.abs(bundle.windows.mean(axis=(2, 3)) - [0.86, 0.66, 0.76]).max() < 0.2

    def test_invalid_arguments_reported_together(self):
        with pytest.raises(ConfigError) as info:
            generate(0, 0, 10, 8, 16, skew_fraction=2.0)
        assert len(info.value.problems) == 2


class TestMotifs:
    def test_every_gene_has_primary_motif(self, rng):
        motifs = make_motifs(rng, 4, 10, 16)
        for g in range(10):
            primary = motifs[g % 4]
            assert g in primary.genes
            assert primary.weights[primary.genes.index(g)] >= 0.75

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            MotifSpec(colour=[0, 0, 0], radius=1.0, genes=[0], weights=[-1.0])
        with pytest.raises(ConfigError):
            MotifSpec(colour=[0, 0, 0], radius=1.0, genes=[], weights=[])

    def test_skewed_response_is_exponential(self):
        motif = MotifSpec(colour=[0, 0, 0], radius=1.0, genes=[0, 1], weights=[1.0, 1.0])
        counts = np.array([[0], [1], [2]])
        noise = np.zeros((3, 2))
        out = expression_from_counts(counts, [motif], np.array([True, False]), noise)
        np.testing.assert_allclose(out[:, 0], np.expm1([0.0, 1.0, 2.0]))
        np.testing.assert_allclose(out[:, 1], [0.0, 1.0, 2.0])

    def test_details_need_synthetic_bundle(self):
        bundle = _small()
        bundle.metadata = {"source": "external"}
        with pytest.raises(ConfigError):
            motif_details(bundle)
