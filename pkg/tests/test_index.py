import numpy as np
import pytest

from egn.errors import (
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    InsufficientExemplarsError,
)
from egn.extractor import ExtractorModel
from egn.index import ExemplarIndex, build_index, distance


@pytest.fixture
def index(rng):
    n = 30
    return ExemplarIndex(
        window_ids=np.arange(100, 100 + n),
        patient_ids=np.arange(n) % 3,
        views=rng.normal(size=(n, 5)),
        expressions=rng.uniform(size=(n, 4)),
    )


def _brute_force(index, view, patient, k, metric):
    scored = sorted(
        (distance(view, index.views[i], metric), int(index.window_ids[i]))
        for i in range(len(index))
        if index.patient_ids[i] != patient
    )
    return [w for _, w in scored[:k]]


class TestDistance:
    def test_values(self):
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 2.0])
        assert distance(a, b, "l2") == pytest.approx(np.sqrt(5.0))
        assert distance(a, b, "l1") == pytest.approx(3.0)
        assert distance(a, b, "cosine") == pytest.approx(1.0)
        assert distance(a, 3 * a, "cosine") == pytest.approx(0.0)

    def test_cosine_of_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            distance(np.zeros(3), np.ones(3), "cosine")

    def test_unknown_metric(self):
        with pytest.raises(ConfigError):
            distance(np.ones(2), np.ones(2), "hamming")

    def test_shapes(self):
        with pytest.raises(DimensionError):
            distance(np.ones(2), np.ones(3), "l2")


class TestQuery:
    @pytest.mark.parametrize("metric", ["l2", "l1", "cosine"])
    def test_matches_brute_force(self, index, rng, metric):
        view = rng.normal(size=5)
        result = index.query(view, patient_id=1, k=4, metric=metric)
        assert list(result.window_ids) == _brute_force(index, view, 1, 4, metric)
        assert np.all(np.diff(result.distances) >= 0)

    def test_never_returns_own_patient(self, index):
        for row in range(len(index)):
            result = index.query(index.views[row], int(index.patient_ids[row]), k=5)
            assert int(index.patient_ids[row]) not in result.patient_ids
            assert int(index.window_ids[row]) not in result.window_ids

    def test_ties_broken_by_window_id(self):
        index = ExemplarIndex(
            window_ids=[9, 4, 7, 1],
            patient_ids=[0, 1, 1, 2],
            views=[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]],
            expressions=np.zeros((4, 1)),
        )
        result = index.query(np.zeros(2), patient_id=0, k=3)
        assert list(result.window_ids) == [1, 4, 7]
        np.testing.assert_allclose(result.distances, 1.0)

    def test_exemplars_carry_their_data(self, index):
        result = index.query(index.views[0], 0, k=2)
        for entry in result.entries:
            row = list(index.window_ids).index(entry.window_id)
            np.testing.assert_array_equal(entry.global_view, index.views[row])
            np.testing.assert_array_equal(entry.expression, index.expressions[row])

    def test_not_enough_other_patients(self, index):
        with pytest.raises(InsufficientExemplarsError) as info:
            index.query(index.views[0], 0, k=21)
        assert (info.value.eligible, info.value.k) == (20, 21)

    def test_bad_query(self, index):
        with pytest.raises(DimensionError):
            index.query(np.zeros(4), 0, k=1)
        with pytest.raises(ConfigError):
            index.query(np.zeros(5), 0, k=0)

    def test_cosine_zero_query(self, index):
        with pytest.raises(DegenerateInputError):
            index.query(np.zeros(5), 0, k=1, metric="cosine")

    def test_cosine_query_with_a_zero_view_in_the_index(self, index):
        index.views[4] = 0.0
        view = index.views[0]
        result = index.query(view, 0, k=5, metric="cosine")
        assert 104 not in result.window_ids
        assert np.all(np.isfinite(result.distances))
        others = [
            int(w) for w, p in zip(index.window_ids, index.patient_ids) if p != 0 and w != 104
        ]
        expected = sorted(others, key=lambda w: (distance(view, index.views[w - 100], "cosine"), w))
        assert list(result.window_ids) == expected[:5]

    def test_zero_view_cannot_be_compared(self):
        with pytest.raises(DegenerateInputError):
            distance(np.ones(3), np.zeros(3), "cosine")

    def test_retrieve_all_agrees_with_query(self, index):
        positions, distances = index.retrieve_all(
            index.views[:6], index.patient_ids[:6], k=3, window_ids=index.window_ids[:6]
        )
        assert positions.shape == distances.shape == (6, 3)
        for q in range(6):
            single = index.query(index.views[q], int(index.patient_ids[q]), 3)
            np.testing.assert_array_equal(index.window_ids[positions[q]], single.window_ids)
            np.testing.assert_array_equal(distances[q], single.distances)


class TestIndex:
    def test_subset_keeps_order(self, index):
        part = index.subset([105, 101])
        assert list(part.window_ids) == [105, 101]
        np.testing.assert_array_equal(part.views[1], index.views[1])

    def test_subset_unknown_window(self, index):
        with pytest.raises(DimensionError):
            index.subset([7])

    def test_with_expressions(self, index):
        replaced = index.with_expressions(np.zeros((30, 4)))
        np.testing.assert_array_equal(replaced.expressions, 0.0)
        np.testing.assert_array_equal(replaced.views, index.views)

    def test_column_lengths(self):
        with pytest.raises(DimensionError):
            ExemplarIndex([1, 2], [0, 1], np.zeros((3, 2)), np.zeros((2, 1)))

    def test_save_load(self, index, tmp_path):
        path = str(tmp_path / "index.egni")
        index.save(path)
        loaded = ExemplarIndex.load(path)
        np.testing.assert_array_equal(loaded.window_ids, index.window_ids)
        np.testing.assert_array_equal(loaded.patient_ids, index.patient_ids)
        np.testing.assert_array_equal(loaded.views, index.views)
        np.testing.assert_array_equal(loaded.expressions, index.expressions)

    def test_header(self, index):
        data = index.to_bytes()
        assert data[:4] == b"EGNI"
        assert len(data) == 4 + 4 + 24 + 30 * (16 + 8 * (5 + 4))

    def test_corrupt_files(self, index, tmp_path):
        data = index.to_bytes()
        with pytest.raises(CheckpointError):
            ExemplarIndex.from_bytes(b"EGNX" + data[4:])
        with pytest.raises(CheckpointError):
            ExemplarIndex.from_bytes(data[:-3])
        with pytest.raises(CheckpointError):
            ExemplarIndex.load(str(tmp_path / "missing.egni"))


class TestBuild:
    def test_one_entry_per_window(self, toy_bundle):
        extractor = ExtractorModel(toy_bundle.image_size, 4, base_channels=2)
        expressions = np.zeros((len(toy_bundle), toy_bundle.num_genes))
        index = build_index(toy_bundle, extractor, expressions)
        assert len(index) == len(toy_bundle)
        np.testing.assert_array_equal(index.window_ids, toy_bundle.window_ids)
        np.testing.assert_allclose(
            index.views[3], extractor.encode(toy_bundle.windows[3]).vector
        )

    def test_rejects_zero_views(self, toy_bundle):
        extractor = ExtractorModel(toy_bundle.image_size, 4, base_channels=2)
        extractor.encoder.projection.weight.data[:] = 0.0
        extractor.encoder.projection.bias.data[:] = 0.0
        expressions = np.zeros((len(toy_bundle), toy_bundle.num_genes))
        with pytest.raises(DegenerateInputError, match=f"Window {toy_bundle.window_ids[0]} "):
            build_index(toy_bundle, extractor, expressions)

    def test_expression_shape(self, toy_bundle):
        extractor = ExtractorModel(toy_bundle.image_size, 4, base_channels=2)
        with pytest.raises(DimensionError):
            build_index(toy_bundle, extractor, np.zeros((2, 2)))
