import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ffidelity.core import (
    Dataset,
    Mask,
    RngStream,
    as_sample,
    as_scores,
    count_for,
    floor_count,
    load_dataset,
    mask_apply,
    mask_complement_apply,
    save_dataset,
    topk_indices,
    topk_mask,
)

X = np.array([[1.0, 2.0], [3.0, 4.0]])


class TestMaskApply:
    def test_all_ones_is_identity(self):
        np.testing.assert_array_equal(mask_apply(X, Mask.ones(2, 2)), X)

    def test_all_zeros(self):
        np.testing.assert_array_equal(mask_apply(X, Mask.zeros(2, 2)), np.zeros((2, 2)))

    def test_diagonal(self):
        m = Mask(np.array([[1, 0], [0, 1]]))
        np.testing.assert_array_equal(mask_apply(X, m), [[1, 0], [0, 4]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_apply(X, Mask.ones(3, 2))


class TestMaskComplementApply:
    def test_all_ones_removes_everything(self):
        np.testing.assert_array_equal(mask_complement_apply(X, Mask.ones(2, 2)), np.zeros((2, 2)))

    def test_all_zeros_keeps_input(self):
        np.testing.assert_array_equal(mask_complement_apply(X, Mask.zeros(2, 2)), X)

    def test_diagonal(self):
        m = Mask(np.array([[1, 0], [0, 1]]))
        np.testing.assert_array_equal(mask_complement_apply(X, m), [[0, 2], [3, 0]])

    def test_equals_apply_of_complement(self, rng):
        x = rng.normal(size=(4, 3))
        m = Mask(rng.random((4, 3)) < 0.5)
        np.testing.assert_array_equal(mask_complement_apply(x, m), mask_apply(x, m.complement()))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_complement_apply(X, Mask.ones(2, 3))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6)), st.data())
def test_apply_plus_complement_is_input(x, data):
    bits = data.draw(arrays(np.bool_, x.shape))
    m = Mask(bits)
    np.testing.assert_array_equal(mask_apply(x, m) + mask_complement_apply(x, m), x)
    assert m.size == int(bits.sum())


class TestMask:
    def test_popcount(self):
        m = Mask.from_indices(3, 2, [(0, 1), (2, 0)])
        assert m.size == 2
        assert m.shape == (3, 2)

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            Mask(np.array([[0, 2]]))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            Mask(np.ones(3))

    def test_read_only(self):
        m = Mask.ones(2, 2)
        with pytest.raises(ValueError):
            m.bits[0, 0] = False

    def test_equality(self):
        assert Mask.ones(2, 2) == Mask(np.ones((2, 2), dtype=int))
        assert Mask.ones(2, 2) != Mask.zeros(2, 2)


class TestTopk:
    def test_distinct(self):
        assert topk_indices([[0.9, 0.5], [0.3, 0.1]], 2) == [(0, 0), (0, 1)]

    def test_zero(self):
        assert topk_indices([[0.9, 0.5], [0.3, 0.1]], 0) == []

    def test_row_major_tie_break(self):
        assert topk_indices([[0.5, 0.5], [0.5, 0.1]], 2) == [(0, 0), (0, 1)]

    def test_tie_break_against_enumeration(self):
        # among all index orders consistent with descending scores, the
        # row-major rule picks the lexicographically smallest one
        s = np.array([[0.5, 0.5], [0.5, 0.1]])
        flat = s.ravel()
        valid = [p for p in itertools.permutations(range(4))
                 if all(flat[p[i]] >= flat[p[i + 1]] for i in range(3))]
        best = min(valid)
        for k in range(5):
            assert [i * 2 + j for i, j in topk_indices(s, k)] == list(best[:k])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            topk_indices([[0.1, 0.2]], 3)
        with pytest.raises(ValueError):
            topk_indices([[0.1, 0.2]], -1)

    def test_rejects_negative_scores(self):
        with pytest.raises(ValueError):
            topk_indices([[-0.1, 0.2]], 1)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                  elements=st.sampled_from([0.0, 0.25, 0.5, 1.0])))
    def test_prefix_property(self, s):
        td = s.size
        for k in range(td):
            assert set(topk_indices(s, k)) < set(topk_indices(s, k + 1))

    def test_batched_mask_matches_indices(self, rng):
        s = rng.integers(0, 3, size=(5, 4, 3)).astype(float)
        ks = np.array([0, 1, 5, 11, 12])
        masks = topk_mask(s, ks)
        for i in range(5):
            expected = Mask.from_indices(4, 3, topk_indices(s[i], ks[i]))
            np.testing.assert_array_equal(masks[i], expected.bits)


class TestCounts:
    def test_count_rounds_half_up(self):
        assert count_for(0.5, 5) == 3
        assert count_for(0.1, 256) == 26
        assert count_for(0.0, 10) == 0
        assert count_for(1.0, 10) == 10

    def test_count_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            count_for(1.5, 10)

    def test_floor_count_slack(self):
        # 0.29 * 100 evaluates to 28.999999999999996
        assert floor_count(0.29 * 100) == 29
        assert floor_count(2.5) == 2


class TestValidation:
    def test_sample(self):
        assert as_sample([[1, 2]]).shape == (1, 2)
        with pytest.raises(ValueError):
            as_sample([1, 2])
        with pytest.raises(ValueError):
            as_sample([[np.nan]])

    def test_scores(self):
        with pytest.raises(ValueError):
            as_scores([[np.inf]])
        with pytest.raises(ValueError):
            as_scores([[-1.0]])


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(7, 3).generator().random(5)
        b = RngStream(7, 3).generator().random(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = RngStream(7, 3).generator().random(5)
        b = RngStream(7, 4).generator().random(5)
        c = RngStream(7, 3, tag=1).generator().random(5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_large_seed(self):
        RngStream(2**64 - 1, 0).generator().random()


class TestDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 2, 2)), np.zeros(0), 2)
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2, 2)), np.array([0, 2]), 2)
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), np.array([0, 1]), 2)

    def test_samples_and_subset(self, rng):
        data = Dataset(rng.normal(size=(4, 3, 2)), [0, 1, 1, 0], 2)
        samples = list(data.samples)
        assert len(samples) == 4 and samples[1].label == 1
        assert data.shape == (3, 2) and data.td == 6
        sub = data.subset([1, 2])
        np.testing.assert_array_equal(sub.labels, [1, 1])

    def test_csv_round_trip(self, tmp_path, rng):
        data = Dataset(rng.normal(size=(5, 3, 2)), [0, 1, 2, 1, 0], 3)
        path = tmp_path / "train.csv"
        save_dataset(data, path)
        header = path.read_text().splitlines()[0]
        assert header == "label,v_0_0,v_0_1,v_1_0,v_1_1,v_2_0,v_2_1"
        back = load_dataset(path)
        np.testing.assert_array_equal(back.inputs, data.inputs)
        np.testing.assert_array_equal(back.labels, data.labels)
        assert back.class_count == 3


def test_subset_slices_per_sample_meta(rng):
    fg = rng.random((4, 3, 1)) < 0.5
    data = Dataset(rng.normal(size=(4, 3, 1)), [0, 1, 0, 1], 2, meta={"foreground": fg, "gamma": 0.2})
    sub = data.subset([3, 0])
    np.testing.assert_array_equal(sub.meta["foreground"], fg[[3, 0]])
    assert sub.meta["gamma"] == 0.2
