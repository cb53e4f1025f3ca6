import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffidelity.core import topk_mask
from ffidelity.masking import (
    LERF,
    MORF,
    PatchSpec,
    ceil_ratio,
    gen_patch_mask,
    gen_random_mask,
    make_plan,
    removal_masks,
    random_mask_batch,
    sample_chi_minus,
    sample_chi_plus,
    smallest_keys_mask,
    stream_keys,
    truncate_alpha,
)


class TestTruncateAlpha:
    def test_truncation_active(self):
        assert truncate_alpha(0.5, 0.1, 1024, 256, MORF) == pytest.approx(0.4)

    def test_truncation_inactive(self):
        assert truncate_alpha(0.5, 0.1, 1024, 64, MORF) == 0.5

    def test_lerf_pool_is_complement(self):
        # LeRF pool is 1024 - 64 = 960, so the cap is 102.4 / 960
        assert truncate_alpha(0.5, 0.1, 1024, 64, LERF) == pytest.approx(102.4 / 960)

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            truncate_alpha(0.5, 0.1, 16, 0, MORF)
        with pytest.raises(ValueError):
            truncate_alpha(0.5, 0.1, 16, 16, LERF)

    def test_bad_side(self):
        with pytest.raises(ValueError):
            truncate_alpha(0.5, 0.1, 16, 4, "middle")

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 400), st.data())
    def test_removal_never_exceeds_bound(self, alpha, beta, td, data):
        s = data.draw(st.integers(1, td))
        plan = make_plan(MORF, alpha, beta, td, s)
        assert plan.removal_count <= np.floor(beta * td + 1e-9)
        assert plan.effective_alpha <= alpha


class TestMakePlan:
    def test_counts(self):
        plan = make_plan(MORF, 0.5, 0.1, 1024, 256)
        assert plan.removal_count == 102
        assert plan.pool_size == 256

    def test_untruncated(self):
        plan = make_plan(MORF, 0.5, 0.01, 100, 40, truncate=False)
        assert plan.removal_count == 20 and plan.beta == 1.0

    def test_s_out_of_range(self):
        with pytest.raises(ValueError):
            make_plan(MORF, 0.5, 0.1, 10, 11)

    def test_ceil_ratio(self):
        assert ceil_ratio(0.1, 1024, 0.5) == 205


class TestRandomMask:
    def test_exact_count(self, rng):
        for beta in (0.0, 0.3, 0.5, 1.0):
            assert gen_random_mask(7, 3, beta, rng).size == int(np.floor(beta * 21 + 1e-9))

    def test_uniform_inclusion(self):
        gen = np.random.default_rng(0)
        bits = random_mask_batch(100_000, 2, 2, 0.5, gen)
        assert (bits.reshape(-1, 4).sum(axis=1) == 2).all()
        np.testing.assert_allclose(bits.mean(axis=0), 0.5, atol=0.01)

    def test_rejects_bad_beta(self, rng):
        with pytest.raises(ValueError):
            gen_random_mask(2, 2, 1.5, rng)


class TestPatchMask:
    def test_single_patch(self, rng):
        m = gen_patch_mask(8, 8, 1, 0.25, PatchSpec(4, 4), rng)
        grid = m.bits.reshape(8, 8)
        assert m.size == 16
        rows, cols = np.nonzero(grid)
        assert rows.max() - rows.min() == 3 and cols.max() - cols.min() == 3
        assert rows.min() % 4 == 0 and cols.min() % 4 == 0

    def test_two_disjoint_patches(self, rng):
        for _ in range(20):
            grid = gen_patch_mask(8, 8, 1, 0.5, PatchSpec(4, 4), rng).bits.reshape(8, 8)
            quads = [grid[r:r + 4, c:c + 4] for r in (0, 4) for c in (0, 4)]
            full = [q.all() for q in quads]
            assert sum(full) == 2
            assert all(q.all() or not q.any() for q in quads)

    def test_whole_positions(self, rng):
        m = gen_patch_mask(6, 6, 3, 0.3, PatchSpec(2, 3), rng)
        bits = m.bits
        assert (bits.all(axis=1) | ~bits.any(axis=1)).all()

    def test_unit_patch_matches_random_mask_count(self, rng):
        m = gen_patch_mask(5, 4, 1, 0.35, PatchSpec(1, 1), rng)
        assert m.size == 7

    def test_unit_patch_uniform(self):
        gen = np.random.default_rng(3)
        bits = np.stack([gen_patch_mask(2, 2, 1, 0.5, PatchSpec(1, 1), gen).bits for _ in range(20_000)])
        np.testing.assert_allclose(bits.mean(axis=0), 0.5, atol=0.015)

    def test_patch_larger_than_grid(self, rng):
        with pytest.raises(ValueError):
            gen_patch_mask(4, 4, 1, 0.5, PatchSpec(5, 1), rng)


class TestChi:
    def test_chi_plus_uniform_over_top(self):
        scores = np.array([[0.9], [0.5], [0.3], [0.1]])
        plan = make_plan(MORF, 0.5, 1.0, 4, 2)
        gen = np.random.default_rng(1)
        bits = np.stack([sample_chi_plus(scores, plan, gen).bits for _ in range(10_000)])
        assert (bits.reshape(-1, 4).sum(axis=1) == 1).all()
        rates = bits.mean(axis=0).ravel()
        np.testing.assert_allclose(rates[:2], 0.5, atol=0.02)
        np.testing.assert_array_equal(rates[2:], 0.0)

    def test_chi_minus_outside_top(self, rng):
        scores = np.arange(10, 0, -1, dtype=float).reshape(10, 1)
        plan = make_plan(LERF, 0.5, 1.0, 10, 4)
        for _ in range(50):
            m = sample_chi_minus(scores, plan, rng)
            assert m.size == 3
            assert not m.bits[:4].any()

    def test_side_mismatch(self, rng):
        plan = make_plan(LERF, 0.5, 1.0, 4, 2)
        with pytest.raises(ValueError):
            sample_chi_plus(np.ones((4, 1)), plan, rng)

    def test_batched_removals_respect_pool(self):
        gen = np.random.default_rng(5)
        scores = gen.random((6, 4, 4))
        keys = stream_keys(0, 6, 3, 16)
        for side in (MORF, LERF):
            plan = make_plan(side, 0.5, 0.2, 16, 6)
            rem = removal_masks(scores, plan, keys)
            top = topk_mask(scores, 6)[:, None]
            pool = top if side == MORF else ~top
            assert not (rem & ~pool).any()
            assert (rem.reshape(6, 3, -1).sum(-1) == plan.removal_count).all()


class TestKeys:
    def test_keys_independent_of_batch_size(self):
        a = stream_keys(3, 2, 4, 9)
        b = stream_keys(3, 5, 4, 9)
        np.testing.assert_array_equal(a, b[:2])

    def test_smallest_keys(self):
        keys = np.array([0.4, 0.1, 0.3, 0.2])
        cand = np.array([True, False, True, True])
        np.testing.assert_array_equal(smallest_keys_mask(keys, cand, 2), [False, False, True, True])

    def test_too_few_candidates(self):
        with pytest.raises(ValueError):
            smallest_keys_mask(np.zeros(3), np.array([True, False, False]), 2)
