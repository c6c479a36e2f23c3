"""Tests for the tensor-train core."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from tests.conftest import random_tt
from ttnf_tool.core.tt import (
    DenseTensor,
    TensorTrain,
    TtRank,
    TtShape,
    check_clamped_pyramid,
    clamp_ranks,
    contract,
    contract_backward,
    element,
    full_to_reduced,
    identity_core,
    init_random,
    max_rank_pyramid,
    num_params,
    reduced_window,
    rmse,
    set_mem_budget,
    tt_svd,
    validate_rank,
    zeros,
)
from ttnf_tool.errors import MemoryBudgetError, NumericalError, RankPatternError, ShapeError


class TestShapesAndRanks:
    def test_shape_extents(self):
        shape = TtShape((2, 3, 4), payload=5)
        assert shape.ndim == 3
        assert shape.numel == 24
        assert shape.extents == (2, 3, 4, 5)

    @pytest.mark.parametrize("modes,payload", [((), 1), ((2, 0), 1), ((2, 2), 0)])
    def test_invalid_shape(self, modes, payload):
        with pytest.raises(ShapeError):
            TtShape(modes, payload)

    def test_max_rank_pyramid(self):
        assert max_rank_pyramid(TtShape((4,) * 4)).ranks == (1, 4, 16, 4, 1)
        assert max_rank_pyramid(TtShape((2,) * 6)).ranks == (1, 2, 4, 8, 4, 2, 1)
        assert max_rank_pyramid(TtShape((8, 8), payload=28)).ranks == (1, 8, 28)

    def test_clamp(self):
        pyramid = max_rank_pyramid(TtShape((2,) * 6))
        assert clamp_ranks(pyramid, 3).ranks == (1, 2, 3, 3, 3, 2, 1)
        assert clamp_ranks(pyramid, 100) == pyramid
        with pytest.raises(ShapeError):
            clamp_ranks(pyramid, 0)

    @pytest.mark.parametrize(
        "ranks",
        [
            (2, 4, 16, 4, 1),  # R_0 != 1
            (1, 4, 16, 4, 2),  # R_D != payload
            (1, 5, 16, 4, 1),  # R_1 > M_1
            (1, 4, 16, 1),  # wrong length
        ],
    )
    def test_validate_rank_rejects(self, ranks):
        with pytest.raises(ShapeError):
            validate_rank(TtShape((4,) * 4), TtRank(ranks))

    def test_identity_core(self):
        left = identity_core(2, 3, 6, "left")
        assert_allclose(left.reshape(6, 6), np.eye(6))
        right = identity_core(6, 3, 2, "right")
        assert_allclose(right.reshape(6, 6), np.eye(6))
        with pytest.raises(ShapeError):
            identity_core(2, 3, 5, "left")


class TestConstruction:
    def test_init_random_is_reproducible(self):
        a = random_tt((3, 3, 3), r=2, seed=7)
        b = random_tt((3, 3, 3), r=2, seed=7)
        for ca, cb in zip(a.cores, b.cores):
            np.testing.assert_array_equal(ca, cb)

    @pytest.mark.parametrize(
        "modes,payload,r,sigma",
        [
            ((8, 8, 8), 1, None, 0.5),
            ((16, 16, 16), 1, 16, 1.0),
            ((32, 32), 1, None, 2.0),
            ((16, 4, 4, 16), 1, 32, 1.0),
            ((16, 8, 16), 2, 32, 1.0),
            ((12, 10, 12), 3, 24, 0.3),
        ],
    )
    def test_init_random_calibration(self, modes, payload, r, sigma):
        # R_D takes part in the scale, so each payload element has std sigma / sqrt(payload)
        shape = TtShape(modes, payload)
        rank = max_rank_pyramid(shape) if r is None else clamp_ranks(max_rank_pyramid(shape), r)
        stds = [np.std(contract(init_random(shape, rank, sigma, seed)).data) for seed in range(32)]
        assert np.mean(stds) == pytest.approx(sigma / np.sqrt(payload), rel=0.1)

    def test_init_random_rejects_sigma(self):
        shape = TtShape((2, 2))
        with pytest.raises(ValueError):
            init_random(shape, max_rank_pyramid(shape), 0.0, 0)

    def test_zeros(self):
        shape = TtShape((2, 3), payload=2)
        tt = zeros(shape, max_rank_pyramid(shape))
        assert np.count_nonzero(contract(tt).data) == 0

    def test_core_extents_checked(self):
        shape = TtShape((2, 2))
        rank = max_rank_pyramid(shape)
        with pytest.raises(ShapeError):
            TensorTrain(shape, rank, [np.zeros((1, 2, 2)), np.zeros((2, 3, 1))])

    def test_non_finite_core(self):
        shape = TtShape((2, 2))
        rank = max_rank_pyramid(shape)
        bad = np.zeros((1, 2, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(NumericalError):
            TensorTrain(shape, rank, [bad, np.zeros((2, 2, 1))])

    def test_identity_mask_checked(self):
        shape = TtShape((2, 2))
        rank = max_rank_pyramid(shape)
        with pytest.raises(ShapeError):
            TensorTrain(shape, rank, [np.zeros((1, 2, 2)), np.zeros((2, 2, 1))], (True, False))

    def test_dense_rejects_nan(self):
        with pytest.raises(NumericalError):
            DenseTensor(np.array([1.0, np.inf]))

    def test_dense_from_flat(self):
        assert DenseTensor.from_flat((2, 3), np.arange(6.0)).extents == (2, 3)
        with pytest.raises(ShapeError):
            DenseTensor.from_flat((2, 3), np.arange(5.0))


class TestContraction:
    def test_contract_matches_einsum(self, small_tt):
        c = small_tt.cores
        ref = np.einsum("xai,ibj,jck,kdp->xabcdp", c[0], c[1], c[2], c[3])[0]
        assert_allclose(contract(small_tt).data, ref, rtol=1e-12, atol=1e-12)

    def test_element_matches_contract(self, small_tt):
        dense = contract(small_tt).data
        for index in [(0, 0, 0, 0), (2, 3, 1, 4), (1, 2, 0, 3)]:
            assert_allclose(element(small_tt, index), dense[index], rtol=1e-12)

    def test_element_out_of_range(self, small_tt):
        with pytest.raises(ShapeError):
            element(small_tt, (3, 0, 0, 0))
        with pytest.raises(ShapeError):
            element(small_tt, (0, 0, 0))

    def test_contract_respects_budget(self, small_tt):
        set_mem_budget(10)
        with pytest.raises(MemoryBudgetError):
            contract(small_tt)

    def test_contract_backward_is_exact(self, small_tt, rng):
        # <U, contract(tt)> is linear in each core, so a unit perturbation is exact
        upstream = rng.normal(size=small_tt.shape.extents)
        grads = contract_backward(small_tt, upstream)
        base = float(np.sum(upstream * contract(small_tt).data))
        for k, g in grads.items():
            direction = rng.normal(size=small_tt.cores[k].shape)
            moved = small_tt.copy()
            moved.cores[k] += direction
            changed = float(np.sum(upstream * contract(moved).data))
            assert_allclose(changed - base, np.sum(g * direction), rtol=1e-9)

    def test_contract_backward_shape_mismatch(self, small_tt):
        with pytest.raises(ShapeError):
            contract_backward(small_tt, np.zeros((3, 4, 2, 5)))


class TestTtSvd:
    def test_exact_at_full_rank(self, rng):
        shape = TtShape((3, 4, 5), payload=2)
        dense = DenseTensor(rng.normal(size=shape.extents))
        tt = tt_svd(dense, shape, max_rank_pyramid(shape))
        assert rmse(contract(tt), dense) < 1e-10

    def test_recovers_low_rank(self):
        tt = random_tt((4,) * 5, r=3, seed=3)
        dense = contract(tt)
        approx = tt_svd(dense, tt.shape, tt.rank)
        assert approx.rank == tt.rank
        assert rmse(contract(approx), dense) < 1e-10

    def test_ranks_equal_clamped_caps(self, rng):
        shape = TtShape((4,) * 4)
        cap = clamp_ranks(max_rank_pyramid(shape), 2)
        tt = tt_svd(DenseTensor(rng.normal(size=shape.extents)), shape, cap)
        assert tt.rank.ranks == (1, 2, 2, 2, 1)

    def test_truncation_error_decreases_with_rank(self, rng):
        shape = TtShape((4,) * 4)
        dense = DenseTensor(rng.normal(size=shape.extents))
        errors = [
            rmse(contract(tt_svd(dense, shape, clamp_ranks(max_rank_pyramid(shape), r))), dense) for r in (1, 2, 4, 16)
        ]
        assert errors == sorted(errors, reverse=True)
        assert errors[-1] < 1e-10

    def test_rejects_non_finite(self):
        shape = TtShape((2, 2))
        data = np.array([1.0, np.nan, 0.0, 0.0]).reshape(2, 2, 1)
        with pytest.raises(NumericalError):
            tt_svd(_raw_dense(data), shape, max_rank_pyramid(shape))

    def test_rejects_wrong_size(self, rng):
        shape = TtShape((2, 2))
        with pytest.raises(ShapeError):
            tt_svd(DenseTensor(rng.normal(size=(3, 2, 1))), shape, max_rank_pyramid(shape))


def _raw_dense(data):
    """DenseTensor bypassing the finiteness check."""
    dense = object.__new__(DenseTensor)
    dense.data = data
    return dense


class TestReducedForm:
    def test_window(self, binary_tt):
        assert binary_tt.rank.ranks == (1, 2, 4, 4, 4, 4, 4, 2, 1)
        assert reduced_window(binary_tt.shape, binary_tt.rank) == (2, 5)

    def test_window_collapses_at_peak(self):
        shape = TtShape((2,) * 6)
        assert reduced_window(shape, max_rank_pyramid(shape)) == (3, 3)

    def test_reduction_preserves_tensor(self, binary_tt):
        reduced = full_to_reduced(binary_tt)
        assert reduced.identity_mask == (True, True, False, False, False, False, True, True)
        assert reduced.trainable == [2, 3, 4, 5]
        assert reduced.is_reduced
        assert_allclose(contract(reduced).data, contract(binary_tt).data, rtol=1e-10, atol=1e-12)

    def test_reduction_drops_parameters(self, binary_tt):
        reduced = full_to_reduced(binary_tt)
        assert num_params(reduced) < num_params(binary_tt)
        assert num_params(reduced) == sum(binary_tt.cores[k].size for k in range(2, 6))

    def test_reduction_is_idempotent(self, binary_tt):
        once = full_to_reduced(binary_tt)
        twice = full_to_reduced(once)
        for a, b in zip(once.cores, twice.cores):
            np.testing.assert_array_equal(a, b)

    def test_rejects_non_clamped_rank(self):
        shape = TtShape((2,) * 8)
        rank = TtRank((1, 2, 3, 4, 4, 4, 4, 2, 1))
        tt = init_random(shape, rank, 1.0, 0)
        with pytest.raises(RankPatternError):
            full_to_reduced(tt)
        with pytest.raises(RankPatternError):
            check_clamped_pyramid(shape, rank)

    def test_check_clamped_pyramid_returns_r(self, binary_tt):
        assert check_clamped_pyramid(binary_tt.shape, binary_tt.rank) == 4


class TestMetrics:
    def test_rmse(self):
        assert rmse(np.zeros(4), np.full(4, 2.0)) == pytest.approx(2.0)
        with pytest.raises(ShapeError):
            rmse(np.zeros(3), np.zeros(4))

    def test_astype_and_copy(self, small_tt):
        f32 = small_tt.astype(np.float32)
        assert f32.dtype == np.float32
        copy = small_tt.copy()
        copy.cores[0][...] = 0.0
        assert np.any(small_tt.cores[0] != 0.0)
