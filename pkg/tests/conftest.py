"""Shared fixtures."""

import numpy as np
import pytest

from ttnf_tool.core.tt import TtShape, clamp_ranks, init_random, max_rank_pyramid, set_mem_budget


@pytest.fixture(autouse=True)
def reset_mem_budget():
    set_mem_budget(None)
    yield
    set_mem_budget(None)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_tt(modes, payload=1, r=None, seed=0, sigma=1.0):
    """Random TT at the (optionally clamped) maximal pyramid rank."""
    shape = TtShape(tuple(modes), payload)
    rank = max_rank_pyramid(shape)
    if r is not None:
        rank = clamp_ranks(rank, r)
    return init_random(shape, rank, sigma, seed)


@pytest.fixture
def small_tt():
    return random_tt((3, 4, 2, 5), payload=2, r=3, seed=1)


@pytest.fixture
def binary_tt():
    """``2^8`` cells, clamped at 4: outer cores are square and get absorbed in reduced form."""
    return random_tt((2,) * 8, payload=1, r=4, seed=2)
