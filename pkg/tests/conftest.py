import numpy as np
import pytest

from selfsim_trees.rtree import FiniteRTree
from selfsim_trees.seeding import Streams

SEED = 20240611


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)


@pytest.fixture
def streams():
    return Streams(SEED)


@pytest.fixture
def fixture_tree():
    """Path of two unit edges plus a unit branch at the middle vertex; atom 0.5 halfway up edge 2. Mass 3.5."""
    return FiniteRTree.from_edges([-1, 0, 1, 1], [0.0, 1.0, 1.0, 1.0], atoms=[(2, 0.5, 0.5)])


@pytest.fixture
def unit_segment():
    return FiniteRTree.segment(1.0)
