import numpy as np
import pytest

from priorscan.models.normal_hier import NormalHierModel
from priorscan.prior_family import HyperRect


@pytest.fixture(scope="session")
def toy_model() -> NormalHierModel:
    return NormalHierModel(y=np.array([-2.0, -1.0, 0.0, 1.0, 2.0]))


@pytest.fixture(scope="session")
def toy_rect() -> HyperRect:
    return HyperRect(lower=[-1.0, 0.3], upper=[1.0, 3.0])


@pytest.fixture(scope="session")
def toy_trace(toy_model):
    """One medium iid trace shared by read-only tests."""
    return toy_model.exact_trace(h1=[0.0, 1.0], n=20000, seed=11)
