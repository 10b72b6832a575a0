import os

import pytest
import torch
from hypothesis import settings

from bns.field import GaussianMixture, GMMField
from bns.scheduler import VPScheduler

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_default_dtype(torch.float64)


@pytest.fixture
def vp():
    return VPScheduler()


@pytest.fixture
def gmm2():
    return GaussianMixture([0.3, 0.7], [[1.0, 0.0], [-1.0, 0.5]], [0.4, 0.5])


@pytest.fixture
def gmm_field(gmm2, vp):
    return GMMField(gmm2, vp)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)
