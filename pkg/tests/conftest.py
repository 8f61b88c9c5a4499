import numpy as np
import pytest
from hypothesis import settings

from moe2dense import synthgen

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_layer():
    return synthgen.gen_random_moe(7, d=6, d_expert=4, E=6, k=2)


@pytest.fixture(autouse=True)
def _isolated_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("MOE2DENSE_OUT", str(tmp_path / "out"))
