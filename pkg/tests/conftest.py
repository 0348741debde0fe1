import functools

import numpy as np
import pytest

from dualstop import pipeline
from dualstop.config import load_config, reference_config_path
from dualstop.model import ModelParams

REFERENCE_CASES = ("I", "II_strict", "II_equal", "III", "IV")


def make_params(**over) -> ModelParams:
    """One-asset market used throughout: a^2 = 0.04, threshold 0.03."""
    base = dict(r=0.02, mu=0.06, sigma=0.3, gamma=0.5, b=1.0, K=0.5, beta=0.1, T=1.0)
    base.update(over)
    return ModelParams(**base)


@functools.lru_cache(maxsize=None)
def reference_config(case: str):
    return load_config(reference_config_path(case))


@functools.lru_cache(maxsize=None)
def solved_reference(case: str) -> pipeline.Solved:
    return pipeline.solve(reference_config(case))


@functools.lru_cache(maxsize=None)
def solved_refined(case: str) -> pipeline.Solved:
    return pipeline.solve(pipeline.refine_config(reference_config(case), 1))


@pytest.fixture(scope="session")
def solved():
    return solved_reference


@pytest.fixture(scope="session")
def refined():
    return solved_refined


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
