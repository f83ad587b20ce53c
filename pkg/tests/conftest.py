import numpy as np
import pytest

from p2nf.perf import tune_allocator

tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test in float64 verification precision."""
    from p2nf import autodiff as ad

    with ad.precision("float64"):
        yield
