import numpy as np
import pytest
from scipy.special import expit

from latebal import Dataset


@pytest.fixture
def perfect_complier_data() -> Dataset:
    """Four units that all follow the instrument; effect exactly one."""
    z = np.array([1.0, 1.0, 0.0, 0.0])
    return Dataset(y=z.copy(), d=z.copy(), z=z, x=np.empty((4, 0)))


def random_logistic_dataset(seed: int, n: int = 200, p: int = 2) -> Dataset:
    """A dataset with a logistic instrument score inside the raw basis span."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    theta = rng.normal(0.0, 0.5, size=p + 1)
    index = theta[0] + x @ theta[1:]
    z = (rng.uniform(size=n) < expit(index)).astype(float)
    if z.min() == z.max():
        z[0] = 1.0 - z[0]
    d = (rng.uniform(size=n) < 0.25 + 0.5 * z).astype(float)
    baseline = x[:, 0] if p else 0.0
    y = 0.8 * d + baseline + rng.standard_normal(n)
    return Dataset(y=y, d=d, z=z, x=x)
