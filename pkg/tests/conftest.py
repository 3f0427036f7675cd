import numpy as np
import pytest

from pucci_kac import exprlang
from pucci_kac.geometry import Domain


def field(text: str, dim: int = 2):
    return exprlang.parse(text, dim)


@pytest.fixture
def unit_disk() -> Domain:
    return Domain.ball([0.0, 0.0], 1.0)


def random_sym(rng: np.random.Generator, n: int = 2) -> np.ndarray:
    a = rng.normal(size=(n, n))
    return 0.5 * (a + a.T)


def random_rotation(rng: np.random.Generator, n: int = 2) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))
