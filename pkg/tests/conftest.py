import numpy as np
import pytest

from shadowflow.bubbles import BubbleState, interaction_matrix
from shadowflow.geometry import builtin_field, find_critical_points
from shadowflow.reduced_energy import balance, solve_balanced_alpha


@pytest.fixture(scope="session")
def K6():
    return builtin_field(6)


@pytest.fixture(scope="session")
def crits6(K6):
    return find_critical_points(K6)


def random_center(rng, K, negative_laplacian=False):
    while True:
        x = rng.uniform(0, 1, K.dimension)
        if not negative_laplacian or K.laplacian(x) < 0:
            return x


def random_state_in_V(rng, K, q, eps_V=0.01, negative_laplacian=False, lam_range=(1.5e2, 1e7),
                      imbalance=1e-3, vnorm_max=None, g_scale=1.0):
    """A random BubbleState inside V(q, eps_V); rejection-sampled on the pair clause."""
    n = K.dimension
    vmax = eps_V if vnorm_max is None else vnorm_max
    for _ in range(1000):
        centers = np.array([random_center(rng, K, negative_laplacian) for _ in range(q)])
        lam = np.exp(rng.uniform(np.log(lam_range[0]), np.log(lam_range[1]), q))
        alpha = solve_balanced_alpha(K.value(centers), n, 1.0)
        alpha = alpha * np.exp(rng.uniform(-imbalance, imbalance, q) * (n - 2) / 4)
        s = BubbleState.from_lambda(alpha, centers, lam, rng.uniform(0, vmax) * 0.99)
        eps = interaction_matrix(s, g_scale).eps
        if q > 1 and np.max(eps) >= eps_V:
            continue
        if np.max(np.abs(1 - balance(s, K).B)) >= eps_V:
            continue
        return s
    raise RuntimeError("could not sample a state in V")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
