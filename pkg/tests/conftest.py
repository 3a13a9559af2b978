import numpy as np
import pytest

from splat4d.gaussians import Gaussian4D, GaussianMap


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_gaussian(rng, scale_range=(-1.5, 0.5), mu_scale=1.0) -> Gaussian4D:
    return Gaussian4D(
        mu=rng.normal(size=4) * mu_scale,
        log_scale=rng.uniform(*scale_range, size=4),
        q_left=random_unit_quat(rng),
        q_right=random_unit_quat(rng),
        opacity_logit=rng.uniform(-2.0, 2.0),
        color=rng.uniform(0.0, 1.0, size=3),
        dynamics=rng.uniform(0.0, 1.0),
    )


def map_from_gaussians(gaussians) -> GaussianMap:
    m = GaussianMap()
    for g in gaussians:
        m.add_gaussian(g)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(20240913)
