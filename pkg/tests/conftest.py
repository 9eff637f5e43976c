import numpy as np
import pytest

from msrl.rng import stream
from msrl.world import AttributeSchema, generate_world


def small_world(seed=0, n_groups=3, pairs_per_group=12, d=8, sigma=0.1, objects_per_image=3, **kw):
    schema = AttributeSchema(3, (3, 3, 3), d, sigma)
    return generate_world(schema, n_groups, pairs_per_group, stream(seed, "world"), objects_per_image=objects_per_image, **kw)


@pytest.fixture(scope="session")
def world():
    return small_world()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x, step=1e-5):
    """Numerical gradient of scalar f() w.r.t. array x (modified in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        hi = f()
        x[idx] = old - step
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * step)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
