import numpy as np
import pytest

from distilrl.architectures import Architecture, conv, linear, maxpool, relu
from distilrl.architectures import param_count
from distilrl.config import RunConfig, with_overrides
from distilrl.evaluation import TeacherContext
from distilrl.networks import Dataset, build_network


def surrogate_config(**overrides):
    """A surrogate-mode `RunConfig` with `section.field` overrides."""
    return with_overrides(RunConfig(), {'surrogate.enabled': True},
                          **{k.replace('__', '.'): v
                             for k, v in overrides.items()})


def finite_difference(f, theta, step=1e-5):
    """Central differences of scalar `f` at every entry of `theta`."""
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        plus = theta.copy()
        minus = theta.copy()
        plus[i] += step
        minus[i] -= step
        grad[i] = (f(plus) - f(minus)) / (2 * step)
    return grad


@pytest.fixture
def tiny_arch():
    return Architecture(
        layers=(conv(4), relu(), maxpool(), conv(4), relu(), linear(3)),
        input_shape=(1, 6, 6),
        n_classes=3,
    )


@pytest.fixture
def tiny_teacher(tiny_arch):
    """A teacher context on random data, with made-up logits."""
    rng = np.random.default_rng(0)
    train = Dataset(
        rng.standard_normal((24, 1, 6, 6)),
        rng.integers(0, 3, size=24),
        rng.standard_normal((24, 3)),
    )
    validation = Dataset(
        rng.standard_normal((12, 1, 6, 6)),
        rng.integers(0, 3, size=12),
    )
    return TeacherContext(
        arch=tiny_arch,
        net=build_network(tiny_arch, seed=0),
        a_teacher=0.9,
        params_teacher=param_count(tiny_arch),
        train=train,
        validation=validation,
        seed=0,
    )
