import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sucm.taxonomy import APP, INTERNAL, build_tree

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def two_by_two():
    """root -> {A, B}; A -> {a0, a1}; B -> {b0, b1}."""
    return build_tree([
        ("root", None, INTERNAL, "root"),
        ("A", "root", INTERNAL, "A"),
        ("B", "root", INTERNAL, "B"),
        ("a0", "A", APP, "a0"),
        ("a1", "A", APP, "a1"),
        ("b0", "B", APP, "b0"),
        ("b1", "B", APP, "b1"),
    ])


def flat_tree(n):
    return build_tree([("root", None, INTERNAL, "root")] + [(f"a{k}", "root", APP, f"a{k}") for k in range(n)])


@pytest.fixture
def tree22():
    return two_by_two()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
