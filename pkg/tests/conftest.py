import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def paired_labels(rng, B):
    """Labels for a batch of B with every identity exactly twice, shuffled."""
    labels = np.repeat(np.arange(B // 2), 2)
    rng.shuffle(labels)
    return labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
