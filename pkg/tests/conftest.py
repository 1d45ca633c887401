import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_kernel_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="crossdiff.grid")


def smooth_bumps(grid, centers, floor=1.0, amplitude=0.5, width=0.1):
    """Periodic Gaussian bumps, one species per entry of ``centers``."""
    out = []
    for c in centers:
        r2 = np.zeros(grid.shape)
        for x, ci in zip(grid.centers(), np.atleast_1d(c)):
            d = np.abs(x - ci)
            d = np.minimum(d, 1.0 - d)
            r2 += d * d
        out.append(floor + amplitude * np.exp(-r2 / (2 * width**2)))
    return np.stack(out)
