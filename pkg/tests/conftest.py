import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def l96_spun_state(seed: int = 7, n_spinup: int = 400) -> np.ndarray:
    """A state on the attractor: perturbed rest state integrated past transients."""
    from rkhsfilter.dynamics import IntegratorConfig, integrate_l96

    x0 = 8.0 * np.ones(40)
    x0[0] += 0.01
    cfg = IntegratorConfig(dt=0.05, steps_per_obs=2)
    return integrate_l96(x0, cfg, n_spinup)[-1]
