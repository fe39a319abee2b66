import logging

import numpy as np
import pandas as pd

from evkd.fourier import dft2d, dft2d_naive, tft_kd_loss
from evkd.inference import consistency_loss
from evkd.losses import (
    feat_kd_loss,
    gaussian_heatmap,
    gwf_loss,
    response_kd_loss,
    sim_kd_loss,
)

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
KD_TOLERANCE = 1e-4


def numerical_gradient(f, x, step=FD_STEP):
    """Central-difference gradient of the scalar function `f` at `x`."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    for i in range(x.size):
        original = x.flat[i]
        x.flat[i] = original + step
        f_plus = f(x)
        x.flat[i] = original - step
        f_minus = f(x)
        x.flat[i] = original
        grad.flat[i] = (f_plus - f_minus) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    denominator = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denominator)


def check_gradient(loss_fn, x, step=FD_STEP):
    """Relative error between the analytic gradient of `loss_fn` and finite differences.

    `loss_fn(x)` must return a LossReport.
    """
    analytic = loss_fn(x).grad
    numeric = numerical_gradient(lambda z: loss_fn(z).value, x, step)
    return relative_error(analytic, numeric)


def _random_heatmap(rng, dims):
    center = (int(rng.integers(0, dims[1])), int(rng.integers(0, dims[0])))
    return gaussian_heatmap(center, rng.uniform(0.5, 2.0), dims)


def _sim_trial(rng):
    teacher = rng.normal(size=(16, 16))
    return check_gradient(lambda s: sim_kd_loss(s, teacher), rng.normal(size=(8, 8)))


def _feat_trial(rng):
    teacher = rng.normal(size=(1, 16, 4))
    return check_gradient(lambda s: feat_kd_loss(s, teacher), rng.normal(size=(1, 8, 4)))


def _gwf_trial(rng):
    target = _random_heatmap(rng, (8, 8))
    return check_gradient(lambda p: gwf_loss(p, target), rng.uniform(0.05, 0.95, size=(8, 8)))


def _response_trial(rng):
    teacher = rng.uniform(0.05, 0.95, size=(4, 4))
    student = rng.uniform(0.05, 0.95, size=(4, 4))
    return check_gradient(lambda s: response_kd_loss(s, teacher, tau=2.0), student)


def _tft_trial(rng):
    teacher = rng.normal(size=(3, 4, 4))
    return check_gradient(lambda s: tft_kd_loss(list(s), list(teacher)), rng.normal(size=(3, 4, 4)))


def _consistency_trial(rng):
    return check_gradient(lambda m: consistency_loss(list(m)), rng.normal(size=(3, 4, 4)))


def _dft_trial(rng):
    m, n = rng.integers(1, 17, size=2)
    grid = rng.normal(size=(m, n))
    fast, naive = dft2d(grid), dft2d_naive(grid)
    return float(max(np.abs(fast.real - naive.real).max(), np.abs(fast.imag - naive.imag).max()))


KD_SUITE = {
    "sim_kd": _sim_trial,
    "feat_kd": _feat_trial,
    "gwf": _gwf_trial,
    "response_kd": _response_trial,
    "tft_kd": _tft_trial,
    "consistency": _consistency_trial,
    "dft2d_oracle": _dft_trial,
}


def kd_check(seed=0, trials=100, tolerance=KD_TOLERANCE):
    """Run every loss's finite-difference check and the DFT oracle over random instances.

    Returns a DataFrame with the worst error per check and whether it passed.
    Gradient checks report relative error, the DFT oracle absolute error.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for name, trial in KD_SUITE.items():
        errors = [trial(rng) for _ in range(trials)]
        worst = max(errors) if errors else 0.0
        rows.append({"check": name, "trials": trials, "max_error": worst, "passed": worst < tolerance})
        logger.info(f"{name}: max error {worst:.3e} over {trials} trials")
    return pd.DataFrame(rows)
