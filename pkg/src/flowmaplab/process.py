"""Forward corruption process, time proposals, and their densities.

Convention throughout the package: t = 0 is clean data, t = 1 is pure
noise, and samplers integrate from 1 down to 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import norm

from .numerics import RngStream

_EDGE = 1e-7  # logit-normal draws are clamped to [_EDGE, 1 - _EDGE]


@dataclass(frozen=True)
class InterpolantSchedule:
    """Coefficients of the corruption path x_t = alpha(t) x0 + sigma(t) eps.

    ``alpha``/``sigma`` and their derivatives must accept scalars or
    arrays elementwise.  Boundary contract: alpha(0)=1, sigma(0)=0,
    alpha(1)=0, sigma(1)=1.
    """

    name: str
    alpha: Callable
    sigma: Callable
    dalpha: Callable
    dsigma: Callable


RECTIFIED_FLOW = InterpolantSchedule(
    name="rectified-flow",
    alpha=lambda t: 1.0 - np.asarray(t, dtype=np.float64),
    sigma=lambda t: np.asarray(t, dtype=np.float64),
    dalpha=lambda t: np.full_like(np.asarray(t, dtype=np.float64), -1.0),
    dsigma=lambda t: np.ones_like(np.asarray(t, dtype=np.float64)),
)


def _per_sample(coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Reshape a (B,) coefficient so it broadcasts against (B, ...) data."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - 1))


def interpolate(
    x0: np.ndarray, eps: np.ndarray, t, sched: InterpolantSchedule = RECTIFIED_FLOW
) -> np.ndarray:
    """Corrupt clean samples: x_t = alpha(t) x0 + sigma(t) eps.

    ``t`` may be a scalar or a per-sample (B,) array.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    a = _per_sample(sched.alpha(t), x0)
    s = _per_sample(sched.sigma(t), x0)
    return a * x0 + s * eps


def velocity_target(
    x0: np.ndarray, eps: np.ndarray, t, sched: InterpolantSchedule = RECTIFIED_FLOW
) -> np.ndarray:
    """Instantaneous velocity d x_t / dt = alpha'(t) x0 + sigma'(t) eps.

    For the rectified-flow schedule this is eps - x0 for every t.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    da = _per_sample(sched.dalpha(t), x0)
    ds = _per_sample(sched.dsigma(t), x0)
    return da * x0 + ds * eps


@dataclass(frozen=True)
class TimeProposal:
    """Logit-normal proposal parameters for training times.

    ``mu_fm`` drives the single-time draw; ``(mu1, mu2)`` drive the
    ordered-pair draw.  Equal means recover the symmetric pair proposal.
    """

    mu_fm: float = 0.0
    mu1: float = 0.4
    mu2: float = -1.2


def sample_time_fm(rng: RngStream, mu: float, n: int) -> np.ndarray:
    """n draws of sigmoid(mu + z), z ~ N(0,1), clamped away from {0,1}."""
    z = rng.normal((n,))
    t = 1.0 / (1.0 + np.exp(-(mu + z)))
    return np.clip(t, _EDGE, 1.0 - _EDGE)


def sample_time_pair(
    rng: RngStream, mu1: float, mu2: float, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Ordered pair (t, r) with t >= r from two independent logit-normals.

    Draws sigmoid(mu_i + z_i) for i in {1, 2} and returns the elementwise
    max as t, min as r.  Ties (t == r) pass through unmodified; only the
    {0,1} boundary is clamped.
    """
    z1 = rng.normal((n,))
    z2 = rng.normal((n,))
    a = 1.0 / (1.0 + np.exp(-(mu1 + z1)))
    b = 1.0 / (1.0 + np.exp(-(mu2 + z2)))
    t = np.maximum(a, b)
    r = np.minimum(a, b)
    t = np.clip(t, _EDGE, 1.0 - _EDGE)
    r = np.clip(r, _EDGE, 1.0 - _EDGE)
    return t, r


def order_stat_densities(
    z: np.ndarray, mu1: float, mu2: float
) -> tuple[np.ndarray, np.ndarray]:
    """Densities of max and min of two independent logit-normal draws.

    With G_i the c.d.f. and g_i the p.d.f. of sigmoid(mu_i + N(0,1)),
    the max has density g1 G2 + g2 G1 and the min has density
    g1 (1 - G2) + g2 (1 - G1).  In logit space the marginal density is
    phi(logit z - mu_i) / (z (1 - z)).

    Args:
        z: evaluation points strictly inside (0, 1).
        mu1, mu2: proposal means.

    Returns:
        ``(f_max, f_min)`` evaluated at ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0.0) or np.any(z >= 1.0):
        raise ValueError("density evaluation points must lie strictly inside (0, 1)")
    u = np.log(z) - np.log1p(-z)
    jac = 1.0 / (z * (1.0 - z))
    g1 = norm.pdf(u - mu1) * jac
    g2 = norm.pdf(u - mu2) * jac
    G1 = norm.cdf(u - mu1)
    G2 = norm.cdf(u - mu2)
    f_max = g1 * G2 + g2 * G1
    f_min = g1 * (1.0 - G2) + g2 * (1.0 - G1)
    return f_max, f_min


def time_shift(t, s: float):
    """Reparametrize time: t -> s t / (1 + (s - 1) t).

    Fixes 0 and 1 for every s > 0; s > 1 pushes interior points toward 1
    (more of the step budget near the noise end).  The inverse map is the
    same formula with 1/s.
    """
    if s <= 0.0:
        raise ValueError(f"shift must be positive, got {s}")
    t = np.asarray(t, dtype=np.float64)
    return s * t / (1.0 + (s - 1.0) * t)


def proposal_density_table(
    mu1: float, mu2: float, n: int = 512
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(z, f_max, f_min) on an interior grid, for CSV export and plots."""
    z = (np.arange(n) + 0.5) / n
    f_max, f_min = order_stat_densities(z, mu1, mu2)
    return z, f_max, f_min
