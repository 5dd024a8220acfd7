"""Closed-form reference fields and the numerical reference transport.

For an isotropic Gaussian data distribution under the rectified-flow
path, the marginal of x_t is N((1-t) mu, v(t) I) with
v(t) = (1-t)^2 s^2 + t^2, and both the instantaneous velocity field and
the two-time transport map have closed forms (derived in
docs/gaussian_oracle.md).  Mixtures combine component fields through
posterior responsibilities.  Everything here is independent of the
learned models and is used to calibrate samplers and losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .process import RECTIFIED_FLOW, InterpolantSchedule


@dataclass(frozen=True)
class GaussianSpec:
    """Isotropic Gaussian N(mean, scale^2 I)."""

    mean: tuple
    scale: float

    def __post_init__(self):
        if self.scale <= 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def mean_arr(self) -> np.ndarray:
        return np.asarray(self.mean, dtype=np.float64)

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class GmmSpec:
    """Mixture of isotropic Gaussians."""

    weights: tuple
    means: tuple  # K tuples of length D
    scales: tuple  # K positive floats

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if len(self.means) != len(self.weights) or len(self.scales) != len(self.weights):
            raise ValueError("weights, means, scales must have equal length")
        if any(s <= 0.0 for s in self.scales):
            raise ValueError("scales must be positive")

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def means_arr(self) -> np.ndarray:
        return np.asarray(self.means, dtype=np.float64)

    def component(self, k: int) -> GaussianSpec:
        return GaussianSpec(mean=tuple(self.means[k]), scale=float(self.scales[k]))


def _marginal_var(t, scale: float) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return (1.0 - t) ** 2 * scale**2 + t**2


def gaussian_velocity(x: np.ndarray, t, spec: GaussianSpec) -> np.ndarray:
    """Instantaneous velocity E[dx_t/dt | x_t = x] for Gaussian data.

    Rectified-flow schedule only.  t may be scalar or (B,).
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    mu = spec.mean_arr
    s2 = spec.scale**2
    var = _marginal_var(t, spec.scale)
    tt = t[..., None] if t.ndim else t
    vv = var[..., None] if t.ndim else var
    coef = (tt - (1.0 - tt) * s2) / vv
    return -mu + coef * (x - (1.0 - tt) * mu)


def gaussian_transport(x: np.ndarray, t, r, spec: GaussianSpec) -> np.ndarray:
    """Exact solution map of the probability-flow ODE from time t to r.

    x_r = (1-r) mu + (x - (1-t) mu) sqrt(v(r) / v(t)).
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    mu = spec.mean_arr
    ratio = np.sqrt(_marginal_var(r, spec.scale) / _marginal_var(t, spec.scale))
    tt = t[..., None] if t.ndim else t
    rr = r[..., None] if r.ndim else r
    ratio = ratio[..., None] if np.asarray(ratio).ndim else ratio
    return (1.0 - rr) * mu + (x - (1.0 - tt) * mu) * ratio


def gaussian_average_velocity(x: np.ndarray, t, r, spec: GaussianSpec) -> np.ndarray:
    """Average velocity (x_r - x_t) / (r - t); instantaneous where r = t.

    Ties are resolved rowwise, so mixed batches are fine.
    """
    x = np.asarray(x, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    r_arr = np.asarray(r, dtype=np.float64)
    if t_arr.ndim == 0 and r_arr.ndim == 0:
        if float(t_arr) == float(r_arr):
            return gaussian_velocity(x, t_arr, spec)
        x_r = gaussian_transport(x, t_arr, r_arr, spec)
        return (x_r - x) / (float(r_arr) - float(t_arr))
    t_b = np.broadcast_to(t_arr, x.shape[:1]).astype(np.float64)
    r_b = np.broadcast_to(r_arr, x.shape[:1]).astype(np.float64)
    tie = t_b == r_b
    inst = gaussian_velocity(x, t_b, spec)
    gap = np.where(tie, 1.0, r_b - t_b)
    avg = (gaussian_transport(x, t_b, r_b, spec) - x) / gap[:, None]
    return np.where(tie[:, None], inst, avg)


def gmm_log_responsibilities(x: np.ndarray, t, spec: GmmSpec) -> np.ndarray:
    """Log posterior over components given x_t = x; rows sum to 1 in prob."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    d = x.shape[-1]
    logs = []
    for k in range(spec.k):
        var = _marginal_var(t, spec.scales[k])
        m = (1.0 - (t[..., None] if t.ndim else t)) * spec.means_arr[k]
        sq = np.sum((x - m) ** 2, axis=-1)
        logs.append(
            np.log(spec.weights[k]) - 0.5 * (d * np.log(2.0 * np.pi * var) + sq / var)
        )
    logp = np.stack(logs, axis=-1)
    return logp - _logsumexp(logp, axis=-1, keepdims=True)


def _logsumexp(a: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def gmm_velocity(x: np.ndarray, t, spec: GmmSpec) -> np.ndarray:
    """Mixture velocity: responsibility-weighted component velocities."""
    x = np.asarray(x, dtype=np.float64)
    resp = np.exp(gmm_log_responsibilities(x, t, spec))
    out = np.zeros_like(x)
    for k in range(spec.k):
        out += resp[..., k : k + 1] * gaussian_velocity(x, t, spec.component(k))
    return out


def reference_ode(
    v_fn,
    x: np.ndarray,
    t: float,
    r: float,
    tol: float = 1e-10,
    max_evals: int = 1_000_000,
) -> tuple[np.ndarray, int]:
    """Integrate dx/dt = v_fn(x, t) from t to r with an adaptive RK45 pair.

    Returns ``(x_r, n_evals)``.  Raises RuntimeError if the integrator
    fails or exceeds ``max_evals`` right-hand-side evaluations.
    """
    x = np.asarray(x, dtype=np.float64)
    if t == r:
        return x.copy(), 0
    shape = x.shape

    def rhs(s, flat):
        return v_fn(flat.reshape(shape), s).reshape(-1)

    sol = solve_ivp(
        rhs, (float(t), float(r)), x.reshape(-1), method="RK45", rtol=tol, atol=tol
    )
    if not sol.success:
        raise RuntimeError(f"reference ODE failed between t={t} and r={r}: {sol.message}")
    if sol.nfev > max_evals:
        raise RuntimeError(f"reference ODE used {sol.nfev} evaluations (cap {max_evals})")
    return sol.y[:, -1].reshape(shape), int(sol.nfev)


@dataclass(frozen=True)
class ErrReport:
    """Squared distance between a one-jump prediction and the true transport."""

    err: float
    tol: float
    n_evals: int


def discretization_error(
    u_val: np.ndarray,
    v_fn,
    x: np.ndarray,
    t: float,
    r: float,
    tol: float = 1e-10,
) -> ErrReport:
    """Err(u; x, t, r) = || x + (r - t) u - Phi(x, t -> r) ||^2.

    ``u_val`` is the candidate average velocity at (x, t, r); the true
    endpoint comes from :func:`reference_ode` under ``v_fn``.  At r = t
    the error is exactly zero and no integration happens.
    """
    x = np.asarray(x, dtype=np.float64)
    u_val = np.asarray(u_val, dtype=np.float64)
    if r == t:
        return ErrReport(err=0.0, tol=tol, n_evals=0)
    x_ref, n_evals = reference_ode(v_fn, x, t, r, tol)
    resid = x + (r - t) * u_val - x_ref
    return ErrReport(err=float(np.sum(resid * resid)), tol=tol, n_evals=n_evals)
