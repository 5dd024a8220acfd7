"""Training targets and losses: guided velocities, average-velocity
targets built from a single JVP, and (adaptively weighted) robust losses.

All targets are detached: they are computed from plain parameter arrays
even when the differentiated forward pass runs on graph nodes, which is
exactly the stop-gradient semantics of the update rules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .net import NetConfig, forward, time_features
from .numerics import NonFiniteLossError, RngStream, jvp, tree_map
from .numerics import ops
from .process import (
    RECTIFIED_FLOW,
    InterpolantSchedule,
    TimeProposal,
    interpolate,
    sample_time_fm,
    sample_time_pair,
    velocity_target,
)

LOSS_FAMILIES = ("mse", "cauchy", "adaptive-cauchy", "adaptive-gaussian")


@dataclass(frozen=True)
class GuidanceConfig:
    """Training-time guidance baked into the regression target.

    ``omega`` is the mixing weight toward the conditional direction; it
    corresponds to a classical guidance scale of 1 / (1 - omega), so
    omega = 0.5 matches scale 2.0.  Guidance applies only for times
    inside ``interval`` and rows whose class is not the null class.
    """

    omega: float = 0.0
    interval: tuple[float, float] = (0.0, 1.0)
    class_dropout: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.omega < 1.0:
            raise ValueError(f"omega must lie in [0, 1), got {self.omega}")
        lo, hi = self.interval
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"invalid guidance interval {self.interval}")
        if not 0.0 <= self.class_dropout <= 1.0:
            raise ValueError(f"class_dropout must lie in [0, 1], got {self.class_dropout}")

    @property
    def cfg_scale(self) -> float:
        return 1.0 / (1.0 - self.omega)


@dataclass(frozen=True)
class LossConfig:
    """Pointwise loss applied to per-sample squared errors.

    ``adaptive-cauchy`` is log(exp(-phi) err + c) + phi / 2 and
    ``adaptive-gaussian`` is (exp(-phi) err + phi) / 2; both are
    minimized over phi at phi = log(err), so the weight net learns the
    log of the expected squared error at each (t, r).
    """

    family: str = "adaptive-cauchy"
    c: float = 1.0

    def __post_init__(self):
        if self.family not in LOSS_FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        if self.c <= 0.0:
            raise ValueError(f"c must be positive, got {self.c}")


PHI_FEATURES = 32
PHI_HIDDEN = 64


def init_phi(rng: RngStream, features: int = PHI_FEATURES, hidden: int = PHI_HIDDEN) -> dict:
    """Weight net phi(t, r): MLP over concatenated time features of t and r.

    The output layer starts at zero so training begins with uniform
    weighting (phi = 0).
    """
    return {
        "w1": rng.normal((2 * features, hidden)) / np.sqrt(2 * features),
        "b1": np.zeros(hidden),
        "w2": np.zeros((hidden, 1)),
        "b2": np.zeros(1),
    }


def phi_forward(phi: dict, t, r):
    """phi(t, r) for (B,) times; returns a (B,) vector."""
    feats = ops.concatenate(
        [time_features(t, PHI_FEATURES), time_features(r, PHI_FEATURES)], axis=-1
    )
    h = ops.silu(feats @ phi["w1"] + phi["b1"])
    return ops.reshape(h @ phi["w2"] + phi["b2"], (-1,))


def cauchy_loss(sq_err, c: float = 1.0):
    """log(err + c); heavy-tailed alternative to the squared error."""
    return ops.log(sq_err + c)


def adaptive_cauchy_loss(sq_err, phi_val, c: float = 1.0):
    """log(exp(-phi) err + c) + phi / 2, elementwise."""
    return ops.log(ops.exp(-phi_val) * sq_err + c) + 0.5 * phi_val


def adaptive_gaussian_loss(sq_err, phi_val):
    """(exp(-phi) err + phi) / 2: the homoscedastic multitask weighting."""
    return 0.5 * (ops.exp(-phi_val) * sq_err + phi_val)


def weighted_loss(sq_err, phi_val, cfg: LossConfig):
    """Dispatch on the configured family; gradients reach both inputs."""
    if cfg.family == "mse":
        return sq_err
    if cfg.family == "cauchy":
        return cauchy_loss(sq_err, cfg.c)
    if cfg.family == "adaptive-cauchy":
        return adaptive_cauchy_loss(sq_err, phi_val, cfg.c)
    return adaptive_gaussian_loss(sq_err, phi_val)


def apply_class_dropout(
    y: Optional[np.ndarray], q: float, null_class: int, rng: RngStream, n: int
) -> np.ndarray:
    """Per-sample label dropout to the null class with probability q."""
    if y is None:
        return np.full(n, null_class, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if q <= 0.0:
        return y
    drop = rng.uniform((n,)) < q
    return np.where(drop, null_class, y)


def guided_velocity_target(
    params: dict,
    cfg: NetConfig,
    guidance: GuidanceConfig,
    x_t: np.ndarray,
    t: np.ndarray,
    v: np.ndarray,
    y: np.ndarray,
) -> np.ndarray:
    """Sharpened regression target v + omega (u(.|y) - u(.|null)).

    Applied rowwise where the time lies inside the guidance interval and
    the label is not null; other rows keep the plain velocity.  Runs on
    plain arrays only, so the result is detached by construction.
    """
    v = np.asarray(v, dtype=np.float64)
    if guidance.omega == 0.0:
        return v
    lo, hi = guidance.interval
    rows = np.nonzero((y != cfg.null_class) & (t >= lo) & (t <= hi))[0]
    if rows.size == 0:
        return v
    x_sub, t_sub, y_sub = x_t[rows], t[rows], y[rows]
    u_cond = forward(params, cfg, x_sub, t_sub, t_sub, y_sub)
    u_null = forward(params, cfg, x_sub, t_sub, t_sub, None)
    out = v.copy()
    out[rows] = v[rows] + guidance.omega * (u_cond - u_null)
    return out


def mf_target(
    u_fn: Callable,
    x_t: np.ndarray,
    t: np.ndarray,
    r: np.ndarray,
    v_tgt: np.ndarray,
) -> np.ndarray:
    """Average-velocity regression target from one forward-mode pass.

    Along the trajectory dx/dt = v the total time derivative of
    u(x_t, t, r) is v . du/dx + du/dt with r held fixed, i.e. a JVP with
    tangents (v_tgt, 1, 0).  The target is v_tgt + (r - t) du/dt; it is
    returned as a plain detached array.

    Args:
        u_fn: map (x, t, r) -> u accepting dual inputs.
        x_t: (B, D) states; t, r: (B,) times; v_tgt: (B, D) velocities.
    """
    t = np.asarray(t, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    v_tgt = np.asarray(v_tgt, dtype=np.float64)
    _, dudt = jvp(u_fn, (x_t, t, r), (v_tgt, np.ones_like(t), np.zeros_like(r)))
    return v_tgt + (r - t)[:, None] * dudt


def _per_sample_sq_err(pred, target: np.ndarray):
    diff = pred - target
    return ops.mean(diff * diff, axis=-1)


def total_loss(
    params: dict,
    phi: dict,
    x0: np.ndarray,
    y_raw: Optional[np.ndarray],
    *,
    net_cfg: NetConfig,
    guidance: GuidanceConfig,
    proposal: TimeProposal,
    loss_cfg: LossConfig,
    rng: RngStream,
    sched: InterpolantSchedule = RECTIFIED_FLOW,
    include_mf: bool = True,
):
    """Joint objective over one batch: flow-matching plus map terms.

    The two terms draw independent noise and times: the flow term at a
    single time from the ``mu_fm`` proposal, the map term at an ordered
    pair from the ``(mu1, mu2)`` proposal.  Class dropout is applied
    once and shared.  Randomness comes from fixed children of ``rng``
    ("drop", "fm/t", "fm/eps", "mf/t", "mf/eps"), so a given stream
    yields a reproducible batch.

    ``params``/``phi`` may hold graph nodes; targets always use their
    detached values.

    Returns:
        (loss, aux) where loss is a scalar (node when differentiating)
        and aux carries float components for logging.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    prim = _primal_tree(params)
    y = apply_class_dropout(
        y_raw, guidance.class_dropout, net_cfg.null_class, rng.child("drop"), n
    )

    fm = rng.child("fm")
    t_fm = sample_time_fm(fm.child("t"), proposal.mu_fm, n)
    eps_fm = fm.child("eps").normal(x0.shape)
    x_t = interpolate(x0, eps_fm, t_fm, sched)
    v_fm = velocity_target(x0, eps_fm, t_fm, sched)
    v_tgt = guided_velocity_target(prim, net_cfg, guidance, x_t, t_fm, v_fm, y)
    u_fm = forward(params, net_cfg, x_t, t_fm, t_fm, y)
    sq_fm = _per_sample_sq_err(u_fm, v_tgt)
    phi_fm = phi_forward(phi, t_fm, t_fm)
    loss_fm = ops.mean(weighted_loss(sq_fm, phi_fm, loss_cfg))

    loss = loss_fm
    aux = {
        "loss_fm": float(np.asarray(ops.primal(loss_fm))),
        "loss_mf": 0.0,
        "phi_mean": float(np.mean(ops.primal(phi_fm))),
    }

    if include_mf:
        mf = rng.child("mf")
        t_mf, r_mf = sample_time_pair(mf.child("t"), proposal.mu1, proposal.mu2, n)
        eps_mf = mf.child("eps").normal(x0.shape)
        x_t2 = interpolate(x0, eps_mf, t_mf, sched)
        v_mf = velocity_target(x0, eps_mf, t_mf, sched)
        v_tgt2 = guided_velocity_target(prim, net_cfg, guidance, x_t2, t_mf, v_mf, y)
        u_tgt = mf_target(
            lambda xx, tt, rr: forward(prim, net_cfg, xx, tt, rr, y),
            x_t2,
            t_mf,
            r_mf,
            v_tgt2,
        )
        u_mf = forward(params, net_cfg, x_t2, t_mf, r_mf, y)
        sq_mf = _per_sample_sq_err(u_mf, u_tgt)
        phi_mf = phi_forward(phi, t_mf, r_mf)
        loss_mf = ops.mean(weighted_loss(sq_mf, phi_mf, loss_cfg))
        loss = loss_fm + loss_mf
        aux["loss_mf"] = float(np.asarray(ops.primal(loss_mf)))
        aux["phi_mean"] = 0.5 * (aux["phi_mean"] + float(np.mean(ops.primal(phi_mf))))

    loss_val = float(np.asarray(ops.primal(loss)))
    if not np.isfinite(loss_val):
        qs = np.percentile(t_fm, [0, 50, 100])
        msg = f"non-finite loss {loss_val}; t_fm quartiles {qs}"
        if include_mf:
            msg += f"; t_mf {np.percentile(t_mf, [0, 50, 100])}, r_mf {np.percentile(r_mf, [0, 50, 100])}"
        raise NonFiniteLossError(msg)
    return loss, aux


def _primal_tree(tree):
    return tree_map(ops.primal, tree)
