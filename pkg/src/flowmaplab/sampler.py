"""Few-step and many-step samplers over trained velocity/map models.

All samplers walk a decreasing time grid from 1 (noise) to 0 (data).
Flow kinds only need instantaneous velocities (r = t evaluations) and
work with any architecture; map kinds require a flow-map architecture.

Degenerate settings collapse exactly: gamma = 0 jump-and-renoise equals
plain map stepping, gamma = 1 equals the full restart sampler, and a
zero SDE noise scale equals the deterministic Euler path, all bitwise,
because the degenerate coefficients (1.0 and 0.0) are applied through
IEEE-exact multiplications or skipped outright.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .net import ARCH_FLOW, NetConfig, forward
from .numerics import RngStream
from .process import RECTIFIED_FLOW, InterpolantSchedule, time_shift

FLOW_KINDS = ("flow-euler", "flow-heun", "flow-sde")
MAP_KINDS = ("map-euler", "restart", "ctm")
KINDS = FLOW_KINDS + MAP_KINDS


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "flow-euler"
    steps: int = 32
    shift: float = 1.0  # time-grid warp; > 1 spends more steps near t = 1
    gamma: float = 0.0  # ctm only: 0 = deterministic map step, 1 = restart
    cfg_scale: float = 1.0  # 1 = no guidance mixing at sampling time
    cfg_interval: tuple[float, float] = (0.0, 1.0)
    noise_scale: object = "t"  # flow-sde w_t: the string "t" or a constant

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.shift <= 0.0:
            raise ValueError(f"shift must be positive, got {self.shift}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.cfg_scale < 1.0:
            raise ValueError(f"cfg_scale must be >= 1, got {self.cfg_scale}")
        if not isinstance(self.noise_scale, str):
            if float(self.noise_scale) < 0.0:
                raise ValueError("noise_scale must be nonnegative")
        elif self.noise_scale != "t":
            raise ValueError(f"unknown noise_scale {self.noise_scale!r}")

    def noise_fn(self) -> Callable[[float], float]:
        if self.noise_scale == "t":
            return lambda t: float(t)
        c = float(self.noise_scale)
        return lambda t: c


def make_time_grid(steps: int, shift: float = 1.0) -> np.ndarray:
    """Strictly decreasing grid of steps+1 times, endpoints exactly 1 and 0."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    grid = time_shift(np.linspace(1.0, 0.0, steps + 1), shift)
    grid[0] = 1.0
    grid[-1] = 0.0
    return grid


def score_from_velocity(
    v: np.ndarray, x: np.ndarray, t: float, sched: InterpolantSchedule = RECTIFIED_FLOW
) -> np.ndarray:
    """Marginal score from the velocity field at one time.

    score = (alpha v - alpha' x) / (sigma (alpha' sigma - alpha sigma')).
    Undefined where sigma(t) = 0 (t = 0 under rectified flow).
    """
    a = float(sched.alpha(t))
    da = float(sched.dalpha(t))
    s = float(sched.sigma(t))
    ds = float(sched.dsigma(t))
    denom = s * (da * s - a * ds)
    if denom == 0.0:
        raise ValueError(f"score undefined at t={t}: sigma (alpha' sigma - alpha sigma') = 0")
    return (a * v - da * x) / denom


class FnEval:
    """Evaluator over a plain callable u_fn(x, t, r); counts evaluations."""

    def __init__(self, u_fn: Callable):
        self._u_fn = u_fn
        self.nfe = 0

    def u(self, x: np.ndarray, t: float, r: float) -> np.ndarray:
        self.nfe += 1
        return self._u_fn(x, t, r)

    def v(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.u(x, t, t)


class ModelEval:
    """Evaluator over network parameters with optional guidance mixing.

    ``cfg_scale`` > 1 blends conditional and unconditional outputs,
    u_null + scale (u_cond - u_null), for times inside ``cfg_interval``;
    this doubles the evaluation count at gated steps.  Rows whose label
    is already null are unaffected by the blend.
    """

    def __init__(
        self,
        params: dict,
        net_cfg: NetConfig,
        y: Optional[np.ndarray],
        cfg_scale: float = 1.0,
        cfg_interval: tuple[float, float] = (0.0, 1.0),
    ):
        self.params = params
        self.net_cfg = net_cfg
        self.y = None if y is None else np.asarray(y, dtype=np.int64)
        self.cfg_scale = cfg_scale
        self.cfg_interval = cfg_interval
        self.nfe = 0
        self._mix = (
            cfg_scale != 1.0
            and self.y is not None
            and bool(np.any(self.y != net_cfg.null_class))
        )

    def u(self, x: np.ndarray, t: float, r: float) -> np.ndarray:
        lo, hi = self.cfg_interval
        if self._mix and lo <= t <= hi:
            u_cond = forward(self.params, self.net_cfg, x, t, r, self.y)
            u_null = forward(self.params, self.net_cfg, x, t, r, None)
            self.nfe += 2
            return u_null + self.cfg_scale * (u_cond - u_null)
        self.nfe += 1
        return forward(self.params, self.net_cfg, x, t, r, self.y)

    def v(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.u(x, t, t)


def step_flow_euler(ev, x: np.ndarray, t: float, r: float) -> np.ndarray:
    return x + (r - t) * ev.v(x, t)


def step_flow_heun(ev, x: np.ndarray, t: float, r: float, final: bool) -> np.ndarray:
    """Trapezoidal predictor-corrector; the last step stays plain Euler."""
    v1 = ev.v(x, t)
    x_pred = x + (r - t) * v1
    if final:
        return x_pred
    v2 = ev.v(x_pred, r)
    return x + (r - t) * 0.5 * (v1 + v2)


def step_flow_sde(
    ev,
    x: np.ndarray,
    t: float,
    r: float,
    rng: RngStream,
    w_fn: Callable[[float], float],
    sched: InterpolantSchedule,
    final: bool,
) -> np.ndarray:
    """Euler-Maruyama step of the noise-scale-w reverse SDE.

    x_r = x + (r - t)(v - w/2 score) + sqrt(w (t - r)) z.  The final
    step (to r = 0, where the score blows up) is deterministic Euler,
    as is any step with zero noise scale.
    """
    v = ev.v(x, t)
    w = float(w_fn(t))
    if w < 0.0:
        raise ValueError(f"noise scale must be nonnegative, got {w} at t={t}")
    if final or w == 0.0:
        return x + (r - t) * v
    score = score_from_velocity(v, x, t, sched)
    x_mean = x + (r - t) * (v - 0.5 * w * score)
    return x_mean + np.sqrt(w * (t - r)) * rng.normal(x.shape)


def step_map_euler(ev, x: np.ndarray, t: float, r: float) -> np.ndarray:
    return x + (r - t) * ev.u(x, t, r)


def step_restart(
    ev, x: np.ndarray, t: float, r: float, rng: RngStream, sched: InterpolantSchedule
) -> np.ndarray:
    """Jump to the data endpoint, then re-corrupt to time r with fresh noise."""
    x0_hat = x + (0.0 - t) * ev.u(x, t, 0.0)
    a = float(sched.alpha(r))
    b = float(sched.sigma(r))
    if b == 0.0:
        return a * x0_hat
    return a * x0_hat + b * rng.normal(x.shape)


def step_ctm(
    ev,
    x: np.ndarray,
    t: float,
    r: float,
    gamma: float,
    rng: RngStream,
    sched: InterpolantSchedule,
) -> np.ndarray:
    """Map step to an overshoot time s, then re-noise back up to r.

    s = (1 - gamma) r / (1 - gamma r) interpolates between s = r
    (gamma = 0: pure map step, no noise drawn) and s = 0 (gamma = 1:
    the restart sampler).
    """
    s_mid = (1.0 - gamma) * r / (1.0 - gamma * r)
    x_s = x + (s_mid - t) * ev.u(x, t, s_mid)
    if sched.name == "rectified-flow":
        a = 1.0 - gamma * r
        b = gamma * r
    else:
        a = float(sched.alpha(r)) / float(sched.alpha(s_mid))
        b = float(sched.sigma(r)) - float(sched.sigma(s_mid)) * a
    if b == 0.0:
        return a * x_s
    return a * x_s + b * rng.normal(x.shape)


@dataclass(frozen=True)
class SampleResult:
    x: np.ndarray  # (n, D) final samples
    y: Optional[np.ndarray]  # labels used for conditioning, or None
    nfe: int  # model evaluations per sample
    trajectory: Optional[np.ndarray] = None  # (steps + 1, n, D) when requested


def generate(
    params: dict,
    net_cfg: NetConfig,
    spec: SamplerConfig,
    n: int,
    rng: RngStream,
    y: Optional[np.ndarray] = None,
    sched: InterpolantSchedule = RECTIFIED_FLOW,
    return_trajectory: bool = False,
) -> SampleResult:
    """Draw n samples by integrating from t = 1 to t = 0.

    The initial state comes from ``rng.child("init")`` and all in-loop
    noise from ``rng.child("noise")``, one batched draw per step, so a
    given stream fully determines the output.  Map kinds require a map
    architecture; flow kinds accept any architecture via r = t calls.
    """
    if spec.kind in MAP_KINDS and net_cfg.arch == ARCH_FLOW:
        raise ValueError(f"sampler kind {spec.kind!r} needs a flow-map architecture")
    if y is not None:
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (n,):
            raise ValueError(f"y must have shape ({n},), got {y.shape}")
    x = rng.child("init").normal((n, net_cfg.input_dim))
    noise = rng.child("noise")
    ev = ModelEval(params, net_cfg, y, spec.cfg_scale, spec.cfg_interval)
    grid = make_time_grid(spec.steps, spec.shift)
    w_fn = spec.noise_fn()
    frames = [x.copy()] if return_trajectory else None

    for i in range(spec.steps):
        t, r = float(grid[i]), float(grid[i + 1])
        final = i == spec.steps - 1
        if spec.kind == "flow-euler":
            x = step_flow_euler(ev, x, t, r)
        elif spec.kind == "flow-heun":
            x = step_flow_heun(ev, x, t, r, final)
        elif spec.kind == "flow-sde":
            x = step_flow_sde(ev, x, t, r, noise, w_fn, sched, final)
        elif spec.kind == "map-euler":
            x = step_map_euler(ev, x, t, r)
        elif spec.kind == "restart":
            x = step_restart(ev, x, t, r, noise, sched)
        else:
            x = step_ctm(ev, x, t, r, spec.gamma, noise, sched)
        if frames is not None:
            frames.append(x.copy())

    traj = np.stack(frames) if frames is not None else None
    return SampleResult(x=x, y=y, nfe=ev.nfe, trajectory=traj)
