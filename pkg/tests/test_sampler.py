"""Samplers: grids, NFE accounting, degenerate-setting identities, orders."""

import numpy as np
import pytest

from flowmaplab.net import ARCH_DECOUPLED_MAP, ARCH_FLOW, NetConfig, init_params
from flowmaplab.numerics import RngStream
from flowmaplab.oracle import GaussianSpec, gaussian_transport, gaussian_velocity
from flowmaplab.process import RECTIFIED_FLOW
from flowmaplab.sampler import (
    FnEval,
    SamplerConfig,
    generate,
    make_time_grid,
    score_from_velocity,
    step_flow_euler,
    step_flow_heun,
)

SPEC = GaussianSpec(mean=(1.0, -1.0), scale=0.5)
MAP_CFG = NetConfig(width=32, depth=3, arch=ARCH_DECOUPLED_MAP, split=2, num_classes=4)
FLOW_CFG = NetConfig(width=32, depth=3, arch=ARCH_FLOW, num_classes=4)


def _params(cfg, seed=0):
    return init_params(cfg, RngStream(seed, "net"), zero_gates=False)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(kind="rk45")
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(gamma=1.5)
    with pytest.raises(ValueError):
        SamplerConfig(cfg_scale=0.5)
    with pytest.raises(ValueError):
        SamplerConfig(noise_scale=-1.0)
    with pytest.raises(ValueError):
        SamplerConfig(noise_scale="sqrt")


def test_time_grid_endpoints_exact():
    for steps in (1, 7, 64):
        for shift in (1.0, 3.0, 0.5):
            g = make_time_grid(steps, shift)
            assert g.shape == (steps + 1,)
            assert g[0] == 1.0 and g[-1] == 0.0
            assert np.all(np.diff(g) < 0)


def test_time_grid_shift_direction():
    plain = make_time_grid(10, 1.0)
    shifted = make_time_grid(10, 3.0)
    assert np.all(shifted[1:-1] > plain[1:-1])


def test_score_from_velocity_matches_gaussian_score():
    x = RngStream(0, "score").normal((6, 2))
    t = 0.6
    v = gaussian_velocity(x, t, SPEC)
    s = score_from_velocity(v, x, t, RECTIFIED_FLOW)
    var = (1.0 - t) ** 2 * SPEC.scale**2 + t**2
    want = -(x - (1.0 - t) * SPEC.mean_arr) / var
    np.testing.assert_allclose(s, want, rtol=1e-10)


def test_score_at_noise_end_is_standard_normal_score():
    x = RngStream(1, "s1").normal((5, 2))
    v = gaussian_velocity(x, 1.0, SPEC)
    s = score_from_velocity(v, x, 1.0, RECTIFIED_FLOW)
    np.testing.assert_allclose(s, -x, rtol=1e-12)


# -------------------------------------------------------- NFE accounting


def _gen(kind, cfg, params, steps=8, y=None, **kw):
    spec = SamplerConfig(kind=kind, steps=steps, **kw)
    return generate(params, cfg, spec, 16, RngStream(3, f"gen/{kind}"), y=y)


def test_nfe_euler():
    assert _gen("flow-euler", FLOW_CFG, _params(FLOW_CFG)).nfe == 8


def test_nfe_heun_final_step_is_euler():
    assert _gen("flow-heun", FLOW_CFG, _params(FLOW_CFG)).nfe == 15


def test_nfe_map_kinds():
    p = _params(MAP_CFG)
    assert _gen("map-euler", MAP_CFG, p).nfe == 8
    assert _gen("restart", MAP_CFG, p).nfe == 8
    assert _gen("ctm", MAP_CFG, p, gamma=0.5).nfe == 8


def test_nfe_cfg_doubles_inside_interval():
    p = _params(FLOW_CFG)
    y = np.zeros(16, dtype=np.int64)
    res = _gen("flow-euler", FLOW_CFG, p, y=y, cfg_scale=2.0)
    assert res.nfe == 16
    # interval gating: grid times below the cutoff run unguided
    res = _gen("flow-euler", FLOW_CFG, p, y=y, cfg_scale=2.0, cfg_interval=(0.5, 1.0))
    assert 8 < res.nfe < 16
    # null labels never mix, whatever the scale
    res = _gen("flow-euler", FLOW_CFG, p, y=np.full(16, FLOW_CFG.null_class), cfg_scale=2.0)
    assert res.nfe == 8


# ------------------------------------------------- degeneracy identities


def test_ctm_gamma_zero_equals_map_euler():
    p = _params(MAP_CFG, seed=4)
    a = generate(p, MAP_CFG, SamplerConfig(kind="ctm", steps=8, gamma=0.0), 16, RngStream(9, "shared"))
    b = generate(p, MAP_CFG, SamplerConfig(kind="map-euler", steps=8), 16, RngStream(9, "shared"))
    assert np.array_equal(a.x, b.x)


def test_ctm_gamma_one_equals_restart():
    p = _params(MAP_CFG, seed=5)
    spec_a = SamplerConfig(kind="ctm", steps=6, gamma=1.0)
    spec_b = SamplerConfig(kind="restart", steps=6)
    # identical streams feed identical noise to both samplers
    a = generate(p, MAP_CFG, spec_a, 16, RngStream(9, "shared"))
    b = generate(p, MAP_CFG, spec_b, 16, RngStream(9, "shared"))
    assert np.array_equal(a.x, b.x)


def test_sde_zero_noise_equals_euler():
    p = _params(FLOW_CFG, seed=6)
    a = generate(p, FLOW_CFG, SamplerConfig(kind="flow-sde", steps=8, noise_scale=0.0), 16, RngStream(9, "shared"))
    b = generate(p, FLOW_CFG, SamplerConfig(kind="flow-euler", steps=8), 16, RngStream(9, "shared"))
    assert np.array_equal(a.x, b.x)


def test_single_step_restart_equals_map_euler():
    p = _params(MAP_CFG, seed=7)
    a = generate(p, MAP_CFG, SamplerConfig(kind="restart", steps=1), 16, RngStream(9, "shared"))
    b = generate(p, MAP_CFG, SamplerConfig(kind="map-euler", steps=1), 16, RngStream(9, "shared"))
    np.testing.assert_allclose(a.x, b.x, atol=1e-12)


def test_sde_noise_changes_path():
    p = _params(FLOW_CFG, seed=8)
    a = generate(p, FLOW_CFG, SamplerConfig(kind="flow-sde", steps=8, noise_scale="t"), 16, RngStream(9, "shared"))
    b = generate(p, FLOW_CFG, SamplerConfig(kind="flow-euler", steps=8), 16, RngStream(9, "shared"))
    assert not np.array_equal(a.x, b.x)


# ------------------------------------------------------------- plumbing


def test_map_kind_rejects_flow_arch():
    with pytest.raises(ValueError):
        _gen("map-euler", FLOW_CFG, _params(FLOW_CFG))


def test_generate_deterministic_and_label_checked():
    p = _params(MAP_CFG, seed=9)
    spec = SamplerConfig(kind="map-euler", steps=4)
    a = generate(p, MAP_CFG, spec, 8, RngStream(1, "det"))
    b = generate(p, MAP_CFG, spec, 8, RngStream(1, "det"))
    assert np.array_equal(a.x, b.x)
    with pytest.raises(ValueError):
        generate(p, MAP_CFG, spec, 8, RngStream(1, "det"), y=np.zeros(5, dtype=np.int64))


def test_trajectory_shape():
    p = _params(MAP_CFG, seed=10)
    spec = SamplerConfig(kind="map-euler", steps=5)
    res = generate(p, MAP_CFG, spec, 7, RngStream(2, "traj"), return_trajectory=True)
    assert res.trajectory.shape == (6, 7, 2)
    assert np.array_equal(res.trajectory[-1], res.x)


# ------------------------------------------------------ oracle stepping


def _endpoint_error(step_fn, steps, heun=False):
    ev = FnEval(lambda x, t, r: gaussian_velocity(x, t, SPEC))
    x = RngStream(11, "order").normal((64, 2))
    want = gaussian_transport(x, 1.0, 0.0, SPEC)
    grid = make_time_grid(steps)
    cur = x.copy()
    for i in range(steps):
        t, r = float(grid[i]), float(grid[i + 1])
        if heun:
            cur = step_flow_heun(ev, cur, t, r, final=i == steps - 1)
        else:
            cur = step_flow_euler(ev, cur, t, r)
    return float(np.sqrt(np.mean((cur - want) ** 2)))


def test_euler_halving_steps_halves_error():
    e16 = _endpoint_error(step_flow_euler, 16)
    e32 = _endpoint_error(step_flow_euler, 32)
    assert e16 / e32 == pytest.approx(2.0, rel=0.25)


def test_heun_halving_steps_quarters_error():
    e16 = _endpoint_error(None, 16, heun=True)
    e32 = _endpoint_error(None, 32, heun=True)
    assert e16 / e32 == pytest.approx(4.0, rel=0.35)


def test_one_step_map_euler_with_oracle_is_exact():
    from flowmaplab.oracle import gaussian_average_velocity

    ev = FnEval(lambda x, t, r: gaussian_average_velocity(x, t, r, SPEC))
    x = RngStream(12, "exact").normal((32, 2))
    from flowmaplab.sampler import step_map_euler

    out = step_map_euler(ev, x, 1.0, 0.0)
    np.testing.assert_allclose(out, gaussian_transport(x, 1.0, 0.0, SPEC), atol=1e-12)
