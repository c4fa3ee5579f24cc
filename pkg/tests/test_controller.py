import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swingsafe import controller as ctl
from swingsafe.controller import (
    Controller,
    ControllerConfig,
    compose_alpha,
    forecast_times,
    lowpass_rhs,
    mpc_sample,
    stability_filter,
    top_layer,
)
from swingsafe.dynamics import SimulationSettings, SystemState, equilibrium_state, simulate
from swingsafe.errors import NoConvergence, SchemaError
from swingsafe.netmodel import TWO_PI, compute_equilibrium

finite = st.floats(-10, 10, allow_nan=False)

LO, HI, TLO, THI = -0.2 * TWO_PI, 0.2 * TWO_PI, -0.1 * TWO_PI, 0.1 * TWO_PI


def test_filter_examples():
    assert stability_filter(0.1, 0.5, 1.9) == pytest.approx(0.19)
    assert stability_filter(0.0, 3.0, 1.9) == 0.0
    assert stability_filter(0.1, 0.05, 1.9) == 0.05
    assert stability_filter(-0.1, 0.5, 1.9) == pytest.approx(0.19)


@given(a=finite, u=finite, eps=st.floats(0.01, 5))
def test_filter_inequality(a, u, eps):
    uh = stability_filter(a, u, eps)
    assert abs(uh) <= eps * abs(a) + 1e-15
    assert a * uh <= eps * a * a + 1e-12


def test_lowpass_examples():
    assert lowpass_rhs(0.0, 1.0, 0.0, 0.5) == -1.0
    assert lowpass_rhs(0.5 * 0.3, 0.0, 0.3, 0.5) == pytest.approx(0.0)
    assert lowpass_rhs(0.3, 0.2, 0.1, 0.5, controlled=False) == 0.0


@given(a=finite, w=finite, u=finite, eps=st.floats(0.01, 1.9), tau=st.floats(0.05, 0.5))
def test_lowpass_dissipation_split(a, w, u, eps, tau):
    uh = stability_filter(a, u, eps)
    lhs = a * lowpass_rhs(a, w, uh, tau)
    assert lhs <= -(1 / tau - eps) * a * a - a * w + 1e-9 * (1 + a * a + abs(a * w))


def test_top_layer_inside_band_is_zero():
    for w in (TLO, 0.0, THI, 0.5 * THI):
        assert top_layer(w, 123.0, LO, HI, TLO, THI, 1.0, 1.0) == 0.0


def test_top_layer_at_bound():
    for v in (-2.0, 3.0):
        out = top_layer(HI, v, LO, HI, TLO, THI, 1.0, 1.0)
        assert out == min(0.0, v)
        assert -v + out <= 0.0  # M w' = -v + alpha_tl points back into the band
        out = top_layer(LO, v, LO, HI, TLO, THI, 1.0, 1.0)
        assert out == max(0.0, v)


def test_top_layer_barrier_numbers():
    w = THI + 0.01
    barrier = (HI - w) / (w - THI)  # about 61.8
    assert barrier == pytest.approx(61.83185307179586)
    assert top_layer(w, -60.0, LO, HI, TLO, THI, 1.0, 1.0) == 0.0
    assert top_layer(w, -70.0, LO, HI, TLO, THI, 1.0, 1.0) == pytest.approx(barrier - 70.0)
    assert top_layer(-w, 70.0, LO, HI, TLO, THI, 1.0, 1.0) == pytest.approx(70.0 - barrier)


@given(w=st.floats(-3, 3), v=finite)
def test_top_layer_sign(w, v):
    assert w * top_layer(w, v, LO, HI, TLO, THI, 1.0, 1.0) <= 0.0


def test_compose_alpha():
    np.testing.assert_array_equal(compose_alpha(np.zeros(3), np.zeros(3)), np.zeros(3))
    ctrl = np.array([True, False, True])
    np.testing.assert_array_equal(compose_alpha([0.1, 0.0, -0.2], [0.3, 0.0, 0.0], ctrl), [0.4, 0.0, -0.2])
    with pytest.raises(ValueError):
        compose_alpha([0.0, 0.1, 0.0], np.zeros(3), ctrl)


@pytest.mark.parametrize(
    "kw",
    [
        {"eps": 2.0},
        {"thr_max_hz": 0.3},
        {"thr_min_hz": 0.05},
        {"gamma_max": 0.0},
        {"mode": "turbo"},
        {"backend": "magic"},
        {"horizon": 0.2},
        {"c_safety": -1.0},
    ],
)
def test_config_validation(kw):
    with pytest.raises(SchemaError):
        ControllerConfig(**kw)


def test_config_defaults():
    cfg = ControllerConfig()
    assert cfg.eps * cfg.tau == pytest.approx(0.95)
    assert cfg.n_horizon == 50
    np.testing.assert_allclose(forecast_times(3.0, cfg)[:3], [3.0, 3.2, 3.4])


def test_mpc_zero_filter_state_gives_zero_output(case4):
    net, sc = case4
    x = SystemState(compute_equilibrium(net), np.array([0.3, -0.2, 0.1, 0.0]), np.zeros(4))
    fc = sc.disturbance.forecast(net, 10.0, forecast_times(10.0, sc.controller))
    res = mpc_sample(net, sc.controller, x, fc)
    np.testing.assert_allclose(res.u, 0.0, atol=1e-9)


def test_mpc_at_equilibrium_gives_zero_output(case4):
    net, sc = case4
    x = equilibrium_state(net)
    fc = np.repeat(net.injection[:, None], sc.controller.n_horizon, axis=1)
    res = mpc_sample(net, sc.controller, x, fc)
    np.testing.assert_allclose(res.u, 0.0, atol=1e-8)


def test_mpc_output_continuity(case4):
    net, sc = case4
    cfg = sc.controller.with_overrides(horizon=2.0)
    rng = np.random.default_rng(0)
    lam = compute_equilibrium(net)
    fc = sc.disturbance.forecast(net, 50.0, forecast_times(50.0, cfg))
    ks = []
    for _ in range(10):
        x = SystemState(lam, rng.normal(0, 0.2, 4), rng.uniform(0.05, 0.1, 4))
        dx = rng.normal(size=4) * 1e-4
        y = SystemState(lam, x.omega + dx, x.alpha_bl)
        du = mpc_sample(net, cfg, y, fc).u - mpc_sample(net, cfg, x, fc).u
        ks.append(np.linalg.norm(du) / np.linalg.norm(dx))
    assert max(ks) < 1e3


@pytest.mark.parametrize("backend", ["saddle-central", "saddle-distributed"])
def test_mpc_saddle_backends_match_reference(case4, backend):
    net, sc = case4
    cfg = sc.controller.with_overrides(horizon=1.0)
    x = SystemState(compute_equilibrium(net), np.array([0.2, -0.1, 0.1, 0.0]), np.array([0.05, -0.04, 0.03, 0.02]))
    fc = sc.disturbance.forecast(net, 20.0, forecast_times(20.0, cfg))
    ref = mpc_sample(net, cfg, x, fc)
    res = mpc_sample(net, cfg.with_overrides(backend=backend), x, fc)
    assert np.linalg.norm(res.Y - ref.Y) / max(1.0, np.linalg.norm(ref.Y)) <= 1e-4
    assert res.converged
    if backend == "saddle-distributed":
        assert res.message_log.max_hops("primal") <= 2


def test_controller_holds_output_on_solver_failure(case4, monkeypatch):
    net, sc = case4
    c = Controller(net, sc.controller, sc.disturbance)
    c.u_mpc = np.array([0.1, 0.2, 0.3, 0.4])

    def boom(*a, **k):
        raise NoConvergence("budget exhausted")

    monkeypatch.setattr(ctl, "mpc_sample", boom)
    changed = c.sample(1.0, equilibrium_state(net), lambda t: net.injection)
    assert not changed and c.failures == 1
    np.testing.assert_array_equal(c.u_mpc, [0.1, 0.2, 0.3, 0.4])


def test_controller_samples_on_the_grid(case4):
    net, sc = case4
    c = Controller(net, sc.controller, sc.disturbance)
    x = equilibrium_state(net)
    inj = lambda t: net.injection  # noqa: E731
    assert c.sample(0.0, x, inj)
    assert not c.sample(0.5, x, inj)
    assert c.sample(1.0, x, inj)
    assert [t for t, _ in c.samples] == [0.0, 1.0]
    assert c.next_event_step(1000, 1e-3, 10_000) == 2000


def test_controller_disabled_until_enable_time(case4):
    net, sc = case4
    cfg = sc.controller.with_overrides(enable_at=2.0)
    settings_ = SimulationSettings(t_end=3.0, dt=1e-3, log_every=10, disturbance=sc.disturbance)
    traj = simulate(net, settings_, Controller(net, cfg, sc.disturbance))
    before = traj.t < 2.0
    assert np.all(traj.alpha[before] == 0) and np.all(traj.alpha_bl[before] == 0)
    assert np.any(traj.u_mpc[~before] != 0)


def test_open_loop_mode_never_activates(case4):
    net, sc = case4
    c = Controller(net, sc.controller.with_overrides(mode="open-loop"), sc.disturbance)
    assert not c.sample(0.0, equilibrium_state(net), lambda t: net.injection)
    assert not c.active


def test_shift_applies_to_controlled_buses(case4):
    net, sc = case4
    cfg = sc.controller.with_overrides(mode="bilayered+shift", shift=0.1)
    np.testing.assert_array_equal(cfg.arrays(net).shift, [0.1] * 4)
    cfg = cfg.with_overrides(shift_buses=(1,))
    np.testing.assert_array_equal(cfg.arrays(net).shift, [0.0, 0.1, 0.0, 0.0])


def test_zero_inertia_safety_bus_is_clipped():
    from swingsafe.netmodel import PowerNetwork

    net = PowerNetwork(2, [(0, 1)], [2.0], [1.0, 0.0], [0.2, 0.05], [0.3, -0.3], controlled=(0, 1), safety=(0, 1))
    cfg = ControllerConfig(mode="top-only")
    c = Controller(net, cfg)
    lam = np.array([0.0])
    p = np.array([0.3, -0.3 - 1.0])  # large load step on the algebraic bus
    torque = p - np.array([-1.0, 1.0]) * 0.0
    out = c.stage(0.0, lam, np.array([0.0]), np.zeros(2), p, torque)
    assert out.omega[1] == pytest.approx(-0.2 * TWO_PI)
    assert out.omega[1] * out.alpha_tl[1] <= 0
    assert 0.05 * out.omega[1] == pytest.approx(torque[1] + out.alpha[1])
