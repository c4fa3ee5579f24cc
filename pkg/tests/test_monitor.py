import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swingsafe.controller import Controller, ControllerConfig, lowpass_rhs
from swingsafe.dynamics import SimulationSettings, SystemState, equilibrium_state, simulate
from swingsafe.errors import AuditFailure
from swingsafe.monitor import (
    band_distance,
    control_cost,
    convergence_audit,
    energy_report,
    energy_V,
    energy_Vbar,
    invariant_audit,
    level_set_constant,
    line_potential,
    lyapunov_decrease_audit,
    safety_audit,
)
from swingsafe.netmodel import TWO_PI, compute_equilibrium

from conftest import path_net, two_bus


@pytest.mark.parametrize("lam_inf", [0.0, 0.3, -0.7, 1.2])
def test_line_potential_nonnegative_with_minimum_at_equilibrium(lam_inf):
    grid = np.linspace(-math.pi / 2, math.pi / 2, 4001)
    a = line_potential(grid, lam_inf)
    assert a.min() >= -1e-15
    assert line_potential(lam_inf, lam_inf) == pytest.approx(0.0, abs=1e-15)


def test_level_set_constant_two_bus():
    net = two_bus(b=1.0, M=(1.0, 1.0), E=(0.1, 0.1), p=(0.0, 0.0))
    assert level_set_constant(net, np.array([0.0])) == pytest.approx(1.0)


def test_level_set_constant_matches_boundary_grid():
    net = path_net(n=3, b=(4.0, 7.0), p=(0.8, 0.2, -1.0))
    lam_inf = compute_equilibrium(net)
    g = np.linspace(-math.pi / 2, math.pi / 2, 1201)
    best = np.inf
    for k in range(2):
        for face in (-math.pi / 2, math.pi / 2):
            other = g[:, None] if k == 1 else g[None, :]
            L0 = np.full((g.size, g.size), face) if k == 0 else other * np.ones((1, g.size))
            L1 = np.full((g.size, g.size), face) if k == 1 else (g[:, None] * np.ones((1, g.size)))
            pot = net.susceptance[0] * line_potential(L0, lam_inf[0]) + net.susceptance[1] * line_potential(L1, lam_inf[1])
            best = min(best, float(pot.min()))
    assert level_set_constant(net, lam_inf) == pytest.approx(best, abs=1e-5)


def test_vbar_uses_unit_weights():
    net = two_bus(b=1.0, M=(2.0, 3.0), E=(0.1, 0.1), p=(0.0, 0.0))
    x = SystemState(np.array([0.0]), np.zeros(2), np.array([1.0, 0.0]))
    assert energy_V(net, np.array([0.0]), x) == 0.0
    assert energy_Vbar(net, np.array([0.0]), x) == pytest.approx(0.5)


def test_vbar_ignores_uncontrolled_filter_state():
    net = two_bus(b=1.0, M=(2.0, 3.0), E=(0.1, 0.1), p=(0.0, 0.0), controlled=(0,))
    x = SystemState(np.array([0.0]), np.zeros(2), np.array([0.0, 5.0]))
    assert energy_Vbar(net, np.array([0.0]), x) == 0.0


def test_kinetic_energy_skips_zero_inertia_buses():
    net = two_bus(b=1.0, M=(2.0, 0.0), E=(0.1, 0.1), p=(0.0, 0.0))
    x = SystemState(np.array([0.0]), np.array([1.0, 10.0]), np.zeros(2))
    assert energy_V(net, np.array([0.0]), x) == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_vbar_nonnegative_in_box(seed, case4):
    net, _ = case4
    rng = np.random.default_rng(seed)
    lam_inf = compute_equilibrium(net)
    for _ in range(20):
        x = SystemState(rng.uniform(-math.pi / 2, math.pi / 2, 4), rng.normal(size=4), rng.normal(size=4))
        assert energy_Vbar(net, lam_inf, x) >= 0.0


def test_energy_report_at_equilibrium(case4):
    net, _ = case4
    rep = energy_report(net, compute_equilibrium(net), equilibrium_state(net))
    assert rep.V == pytest.approx(0.0, abs=1e-14) and rep.in_level_set and rep.rho_hat <= 1e-12


def _const_run(net, law, t_end=3.0, initial=None, engine="auto", log_every=1):
    s = SimulationSettings(t_end=t_end, dt=1e-3, log_every=log_every, initial=initial)
    return simulate(net, s, law, engine=engine)


def test_lyapunov_flat_at_equilibrium(case4):
    net, sc = case4
    traj = _const_run(net, Controller(net, sc.controller), t_end=2.0)
    rep = lyapunov_decrease_audit(traj, sc.controller)
    assert rep.passed and abs(rep.worst_increase) <= 1e-12


def test_lyapunov_passes_on_closed_loop_transient(case4):
    net, sc = case4
    x0 = SystemState(compute_equilibrium(net), np.array([0.5, -0.4, 0.3, 0.0]), np.array([0.05, -0.02, 0.03, 0.01]))
    traj = _const_run(net, Controller(net, sc.controller), t_end=5.0, initial=x0)
    rep = lyapunov_decrease_audit(traj, sc.controller)
    assert rep.passed and rep.worst_increase < 0


class _Unfiltered(Controller):
    """Drives the low-pass filter with the raw input, skipping saturation."""

    def sample(self, t, state, injection):
        changed = super().sample(t, state, injection)
        self.u_mpc = np.full(self.ops.n, 2.0)
        return changed

    def stage(self, t, lam, omega_inertial, alpha_bl, p, torque):
        out = super().stage(t, lam, omega_inertial, alpha_bl, p, torque)
        raw = self.filter_input()
        bl_dot = lowpass_rhs(alpha_bl, out.omega, raw, self.ar.tau, self.ar.ctrl)
        return replace(out, alpha_bl_dot=bl_dot, u_hat=raw)


def test_corrupted_filter_is_caught(case4):
    net, sc = case4
    traj = _const_run(net, _Unfiltered(net, sc.controller), t_end=1.0, engine="python")
    with pytest.raises(AuditFailure) as err:
        lyapunov_decrease_audit(traj, sc.controller)
    assert err.value.offending
    assert not invariant_audit(traj, sc.controller).passed


def test_safety_audit_examples(case4):
    net, sc = case4
    traj = _const_run(net, None, t_end=0.5, log_every=10)
    rep = safety_audit(traj, sc.controller)
    assert rep.passed and [b.bus for b in rep.buses] == [1, 2]
    bad = replace(traj, omega=traj.omega.copy())
    bad.omega[20:, 0] = 0.21 * TWO_PI
    rep = safety_audit(bad, sc.controller)
    assert not rep.passed
    assert rep.buses[0].overshoot_hz == pytest.approx(0.01)
    assert rep.buses[1].overshoot_hz == 0.0


def test_safety_audit_unsafe_start():
    net = two_bus(b=5.0, M=(1.0, 1.0), E=(0.1, 0.1), p=(0.0, 0.0))
    cfg = ControllerConfig()
    t = np.arange(6.0)
    n = t.size
    hi = 0.2 * TWO_PI
    approach = np.array([hi + 0.5, hi + 0.3, hi + 0.1, hi, hi - 0.1, hi - 0.2])
    z = np.zeros((n, 2))
    from swingsafe.dynamics import Trajectory

    mk = lambda om: Trajectory(net, t, np.zeros((n, 1)), om, z, z, z, z, z, z, 1.0)  # noqa: E731
    rep = safety_audit(mk(np.column_stack([approach, np.zeros(n)])), cfg)
    b = rep.buses[0]
    assert rep.passed and not b.start_safe and b.entry_time == 3.0 and b.monotone
    wobble = approach.copy()
    wobble[2] = hi + 0.4
    rep = safety_audit(mk(np.column_stack([wobble, np.zeros(n)])), cfg)
    assert not rep.passed and not rep.buses[0].monotone


@given(w=st.floats(-10, 10), lo=st.floats(-5, 0), hi=st.floats(0, 5))
def test_band_distance(w, lo, hi):
    d = band_distance(w, lo, hi)
    assert d >= 0 and (d == 0) == (lo <= w <= hi)


def test_control_cost_examples(case4):
    net, _ = case4
    traj = _const_run(net, None, t_end=10.0, log_every=100)
    assert control_cost(traj, 4.0) == 0.0
    ones = replace(traj, alpha=np.ones_like(traj.alpha))
    assert control_cost(ones, np.array([4.0, 0.0, 0.0, 0.0])) == pytest.approx(40.0)
    assert control_cost(ones, 1.0, window=(2.0, 5.0)) == pytest.approx(12.0)


def test_convergence_audit(case4):
    net, sc = case4
    x0 = SystemState(compute_equilibrium(net), np.array([0.5, -0.4, 0.3, 0.0]), np.array([0.05, -0.02, 0.03, 0.01]))
    traj = _const_run(net, Controller(net, sc.controller), t_end=150.0, initial=x0, log_every=100)
    rep = convergence_audit(traj)
    assert rep.passed and set(rep.ratios) == {"omega", "alpha_bl", "u_hat"}
