"""Acceptance suite: one or more tests per criterion, summarized after the run."""

import time
from dataclasses import replace

import numpy as np
import pytest

from swingsafe.casefile import DATA_DIR, _read_toml, bundled_case, load_case
from swingsafe.cli import run_metrics, run_scenario, scenario_qp
from swingsafe.controller import Controller
from swingsafe.distributed import DUAL_HOPS, PRIMAL_HOPS, build_agents, distributed_execute
from swingsafe.dynamics import SimulationSettings, SystemState, simulate
from swingsafe.generate import random_mpc_qp
from swingsafe.monitor import convergence_audit, invariant_audit, lyapunov_decrease_audit, safety_audit
from swingsafe.netmodel import TWO_PI, PowerNetwork, compute_equilibrium
from swingsafe.prediction import (
    discretize_backward_euler,
    discretize_forward_euler,
    linearize,
    locality_audit,
    spectral_stability_check,
)
from swingsafe.solvers import saddle_integrate, solve_qp_reference, zero_state

from conftest import path_net, two_bus

criterion = pytest.mark.criterion
N_SOLVER_INSTANCES = 20
N_AUG_INSTANCES = 10


def _detail(record, text):
    record("detail", text)


@pytest.fixture(scope="session")
def bundled():
    return load_case(bundled_case("case4"))


@pytest.fixture(scope="session")
def runs(bundled):
    """Closed- and open-loop runs on the bundled disturbance scenario."""
    net, sc = bundled
    out = {}
    for mode in ("open-loop", "bilayered", "top-only", "bilayered+shift"):
        s = sc.with_mode(mode, shift=0.1) if mode == "bilayered+shift" else sc.with_mode(mode)
        out[mode] = run_scenario(net, s)
    return out


@pytest.fixture(scope="session")
def late_enable(bundled):
    net, sc = bundled
    s = replace(sc.with_mode("bilayered", enable_at=30.0), log_every=1)
    return run_scenario(net, s)


def _constant_run(net, cfg, x0, t_end=60.0):
    law = Controller(net, cfg)
    return simulate(net, SimulationSettings(t_end=t_end, dt=1e-3, log_every=1, initial=x0), law)


@pytest.fixture(scope="session")
def constant_runs(bundled):
    net, sc = bundled
    x0 = SystemState(compute_equilibrium(net), np.array([0.5, -0.4, 0.3, 0.0]), np.array([0.05, -0.02, 0.03, 0.01]))
    return {
        "bilayered": (sc.controller, _constant_run(net, sc.controller, x0)),
        "bilayered+shift": (sc.controller.with_overrides(mode="bilayered+shift", shift=0.1), None),
        "x0": x0,
    }


@pytest.fixture(scope="session")
def shifted_constant_run(bundled, constant_runs):
    net, _ = bundled
    cfg = constant_runs["bilayered+shift"][0]
    return cfg, _constant_run(net, cfg, constant_runs["x0"])


@pytest.fixture(scope="session")
def solver_instances():
    """Seeded QP instances with 2 to 6 buses and horizons up to 10 steps, plus their solutions."""
    t0 = time.perf_counter()
    rows = []
    for seed in range(N_SOLVER_INSTANCES):
        qp, net = random_mpc_qp(np.random.default_rng(seed))
        ref = solve_qp_reference(qp)
        s0 = zero_state(qp)
        central, _ = saddle_integrate(qp, s0, 400_000, stop_tol=1e-6)
        agents, dist = build_agents(qp, net)
        dist_state, log = distributed_execute(qp, agents, 400_000, s0, dist, stop_tol=1e-6)
        rows.append((seed, qp, net, ref, central, dist_state, log))
    return rows, time.perf_counter() - t0


def _case39():
    topo = _read_toml(DATA_DIR / "case39_topology.toml")
    edges = [(e["from"] - 1, e["to"] - 1) for e in topo["edges"]]
    n = topo["n_buses"]
    M = np.where(np.arange(n) >= 29, 4.0, 0.0)
    return PowerNetwork(n, edges, np.full(len(edges), 20.0), M, np.full(n, 0.5), np.zeros(n), range(29, 36), range(29, 33))


# --- 1 -------------------------------------------------------------------------


@criterion(1, "safety invariance on the bundled case")
def test_open_loop_violates_band(runs, record_property):
    traj = runs["open-loop"].traj
    low = traj.omega[:, list(traj.net.safety)].min() / TWO_PI
    _detail(record_property, f"open-loop min {low:.6f} Hz")
    assert low < -0.2


@criterion(1, "safety invariance on the bundled case")
def test_bilayered_keeps_band(runs, record_property):
    res = runs["bilayered"]
    rep = safety_audit(res.traj, res.scenario.controller, tol_hz=1e-3)
    _detail(record_property, f"bilayered overshoot {rep.max_overshoot_hz:.2e} Hz, {res.wall:.1f} s")
    assert rep.passed
    assert all(b.start_safe for b in rep.buses)
    assert res.wall <= 60.0


# --- 2 -------------------------------------------------------------------------


@criterion(2, "attractivity after late enable")
def test_late_enable_attractivity(late_enable, record_property):
    res = late_enable
    traj, cfg = res.traj, res.scenario.controller
    k = int(np.searchsorted(traj.t, 30.0))
    unsafe = np.abs(traj.omega[k, list(traj.net.safety)]) > 0.2 * TWO_PI
    rep = safety_audit(traj, cfg, start=30.0, monotone_tol=1e-9)
    entries = [b.entry_time for b in rep.buses if not b.start_safe]
    _detail(record_property, f"{int(unsafe.sum())} unsafe at enable, entry times {entries}")
    assert unsafe.any()
    assert rep.passed
    assert all(b.monotone and b.entry_time is not None for b in rep.buses if not b.start_safe)


# --- 3 -------------------------------------------------------------------------


@criterion(3, "Vbar decrease and dissipation bound under constant injections")
def test_lyapunov_constant_injection(constant_runs, record_property):
    cfg, traj = constant_runs["bilayered"]
    rep = lyapunov_decrease_audit(traj, cfg, rel_tol=1e-8, slack=1e-6, raise_on_fail=False)
    _detail(record_property, f"max dVbar {rep.worst_increase:.2e}, bound gap {rep.worst_bound_gap:.2e}")
    assert rep.passed


# --- 4 -------------------------------------------------------------------------


@criterion(4, "convergence after disturbance removal; shifted input keeps 1 and 3")
def test_convergence_after_release(runs, record_property):
    rep = convergence_audit(runs["bilayered"].traj, rel_tol=1e-3)
    _detail(record_property, "ratios " + ", ".join(f"{k} {v:.1e}" for k, v in rep.ratios.items()))
    assert rep.passed


@criterion(4, "convergence after disturbance removal; shifted input keeps 1 and 3")
def test_shifted_input_keeps_safety(runs):
    res = runs["bilayered+shift"]
    assert safety_audit(res.traj, res.scenario.controller, tol_hz=1e-3).passed


@criterion(4, "convergence after disturbance removal; shifted input keeps 1 and 3")
def test_shifted_input_keeps_lyapunov_decrease(shifted_constant_run):
    cfg, traj = shifted_constant_run
    assert lyapunov_decrease_audit(traj, cfg, rel_tol=1e-8, slack=1e-6, raise_on_fail=False).passed


# --- 5 -------------------------------------------------------------------------


@criterion(5, "saddle and distributed solvers match the reference")
def test_solver_equivalence(solver_instances, record_property):
    rows, wall = solver_instances
    worst_c = worst_d = worst_ref = 0.0
    for seed, qp, net, ref, central, dist_state, log in rows:
        n, N = net.n_buses, qp.N
        assert 2 <= n <= 6 and N <= 10
        scale = max(1.0, np.linalg.norm(ref.Y))
        worst_ref = max(worst_ref, float(ref.residual.max()))
        worst_c = max(worst_c, float(np.linalg.norm(central.Z - ref.Y) / scale))
        worst_d = max(worst_d, float(np.linalg.norm(dist_state.Z - ref.Y) / scale))
        assert np.array_equal(central.Z, dist_state.Z), f"seed {seed}"
        assert np.array_equal(central.eta, dist_state.eta) and np.array_equal(central.mu, dist_state.mu)
    _detail(record_property, f"{len(rows)} instances, ref KKT {worst_ref:.1e}, rel err {worst_c:.1e}/{worst_d:.1e}, {wall:.1f} s")
    assert len(rows) >= 20
    assert worst_ref <= 1e-8
    assert worst_c <= 1e-4 and worst_d <= 1e-4
    assert wall <= 120.0


# --- 6 -------------------------------------------------------------------------


@criterion(6, "locality certificate")
def test_locality_on_every_instance(solver_instances, bundled, record_property):
    net, sc = bundled
    rows, _ = solver_instances
    qps = [(qp, n) for _, qp, n, *_ in rows] + [(scenario_qp(net, sc), net)]
    for qp, n in qps:
        assert locality_audit(qp, n).passed
    hops = [(log.max_hops("primal"), log.max_hops("dual")) for *_, log in rows]
    _detail(record_property, f"{len(qps)} programs local, max hops primal {max(h[0] for h in hops)} dual {max(h[1] for h in hops)}")
    assert all(p <= PRIMAL_HOPS == 2 and d <= DUAL_HOPS == 1 for p, d in hops)


# --- 7 -------------------------------------------------------------------------


def _fixtures(bundled):
    return {
        "case4": bundled[0],
        "two-bus": two_bus(b=1.0, M=(1.0, 1.0), E=(0.1, 0.1)),
        "path4": path_net(4, p=np.array([0.5, -0.2, 0.3, -0.6])),
        "case39": _case39(),
    }


@criterion(7, "discretization spectral claims")
@pytest.mark.parametrize("T", [0.05, 0.2, 1.0, 5.0])
def test_backward_euler_spectral_radius(bundled, T, record_property):
    radii = {}
    for name, net in _fixtures(bundled).items():
        radii[name] = spectral_stability_check(discretize_backward_euler(linearize(net, 0.5), T)).radius
    _detail(record_property, f"T={T:g} max radius {max(radii.values()):.12f}")
    assert all(r <= 1 + 1e-9 for r in radii.values())


@criterion(7, "discretization spectral claims")
def test_forward_euler_unstable_for_large_step(record_property):
    net = two_bus(b=1.0, M=(1.0, 1.0), E=(0.1, 0.1))
    radii = {T: spectral_stability_check(discretize_forward_euler(linearize(net, 0.5), T)).radius for T in (1.0, 5.0, 10.0)}
    _detail(record_property, "forward Euler radii " + ", ".join(f"T={T:g}: {r:.3f}" for T, r in radii.items()))
    assert max(radii.values()) > 1.0


# --- 8 -------------------------------------------------------------------------


@criterion(8, "filter and sign invariants on every closed-loop run")
def test_invariants_everywhere(runs, late_enable, constant_runs, shifted_constant_run, record_property):
    trajs = [(r.scenario.controller, r.traj) for m, r in runs.items() if m != "open-loop"]
    trajs += [(late_enable.scenario.controller, late_enable.traj), constant_runs["bilayered"], shifted_constant_run]
    worst_f = worst_s = -np.inf
    for cfg, traj in trajs:
        rep = invariant_audit(traj, cfg, tol=1e-12)
        worst_f, worst_s = max(worst_f, rep.filter_worst), max(worst_s, rep.sign_worst)
        assert rep.passed, traj.label
    _detail(record_property, f"{len(trajs)} runs, filter {worst_f:.1e}, sign {worst_s:.1e}")


# --- 9 -------------------------------------------------------------------------


@criterion(9, "bilayered cheaper than top-layer only")
def test_cost_ordering(runs, record_property):
    bl, tl = run_metrics(runs["bilayered"]).cost, run_metrics(runs["top-only"]).cost
    _detail(record_property, f"cost {bl:.3f} vs {tl:.3f}")
    assert bl < tl


# --- 10 ------------------------------------------------------------------------


@criterion(10, "augmented and plain programs agree; augmented Hessian definite")
def test_augmented_equivalence(record_property):
    worst, min_eig = 0.0, np.inf
    for seed in range(N_AUG_INSTANCES):
        qa, _ = random_mpc_qp(np.random.default_rng(100 + seed))
        qr, _ = random_mpc_qp(np.random.default_rng(100 + seed), augmented=False)
        a, r = solve_qp_reference(qa), solve_qp_reference(qr)
        worst = max(worst, float(np.abs(a.Y - r.Y).max()))
        H = qa.H.toarray() if hasattr(qa.H, "toarray") else np.asarray(qa.H)
        ev = np.linalg.eigvalsh(0.5 * (H + H.T))
        min_eig = min(min_eig, float(ev[0] / ev[-1]))
    _detail(record_property, f"max minimizer gap {worst:.1e}, min relative eigenvalue {min_eig:.1e}")
    assert worst <= 1e-6
    assert min_eig > 1e-10
