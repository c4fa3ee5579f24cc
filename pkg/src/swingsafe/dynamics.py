"""Nonlinear swing dynamics with algebraic zero-inertia buses, fixed-step RK4."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from swingsafe.errors import NonFinite
from swingsafe.netmodel import DisturbanceProfile, PowerNetwork, compute_equilibrium, incidence_matrix


@dataclass
class SystemState:
    """``lam`` per line (rad), ``omega`` per bus (rad/s), ``alpha_bl`` per bus (p.u.)."""

    lam: np.ndarray
    omega: np.ndarray
    alpha_bl: np.ndarray

    def copy(self) -> "SystemState":
        return SystemState(self.lam.copy(), self.omega.copy(), self.alpha_bl.copy())

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.lam, self.omega, self.alpha_bl])


@dataclass(frozen=True)
class StageOutput:
    """What a control law returns at one integrator stage."""

    omega: np.ndarray
    alpha: np.ndarray
    alpha_bl_dot: np.ndarray
    alpha_tl: np.ndarray
    u_mpc: np.ndarray
    u_hat: np.ndarray


class ControlLaw(Protocol):
    def sample(self, t: float, state: SystemState, injection: Callable[[float], np.ndarray]) -> bool: ...

    def stage(self, t, lam, omega_inertial, alpha_bl, p, torque) -> StageOutput: ...


class NetworkOps:
    """Dense per-network operators reused at every stage."""

    def __init__(self, net: PowerNetwork):
        self.net = net
        self.D = incidence_matrix(net)
        self.Dt = np.ascontiguousarray(self.D.T)
        self.b = np.array(net.susceptance)
        self.M = np.array(net.inertia)
        self.E = np.array(net.damping)
        self.inertial = np.flatnonzero(net.inertia > 0)
        self.algebraic = np.flatnonzero(net.inertia == 0)
        self.M_in = self.M[self.inertial]
        self.m, self.n = net.n_edges, net.n_buses
        self.ctrl = net.controlled_mask()

    def torque(self, lam, p):
        """Net electrical torque ``p - D^T Y_b sin(lam)`` per bus."""
        return p - self.Dt @ (self.b * np.sin(lam))

    def full_omega(self, omega_inertial, torque, alpha):
        om = np.empty(self.n)
        om[self.inertial] = omega_inertial
        if self.algebraic.size:
            a = self.algebraic
            om[a] = (torque[a] + alpha[a]) / self.E[a]
        return om


def _check_alpha(net: PowerNetwork, alpha):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha[~net.controlled_mask()] != 0):
        raise ValueError("control input is nonzero on a bus without an actuator")
    return alpha


def swing_rhs(net: PowerNetwork, state: SystemState, alpha, p=None):
    """``(lam_dot, omega_dot)``; ``omega_dot`` covers the buses with ``M_i > 0`` only."""
    alpha = _check_alpha(net, alpha)
    p = net.injection if p is None else np.asarray(p, dtype=float)
    ops = NetworkOps(net)
    tq = ops.torque(state.lam, p)
    i = ops.inertial
    lam_dot = ops.D @ state.omega
    omega_dot = (tq[i] - ops.E[i] * state.omega[i] + alpha[i]) / ops.M[i]
    return lam_dot, omega_dot


def algebraic_omega(net: PowerNetwork, lam, alpha, p=None, i: int | None = None):
    """Frequency of zero-inertia bus ``i`` (or of all of them) from the power balance."""
    alpha = _check_alpha(net, alpha)
    p = net.injection if p is None else np.asarray(p, dtype=float)
    ops = NetworkOps(net)
    tq = ops.torque(np.asarray(lam, dtype=float), p)
    idx = ops.algebraic if i is None else np.array([i])
    if np.any(net.inertia[idx] != 0):
        raise ValueError("algebraic frequency is only defined on zero-inertia buses")
    out = (tq[idx] + alpha[idx]) / ops.E[idx]
    return float(out[0]) if i is not None else out


class OpenLoop:
    """No actuation: ``alpha = 0`` and the filter state stays at rest."""

    def __init__(self, net: PowerNetwork):
        self.ops = NetworkOps(net)
        self._zero = np.zeros(net.n_buses)

    def sample(self, t, state, injection):
        return False

    def stage(self, t, lam, omega_inertial, alpha_bl, p, torque) -> StageOutput:
        z = self._zero
        om = self.ops.full_omega(omega_inertial, torque, z)
        return StageOutput(om, z, z, z, z, z)


class _Stepper:
    """Packs ``(lam, omega_inertial, alpha_bl)`` into one vector for RK4."""

    def __init__(self, ops: NetworkOps, law, injection):
        self.ops, self.law, self.injection = ops, law, injection
        m, nI = ops.m, ops.inertial.size
        self.sl_lam = slice(0, m)
        self.sl_om = slice(m, m + nI)
        self.sl_al = slice(m + nI, None)

    def pack(self, state: SystemState) -> np.ndarray:
        return np.concatenate([state.lam, state.omega[self.ops.inertial], state.alpha_bl])

    def rhs(self, t, y):
        ops = self.ops
        lam, wI, abl = y[self.sl_lam], y[self.sl_om], y[self.sl_al]
        p = self.injection(t)
        tq = p - ops.Dt @ (ops.b * np.sin(lam))
        out = self.law.stage(t, lam, wI, abl, p, tq)
        i = ops.inertial
        dw = (tq[i] - ops.E[i] * out.omega[i] + out.alpha[i]) / ops.M_in
        return np.concatenate([ops.D @ out.omega, dw, out.alpha_bl_dot]), out, p

    def unpack(self, y, omega_full) -> SystemState:
        return SystemState(y[self.sl_lam].copy(), omega_full.copy(), y[self.sl_al].copy())


def integrate_step(net: PowerNetwork, state: SystemState, law, t: float, dt: float, injection=None) -> SystemState:
    """One classical RK4 step of the coupled swing and filter equations."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    law = OpenLoop(net) if law is None else law
    inj = injection or (lambda _t: net.injection)
    st = _Stepper(NetworkOps(net), law, inj)
    y = st.pack(state)
    y1, _ = _rk4(st, t, y, dt)
    _, out, _ = st.rhs(t + dt, y1)
    return st.unpack(y1, out.omega)


def _rk4(st: _Stepper, t, y, dt, first=None):
    k1, out1, p1 = first if first is not None else st.rhs(t, y)
    k2, _, _ = st.rhs(t + 0.5 * dt, y + (0.5 * dt) * k1)
    k3, _, _ = st.rhs(t + 0.5 * dt, y + (0.5 * dt) * k2)
    k4, _, _ = st.rhs(t + dt, y + dt * k3)
    y1 = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(y1)):
        raise NonFinite(f"state became non-finite at t={t + dt:g}")
    return y1, (out1, p1)


@dataclass
class SimulationSettings:
    t_end: float = 180.0
    dt: float = 1e-3
    log_every: int = 10
    disturbance: DisturbanceProfile = field(default_factory=DisturbanceProfile)
    initial: SystemState | None = None

    def __post_init__(self):
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class Trajectory:
    """Logged closed-loop data; every array has one row per logged time."""

    net: PowerNetwork
    t: np.ndarray
    lam: np.ndarray
    omega: np.ndarray
    alpha_bl: np.ndarray
    alpha_tl: np.ndarray
    alpha: np.ndarray
    u_mpc: np.ndarray
    u_hat: np.ndarray
    p: np.ndarray
    dt: float
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.size

    def state(self, k: int) -> SystemState:
        return SystemState(self.lam[k].copy(), self.omega[k].copy(), self.alpha_bl[k].copy())

    @property
    def final(self) -> SystemState:
        return self.state(-1)


def equilibrium_state(net: PowerNetwork) -> SystemState:
    n = net.n_buses
    return SystemState(compute_equilibrium(net), np.zeros(n), np.zeros(n))


def _has_compiled() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:  # pragma: no cover
        return False
    return True


def simulate(net: PowerNetwork, settings: SimulationSettings, law=None, label: str = "", engine: str = "auto") -> Trajectory:
    """Fixed-step RK4 run from ``settings.initial`` (equilibrium if unset).

    The control law is asked to ``sample`` at every step boundary before the
    step is taken; it decides itself whether a sampling instant is due and
    returns True if its output changed. Logged values at step ``k`` come
    from the first RK4 stage of step ``k`` (the state at ``t_k``), plus a
    final evaluation at ``t_end``.

    ``engine="python"`` evaluates the law stage by stage in Python;
    ``"compiled"`` runs the steps between sampling events in a compiled
    kernel (laws exposing ``kernel_args`` only); ``"auto"`` picks the
    compiled kernel when available.
    """
    law = OpenLoop(net) if law is None else law
    dist = settings.disturbance
    injection = (lambda t: dist.injection(net, t)) if dist.buses and dist.pieces else (lambda t: net.injection)
    ops = NetworkOps(net)
    st = _Stepper(ops, law, injection)
    x0 = settings.initial if settings.initial is not None else equilibrium_state(net)
    if np.any(x0.alpha_bl[~ops.ctrl] != 0):
        raise ValueError("initial filter state must vanish off the controlled set")
    y = st.pack(x0).astype(np.float64)
    dt = settings.dt
    n_steps = settings.n_steps
    every = settings.log_every
    n_log = n_steps // every + 1 + (1 if n_steps % every else 0)
    m, n = net.n_edges, net.n_buses
    names = ("lam", "omega", "alpha_bl", "alpha_tl", "alpha", "u_mpc", "u_hat", "p")
    buf = {k: np.empty((n_log, m if k == "lam" else n)) for k in names}
    tl = np.empty(n_log)
    row = 0

    def log(t, y, out, p):
        nonlocal row
        tl[row] = t
        buf["lam"][row] = y[st.sl_lam]
        buf["omega"][row] = out.omega
        buf["alpha_bl"][row] = y[st.sl_al]
        buf["alpha_tl"][row] = out.alpha_tl
        buf["alpha"][row] = out.alpha
        buf["u_mpc"][row] = out.u_mpc
        buf["u_hat"][row] = out.u_hat
        buf["p"][row] = p
        row += 1

    if engine not in ("auto", "python", "compiled"):
        raise ValueError(f"unknown engine {engine!r}")
    compiled = engine == "compiled" or (engine == "auto" and _has_compiled())
    compiled = compiled and (isinstance(law, OpenLoop) or hasattr(law, "kernel_args"))
    if engine == "compiled" and not compiled:
        raise ValueError("this control law has no compiled kernel")

    if compiled:
        from swingsafe import _compiled as kc

        netp = kc.pack_net(ops, dist, net)
        logs = tuple(buf[k] for k in names)
        k = 0
        while k < n_steps:
            t = k * dt
            _, out, _ = st.rhs(t, y)
            law.sample(t, st.unpack(y, out.omega), injection)
            k_next = law.next_event_step(k, dt, n_steps) if hasattr(law, "next_event_step") else n_steps
            args = law.kernel_args() if hasattr(law, "kernel_args") else kc.open_loop_args(n)
            row, status = kc.run_chunk(y, k, k_next, dt, every, netp, args, row, tl, logs)
            if status != kc.OK:
                raise NonFinite(f"state became non-finite between t={k * dt:g} and t={k_next * dt:g}")
            k = k_next
    else:
        for k in range(n_steps):
            t = k * dt
            first = st.rhs(t, y)
            if law.sample(t, st.unpack(y, first[1].omega), injection):
                first = st.rhs(t, y)
            if k % every == 0:
                log(t, y, first[1], first[2])
            y, _ = _rk4(st, t, y, dt, first)
    _, out, p = st.rhs(n_steps * dt, y)
    log(n_steps * dt, y, out, p)
    traj = Trajectory(net, tl[:row].copy(), *(buf[k][:row].copy() for k in names), dt * every, label)
    traj.meta["engine"] = "compiled" if compiled else "python"
    traj.meta["dt"] = dt
    return traj
