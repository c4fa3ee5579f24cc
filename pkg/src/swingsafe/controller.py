"""Bilayered frequency control: sampled MPC, stability filter, low-pass filter, top layer."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from swingsafe.dynamics import NetworkOps, StageOutput, SystemState
from swingsafe.errors import SchemaError, SwingSafeError
from swingsafe.netmodel import TWO_PI, PowerNetwork
from swingsafe.prediction import (
    DiscreteModel,
    QpInstance,
    assemble_mpc_qp,
    discretize_backward_euler,
    horizon_steps,
    linearize,
)

log = logging.getLogger(__name__)

MODES = ("open-loop", "top-only", "bilayered", "bilayered+shift")
BACKENDS = ("reference", "saddle-central", "saddle-distributed")


@dataclass(frozen=True)
class ControllerConfig:
    """Controller parameters. Frequencies are given in Hz and converted internally.

    Scalars apply to every bus of the relevant set; per-bus sequences of
    length ``n`` are also accepted by :meth:`arrays`.
    """

    mode: str = "bilayered"
    shift: float = 0.0
    shift_buses: tuple[int, ...] | None = None
    omega_max_hz: float = 0.2
    omega_min_hz: float = -0.2
    thr_max_hz: float = 0.1
    thr_min_hz: float = -0.1
    gamma_max: float = 1.0
    gamma_min: float = 1.0
    eps: float = 1.9
    tau: float = 0.5
    c_safety: float = 4.0
    c_other: float = 1.0
    d: float = 100.0
    sampling: float = 1.0
    horizon: float = 10.0
    step: float = 0.2
    forecast_mode: str = "perfect"
    backend: str = "reference"
    saddle_rounds: int = 200_000
    saddle_tol: float = 1e-6
    saddle_h: float | None = None
    enable_at: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise SchemaError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backend not in BACKENDS:
            raise SchemaError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.forecast_mode not in ("perfect", "hold-current"):
            raise SchemaError(f"forecast_mode must be 'perfect' or 'hold-current', got {self.forecast_mode!r}")
        for name in ("omega_max_hz", "omega_min_hz", "thr_max_hz", "thr_min_hz", "gamma_max", "gamma_min", "eps", "tau"):
            if not np.all(np.isfinite(np.asarray(getattr(self, name), dtype=float))):
                raise SchemaError(f"{name} must be finite")
        lo, tlo = np.asarray(self.omega_min_hz, float), np.asarray(self.thr_min_hz, float)
        hi, thi = np.asarray(self.omega_max_hz, float), np.asarray(self.thr_max_hz, float)
        if not (np.all(lo < tlo) and np.all(tlo < 0) and np.all(0 < thi) and np.all(thi < hi)):
            raise SchemaError("need omega_min < thr_min < 0 < thr_max < omega_max")
        if np.any(np.asarray(self.gamma_max) <= 0) or np.any(np.asarray(self.gamma_min) <= 0):
            raise SchemaError("barrier gains must be positive")
        eps, tau = np.asarray(self.eps, float), np.asarray(self.tau, float)
        if np.any(eps <= 0) or np.any(tau <= 0):
            raise SchemaError("eps and tau must be positive")
        if np.any(eps * tau >= 1):
            raise SchemaError(f"eps*tau must be < 1 on every controlled bus (got max {float(np.max(eps * tau)):g})")
        if np.any(np.asarray(self.c_safety) <= 0) or np.any(np.asarray(self.c_other) <= 0) or np.any(np.asarray(self.d) <= 0):
            raise SchemaError("cost weights must be positive")
        if self.sampling <= 0 or self.horizon <= 0 or self.step <= 0:
            raise SchemaError("sampling period, horizon and prediction step must be positive")
        if horizon_steps(self.horizon, self.step) < 2:
            raise SchemaError("horizon must cover at least two prediction steps")
        if self.mode == "bilayered+shift" and self.shift == 0.0:
            log.info("bilayered+shift with zero shift behaves like bilayered")

    def with_overrides(self, **kw) -> "ControllerConfig":
        known = {f.name for f in fields(self)}
        bad = set(kw) - known
        if bad:
            raise SchemaError(f"unknown controller settings: {sorted(bad)}")
        return replace(self, **kw)

    @property
    def has_bottom_layer(self) -> bool:
        return self.mode in ("bilayered", "bilayered+shift")

    @property
    def has_top_layer(self) -> bool:
        return self.mode != "open-loop"

    @property
    def n_horizon(self) -> int:
        return horizon_steps(self.horizon, self.step)

    def arrays(self, net: PowerNetwork) -> "ControllerArrays":
        n = net.n_buses

        def vec(x):
            return np.array(np.broadcast_to(np.asarray(x, dtype=float), (n,)))

        ctrl, safe = net.controlled_mask(), net.safety_mask()
        c = np.where(safe, vec(self.c_safety), vec(self.c_other))
        shift = np.zeros(n)
        if self.mode == "bilayered+shift":
            buses = net.controlled if self.shift_buses is None else self.shift_buses
            shift[list(buses)] = self.shift
            shift[~ctrl] = 0.0
        return ControllerArrays(
            lo=vec(self.omega_min_hz) * TWO_PI, hi=vec(self.omega_max_hz) * TWO_PI,
            thr_lo=vec(self.thr_min_hz) * TWO_PI, thr_hi=vec(self.thr_max_hz) * TWO_PI,
            g_lo=vec(self.gamma_min), g_hi=vec(self.gamma_max),
            eps=np.where(ctrl, vec(self.eps), 0.0), tau=np.where(ctrl, vec(self.tau), 1.0),
            c=np.where(ctrl, c, 0.0), d=np.where(safe, vec(self.d), 0.0),
            ctrl=ctrl, safe=safe, shift=shift,
        )


@dataclass(frozen=True, eq=False)
class ControllerArrays:
    """Per-bus parameter vectors, frequencies in rad/s."""

    lo: np.ndarray
    hi: np.ndarray
    thr_lo: np.ndarray
    thr_hi: np.ndarray
    g_lo: np.ndarray
    g_hi: np.ndarray
    eps: np.ndarray
    tau: np.ndarray
    c: np.ndarray
    d: np.ndarray
    ctrl: np.ndarray
    safe: np.ndarray
    shift: np.ndarray


# --- the control laws ----------------------------------------------------------


def stability_filter(alpha_bl, u, eps):
    """Saturate ``u`` to ``[-eps |alpha_bl|, eps |alpha_bl|]``."""
    bound = np.asarray(eps) * np.abs(alpha_bl)
    out = np.minimum(np.maximum(u, -bound), bound)
    return float(out) if np.ndim(out) == 0 else out


def lowpass_rhs(alpha_bl, omega, u_hat, tau, controlled=True):
    """``-alpha_bl/tau - omega + u_hat`` on controlled buses, zero elsewhere."""
    out = np.where(controlled, -np.asarray(alpha_bl) / tau - omega + u_hat, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def v_signal(ops: NetworkOps, lam, omega, p, alpha_bl):
    """``E w + D^T Y_b sin(lam) - p - alpha_bl``: minus the uncontrolled acceleration torque."""
    return ops.E * omega - ops.torque(lam, p) - alpha_bl


def top_layer(omega, v, lo, hi, thr_lo, thr_hi, g_lo, g_hi):
    """Three-branch safety feedback, elementwise.

    Inside the closed band ``[thr_lo, thr_hi]`` the output is zero; above it
    ``min(0, g_hi (hi - w)/(w - thr_hi) + v)`` and below it
    ``max(0, g_lo (lo - w)/(thr_lo - w) + v)``.
    """
    omega = np.asarray(omega, dtype=float)
    v = np.asarray(v, dtype=float)
    out = np.zeros(np.broadcast(omega, v).shape)
    above = omega > thr_hi
    below = omega < thr_lo
    if np.any(above):
        w = np.broadcast_to(omega, out.shape)[above]
        bar = np.broadcast_to(g_hi, out.shape)[above] * (np.broadcast_to(hi, out.shape)[above] - w) / (w - np.broadcast_to(thr_hi, out.shape)[above])
        out[above] = np.minimum(0.0, bar + np.broadcast_to(v, out.shape)[above])
    if np.any(below):
        w = np.broadcast_to(omega, out.shape)[below]
        bar = np.broadcast_to(g_lo, out.shape)[below] * (np.broadcast_to(lo, out.shape)[below] - w) / (np.broadcast_to(thr_lo, out.shape)[below] - w)
        out[below] = np.maximum(0.0, bar + np.broadcast_to(v, out.shape)[below])
    return float(out) if out.ndim == 0 else out


def compose_alpha(alpha_tl, alpha_bl, controlled=None):
    alpha = np.asarray(alpha_tl, dtype=float) + np.asarray(alpha_bl, dtype=float)
    if controlled is not None and np.any(alpha[~np.asarray(controlled)] != 0):
        raise ValueError("control input is nonzero on a bus without an actuator")
    return alpha


# --- MPC sampling --------------------------------------------------------------


@dataclass
class MpcResult:
    u: np.ndarray
    qp: QpInstance
    Y: np.ndarray
    backend: str
    converged: bool = True
    residual: float = 0.0
    saddle: object = None
    message_log: object = None


def build_prediction_model(net: PowerNetwork, cfg: ControllerConfig) -> DiscreteModel:
    return discretize_backward_euler(linearize(net, cfg.arrays(net).tau), cfg.step)


def forecast_times(t: float, cfg: ControllerConfig) -> np.ndarray:
    """Times of the predicted steps ``k = 1..N``; step 1 is the sampling instant."""
    return t + cfg.step * np.arange(cfg.n_horizon)


def assemble_sample_qp(net, cfg: ControllerConfig, dm: DiscreteModel, x: SystemState, forecast) -> QpInstance:
    ar = cfg.arrays(net)
    return assemble_mpc_qp(dm, net, ar.c, ar.d, ar.eps, x.stacked(), forecast, (ar.lo, ar.hi))


def _shift_warm_start(s, qp: QpInstance):
    """Move predicted states and slacks one step ahead; the last step is repeated."""
    from swingsafe.solvers import SaddleState

    N, nx, n = qp.N, qp.nx, qp.n_buses
    ns = len(qp.safety)
    Z = s.Z.copy()
    X = Z[: N * nx].reshape(N, nx)
    X[:-1] = X[1:].copy()
    S = Z[N * nx + n :].reshape(N, ns) if ns else None
    if S is not None:
        S[:-1] = S[1:].copy()
    return SaddleState(Z, s.eta.copy(), s.mu.copy(), s.eps_z, s.eps_eta, s.eps_mu, s.h)


def mpc_sample(net: PowerNetwork, cfg: ControllerConfig, x: SystemState, forecast, dm: DiscreteModel | None = None, warm=None) -> MpcResult:
    """Solve the MPC program at one sampling instant and return ``u_MPC``.

    ``forecast`` is the ``n x N`` matrix of predicted injections.
    ``warm`` is a saddle state from the previous sample (saddle backends).
    """
    from swingsafe import solvers

    dm = dm or build_prediction_model(net, cfg)
    qp = assemble_sample_qp(net, cfg, dm, x, forecast)
    if cfg.backend == "reference":
        sol = solvers.solve_qp_reference(qp)
        Y, res = sol.Y, sol.residual.max()
        result = MpcResult(np.zeros(net.n_buses), qp, Y, cfg.backend, True, res)
    else:
        s0 = _shift_warm_start(warm, qp) if warm is not None else solvers.zero_state(qp)
        if cfg.saddle_h is not None:
            s0.h = cfg.saddle_h
        if cfg.backend == "saddle-central":
            try:
                s, _ = solvers.saddle_integrate(qp, s0, cfg.saddle_rounds, stop_tol=cfg.saddle_tol)
                converged = True
            except SwingSafeError as err:
                if not hasattr(err, "best"):
                    raise
                log.warning("saddle dynamics hit the round budget; using the best iterate")
                s, converged = err.best, False
            mlog = None
        else:
            from swingsafe.distributed import build_agents, distributed_execute

            agents, dist = build_agents(qp, net)
            try:
                s, mlog = distributed_execute(qp, agents, cfg.saddle_rounds, s0, dist, stop_tol=cfg.saddle_tol)
                converged = True
            except SwingSafeError as err:
                if not hasattr(err, "state"):
                    raise
                log.warning("distributed saddle dynamics hit the round budget; using the last iterate")
                s, mlog, converged = err.state, err.log, False
        Y = s.Z
        res = solvers.kkt_residual(qp, s.Z, s.eta, s.mu).max()
        result = MpcResult(np.zeros(net.n_buses), qp, Y, cfg.backend, converged, res, s, mlog)
    u = qp.control(Y).copy()
    u[~net.controlled_mask()] = 0.0
    result.u = u
    return result


# --- closed-loop law -----------------------------------------------------------


class Controller:
    """Bilayered controller usable as a simulation control law.

    ``mode`` selects the layers: ``top-only`` keeps the bottom layer at rest,
    ``bilayered+shift`` adds a constant to the MPC output before the
    stability filter. Before ``enable_at`` the controller is inactive
    (no actuation, filter at rest).
    """

    def __init__(self, net: PowerNetwork, cfg: ControllerConfig, disturbance=None):
        self.net, self.cfg = net, cfg
        self.ops = NetworkOps(net)
        self.ar = cfg.arrays(net)
        self.disturbance = disturbance
        self.dm = build_prediction_model(net, cfg) if cfg.has_bottom_layer else None
        n = net.n_buses
        self.u_mpc = np.zeros(n)
        self.active = cfg.enable_at <= 0.0 and cfg.mode != "open-loop"
        self.samples: list[tuple[float, str]] = []
        self.failures = 0
        self._warm = None
        self._zero = np.zeros(n)
        self.iw = np.flatnonzero(self.ar.safe)
        self.iw_alg = np.flatnonzero(self.ar.safe & (net.inertia == 0))
        self.last_result: MpcResult | None = None

    # sampling instants are integer multiples of the sampling period
    def _is_sample_time(self, t: float) -> bool:
        q = t / self.cfg.sampling
        return abs(q - round(q)) < 1e-9 * max(1.0, q)

    def sample(self, t: float, state: SystemState, injection) -> bool:
        changed = False
        if not self.active and self.cfg.mode != "open-loop" and t >= self.cfg.enable_at - 1e-12:
            self.active = True
            changed = True
        if not (self.active and self.cfg.has_bottom_layer and self._is_sample_time(t)):
            return changed
        times = forecast_times(t, self.cfg)
        if self.disturbance is not None and self.disturbance.buses:
            fc = self.disturbance.forecast(self.net, t, times) if self.cfg.forecast_mode == "perfect" else np.repeat(injection(t)[:, None], times.size, axis=1)
        else:
            fc = np.repeat(np.asarray(self.net.injection, dtype=float)[:, None], times.size, axis=1)
        try:
            res = mpc_sample(self.net, self.cfg, state, fc, self.dm, self._warm)
        except SwingSafeError as err:
            self.failures += 1
            self.samples.append((t, f"hold ({type(err).__name__})"))
            log.warning("MPC sample at t=%g failed (%s); holding previous output", t, err)
            return changed
        self.last_result = res
        self._warm = res.saddle
        self.samples.append((t, "ok" if res.converged is not False else "best-iterate"))
        self.u_mpc = res.u
        return True

    def filter_input(self) -> np.ndarray:
        return self.u_mpc + self.ar.shift

    def stage(self, t, lam, omega_inertial, alpha_bl, p, torque) -> StageOutput:
        ops, ar = self.ops, self.ar
        if not self.active:
            z = self._zero
            return StageOutput(ops.full_omega(omega_inertial, torque, z), z, z, z, z, z)
        bl = alpha_bl if self.cfg.has_bottom_layer else self._zero
        om = np.empty(ops.n)
        om[ops.inertial] = omega_inertial
        a_tl = np.zeros(ops.n)
        if ops.algebraic.size:
            a = ops.algebraic
            q = torque[a] + bl[a]
            om[a] = q / ops.E[a]
            if self.iw_alg.size:
                # implicit top-layer equation on a zero-inertia bus: frequency is held on the band
                j = self.iw_alg
                qj = torque[j] + bl[j]
                om[j] = np.clip(qj / ops.E[j], ar.lo[j], ar.hi[j])
                a_tl[j] = ops.E[j] * om[j] - qj
        iw = self.iw if not self.iw_alg.size else np.setdiff1d(self.iw, self.iw_alg)
        if iw.size:
            v = ops.E[iw] * om[iw] - torque[iw] - bl[iw]
            a_tl[iw] = top_layer(om[iw], v, ar.lo[iw], ar.hi[iw], ar.thr_lo[iw], ar.thr_hi[iw], ar.g_lo[iw], ar.g_hi[iw])
        if self.cfg.has_bottom_layer:
            u_in = self.filter_input()
            u_hat = np.where(ar.ctrl, stability_filter(bl, u_in, ar.eps), 0.0)
            bl_dot = lowpass_rhs(bl, om, u_hat, ar.tau, ar.ctrl)
        else:
            u_in = u_hat = bl_dot = self._zero
        return StageOutput(om, a_tl + bl, bl_dot, a_tl, u_in, u_hat)

    # hooks for the compiled integrator
    def next_event_step(self, k: int, dt: float, n_steps: int) -> int:
        """First step index after ``k`` at which :meth:`sample` may change the law."""
        nxt = n_steps
        if self.cfg.mode == "open-loop":
            return nxt
        if not self.active:
            nxt = min(nxt, max(k + 1, int(math.ceil(self.cfg.enable_at / dt - 1e-9))))
        elif self.cfg.has_bottom_layer:
            per = self.cfg.sampling / dt
            j = int(math.floor(k / per + 1e-9)) + 1
            nxt = min(nxt, max(k + 1, int(round(j * per))))
        return nxt

    def kernel_args(self):
        ar = self.ar
        return (
            ar.ctrl.astype(np.float64), ar.safe.astype(np.float64), ar.eps, ar.tau, ar.lo, ar.hi,
            ar.thr_lo, ar.thr_hi, ar.g_lo, ar.g_hi, self.filter_input() if self.cfg.has_bottom_layer else self._zero,
            int(self.active), int(self.cfg.has_bottom_layer), int(self.cfg.has_top_layer),
        )
