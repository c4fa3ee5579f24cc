"""Energy functions, closed-loop audits and control-cost accounting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from swingsafe.errors import AuditFailure
from swingsafe.netmodel import TWO_PI, PowerNetwork, compute_equilibrium

FILTER_TOL = 1e-12


def line_potential(lam, lam_inf):
    """``a(lam) = cos(l*) - cos(lam) - lam sin(l*) + l* sin(l*)``, elementwise."""
    lam = np.asarray(lam, dtype=float)
    s = np.sin(lam_inf)
    return np.cos(lam_inf) - np.cos(lam) - lam * s + lam_inf * s


def energy_V(net: PowerNetwork, lam_inf, state) -> np.ndarray | float:
    """Kinetic energy of inertial buses plus line potential.

    ``state`` needs ``lam`` and ``omega`` attributes; trajectories give one
    value per logged row.
    """
    lam = np.asarray(state.lam, dtype=float)
    om = np.asarray(state.omega, dtype=float)
    M = np.asarray(net.inertia)
    kin = 0.5 * np.sum(M * om**2, axis=-1)
    pot = np.sum(net.susceptance * line_potential(lam, lam_inf), axis=-1)
    out = kin + pot
    return float(out) if np.ndim(out) == 0 else out


def energy_Vbar(net: PowerNetwork, lam_inf, state) -> np.ndarray | float:
    """``V`` plus ``1/2 sum alpha_bl^2`` over the controlled buses."""
    ab = np.asarray(state.alpha_bl, dtype=float)
    ctrl = net.controlled_mask()
    out = np.asarray(energy_V(net, lam_inf, state)) + 0.5 * np.sum(np.where(ctrl, ab, 0.0) ** 2, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def level_set_constant(net: PowerNetwork, lam_inf) -> float:
    """Smallest ``Vbar`` on the boundary of the angle box, with ``omega = alpha_bl = 0``.

    The potential is separable and vanishes at ``lam_inf``, so the minimum
    sits on a single face ``lam_k = +-pi/2`` with the other angles at
    equilibrium.
    """
    lam_inf = np.asarray(lam_inf, dtype=float)
    b = net.susceptance
    faces = np.concatenate([b * line_potential(math.pi / 2, lam_inf), b * line_potential(-math.pi / 2, lam_inf)])
    return float(faces.min())


@dataclass
class EnergyReport:
    V: float
    Vbar: float
    in_level_set: bool
    rho_hat: float
    c: float


def energy_report(net: PowerNetwork, lam_inf, state, c: float | None = None) -> EnergyReport:
    c = level_set_constant(net, lam_inf) if c is None else c
    V = energy_V(net, lam_inf, state)
    Vb = energy_Vbar(net, lam_inf, state)
    in_box = bool(np.all(np.abs(state.lam) <= math.pi / 2))
    rho = Vb / c
    return EnergyReport(V, Vb, in_box and rho <= 1.0, rho, c)


# --- audits --------------------------------------------------------------------


def _cfg_arrays(net, cfg):
    from swingsafe.controller import ControllerConfig

    return (cfg or ControllerConfig()).arrays(net)


@dataclass
class LyapunovReport:
    passed: bool
    steps: int
    worst_increase: float
    worst_ratio: float
    worst_bound_gap: float
    max_rho_hat: float
    offending: list = field(default_factory=list)

    def text(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"lyapunov: {verdict} over {self.steps} steps; max dVbar {self.worst_increase:.3e} "
            f"(ratio to tolerance {self.worst_ratio:.3e}); worst gap to dissipation bound {self.worst_bound_gap:.3e}; "
            f"max rho_hat {self.max_rho_hat:.6g}"
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["offending"] = d["offending"][:20]
        return d


def lyapunov_decrease_audit(traj, cfg=None, lam_inf=None, rel_tol: float = 1e-8, slack: float = 1e-6, raise_on_fail: bool = True) -> LyapunovReport:
    """Check ``Vbar`` decrease and the dissipation bound step by step.

    For consecutive logged rows, ``dVbar <= rel_tol * dt * (1 + |Vbar|)`` and
    ``dVbar <= int(-w'Ew - sum (1/tau - eps) alpha_bl^2) + slack``, the
    integral by the trapezoid rule. Meant for runs with constant injections.
    """
    net = traj.net
    ar = _cfg_arrays(net, cfg)
    lam_inf = compute_equilibrium(net) if lam_inf is None else lam_inf
    Vb = energy_Vbar(net, lam_inf, traj)
    dt = np.diff(traj.t)
    dV = np.diff(Vb)
    tol = rel_tol * dt * (1.0 + np.abs(Vb[:-1]))
    ab = np.where(ar.ctrl, traj.alpha_bl, 0.0)
    rate = -np.sum(net.damping * traj.omega**2, axis=1) - np.sum(np.where(ar.ctrl, 1.0 / ar.tau - ar.eps, 0.0) * ab**2, axis=1)
    bound = 0.5 * dt * (rate[1:] + rate[:-1])
    gap = dV - bound
    bad = np.flatnonzero((dV > tol) | (gap > slack))
    c = level_set_constant(net, lam_inf)
    report = LyapunovReport(
        passed=bad.size == 0,
        steps=int(dV.size),
        worst_increase=float(dV.max()) if dV.size else 0.0,
        worst_ratio=float(np.max(dV / tol)) if dV.size else 0.0,
        worst_bound_gap=float(gap.max()) if gap.size else 0.0,
        max_rho_hat=float(Vb.max() / c),
        offending=[(float(traj.t[k]), float(dV[k]), float(tol[k]), float(gap[k])) for k in bad[:100]],
    )
    if not report.passed and raise_on_fail:
        raise AuditFailure(report.text(), offending=report.offending)
    return report


@dataclass
class BusSafety:
    bus: int
    min_hz: float
    max_hz: float
    overshoot_hz: float
    start_safe: bool
    entry_time: float | None
    monotone: bool
    worst_step_increase: float


@dataclass
class SafetyReport:
    passed: bool
    buses: list
    tol_hz: float
    start: float

    def text(self) -> str:
        lines = [f"safety: {'PASS' if self.passed else 'FAIL'} (tolerance {self.tol_hz:g} Hz, window from t={self.start:g} s)"]
        for b in self.buses:
            entry = "-" if b.entry_time is None else f"{b.entry_time:.3f}"
            lines.append(
                f"  bus {b.bus}: range [{b.min_hz:+.6f}, {b.max_hz:+.6f}] Hz, overshoot {b.overshoot_hz:.3e} Hz, "
                f"start {'safe' if b.start_safe else 'unsafe'}, entry {entry}, monotone {b.monotone}"
            )
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def max_overshoot_hz(self) -> float:
        return max((b.overshoot_hz for b in self.buses), default=0.0)


def band_distance(omega, lo, hi):
    return np.maximum(np.maximum(lo - omega, omega - hi), 0.0)


def safety_audit(traj, cfg=None, tol_hz: float = 1e-3, start: float = 0.0, monotone_tol: float = 1e-9) -> SafetyReport:
    """Per safety bus: excursion beyond the band, and for unsafe starts the approach.

    The window begins at the first logged time ``>= start``. A bus starting
    outside its band must approach it with per-step increases of the
    distance (rad/s) no larger than ``monotone_tol`` until it enters; after
    entry, and for safe starts, the excursion must stay within ``tol_hz``.
    """
    net = traj.net
    ar = _cfg_arrays(net, cfg)
    k0 = int(np.searchsorted(traj.t, start - 1e-12))
    t = traj.t[k0:]
    buses = []
    ok = True
    for i in net.safety:
        w = traj.omega[k0:, i]
        dist = band_distance(w, ar.lo[i], ar.hi[i])
        start_safe = bool(dist[0] == 0.0)
        entry, monotone, worst = None, True, 0.0
        if start_safe:
            over = float(dist.max())
        else:
            inside = np.flatnonzero(dist == 0.0)
            if inside.size:
                entry = float(t[inside[0]])
                pre = dist[: inside[0] + 1]
                over = float(dist[inside[0]:].max())
            else:
                pre = dist
                over = 0.0
            steps = np.diff(pre)
            worst = float(steps.max()) if steps.size else 0.0
            monotone = worst <= monotone_tol
        over_hz = over / TWO_PI
        bus_ok = over_hz <= tol_hz and (start_safe or (entry is not None and monotone))
        ok &= bus_ok
        buses.append(BusSafety(int(net.bus_ids[i]), float(w.min() / TWO_PI), float(w.max() / TWO_PI), over_hz, start_safe, entry, monotone, worst))
    return SafetyReport(bool(ok), buses, tol_hz, float(t[0]) if t.size else start)


@dataclass
class InvariantReport:
    passed: bool
    filter_worst: float
    sign_worst: float
    steps: int

    def text(self) -> str:
        return (
            f"invariants: {'PASS' if self.passed else 'FAIL'} over {self.steps} rows; "
            f"max alpha_bl*u_hat - eps*alpha_bl^2 = {self.filter_worst:.3e}, max omega*alpha_tl = {self.sign_worst:.3e}"
        )

    def as_dict(self) -> dict:
        return asdict(self)


def invariant_audit(traj, cfg=None, tol: float = FILTER_TOL) -> InvariantReport:
    """Filter inequality and top-layer sign condition at every logged row."""
    ar = _cfg_arrays(traj.net, cfg)
    ab, uh = traj.alpha_bl, traj.u_hat
    filt = np.where(ar.ctrl, ab * uh - ar.eps * ab**2, -np.inf)
    sign = np.where(ar.safe, traj.omega * traj.alpha_tl, -np.inf)
    fw = float(filt.max()) if filt.size else -np.inf
    sw = float(sign.max()) if sign.size else -np.inf
    return InvariantReport(bool(fw <= tol and sw <= 0.0), fw, sw, len(traj))


@dataclass
class ConvergenceReport:
    passed: bool
    rel_tol: float
    ratios: dict

    def text(self) -> str:
        parts = ", ".join(f"{k} {v:.3e}" for k, v in self.ratios.items())
        return f"convergence: {'PASS' if self.passed else 'FAIL'} (final/peak ratios: {parts}; limit {self.rel_tol:g})"

    def as_dict(self) -> dict:
        return asdict(self)


def convergence_audit(traj, rel_tol: float = 1e-3) -> ConvergenceReport:
    """Final-time sup norms of ``omega``, ``alpha_bl`` and ``u_hat`` against their run peaks."""
    ratios = {}
    for name in ("omega", "alpha_bl", "u_hat"):
        x = np.abs(getattr(traj, name))
        peak = float(x.max())
        ratios[name] = float(x[-1].max() / peak) if peak > 0 else 0.0
    return ConvergenceReport(all(r <= rel_tol for r in ratios.values()), rel_tol, ratios)


def control_cost(traj, c, window: tuple[float, float] | None = None) -> float:
    """Trapezoidal integral of ``sum_i c_i alpha_i(t)^2`` over ``window`` (whole run by default)."""
    c = np.broadcast_to(np.asarray(c, dtype=float), (traj.alpha.shape[1],))
    t = traj.t
    y = np.sum(c * traj.alpha**2, axis=1)
    if window is not None:
        lo, hi = window
        keep = (t >= lo - 1e-12) & (t <= hi + 1e-12)
        t, y = t[keep], y[keep]
    return float(np.trapezoid(y, t)) if t.size > 1 else 0.0
