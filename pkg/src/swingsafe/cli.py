"""Command-line scenario runner, comparison harness and QP cross-checking tools.

Exit codes: 0 success, 1 a requested audit failed, 2 invalid configuration
or input file, 3 solver failure, 4 scenario mismatch in ``compare``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from swingsafe import monitor
from swingsafe.casefile import ScenarioConfig, bundled_case, dump_qp, load_case, load_qp
from swingsafe.controller import BACKENDS, MODES, Controller, assemble_sample_qp, build_prediction_model, forecast_times
from swingsafe.dynamics import SimulationSettings, SystemState, Trajectory, equilibrium_state, simulate
from swingsafe.errors import Divergence, NoConvergence, ScenarioMismatch, SwingSafeError
from swingsafe.netmodel import TWO_PI, PowerNetwork, check_equilibrium_condition, compute_equilibrium
from swingsafe.prediction import locality_audit, spectral_stability_check

log = logging.getLogger("swingsafe")

AUDITS = ("safety", "lyapunov", "locality", "all")
DEFAULT_SHIFT = 0.1
SETTLE_FRACTION = 0.02

EXIT_OK, EXIT_AUDIT, EXIT_CONFIG, EXIT_SOLVER, EXIT_MISMATCH = 0, 1, 2, 3, 4


# --- running -------------------------------------------------------------------


@dataclass
class RunResult:
    net: PowerNetwork
    scenario: ScenarioConfig
    traj: Trajectory
    controller: Controller | None
    wall: float


def run_scenario(net: PowerNetwork, scenario: ScenarioConfig, engine: str = "auto") -> RunResult:
    scenario.validate()
    cfg = scenario.controller
    law = None if cfg.mode == "open-loop" else Controller(net, cfg, scenario.disturbance)
    settings = SimulationSettings(scenario.t_end, scenario.dt, scenario.log_every, scenario.disturbance, scenario.initial_state(net))
    t0 = time.perf_counter()
    traj = simulate(net, settings, law, label=cfg.mode, engine=engine)
    wall = time.perf_counter() - t0
    if law is not None:
        traj.meta["mpc_samples"] = len(law.samples)
        traj.meta["mpc_failures"] = law.failures
    return RunResult(net, scenario, traj, law, wall)


def constant_injection_start(traj: Trajectory, rtol: float = 1e-12) -> int:
    """First logged row from which the injection stays at its nominal value."""
    p0 = np.asarray(traj.net.injection, dtype=float)
    off = ~np.all(np.abs(traj.p - p0) <= rtol * (1.0 + np.abs(p0)), axis=1)
    bad = np.flatnonzero(off)
    return 0 if bad.size == 0 else int(bad[-1]) + 1


def tail(traj: Trajectory, k0: int) -> Trajectory:
    names = ("t", "lam", "omega", "alpha_bl", "alpha_tl", "alpha", "u_mpc", "u_hat", "p")
    return replace(traj, **{k: getattr(traj, k)[k0:] for k in names}, meta=dict(traj.meta))


def scenario_qp(net: PowerNetwork, scenario: ScenarioConfig, state: SystemState | None = None, t: float = 0.0):
    """The MPC program the controller would solve at time ``t`` from ``state``."""
    cfg = scenario.controller
    state = state or scenario.initial_state(net) or equilibrium_state(net)
    dm = build_prediction_model(net, cfg)
    times = forecast_times(t, cfg)
    dist = scenario.disturbance
    if dist.buses and dist.pieces:
        fc = dist.forecast(net, t, times)
    else:
        fc = np.repeat(np.asarray(net.injection, dtype=float)[:, None], times.size, axis=1)
    return assemble_sample_qp(net, cfg, dm, state, fc)


@dataclass
class AuditBundle:
    results: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    text: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.results.values())


def run_audits(res: RunResult, requested: list[str]) -> AuditBundle:
    want = set(AUDITS[:-1]) if "all" in requested else set(requested)
    net, traj, cfg = res.net, res.traj, res.scenario.controller
    out = AuditBundle()
    if "safety" in want:
        rep = monitor.safety_audit(traj, cfg)
        out.results["safety"] = rep.passed
        out.info["safety"] = rep.as_dict()
        out.text.append(rep.text())
    if "lyapunov" in want:
        k0 = constant_injection_start(traj)
        if k0 >= len(traj) - 1:
            out.results["lyapunov"] = False
            out.info["lyapunov"] = {"passed": False, "reason": "injection never returns to its nominal value"}
            out.text.append("lyapunov: FAIL (injection never returns to its nominal value; nothing to audit)")
        else:
            rep = monitor.lyapunov_decrease_audit(tail(traj, k0), cfg, raise_on_fail=False)
            out.results["lyapunov"] = rep.passed
            out.info["lyapunov"] = rep.as_dict() | {"window_start": float(traj.t[k0])}
            out.text.append(rep.text() + f" (window from t={traj.t[k0]:g} s, constant injection)")
    if "locality" in want:
        if cfg.has_bottom_layer:
            qp = scenario_qp(net, res.scenario)
            rep = locality_audit(qp, net)
            ok = rep.passed
            out.info["locality"] = {"passed": ok, "summary": rep.summary()}
            out.text.append(rep.summary().replace("locality:", "locality: PASS," if ok else "locality: FAIL,", 1))
            if cfg.backend == "saddle-distributed":
                last = res.controller.last_result if res.controller else None
                if last is not None and last.message_log is not None:
                    mlog = last.message_log
                    out.text.append("  message log: " + mlog.certificate())
                    out.info["locality"]["certificate"] = mlog.certificate()
                    ok &= mlog.max_hops("primal") <= 2 and mlog.max_hops("dual") <= 1
        else:
            ok = True
            out.text.append("locality: PASS (no optimization layer in this mode)")
            out.info["locality"] = {"passed": True, "summary": "no optimization layer"}
        out.results["locality"] = bool(ok)
    inv = monitor.invariant_audit(traj, cfg)
    conv = monitor.convergence_audit(traj)
    out.info["invariants"] = inv.as_dict()
    out.info["convergence"] = conv.as_dict()
    out.text.append(inv.text() + " [informational]")
    out.text.append(conv.text() + " [informational]")
    return out


# --- reporting -----------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def csv_columns(net: PowerNetwork) -> list[str]:
    ids = net.bus_ids
    cols = ["t"] + [f"omega_hz_{ids[i]}" for i in range(net.n_buses)]
    for i in net.controlled:
        cols += [f"alpha_{ids[i]}", f"alpha_tl_{ids[i]}", f"alpha_bl_{ids[i]}"]
    cols.append("Vbar")
    cols += [f"safe_{ids[i]}" for i in net.safety]
    return cols


def write_trajectory_csv(res: RunResult, path: Path) -> None:
    """Fixed column order, 17 significant digits."""
    net, traj = res.net, res.traj
    ar = res.scenario.controller.arrays(net)
    vbar = monitor.energy_Vbar(net, compute_equilibrium(net), traj)
    vbar = np.atleast_1d(vbar)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_columns(net))
        for k in range(len(traj)):
            row = [_fmt(traj.t[k])] + [_fmt(traj.omega[k, i] / TWO_PI) for i in range(net.n_buses)]
            for i in net.controlled:
                row += [_fmt(traj.alpha[k, i]), _fmt(traj.alpha_tl[k, i]), _fmt(traj.alpha_bl[k, i])]
            row.append(_fmt(vbar[k]))
            row += ["1" if ar.lo[i] <= traj.omega[k, i] <= ar.hi[i] else "0" for i in net.safety]
            w.writerow(row)


@dataclass
class RunMetrics:
    label: str
    cost: float
    peak_hz: float
    peak_bus: int
    peak_time: float
    min_hz: float
    max_hz: float
    settling_time: float | None
    safe: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def run_metrics(res: RunResult) -> RunMetrics:
    """Cost, peak excursion over the safety buses and settling time.

    Settling time is the last logged time at which some safety-bus frequency
    is farther than ``SETTLE_FRACTION`` of its run peak from zero.
    """
    net, traj, cfg = res.net, res.traj, res.scenario.controller
    buses = list(net.safety) or list(range(net.n_buses))
    w = traj.omega[:, buses] / TWO_PI
    absw = np.abs(w)
    k, j = np.unravel_index(int(np.argmax(absw)), absw.shape)
    peak = float(absw[k, j])
    out = np.flatnonzero(absw.max(axis=1) > SETTLE_FRACTION * peak) if peak > 0 else np.zeros(0, dtype=int)
    settle = None if out.size == 0 else (float(traj.t[out[-1] + 1]) if out[-1] + 1 < len(traj) else None)
    c = np.where(net.controlled_mask(), np.where(net.safety_mask(), cfg.c_safety, cfg.c_other), 0.0)
    safe = monitor.safety_audit(traj, cfg).passed if net.safety else True
    return RunMetrics(
        traj.label, monitor.control_cost(traj, c), peak, int(net.bus_ids[buses[j]]), float(traj.t[k]),
        float(w.min()), float(w.max()), settle, safe,
    )


def compare_runs(a: RunResult, b: RunResult) -> tuple[RunMetrics, RunMetrics]:
    """Side-by-side metrics; both runs must share case, disturbance and horizon."""
    check_comparable(a.net, a.scenario, b.net, b.scenario)
    return run_metrics(a), run_metrics(b)


def check_comparable(net_a, sc_a: ScenarioConfig, net_b, sc_b: ScenarioConfig) -> None:
    problems = []
    same_net = (
        net_a.n_buses == net_b.n_buses and net_a.edges == net_b.edges
        and all(np.array_equal(np.asarray(getattr(net_a, k)), np.asarray(getattr(net_b, k))) for k in ("susceptance", "inertia", "damping", "injection"))
        and net_a.controlled == net_b.controlled and net_a.safety == net_b.safety
    )
    if not same_net:
        problems.append(f"cases differ ({sc_a.case_path} vs {sc_b.case_path})")
    if sc_a.disturbance != sc_b.disturbance:
        problems.append("disturbance profiles differ")
    if sc_a.t_end != sc_b.t_end or sc_a.dt != sc_b.dt:
        problems.append(f"time grids differ (t_end {sc_a.t_end:g}/{sc_b.t_end:g}, dt {sc_a.dt:g}/{sc_b.dt:g})")
    if problems:
        raise ScenarioMismatch("cannot compare: " + "; ".join(problems))


def comparison_text(ma: RunMetrics, mb: RunMetrics) -> str:
    def settle(m):
        return "-" if m.settling_time is None else f"{m.settling_time:.2f}"

    rows = [
        ("control cost", f"{ma.cost:.6g}", f"{mb.cost:.6g}"),
        ("peak |omega| [Hz]", f"{ma.peak_hz:.6f}", f"{mb.peak_hz:.6f}"),
        ("peak bus / time [s]", f"{ma.peak_bus} / {ma.peak_time:.2f}", f"{mb.peak_bus} / {mb.peak_time:.2f}"),
        ("omega range [Hz]", f"[{ma.min_hz:+.4f}, {ma.max_hz:+.4f}]", f"[{mb.min_hz:+.4f}, {mb.max_hz:+.4f}]"),
        ("settling time [s]", settle(ma), settle(mb)),
        ("within band", str(ma.safe), str(mb.safe)),
    ]
    wa = max(len(r[1]) for r in rows + [("", ma.label, "")])
    head = f"{'':22s}  {ma.label:>{wa}s}  {mb.label}"
    return "\n".join([head] + [f"{r[0]:22s}  {r[1]:>{wa}s}  {r[2]}" for r in rows])


# --- argument handling ---------------------------------------------------------


def _resolve_case(arg: str | None) -> Path:
    if arg is None:
        return bundled_case("case4")
    p = Path(arg)
    if p.exists() or p.suffix:
        return p
    return bundled_case(arg)


def _scenario_from_args(args, case: str | None, mode: str | None, shift: float | None, backend: str | None):
    net, sc = load_case(_resolve_case(case), rebalance=True if getattr(args, "rebalance", False) else None)
    over = {}
    if mode is not None:
        over["mode"] = mode
    m = over.get("mode", sc.controller.mode)
    if m == "bilayered+shift":
        over["shift"] = DEFAULT_SHIFT if shift is None and sc.controller.shift == 0.0 else (sc.controller.shift if shift is None else shift)
    elif shift is not None:
        raise SwingSafeError("--shift only applies to --mode bilayered+shift")
    if backend is not None:
        over["backend"] = backend
    if getattr(args, "enable_at", None) is not None:
        over["enable_at"] = args.enable_at
    cfg = sc.controller.with_overrides(**over) if over else sc.controller
    sc = replace(sc, controller=cfg)
    if getattr(args, "t_end", None) is not None:
        sc = replace(sc, t_end=args.t_end)
    if getattr(args, "dt", None) is not None:
        sc = replace(sc, dt=args.dt)
    if getattr(args, "log_every", None) is not None:
        sc = replace(sc, log_every=args.log_every)
    sc.validate()
    return net, sc


def _out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get("SWINGSAFE_OUT_DIR") or "swingsafe-out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _stem(net, sc) -> str:
    mode = sc.controller.mode.replace("+", "-")
    return f"{net.name}_{mode}"


def cmd_run(args) -> int:
    net, sc = _scenario_from_args(args, args.case, args.mode, args.shift, args.backend)
    res = run_scenario(net, sc, engine=args.engine)
    out = _out_dir(args)
    stem = _stem(net, sc)
    write_trajectory_csv(res, out / f"{stem}.csv")
    bundle = run_audits(res, args.audit or ["safety"])
    m = run_metrics(res)
    header = [
        f"case {net.name} ({sc.case_path}), mode {sc.controller.mode}, backend {sc.controller.backend}",
        f"t_end {sc.t_end:g} s, dt {sc.dt:g} s, {len(res.traj)} logged rows, engine {res.traj.meta['engine']}, wall {res.wall:.2f} s",
        f"control cost {m.cost:.6g}, peak |omega| {m.peak_hz:.6f} Hz at bus {m.peak_bus}, t={m.peak_time:.2f} s",
    ]
    if res.controller is not None:
        header.append(f"MPC samples {res.traj.meta.get('mpc_samples', 0)}, failures {res.traj.meta.get('mpc_failures', 0)}")
    text = "\n".join(header + bundle.text)
    (out / f"{stem}_audit.txt").write_text(text + "\n")
    doc = {"case": sc.case_path, "mode": sc.controller.mode, "backend": sc.controller.backend, "metrics": m.as_dict(), "audits": bundle.results, "details": bundle.info}
    (out / f"{stem}_audit.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")
    print(text)
    print(f"wrote {out / (stem + '.csv')}")
    return EXIT_OK if bundle.passed else EXIT_AUDIT


def cmd_compare(args) -> int:
    net_a, sc_a = _scenario_from_args(args, args.case, args.mode, args.shift, args.backend)
    net_b, sc_b = _scenario_from_args(args, args.case_b or args.case, args.mode_b, args.shift_b, args.backend)
    check_comparable(net_a, sc_a, net_b, sc_b)
    a = run_scenario(net_a, sc_a, engine=args.engine)
    b = run_scenario(net_b, sc_b, engine=args.engine)
    ma, mb = compare_runs(a, b)
    text = comparison_text(ma, mb)
    out = _out_dir(args)
    stem = f"compare_{_stem(net_a, sc_a)}_vs_{sc_b.controller.mode.replace('+', '-')}"
    (out / f"{stem}.txt").write_text(text + "\n")
    (out / f"{stem}.json").write_text(json.dumps({"a": ma.as_dict(), "b": mb.as_dict()}, indent=2, sort_keys=True) + "\n")
    print(text)
    return EXIT_OK


def cmd_solve_qp(args) -> int:
    from swingsafe import solvers
    from swingsafe.distributed import build_agents, distributed_execute

    qp, topo = load_qp(args.dump)
    ref = solvers.solve_qp_reference(qp)
    s0 = solvers.zero_state(qp)
    if args.h is not None:
        s0.h = args.h
    cert = None
    if args.backend == "reference":
        Z, eta, mu = ref.Y, ref.eta, ref.mu
        note = "clarabel interior point plus active-set polish"
    elif args.backend == "saddle-central":
        s, tr = solvers.saddle_integrate(qp, s0, args.rounds, stop_tol=args.tol, trace_every=max(1, args.rounds // 20))
        Z, eta, mu = s.Z, s.eta, s.mu
        note = f"centralized saddle dynamics, {tr.rounds} rounds, h={s.h:.6g}"
    else:
        agents, dist = build_agents(qp, topo)
        s, mlog = distributed_execute(qp, agents, args.rounds, s0, dist, stop_tol=args.tol)
        Z, eta, mu = s.Z, s.eta, s.mu
        cert = mlog.certificate()
        note = f"distributed saddle dynamics, {len(agents)} agents, {mlog.rounds} rounds, h={s.h:.6g}"
    res = solvers.kkt_residual(qp, Z, eta, mu)
    gap = float(np.linalg.norm(Z - ref.Y) / max(1.0, np.linalg.norm(ref.Y)))
    print(f"backend {args.backend}: {note}")
    print(f"objective {qp.objective(Z):.17g}")
    print(
        f"KKT residuals: stationarity {res.stationarity:.3e}, inequality {res.primal_ineq:.3e}, "
        f"equality {res.primal_eq:.3e}, complementarity {res.complementarity:.3e}, dual sign {res.dual_feasibility:.3e}"
    )
    print(f"relative gap to reference {gap:.3e} (reference residual {ref.residual.max():.3e})")
    if cert is not None:
        print("locality certificate: " + cert)
    print(f"Y* ({Z.size} entries):")
    for v in Z:
        print(_fmt(v))
    return EXIT_OK


def cmd_check_case(args) -> int:
    net, sc = _scenario_from_args(args, args.case, None, None, None)
    cfg = sc.controller
    eq = check_equilibrium_condition(net)
    lines = [
        f"case {net.name}: {net.n_buses} buses, {net.n_edges} lines, "
        f"{int(np.sum(net.inertia == 0))} zero-inertia, controlled {[net.bus_ids[i] for i in net.controlled]}, "
        f"safety {[net.bus_ids[i] for i in net.safety]}",
        f"equilibrium condition: {'holds' if eq.holds else 'FAILS'} (value {eq.value:.6g} < 1 required)",
    ]
    ok = eq.holds
    if eq.holds:
        lam = compute_equilibrium(net)
        lines.append(f"equilibrium line angles in [{lam.min():+.4f}, {lam.max():+.4f}] rad")
        rep = monitor.energy_report(net, lam, sc.initial_state(net) or equilibrium_state(net))
        lines.append(f"initial state: Vbar {rep.Vbar:.6g}, level-set constant {rep.c:.6g}, rho_hat {rep.rho_hat:.6g}")
        dm = build_prediction_model(net, cfg)
        spec = spectral_stability_check(dm)
        lines.append(f"prediction model (backward Euler, T={cfg.step:g}): spectral radius {spec.radius:.12f}")
        if cfg.has_bottom_layer:
            qp = scenario_qp(net, sc)
            loc = locality_audit(qp, net)
            lines.append(("" if loc.passed else "FAIL ") + loc.summary())
            ok &= loc.passed
    lines.append(f"scenario: t_end {sc.t_end:g} s, dt {sc.dt:g} s, mode {cfg.mode}, disturbance on {[net.bus_ids[i] for i in sc.disturbance.buses]}")
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_CONFIG


def cmd_dump_qp(args) -> int:
    net, sc = _scenario_from_args(args, args.case, None, None, None)
    if args.horizon is not None:
        sc = replace(sc, controller=sc.controller.with_overrides(horizon=args.horizon))
    qp = scenario_qp(net, sc)
    dump_qp(qp, net.edges, args.output)
    print(f"wrote {args.output}: {qp.n_var} variables, {qp.R1.shape[0]} inequalities, {qp.R2.shape[0]} equalities")
    return EXIT_OK


def residual_history(err) -> list[tuple[int, float]]:
    """``(round, max KKT residual)`` pairs recorded before a solver gave up."""
    if getattr(err, "log", None) is not None:
        return list(err.log.residuals)
    if getattr(err, "trace", None) is not None:
        return [(int(r[0]), float(max(r[2:6]))) for r in err.trace.rows]
    return []


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swingsafe", description="Bilayered frequency control simulator and QP tools.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_flags(p, with_mode=True):
        p.add_argument("--case", help="case file path or bundled case name (default: case4)")
        if with_mode:
            p.add_argument("--mode", choices=MODES)
            p.add_argument("--shift", type=float, help=f"constant added to u_MPC in bilayered+shift mode (default {DEFAULT_SHIFT})")
            p.add_argument("--backend", choices=BACKENDS)
            p.add_argument("--enable-at", type=float, help="time at which the controller switches on")
            p.add_argument("--engine", choices=("auto", "python", "compiled"), default="auto")
            p.add_argument("--log-every", type=int, help="log every k-th integration step")
            p.add_argument("--out-dir", help="output directory (default: $SWINGSAFE_OUT_DIR or ./swingsafe-out)")
        p.add_argument("--t-end", type=float)
        p.add_argument("--dt", type=float)
        p.add_argument("--rebalance", action="store_true", help="remove an injection mismatch by a uniform shift")

    p = sub.add_parser("run", help="simulate one scenario, write CSV and audit report")
    scenario_flags(p)
    p.add_argument("--audit", action="append", choices=AUDITS, help="audit to enforce (repeatable; default safety)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run two scenarios on the same case and compare")
    scenario_flags(p)
    p.add_argument("--case-b", help="case for the second scenario (default: same as --case)")
    p.add_argument("--mode-b", choices=MODES, required=True)
    p.add_argument("--shift-b", type=float)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("solve-qp", help="solve a dumped MPC program")
    p.add_argument("dump")
    p.add_argument("--backend", choices=BACKENDS, default="reference")
    p.add_argument("--rounds", type=int, default=400_000)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--h", type=float, help="Euler step of the saddle dynamics")
    p.set_defaults(func=cmd_solve_qp)

    p = sub.add_parser("check-case", help="validate a case file and print its properties")
    scenario_flags(p, with_mode=False)
    p.set_defaults(func=cmd_check_case)

    p = sub.add_parser("dump-qp", help="write the MPC program at t=0 of a scenario")
    scenario_flags(p, with_mode=False)
    p.add_argument("--horizon", type=float, help="prediction horizon in seconds (default from the case)")
    p.add_argument("output")
    p.set_defaults(func=cmd_dump_qp)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ScenarioMismatch as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except (NoConvergence, Divergence) as err:
        print(f"error: {err}", file=sys.stderr)
        rows = residual_history(err)
        if rows:
            print("residual history (round, max KKT residual):", file=sys.stderr)
            for rnd, r in rows[:: max(1, len(rows) // 10)]:
                print(f"  {rnd:8d}  {r:.3e}", file=sys.stderr)
        return EXIT_SOLVER
    except (SwingSafeError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
