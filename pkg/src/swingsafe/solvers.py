"""Centralized reference QP solver and projected saddle-point dynamics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from swingsafe.errors import Divergence, NoConvergence
from swingsafe.prediction import QpInstance

log = logging.getLogger(__name__)

# default saddle gains; the integration step is derived from H
EPS_Z = 5e-4
EPS_ETA = 2.5e-4
EPS_MU = 2.5e-4
STEP_SAFETY = 1.5


def qp_from_arrays(H, f, R1=None, r1=None, R2=None, r2=None, a=0.0) -> QpInstance:
    """Wrap plain arrays as a :class:`QpInstance` owned by a single agent."""
    H = sp.csr_matrix(np.atleast_2d(np.asarray(H, dtype=float)) if not sp.issparse(H) else H)
    nv = H.shape[0]
    f = np.asarray(f, dtype=float).reshape(nv)

    def mat(R):
        if R is None:
            return sp.csr_matrix((0, nv))
        return sp.csr_matrix(R if sp.issparse(R) else np.atleast_2d(np.asarray(R, dtype=float)))

    R1, R2 = mat(R1), mat(R2)
    r1 = np.zeros(0) if r1 is None else np.asarray(r1, dtype=float).reshape(-1)
    r2 = np.zeros(0) if r2 is None else np.asarray(r2, dtype=float).reshape(-1)
    return QpInstance(
        H=H, f=f, a=float(a), R1=R1, r1=r1, R2=R2, r2=r2,
        owner=np.zeros(nv, dtype=int), owner_r1=np.zeros(R1.shape[0], dtype=int),
        owner_r2=np.zeros(R2.shape[0], dtype=int), n_buses=1,
    )


@dataclass(frozen=True)
class KKTResidual:
    stationarity: float
    primal_ineq: float
    primal_eq: float
    complementarity: float
    dual_feasibility: float = 0.0

    def max(self) -> float:
        return max(self.stationarity, self.primal_ineq, self.primal_eq, self.complementarity, self.dual_feasibility)


def kkt_residual(qp: QpInstance, Y, eta, mu) -> KKTResidual:
    Y, eta, mu = (np.asarray(v, dtype=float) for v in (Y, eta, mu))
    if Y.shape != (qp.n_var,) or eta.shape != qp.r1.shape or mu.shape != qp.r2.shape:
        raise ValueError("dimension mismatch between QP and primal/dual point")
    g = qp.H @ Y + qp.f + qp.R1.T @ eta + qp.R2.T @ mu
    s1 = qp.R1 @ Y - qp.r1
    return KKTResidual(
        stationarity=float(np.linalg.norm(g)),
        primal_ineq=float(np.linalg.norm(np.maximum(s1, 0.0))),
        primal_eq=float(np.linalg.norm(qp.R2 @ Y - qp.r2)),
        complementarity=float(abs(eta @ s1)),
        dual_feasibility=float(np.linalg.norm(np.minimum(eta, 0.0))),
    )


# --- reference solver ----------------------------------------------------------


@dataclass
class ReferenceSolution:
    Y: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    residual: KKTResidual
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __iter__(self):
        return iter((self.Y, self.eta, self.mu))


def _clarabel_solve(qp: QpInstance):
    import clarabel

    P = sp.triu(qp.H, format="csc")
    A = sp.vstack([qp.R2, qp.R1], format="csc")
    b = np.concatenate([qp.r2, qp.r1])
    cones = []
    if qp.R2.shape[0]:
        cones.append(clarabel.ZeroConeT(qp.R2.shape[0]))
    if qp.R1.shape[0]:
        cones.append(clarabel.NonnegativeConeT(qp.R1.shape[0]))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = 1e-12
    settings.tol_feas = 1e-12
    settings.tol_ktratio = 1e-10
    settings.max_iter = 200
    sol = clarabel.DefaultSolver(P, qp.f.copy(), A, b, cones, settings).solve()
    status = str(sol.status)
    if "Infeasible" in status:
        raise NoConvergence(f"QP infeasible ({status})")
    z = np.asarray(sol.z, dtype=float)
    me = qp.R2.shape[0]
    return np.asarray(sol.x, dtype=float), np.maximum(z[me:], 0.0), z[:me], status


def _opposite_pairs(R: sp.csr_matrix, r: np.ndarray, rows) -> dict[int, int]:
    """Map a row to an earlier active row with exactly opposite data (``a'y <= b``, ``-a'y <= -b``)."""
    seen, partner = {}, {}
    for q in rows:
        sl = slice(R.indptr[q], R.indptr[q + 1])
        key = (tuple(R.indices[sl]), tuple(R.data[sl]), r[q])
        neg = (tuple(R.indices[sl]), tuple(-R.data[sl]), -r[q])
        if neg in seen:
            partner[q] = seen[neg]
        else:
            seen.setdefault(key, q)
    return partner


def _solve_active(qp: QpInstance, active: np.ndarray):
    """Equality-constrained KKT solve treating ``active`` inequality rows as equalities."""
    nv = qp.n_var
    rows = np.flatnonzero(active)
    R1 = qp.R1.tocsr()
    partner = _opposite_pairs(R1, qp.r1, rows)
    keep = np.array([q for q in rows if q not in partner], dtype=int)
    RA = R1[keep]
    K = sp.bmat(
        [[qp.H, RA.T, qp.R2.T], [RA, None, None], [qp.R2, None, None]], format="csc"
    )
    rhs = np.concatenate([-qp.f, qp.r1[keep], qp.r2])
    try:
        sol = spla.splu(K).solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise RuntimeError("non-finite KKT solution")
    except RuntimeError:
        sol = np.linalg.lstsq(K.toarray(), rhs, rcond=None)[0]
    Y = sol[:nv]
    eta = np.zeros(qp.R1.shape[0])
    lam = sol[nv : nv + keep.size]
    eta[keep] = lam
    for q, p in partner.items():
        v = eta[p]
        if v < 0:
            eta[p], eta[q] = 0.0, -v
    mu = sol[nv + keep.size :]
    return Y, eta, mu


def solve_qp_reference(qp: QpInstance, tol: float = 1e-9, max_iter: int = 50) -> ReferenceSolution:
    """Interior-point solve followed by an active-set polish to machine-precision KKT residuals.

    Raises :class:`NoConvergence` when the residuals cannot be pushed below ``tol``.
    """
    Y, eta, mu, status = _clarabel_solve(qp)
    best = ReferenceSolution(Y, eta, mu, kkt_residual(qp, Y, eta, mu))
    scale = 1.0 + np.abs(qp.r1).max(initial=0.0)
    active = (eta > 1e-7 * scale) | (qp.R1 @ Y - qp.r1 > -1e-9 * scale)
    for _ in range(max_iter):
        if best.residual.max() <= tol * 1e-3:
            break
        Yc, etac, muc = _solve_active(qp, active)
        res = kkt_residual(qp, Yc, etac, muc)
        if res.max() < best.residual.max():
            best = ReferenceSolution(Yc, etac, muc, res, active.copy())
        # primal-dual active-set update
        new_active = etac + (qp.R1 @ Yc - qp.r1) > 0
        if np.array_equal(new_active, active):
            break
        active = new_active
    if best.residual.max() > tol:
        raise NoConvergence(
            f"reference solver stalled ({status}); KKT residuals {best.residual}"
        )
    # interior-point multipliers of slack rows are tiny but positive; zero them
    slack = qp.R1 @ best.Y - qp.r1 < -1e-9 * scale
    if np.any(slack & (best.eta != 0)):
        eta = np.where(slack, 0.0, best.eta)
        res = kkt_residual(qp, best.Y, eta, best.mu)
        if res.max() <= max(tol, best.residual.max()):
            best = ReferenceSolution(best.Y, eta, best.mu, res, best.active)
    best.active = best.eta > 0
    return best


# --- saddle-point dynamics -----------------------------------------------------


@dataclass
class SaddleState:
    """Primal/dual point and the gains of the projected saddle flow."""

    Z: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    eps_z: float = EPS_Z
    eps_eta: float = EPS_ETA
    eps_mu: float = EPS_MU
    h: float | None = None

    def copy(self) -> "SaddleState":
        return replace(self, Z=self.Z.copy(), eta=self.eta.copy(), mu=self.mu.copy())

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.Z, self.eta, self.mu])


def zero_state(qp: QpInstance, **gains) -> SaddleState:
    return SaddleState(np.zeros(qp.n_var), np.zeros(qp.R1.shape[0]), np.zeros(qp.R2.shape[0]), **gains)


def projected(a, b):
    """Componentwise ``[a]^+_b``: ``a`` where ``b > 0``, else ``max(a, 0)``."""
    return np.where(b > 0, a, np.maximum(a, 0.0))


def saddle_rhs(qp: QpInstance, s: SaddleState):
    """Right-hand side ``(dZ, deta, dmu)`` of the projected saddle flow."""
    dZ = -(qp.H @ s.Z + qp.f + qp.R1.T @ s.eta + qp.R2.T @ s.mu) / s.eps_z
    deta = projected(qp.R1 @ s.Z - qp.r1, s.eta) / s.eps_eta
    dmu = (qp.R2 @ s.Z - qp.r2) / s.eps_mu
    return dZ, deta, dmu


def default_step(qp: QpInstance, eps_z: float = EPS_Z) -> float:
    """Largest comfortable explicit-Euler step for the primal gain ``eps_z``."""
    H = qp.H
    if H.shape[0] <= 200:
        lmax = float(np.linalg.eigvalsh(H.toarray())[-1])
    else:
        lmax = float(spla.eigsh(H.tocsc(), k=1, which="LA", return_eigenvectors=False, tol=1e-6)[0])
    return STEP_SAFETY * eps_z / max(lmax, 1e-12)


class SaddleOperator:
    """Saddle flow of one QP on the stacked vector ``w = (Z, eta, mu)``.

    ``K @ w + c`` yields the primal gradient of the Lagrangian in the ``Z``
    block and the constraint residuals in the dual blocks. Every step is a
    row-wise sparse product followed by elementwise operations, so
    evaluating a subset of rows on gathered inputs (one agent) reproduces
    the centralized step bit for bit.
    """

    def __init__(self, qp: QpInstance):
        nv, ni, ne = qp.n_var, qp.R1.shape[0], qp.R2.shape[0]
        K = sp.bmat(
            [[qp.H, qp.R1.T, qp.R2.T], [qp.R1, None, None], [qp.R2, None, None]],
            format="csr",
        )
        if K.shape != (nv + ni + ne, nv + ni + ne):  # bmat drops empty blocks
            K = sp.csr_matrix(K, shape=(nv + ni + ne, nv + ni + ne))
        K.sum_duplicates()
        K.sort_indices()
        self.K = K
        self.c = np.concatenate([qp.f, -qp.r1, -qp.r2])
        self.n_var, self.n_ineq, self.n_eq = nv, ni, ne

    @property
    def eta_slice(self) -> slice:
        return slice(self.n_var, self.n_var + self.n_ineq)

    def coefficients(self, s: "SaddleState") -> np.ndarray:
        h = s.h
        return np.concatenate([
            np.full(self.n_var, -h / s.eps_z),
            np.full(self.n_ineq, h / s.eps_eta),
            np.full(self.n_eq, h / s.eps_mu),
        ])


def euler_update(K, c, coef, w_in, w_own, dual_mask):
    """One synchronous explicit-Euler saddle step; returns the new owned values.

    ``w_in`` holds the values the rows read (the whole stacked vector
    centrally, an agent's inbox locally) and ``w_own`` the current values of
    the rows' own entries. ``dual_mask`` flags inequality multipliers, which
    get the projection ``[.]^+_eta`` and a final clamp at zero.
    """
    g = K @ w_in
    g += c
    np.maximum(g, 0.0, out=g, where=dual_mask & (w_own <= 0))
    out = w_own + coef * g
    np.maximum(out, 0.0, out=out, where=dual_mask)
    return out


@dataclass
class ConvergenceTrace:
    rows: list = field(default_factory=list)
    rounds: int = 0
    converged: bool = False

    def append(self, rnd, dz_norm, res: KKTResidual, dist):
        self.rows.append(
            (rnd, dz_norm, res.stationarity, res.primal_ineq, res.primal_eq, res.complementarity, dist)
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "dz_norm", "stationarity", "primal_ineq", "primal_eq", "complementarity", "dist_to_oracle"])
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


def _split(w, nv, ni):
    return w[:nv], w[nv : nv + ni], w[nv + ni :]


def saddle_integrate(
    qp: QpInstance,
    s0: SaddleState,
    rounds: int,
    stop_tol: float | None = 1e-6,
    oracle: np.ndarray | None = None,
    check_every: int = 50,
    trace_every: int = 0,
    divergence_factor: float = 1e6,
):
    """Explicit-Euler integration of the projected saddle flow.

    Stops once every KKT residual component is ``<= stop_tol`` (checked every
    ``check_every`` rounds) or after ``rounds`` rounds; ``stop_tol=None``
    runs the full budget. Returns ``(state, trace)``. If the budget runs out
    while ``stop_tol`` is set, raises :class:`NoConvergence` with the
    lowest-residual iterate in its ``best`` attribute.
    """
    s = s0.copy()
    if s.h is None:
        s.h = default_step(qp, s.eps_z)
    op = SaddleOperator(qp)
    coef = op.coefficients(s)
    dual_mask = np.zeros(op.K.shape[0], dtype=bool)
    dual_mask[op.eta_slice] = True
    nv, ni = op.n_var, op.n_ineq
    w = s.stacked()
    trace = ConvergenceTrace()
    limit = divergence_factor * max(1.0, np.linalg.norm(w)) * (1.0 + np.linalg.norm(op.c))
    best, best_res = None, np.inf
    for rnd in range(1, rounds + 1):
        w_prev = w
        w = euler_update(op.K, op.c, coef, w, w, dual_mask)
        tracing = bool(trace_every) and rnd % trace_every == 0
        check = stop_tol is not None and rnd % check_every == 0
        if check or tracing or rnd == rounds:
            Z, eta, mu = _split(w, nv, ni)
            res = kkt_residual(qp, Z, eta, mu)
            if not np.isfinite(res.max()) or np.linalg.norm(w) > limit:
                raise Divergence(f"saddle iterates diverged at round {rnd}; reduce the step h={s.h:g}")
            if res.max() < best_res:
                best_res, best = res.max(), w.copy()
            if tracing:
                dz = float(np.linalg.norm(w[:nv] - w_prev[:nv])) / s.h
                dist = float(np.linalg.norm(Z - oracle)) if oracle is not None else float("nan")
                trace.append(rnd, dz, res, dist)
            if check and res.max() <= stop_tol:
                trace.converged = True
                trace.rounds = rnd
                return replace(s, Z=Z.copy(), eta=eta.copy(), mu=mu.copy()), trace
    trace.rounds = rounds
    Z, eta, mu = _split(w, nv, ni)
    out = replace(s, Z=Z.copy(), eta=eta.copy(), mu=mu.copy())
    if stop_tol is not None:
        err = NoConvergence(f"saddle dynamics: residual {best_res:.3e} > {stop_tol:g} after {rounds} rounds")
        Zb, eb, mb = _split(best, nv, ni)
        err.best = replace(s, Z=Zb.copy(), eta=eb.copy(), mu=mb.copy())
        err.trace = trace
        raise err
    return out, trace
