"""Linear prediction model, its discretization and the MPC quadratic program.

State layout used throughout: ``x = (lam[0:m], omega[0:n], alpha_bl[0:n])``.
Decision vector layout: ``Y = (x(1), ..., x(N), u[0:n], s(1), ..., s(N))``
with ``s(k)`` holding one slack per safety bus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from swingsafe.errors import LocalityViolation, SingularF, SingularG
from swingsafe.netmodel import PowerNetwork, incidence_matrix

SPECTRAL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Descriptor system ``G x' = A x + B1 p + B2 u``."""

    G: sp.csr_matrix
    A: sp.csr_matrix
    B1: sp.csr_matrix
    B2: sp.csr_matrix
    n_edges: int
    n_buses: int

    @property
    def nx(self) -> int:
        return self.n_edges + 2 * self.n_buses


@dataclass(frozen=True, eq=False)
class DiscreteModel:
    """``F x(k+1) = A x(k) + B1 p(k) + B2 u`` with step ``T``."""

    F: sp.csr_matrix
    A: sp.csr_matrix
    B1: sp.csr_matrix
    B2: sp.csr_matrix
    T: float
    method: str
    n_edges: int
    n_buses: int

    @property
    def nx(self) -> int:
        return self.n_edges + 2 * self.n_buses


def horizon_steps(horizon: float, T: float) -> int:
    # guard against 10/0.2 = 50.000000000000004
    return int(math.ceil(horizon / T - 1e-9))


def state_slices(m: int, n: int):
    return slice(0, m), slice(m, m + n), slice(m + n, m + 2 * n)


def linearize(net: PowerNetwork, tau) -> LinearModel:
    """Small-angle linearization of swing dynamics plus the low-pass filter.

    Controlled buses get ``M_i a' = -a/tau_i - w_i + u_i``. Uncontrolled
    buses get the algebraic row ``0 = -a_i + u_i``; together with the
    constraint ``u_i = 0`` this pins ``a_i`` to zero while keeping ``B2``
    full column rank.
    """
    m, n = net.n_edges, net.n_buses
    nx = m + 2 * n
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (n,))
    ctrl = net.controlled_mask()
    if np.any(tau[ctrl] <= 0):
        raise ValueError("filter time constants must be positive")
    D = incidence_matrix(net, sparse=True)
    Yb = sp.diags(net.susceptance)
    lam, om, al = state_slices(m, n)
    idx = np.arange(n)

    g = np.concatenate([np.ones(m), net.inertia, np.where(ctrl, net.inertia, 0.0)])
    G = sp.diags(g).tocsr()

    A = sp.lil_matrix((nx, nx))
    A[lam, om] = D
    A[om, lam] = -(D.T @ Yb)
    A[m + idx, m + idx] = -net.damping
    A[m + idx[ctrl], m + n + idx[ctrl]] = 1.0
    A[m + n + idx[ctrl], m + idx[ctrl]] = -1.0
    A[m + n + idx, m + n + idx] = np.where(ctrl, -1.0 / np.where(ctrl, tau, 1.0), -1.0)

    B1 = sp.lil_matrix((nx, n))
    B1[m + idx, idx] = 1.0
    B2 = sp.lil_matrix((nx, n))
    B2[m + n + idx, idx] = 1.0
    return LinearModel(G, A.tocsr(), B1.tocsr(), B2.tocsr(), m, n)


def _check_invertible(F: sp.spmatrix, exc, message):
    try:
        lu = spla.splu(sp.csc_matrix(F))
    except RuntimeError as err:
        raise exc(message) from err
    diag = np.abs(lu.U.diagonal())
    if diag.min() <= 1e-13 * max(1.0, diag.max()):
        raise exc(message)


def discretize_backward_euler(lm: LinearModel, T: float) -> DiscreteModel:
    """``F = G - T A``, ``A_d = G``, ``B_s = T B_s``.

    The right-hand state matrix is ``G`` (the identity whenever ``G`` is);
    that is the backward-Euler step of the descriptor system.
    """
    if T <= 0:
        raise ValueError("step T must be positive")
    F = (lm.G - T * lm.A).tocsr()
    _check_invertible(F, SingularF, f"G - T*A is singular for T={T}; try a smaller step")
    return DiscreteModel(F, lm.G.copy(), (T * lm.B1).tocsr(), (T * lm.B2).tocsr(), T, "backward-euler", lm.n_edges, lm.n_buses)


def discretize_forward_euler(lm: LinearModel, T: float) -> DiscreteModel:
    """``F = G``, ``A_d = G + T A``, ``B_s = T B_s``; needs invertible ``G``."""
    if T <= 0:
        raise ValueError("step T must be positive")
    if np.any(lm.G.diagonal() == 0):
        raise SingularG("forward Euler needs every descriptor entry nonzero (zero inertia or uncontrolled filter rows present)")
    return DiscreteModel(lm.G.copy(), (lm.G + T * lm.A).tocsr(), (T * lm.B1).tocsr(), (T * lm.B2).tocsr(), T, "forward-euler", lm.n_edges, lm.n_buses)


@dataclass(frozen=True)
class SpectralReport:
    radius: float
    stable: bool


def spectral_stability_check(dm: DiscreteModel) -> SpectralReport:
    F = dm.F.toarray()
    try:
        M = np.linalg.solve(F, dm.A.toarray())
    except np.linalg.LinAlgError as exc:
        raise SingularF("F is singular") from exc
    radius = float(np.max(np.abs(np.linalg.eigvals(M))))
    return SpectralReport(radius, radius <= 1.0 + SPECTRAL_TOL)


# --- quadratic program ---------------------------------------------------------


@dataclass(eq=False)
class QpInstance:
    """``min 1/2 Y'HY + f'Y + a  s.t.  R1 Y <= r1,  R2 Y = r2``.

    ``owner[v]`` is the agent owning variable ``v``; agents ``0..n-1`` are
    buses and ``n..n+m-1`` are lines. ``owner_r1``/``owner_r2`` assign each
    constraint row (and therefore its multiplier) to an agent.
    """

    H: sp.csr_matrix
    f: np.ndarray
    a: float
    R1: sp.csr_matrix
    r1: np.ndarray
    R2: sp.csr_matrix
    r2: np.ndarray
    owner: np.ndarray
    owner_r1: np.ndarray
    owner_r2: np.ndarray
    sign_pattern: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_buses: int = 0
    n_edges: int = 0
    N: int = 0
    safety: tuple[int, ...] = ()
    controlled: tuple[int, ...] = ()

    @property
    def n_var(self) -> int:
        return self.H.shape[0]

    @property
    def n_agents(self) -> int:
        return self.n_buses + self.n_edges

    def objective(self, Y) -> float:
        Y = np.asarray(Y)
        return float(0.5 * Y @ (self.H @ Y) + self.f @ Y + self.a)

    @property
    def nx(self) -> int:
        return self.n_edges + 2 * self.n_buses

    def u_slice(self) -> slice:
        start = self.N * self.nx
        return slice(start, start + self.n_buses)

    def control(self, Y) -> np.ndarray:
        return np.asarray(Y)[self.u_slice()]

    def states(self, Y) -> np.ndarray:
        """Predicted states as an ``N x nx`` array."""
        return np.asarray(Y)[: self.N * self.nx].reshape(self.N, self.nx)


def _var_index(N, nx, n, n_s):
    x0 = 0
    u0 = N * nx
    s0 = u0 + n
    return (lambda k, j: x0 + (k - 1) * nx + j), (lambda i: u0 + i), (lambda k, q: s0 + (k - 1) * n_s + q), s0 + N * n_s


def assemble_mpc_qp(
    dm: DiscreteModel,
    net: PowerNetwork,
    c,
    d,
    eps,
    x_sample: np.ndarray,
    forecast: np.ndarray,
    omega_bounds: tuple,
    augmented: bool = True,
) -> QpInstance:
    """Build the MPC program for one sampling instant.

    Parameters
    ----------
    c, d, eps : array_like
        Per-bus control weights, per-bus slack weights (used on safety
        buses) and per-bus filter gains (used on controlled buses).
    x_sample : ndarray
        Sampled state ``(lam, omega, alpha_bl)`` in rad and rad/s.
    forecast : ndarray
        ``n x N`` forecast injections, column ``k-1`` for prediction step ``k``.
    omega_bounds : (lower, upper)
        Per-bus safe band in rad/s (only safety entries are read).
    augmented : bool
        Add the dynamics-residual and initial-state penalties that make the
        objective strongly convex. With ``False`` only the control and slack
        costs remain (same minimizer, PSD Hessian).
    """
    m, n, nx = dm.n_edges, dm.n_buses, dm.nx
    if m != net.n_edges or n != net.n_buses:
        raise ValueError("discrete model does not match the network")
    forecast = np.asarray(forecast, dtype=float)
    if forecast.ndim != 2 or forecast.shape[0] != n:
        raise ValueError(f"forecast must be n x N, got {forecast.shape}")
    N = forecast.shape[1]
    if N < 2:
        raise ValueError("prediction horizon needs at least two steps")
    x_sample = np.asarray(x_sample, dtype=float)
    if x_sample.shape != (nx,):
        raise ValueError(f"sampled state has shape {x_sample.shape}, expected ({nx},)")
    c = np.broadcast_to(np.asarray(c, dtype=float), (n,))
    d = np.broadcast_to(np.asarray(d, dtype=float), (n,))
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (n,))
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (n,)) for b in omega_bounds)

    safety, controlled = net.safety, net.controlled
    ns = len(safety)
    X, U, S, n_var = _var_index(N, nx, n, ns)
    u0 = N * nx

    # dynamics residual  F x(k+1) - A x(k) - B2 u - B1 p(k),  k = 1..N-1
    F, Ad, B2 = dm.F.tocoo(), dm.A.tocoo(), dm.B2.tocoo()
    rows, cols, vals = [], [], []
    rhs = np.empty((N - 1) * nx)
    for k in range(1, N):
        base = (k - 1) * nx
        rows += [base + F.row, base + Ad.row, base + B2.row]
        cols += [X(k + 1, F.col), X(k, Ad.col), u0 + B2.col]
        vals += [F.data, -Ad.data, -B2.data]
        rhs[base : base + nx] = dm.B1 @ forecast[:, k - 1]
    Rdyn = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=((N - 1) * nx, n_var)
    )
    Rdyn.sum_duplicates()
    Sinit = sp.csr_matrix((np.ones(nx), (np.arange(nx), X(1, np.arange(nx)))), shape=(nx, n_var))

    # stage weights: c on every filter state (uncontrolled ones are pinned to 0), d on slacks
    w = np.zeros(n_var)
    for k in range(1, N + 1):
        w[X(k, m + n + np.arange(n))] = np.where(net.controlled_mask(), c, 1.0 if augmented else 0.0)
        for q, i in enumerate(safety):
            w[S(k, q)] = d[i]
    H = 2.0 * sp.diags(w)
    f = np.zeros(n_var)
    a = 0.0
    if augmented:
        H = H + 2.0 * (Rdyn.T @ Rdyn) + 2.0 * (Sinit.T @ Sinit)
        f = -2.0 * (Rdyn.T @ rhs) - 2.0 * (Sinit.T @ x_sample)
        a = float(rhs @ rhs + x_sample @ x_sample)
    H = sp.csr_matrix(H)
    H.sum_duplicates()
    H.eliminate_zeros()

    # equalities: dynamics, initial state, u_i = 0 off the controlled set
    unc = [i for i in range(n) if i not in set(controlled)]
    Uzero = sp.csr_matrix((np.ones(len(unc)), (np.arange(len(unc)), [U(i) for i in unc])), shape=(len(unc), n_var))
    R2 = sp.vstack([Rdyn, Sinit, Uzero]).tocsr()
    r2 = np.concatenate([rhs, x_sample, np.zeros(len(unc))])

    # inequalities: soft frequency band, then sign-resolved |u_i| <= eps_i |alpha_i(t_w)|
    alpha_now = x_sample[m + n :]
    sign = np.where(alpha_now >= 0, 1.0, -1.0)
    r_rows, r_cols, r_vals, r1, own1 = [], [], [], [], []
    row = 0
    for k in range(1, N + 1):
        for q, i in enumerate(safety):
            r_rows += [row, row, row + 1, row + 1]
            r_cols += [X(k, m + i), S(k, q), X(k, m + i), S(k, q)]
            r_vals += [1.0, -1.0, -1.0, -1.0]
            r1 += [hi[i], -lo[i]]
            own1 += [i, i]
            row += 2
    for i in controlled:
        bound = eps[i] * sign[i] * alpha_now[i]
        r_rows += [row, row + 1]
        r_cols += [U(i), U(i)]
        r_vals += [1.0, -1.0]
        r1 += [bound, bound]
        own1 += [i, i]
        row += 2
    R1 = sp.csr_matrix((r_vals, (r_rows, r_cols)), shape=(row, n_var))

    owner = np.empty(n_var, dtype=int)
    state_owner = np.concatenate([n + np.arange(m), np.arange(n), np.arange(n)])
    for k in range(1, N + 1):
        owner[X(k, 0) : X(k, 0) + nx] = state_owner
    owner[u0 : u0 + n] = np.arange(n)
    for k in range(1, N + 1):
        for q, i in enumerate(safety):
            owner[S(k, q)] = i
    owner_r2 = np.concatenate([np.tile(state_owner, N - 1), state_owner, np.array(unc, dtype=int)])

    qp = QpInstance(
        H=H, f=f, a=a, R1=R1, r1=np.array(r1, dtype=float), R2=R2, r2=r2,
        owner=owner, owner_r1=np.array(own1, dtype=int), owner_r2=owner_r2,
        sign_pattern=sign[list(controlled)], n_buses=n, n_edges=m, N=N,
        safety=tuple(safety), controlled=tuple(controlled),
    )
    _check_dimensions(qp, m, n, N, ns, len(controlled))
    return qp


def _check_dimensions(qp: QpInstance, m, n, N, ns, nu):
    expected = {
        "variables": ((m + 2 * n + ns) * N + n, qp.n_var),
        "inequalities": (2 * ns * N + 2 * nu, qp.R1.shape[0]),
        "equalities": ((m + 2 * n) * N + n - nu, qp.R2.shape[0]),
    }
    bad = {k: v for k, v in expected.items() if v[0] != v[1]}
    if bad:
        raise ValueError(f"QP dimension mismatch: {bad}")


# --- locality ------------------------------------------------------------------


def incidence_distances(net: PowerNetwork) -> np.ndarray:
    """Hop distances in the bipartite bus-line incidence graph (agents = buses + lines)."""
    n, m = net.n_buses, net.n_edges
    adj = [[] for _ in range(n + m)]
    for k, (a, b) in enumerate(net.edges):
        for i in (a, b):
            adj[i].append(n + k)
            adj[n + k].append(i)
    dist = np.full((n + m, n + m), np.iinfo(np.int64).max // 2, dtype=np.int64)
    for s in range(n + m):
        dist[s, s] = 0
        frontier = [s]
        while frontier:
            nxt = []
            for v in frontier:
                for w in adj[v]:
                    if dist[s, w] > dist[s, v] + 1:
                        dist[s, w] = dist[s, v] + 1
                        nxt.append(w)
            frontier = nxt
    return dist


@dataclass
class LocalityReport:
    rows_checked: int
    hessian_entries_checked: int
    max_row_radius: int
    max_hessian_distance: int
    passed: bool = True

    def summary(self) -> str:
        return (
            f"locality: {self.rows_checked} constraint rows local (star radius <= {self.max_row_radius}), "
            f"{self.hessian_entries_checked} Hessian couplings within {self.max_hessian_distance} hops"
        )


def _star_radius(owners, dist) -> int:
    owners = np.unique(owners)
    if owners.size <= 1:
        return 0
    return int(dist[:, owners].max(axis=1).min())


def locality_audit(qp: QpInstance, net: PowerNetwork) -> LocalityReport:
    """Check that each constraint touches one agent's star and ``H`` couples within two hops."""
    dist = incidence_distances(net)
    max_radius = 0
    n_rows = 0
    for name, R in (("R1", qp.R1), ("R2", qp.R2)):
        R = R.tocsr()
        for r in range(R.shape[0]):
            cols = R.indices[R.indptr[r] : R.indptr[r + 1]]
            radius = _star_radius(qp.owner[cols], dist)
            if radius > 1:
                raise LocalityViolation(f"{name} row {r} couples agents {sorted(set(qp.owner[cols].tolist()))}", row=(name, r))
            max_radius = max(max_radius, radius)
            n_rows += 1
    H = qp.H.tocoo()
    dh = dist[qp.owner[H.row], qp.owner[H.col]] if H.nnz else np.zeros(0, dtype=int)
    if dh.size and dh.max() > 2:
        bad = int(np.argmax(dh))
        raise LocalityViolation(
            f"H couples variables {H.row[bad]} and {H.col[bad]} owned by agents "
            f"{qp.owner[H.row[bad]]} and {qp.owner[H.col[bad]]} ({dh[bad]} hops apart)",
            row=("H", int(H.row[bad])),
        )
    return LocalityReport(n_rows, int(H.nnz), max_radius, int(dh.max()) if dh.size else 0)
