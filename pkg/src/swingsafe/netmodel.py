"""Power network graph, physical parameters and equilibrium analysis.

Buses are indexed ``0..n-1`` internally. Case files may use arbitrary
integer bus ids; :attr:`PowerNetwork.bus_ids` keeps the mapping for
reporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from swingsafe.errors import DisconnectedGraph, NoConvergence, SchemaError, UnbalancedInjection

TWO_PI = 2.0 * math.pi
BALANCE_TOL = 1e-9


def hz_to_rad(x):
    return np.asarray(x, dtype=float) * TWO_PI if np.ndim(x) else float(x) * TWO_PI


def rad_to_hz(x):
    return np.asarray(x, dtype=float) / TWO_PI if np.ndim(x) else float(x) / TWO_PI


def _connected(n: int, edges: Sequence[tuple[int, int]]) -> bool:
    if n == 0:
        return False
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in adj[i]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == n


@dataclass(frozen=True, eq=False)
class PowerNetwork:
    """Swing-equation network: topology, line/bus parameters, control sets.

    ``edges[k] = (pos, neg)`` fixes the orientation of line ``k``.
    ``controlled`` is the set of buses with an actuator and ``safety`` the
    subset whose frequency must stay inside its safe band.
    """

    n_buses: int
    edges: tuple[tuple[int, int], ...]
    susceptance: np.ndarray
    inertia: np.ndarray
    damping: np.ndarray
    injection: np.ndarray
    controlled: tuple[int, ...] = ()
    safety: tuple[int, ...] = ()
    bus_ids: tuple[int, ...] = field(default=())
    name: str = "network"

    def __post_init__(self):
        n = int(self.n_buses)
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        object.__setattr__(self, "n_buses", n)
        object.__setattr__(self, "edges", edges)
        for attr in ("susceptance", "inertia", "damping", "injection"):
            arr = np.array(getattr(self, attr), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        object.__setattr__(self, "controlled", tuple(sorted(set(int(i) for i in self.controlled))))
        object.__setattr__(self, "safety", tuple(sorted(set(int(i) for i in self.safety))))
        if not self.bus_ids:
            object.__setattr__(self, "bus_ids", tuple(range(1, n + 1)))
        self.validate()

    def validate(self):
        n, m = self.n_buses, len(self.edges)
        if n < 2:
            raise SchemaError("a network needs at least two buses")
        if self.susceptance.shape != (m,):
            raise SchemaError(f"susceptance has shape {self.susceptance.shape}, expected ({m},)")
        for attr in ("inertia", "damping", "injection"):
            if getattr(self, attr).shape != (n,):
                raise SchemaError(f"{attr} has shape {getattr(self, attr).shape}, expected ({n},)")
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise SchemaError(f"invalid edge ({a}, {b})")
        if len(set(frozenset(e) for e in self.edges)) != m:
            raise SchemaError("parallel edges are not supported; merge their susceptances")
        if np.any(self.susceptance <= 0):
            raise SchemaError("all susceptances must be positive")
        if np.any(self.damping <= 0):
            raise SchemaError("all damping coefficients must be positive")
        if np.any(self.inertia < 0):
            raise SchemaError("inertia must be nonnegative")
        if not np.any(self.inertia > 0):
            raise SchemaError("at least one bus needs positive inertia")
        if not _connected(n, self.edges):
            raise DisconnectedGraph("network graph is not connected")
        if abs(self.injection.sum()) > BALANCE_TOL * max(1.0, np.abs(self.injection).sum()):
            raise UnbalancedInjection(f"sum of injections is {self.injection.sum():.3e}, expected 0")
        if not set(self.controlled) <= set(range(n)):
            raise SchemaError("controlled set references unknown buses")
        if not set(self.safety) <= set(self.controlled):
            raise SchemaError("safety set must be a subset of the controlled set")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def inertial(self) -> np.ndarray:
        """Boolean mask of buses with positive inertia."""
        return self.inertia > 0

    def controlled_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_buses, dtype=bool)
        mask[list(self.controlled)] = True
        return mask

    def safety_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_buses, dtype=bool)
        mask[list(self.safety)] = True
        return mask

    def incident_edges(self, i: int) -> list[int]:
        return [k for k, (a, b) in enumerate(self.edges) if i in (a, b)]

    def with_injection(self, p) -> "PowerNetwork":
        return PowerNetwork(
            self.n_buses, self.edges, self.susceptance, self.inertia, self.damping, p,
            self.controlled, self.safety, self.bus_ids, self.name,
        )


def incidence_matrix(net: PowerNetwork, sparse: bool = False):
    """Signed ``m x n`` node-edge incidence matrix (+1 at the positive end)."""
    m, n = net.n_edges, net.n_buses
    rows = np.repeat(np.arange(m), 2)
    cols = np.array([i for e in net.edges for i in e], dtype=int)
    vals = np.tile([1.0, -1.0], m)
    D = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    return D if sparse else D.toarray()


def weighted_laplacian(net: PowerNetwork) -> np.ndarray:
    D = incidence_matrix(net)
    return D.T @ (net.susceptance[:, None] * D)


def laplacian_pinv(L: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix by eigendecomposition."""
    w, V = np.linalg.eigh(L)
    cutoff = rel_tol * max(abs(w).max(), 0.0)
    inv = np.zeros_like(w)
    keep = np.abs(w) > cutoff
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T


@dataclass(frozen=True)
class EquilibriumCheck:
    holds: bool
    value: float


def check_equilibrium_condition(net: PowerNetwork, p=None) -> EquilibriumCheck:
    """Evaluate ``max_{(i,j) in E} |z_i - z_j|`` with ``z = L^+ p``; holds iff < 1."""
    p = net.injection if p is None else np.asarray(p, dtype=float)
    z = laplacian_pinv(weighted_laplacian(net)) @ p
    D = incidence_matrix(net)
    value = float(np.max(np.abs(D @ z))) if net.n_edges else 0.0
    return EquilibriumCheck(holds=value < 1.0, value=value)


def compute_equilibrium(net: PowerNetwork, p=None, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Angle differences ``lam`` solving ``D^T Y_b sin(lam) = p`` inside the box ``|lam| < pi/2``.

    Damped Newton on bus angles with the last bus grounded, so the result
    lies in ``range(D)`` by construction.
    """
    p = net.injection if p is None else np.asarray(p, dtype=float)
    D = incidence_matrix(net)
    b = net.susceptance
    n = net.n_buses
    Dr = D[:, : n - 1]
    theta = np.zeros(n - 1)

    def residual(th):
        return Dr.T @ (b * np.sin(Dr @ th)) - p[: n - 1]

    r = residual(theta)
    for _ in range(max_iter):
        nr = np.linalg.norm(r)
        if nr <= tol * max(1.0, np.abs(p).max()):
            break
        lam = Dr @ theta
        J = Dr.T @ ((b * np.cos(lam))[:, None] * Dr)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence("singular Jacobian in equilibrium solve") from exc
        t = 1.0
        while t > 1e-8:
            cand = theta + t * step
            rc = residual(cand)
            if np.linalg.norm(rc) < (1.0 - 1e-4 * t) * nr:
                theta, r = cand, rc
                break
            t *= 0.5
        else:
            raise NoConvergence("line search failed in equilibrium solve")
    else:
        raise NoConvergence(f"equilibrium solve did not converge in {max_iter} iterations")
    lam = Dr @ theta
    full = D.T @ (b * np.sin(lam)) - p
    if np.linalg.norm(full) > 1e-8 * max(1.0, np.abs(p).max()):
        raise NoConvergence("equilibrium residual too large (injections unbalanced?)")
    if np.any(np.abs(lam) > math.pi / 2):
        raise NoConvergence("equilibrium outside the angle box |lam| <= pi/2")
    return lam


# --- disturbance profile -------------------------------------------------------


@dataclass(frozen=True)
class Piece:
    """One piece of ``delta(t)``: ``amplitude`` or ``amplitude*sin(rate*(t-shift))``."""

    start: float
    stop: float
    amplitude: float
    shape: str = "const"
    rate: float = 0.0
    shift: float = 0.0

    def value(self, t: float) -> float:
        if self.shape == "const":
            return self.amplitude
        if self.shape == "sine":
            return self.amplitude * math.sin(self.rate * (t - self.shift))
        raise SchemaError(f"unknown disturbance shape {self.shape!r}")


@dataclass(frozen=True)
class DisturbanceProfile:
    """Scalar multiplier ``delta(t)`` applied as ``p_i(t) = (1 + delta(t)) p_i`` on ``buses``.

    Pieces cover half-open intervals ``(start, stop]``; the first piece also
    contains its start point. Outside every piece ``delta`` is zero.
    """

    pieces: tuple[Piece, ...] = ()
    buses: tuple[int, ...] = ()
    forecast_mode: str = "perfect"

    def __post_init__(self):
        if self.forecast_mode not in ("perfect", "hold-current"):
            raise SchemaError(f"forecast_mode must be 'perfect' or 'hold-current', got {self.forecast_mode!r}")
        object.__setattr__(self, "pieces", tuple(sorted(self.pieces, key=lambda q: q.start)))
        object.__setattr__(self, "buses", tuple(int(i) for i in self.buses))

    @classmethod
    def ramp_hold_release(cls, buses, level=0.2, forecast_mode="perfect"):
        """Ramp up over 25 s, hold until 125 s, ramp down until 150 s."""
        w = math.pi / 50.0
        pieces = (
            Piece(0.0, 25.0, level, "sine", w, 0.0),
            Piece(25.0, 125.0, level),
            Piece(125.0, 150.0, level, "sine", w, 100.0),
        )
        return cls(pieces, tuple(buses), forecast_mode)

    @property
    def end_time(self) -> float:
        return max((q.stop for q in self.pieces), default=0.0)

    def delta(self, t: float) -> float:
        for k, q in enumerate(self.pieces):
            if q.start < t <= q.stop or (k == 0 and t == q.start):
                return q.value(t)
        return 0.0

    def injection(self, net: PowerNetwork, t: float) -> np.ndarray:
        p = np.array(net.injection, dtype=float)
        if self.buses:
            d = self.delta(t)
            if d:
                idx = list(self.buses)
                p[idx] = p[idx] * (1.0 + d)
        return p

    def forecast(self, net: PowerNetwork, t: float, horizon_times) -> np.ndarray:
        """Forecast matrix, one column per prediction time (``n x len(horizon_times)``)."""
        if self.forecast_mode == "hold-current":
            cur = self.injection(net, t)
            return np.repeat(cur[:, None], len(horizon_times), axis=1)
        return np.column_stack([self.injection(net, tau) for tau in horizon_times])
