"""Seeded random networks and MPC instances for property tests and benchmarks."""

from __future__ import annotations

import numpy as np

from swingsafe.dynamics import SystemState
from swingsafe.netmodel import PowerNetwork, check_equilibrium_condition, compute_equilibrium
from swingsafe.prediction import QpInstance, assemble_mpc_qp, discretize_backward_euler, linearize


def random_network(rng: np.random.Generator, n: int, zero_inertia: bool = True, max_tries: int = 50) -> PowerNetwork:
    """Connected network on ``n`` buses whose equilibrium condition holds."""
    for _ in range(max_tries):
        edges = set()
        order = rng.permutation(n)
        for k in range(1, n):
            a, b = int(order[k]), int(order[rng.integers(0, k)])
            edges.add((a, b))
        for _ in range(int(rng.integers(0, n))):
            a, b = (int(v) for v in rng.choice(n, 2, replace=False))
            if (a, b) not in edges and (b, a) not in edges:
                edges.add((a, b))
        edges = sorted(edges)
        M = rng.uniform(0.5, 3.0, n)
        if zero_inertia and n > 2 and rng.random() < 0.5:
            M[int(rng.integers(1, n))] = 0.0
        p = rng.uniform(-1.5, 1.5, n)
        p -= p.mean()
        ctrl = sorted(int(i) for i in rng.choice(n, int(rng.integers(1, n + 1)), replace=False))
        safe = sorted(int(i) for i in rng.choice(ctrl, int(rng.integers(1, len(ctrl) + 1)), replace=False))
        net = PowerNetwork(
            n, edges, rng.uniform(3.0, 10.0, len(edges)), M, rng.uniform(0.05, 0.3, n), p,
            controlled=ctrl, safety=safe, name=f"random{n}",
        )
        if check_equilibrium_condition(net).value < 0.8:
            return net
    raise RuntimeError("could not draw a network satisfying the equilibrium condition")


def random_state(rng: np.random.Generator, net: PowerNetwork, scale: float = 0.5) -> SystemState:
    """Equilibrium angles with random frequencies and filter states on controlled buses."""
    lam = compute_equilibrium(net)
    om = rng.normal(0.0, scale, net.n_buses)
    ab = np.where(net.controlled_mask(), rng.normal(0.0, 0.1, net.n_buses), 0.0)
    return SystemState(lam, om, ab)


def random_mpc_qp(rng: np.random.Generator, n: int | None = None, N: int | None = None, T: float = 0.2, tau: float = 0.5, augmented: bool = True):
    """``(qp, net)`` for a random network, state and forecast."""
    n = int(rng.integers(2, 7)) if n is None else n
    N = int(rng.integers(3, 11)) if N is None else N
    net = random_network(rng, n)
    dm = discretize_backward_euler(linearize(net, tau), T)
    x = random_state(rng, net)
    p = np.asarray(net.injection)
    forecast = p[:, None] * (1.0 + 0.2 * rng.random((1, N)))
    safe = net.safety_mask()
    c = np.where(safe, 4.0, 1.0)
    bound = 0.2 * 2 * np.pi
    qp: QpInstance = assemble_mpc_qp(dm, net, c, 100.0, 1.9, x.stacked(), forecast, (-bound, bound), augmented=augmented)
    return qp, net
