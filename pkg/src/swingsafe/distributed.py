"""Round-based multi-agent execution of the saddle-point dynamics.

Every bus and every line is an agent. An agent owns the primal entries and
constraint multipliers assigned to it by the QP ownership map, receives
the values it reads from the agents owning them, and updates only its own
entries. All agents update synchronously from the values of the previous
round, which is exactly the centralized explicit-Euler step.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from swingsafe.errors import Divergence, LocalityViolation, NoConvergence, OwnershipGap
from swingsafe.netmodel import PowerNetwork
from swingsafe.prediction import QpInstance, incidence_distances
from swingsafe.solvers import SaddleOperator, SaddleState, default_step, euler_update, kkt_residual

PRIMAL_HOPS = 2
DUAL_HOPS = 1


@dataclass(eq=False)
class Agent:
    id: int
    label: str
    owned: np.ndarray
    reads: np.ndarray
    K: sp.csr_matrix
    c: np.ndarray
    dual_mask: np.ndarray
    primal_rows: np.ndarray
    sources: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Channel:
    sender: int
    receiver: int
    kind: str
    n_values: int
    hops: int


@dataclass
class MessageLog:
    channels: list[Channel] = field(default_factory=list)
    rounds: int = 0
    records: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    converged: bool | None = None

    def max_hops(self, kind: str) -> int:
        return max((ch.hops for ch in self.channels if ch.kind == kind), default=0)

    def values_per_round(self) -> int:
        return sum(ch.n_values for ch in self.channels)

    def certificate(self) -> str:
        return (
            f"{len(self.channels)} channels, {self.values_per_round()} values/round over {self.rounds} rounds; "
            f"max hops primal={self.max_hops('primal')} (limit {PRIMAL_HOPS}), "
            f"dual={self.max_hops('dual')} (limit {DUAL_HOPS})"
        )


def _agent_label(a: int, n: int) -> str:
    return f"bus{a}" if a < n else f"line{a - n}"


def stacked_owner(qp: QpInstance) -> np.ndarray:
    return np.concatenate([qp.owner, qp.owner_r1, qp.owner_r2]).astype(int)


def build_agents(qp: QpInstance, net: PowerNetwork | None = None) -> tuple[list[Agent], np.ndarray]:
    """One agent per bus and per line, with local slices of the saddle operator.

    Returns ``(agents, distances)``. Without ``net`` every index must belong
    to agent 0.
    """
    op = SaddleOperator(qp)
    owner = stacked_owner(qp)
    if net is None:
        if np.any(owner != 0):
            raise ValueError("a network is needed to place more than one agent")
        n_agents, dist, n = 1, np.zeros((1, 1), dtype=int), 1
    else:
        n_agents, dist, n = net.n_buses + net.n_edges, incidence_distances(net), net.n_buses
    K = op.K
    nv = op.n_var
    dual_mask = np.zeros(K.shape[0], dtype=bool)
    dual_mask[op.eta_slice] = True
    agents = []
    for a in range(n_agents):
        owned = np.flatnonzero(owner == a)
        cols = np.unique(K.indices[np.concatenate([np.arange(K.indptr[r], K.indptr[r + 1]) for r in owned])]) if owned.size else np.zeros(0, dtype=int)
        reads = cols.astype(int)
        # local operator: same rows, same stored order, columns renumbered into the inbox
        pos = np.searchsorted(reads, K.indices)
        indptr = [0]
        indices, data = [], []
        for r in owned:
            sl = slice(K.indptr[r], K.indptr[r + 1])
            indices.append(pos[sl])
            data.append(K.data[sl])
            indptr.append(indptr[-1] + (sl.stop - sl.start))
        Kloc = sp.csr_matrix(
            (np.concatenate(data) if data else np.zeros(0), np.concatenate(indices) if indices else np.zeros(0, dtype=int), np.array(indptr)),
            shape=(owned.size, reads.size),
        )
        sources = defaultdict(list)
        for v in reads:
            sources[int(owner[v])].append(int(v))
        agents.append(Agent(
            id=a, label=_agent_label(a, n), owned=owned, reads=reads, K=Kloc, c=op.c[owned],
            dual_mask=dual_mask[owned], primal_rows=owned < nv,
            sources={s: np.array(v, dtype=int) for s, v in sources.items()},
        ))
    return agents, dist


def _channels(agents: list[Agent], owner, K, nv, dist) -> list[Channel]:
    chans = []
    for ag in agents:
        need = {}
        for r, is_primal in zip(ag.owned, ag.primal_rows):
            kind = "primal" if is_primal else "dual"
            for v in K.indices[K.indptr[r] : K.indptr[r + 1]]:
                s = int(owner[v])
                if s == ag.id:
                    continue
                key = (s, kind)
                need.setdefault(key, set()).add(int(v))
        for (s, kind), vals in sorted(need.items()):
            hops = int(dist[s, ag.id])
            limit = PRIMAL_HOPS if kind == "primal" else DUAL_HOPS
            if hops > limit:
                raise LocalityViolation(
                    f"{ag.label} ({kind} update) reads from {_agent_label(s, len(dist))} {hops} hops away",
                    row=(ag.id, s),
                )
            chans.append(Channel(s, ag.id, kind, len(vals), hops))
    return chans


def distributed_execute(
    qp: QpInstance,
    agents: list[Agent],
    rounds: int,
    s0: SaddleState,
    dist: np.ndarray,
    mode: str = "vectorized",
    log_rounds: int = 0,
    stop_tol: float | None = None,
    check_every: int = 50,
    divergence_factor: float = 1e6,
):
    """Run ``rounds`` synchronous rounds of message exchange and local updates.

    ``mode="loop"`` delivers each message and updates agent by agent;
    ``mode="vectorized"`` performs the identical per-agent arithmetic on
    all agents at once (block-diagonal local operators). Per-round message
    records are kept for the first ``log_rounds`` rounds.

    With ``stop_tol`` an outside observer evaluates the KKT residual every
    ``check_every`` rounds (the same cadence as ``saddle_integrate``) and
    halts the agents once it is below ``stop_tol``; if the budget runs out
    first, :class:`NoConvergence` is raised with ``state`` and ``log``
    attributes. Without ``stop_tol`` exactly ``rounds`` rounds are run.
    """
    op = SaddleOperator(qp)
    owner = stacked_owner(qp)
    size = op.K.shape[0]
    covered = np.zeros(size, dtype=int)
    for ag in agents:
        covered[ag.owned] += 1
    if np.any(covered != 1):
        missing = np.flatnonzero(covered == 0)
        raise OwnershipGap(
            f"{missing.size} entries have no owning agent (e.g. index {missing[:5].tolist()}), "
            f"{int(np.sum(covered > 1))} have several"
        )
    log = MessageLog(channels=_channels(agents, owner, op.K, op.n_var, dist))

    s = s0.copy()
    if s.h is None:
        s.h = default_step(qp, s.eps_z)
    coef = op.coefficients(s)
    w = s.stacked()
    nv, ni = op.n_var, op.n_ineq
    limit = divergence_factor * max(1.0, np.linalg.norm(w)) * (1.0 + np.linalg.norm(op.c))

    def observe(rnd) -> bool:
        if stop_tol is None or rnd % check_every:
            return False
        res = kkt_residual(qp, w[:nv], w[nv : nv + ni], w[nv + ni :]).max()
        log.residuals.append((rnd, float(res)))
        if not np.isfinite(res) or np.linalg.norm(w) > limit:
            raise Divergence(f"distributed saddle iterates diverged at round {rnd}; reduce the step h={s.h:g}")
        if res <= stop_tol:
            log.rounds = rnd
            return True
        return False

    log.rounds = rounds
    if mode == "vectorized":
        gather = np.concatenate([ag.reads for ag in agents])
        owned = np.concatenate([ag.owned for ag in agents])
        offsets = np.cumsum([0] + [ag.reads.size for ag in agents])
        indptr = [np.zeros(1, dtype=np.int64)]
        indices, data = [], []
        nnz = 0
        for ag, off in zip(agents, offsets[:-1]):
            indptr.append(ag.K.indptr[1:].astype(np.int64) + nnz)
            indices.append(ag.K.indices.astype(np.int64) + off)
            data.append(ag.K.data)
            nnz += ag.K.nnz
        Kb = sp.csr_matrix((np.concatenate(data), np.concatenate(indices), np.concatenate(indptr)), shape=(owned.size, gather.size))
        cb = np.concatenate([ag.c for ag in agents])
        mb = np.concatenate([ag.dual_mask for ag in agents])
        coefb = coef[owned]
        for rnd in range(1, rounds + 1):
            if rnd <= log_rounds:
                _record(log, agents, owner, rnd)
            w_in = w[gather]
            w[owned] = euler_update(Kb, cb, coefb, w_in, w[owned], mb)
            if observe(rnd):
                break
    elif mode == "loop":
        for rnd in range(1, rounds + 1):
            outbox = {ag.id: {} for ag in agents}
            for ag in agents:
                for src, idx in ag.sources.items():
                    outbox[ag.id][src] = w[idx]  # message from src, snapshot of this round
            if rnd <= log_rounds:
                _record(log, agents, owner, rnd)
            new = []
            for ag in agents:
                inbox = np.empty(ag.reads.size)
                for src, idx in ag.sources.items():
                    inbox[np.searchsorted(ag.reads, idx)] = outbox[ag.id][src]
                new.append(euler_update(ag.K, ag.c, coef[ag.owned], inbox, w[ag.owned], ag.dual_mask))
            for ag, vals in zip(agents, new):
                w[ag.owned] = vals
            if observe(rnd):
                break
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = replace(s, Z=w[:nv].copy(), eta=w[nv : nv + ni].copy(), mu=w[nv + ni :].copy())
    if stop_tol is not None:
        log.converged = bool(log.residuals) and log.residuals[-1][1] <= stop_tol
        if not log.converged:
            last = log.residuals[-1][1] if log.residuals else float("nan")
            err = NoConvergence(f"distributed saddle dynamics: residual {last:.3e} > {stop_tol:g} after {rounds} rounds")
            err.state, err.log = out, log
            raise err
    return out, log


def _record(log: MessageLog, agents, owner, rnd):
    for ag in agents:
        for src, idx in ag.sources.items():
            if src != ag.id:
                log.records.append((rnd, src, ag.id, idx.size))
