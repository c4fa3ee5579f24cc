"""Case files (TOML) and the sparse-triplet QP dump format.

Case file layout, version 1::

    version = 1
    name = "case4"
    [[buses]]            # id, inertia, damping, injection
    [[edges]]            # from, to, susceptance (bus ids)
    [sets]               # controlled = [...], safety = [...]
    [scenario]           # t_end, dt, log_every, rebalance, seed
    [scenario.disturbance]
    [scenario.initial]   # optional: omega_hz, alpha_bl (per bus, in bus order)
    [controller]         # any ControllerConfig field

A case may take its lines from a topology file instead of ``[[edges]]``:
``topology = "file.toml"`` plus ``susceptance = [...]`` in line order.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from swingsafe.controller import ControllerConfig
from swingsafe.dynamics import SystemState
from swingsafe.errors import SchemaError
from swingsafe.netmodel import TWO_PI, DisturbanceProfile, Piece, PowerNetwork, compute_equilibrium
from swingsafe.prediction import QpInstance

CASE_VERSION = 1
DATA_DIR = Path(__file__).parent / "data"


@dataclass
class ScenarioConfig:
    """Everything a run needs besides the network."""

    name: str = "scenario"
    case_path: str | None = None
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    disturbance: DisturbanceProfile = field(default_factory=DisturbanceProfile)
    t_end: float = 180.0
    dt: float = 1e-3
    log_every: int = 10
    seed: int = 0
    initial_omega_hz: tuple | None = None
    initial_alpha_bl: tuple | None = None

    def validate(self):
        if self.t_end <= 0:
            raise SchemaError("t_end must be positive")
        if self.dt <= 0:
            raise SchemaError("dt must be positive")
        if self.log_every < 1:
            raise SchemaError("log_every must be >= 1")
        q = self.controller.sampling / self.dt
        if abs(q - round(q)) > 1e-9 * max(1.0, q):
            raise SchemaError(f"dt={self.dt:g} does not divide the sampling period {self.controller.sampling:g}")

    def initial_state(self, net: PowerNetwork) -> SystemState | None:
        if self.initial_omega_hz is None and self.initial_alpha_bl is None:
            return None
        n = net.n_buses
        om = np.zeros(n) if self.initial_omega_hz is None else np.asarray(self.initial_omega_hz, dtype=float) * TWO_PI
        ab = np.zeros(n) if self.initial_alpha_bl is None else np.asarray(self.initial_alpha_bl, dtype=float)
        if om.shape != (n,) or ab.shape != (n,):
            raise SchemaError("initial omega_hz and alpha_bl need one entry per bus")
        return SystemState(compute_equilibrium(net), om, ab)

    def with_mode(self, mode: str, **overrides) -> "ScenarioConfig":
        from dataclasses import replace

        return replace(self, controller=self.controller.with_overrides(mode=mode, **overrides))


def bundled_case(name: str = "case4") -> Path:
    path = DATA_DIR / f"{name}.toml"
    if not path.exists():
        raise SchemaError(f"no bundled case named {name!r}")
    return path


def _read_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"{path}: not valid TOML ({exc})") from exc


def _need(table: dict, key: str, where: str):
    if key not in table:
        raise SchemaError(f"{where}: missing required field {key!r}")
    return table[key]


def _number(x, where):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise SchemaError(f"{where}: expected a number, got {x!r}")
    return float(x)


def load_case(path, rebalance: bool | None = None) -> tuple[PowerNetwork, ScenarioConfig]:
    """Read a case file and return the validated network and scenario.

    Unbalanced injections raise :class:`UnbalancedInjection` unless
    ``rebalance`` (argument, or ``scenario.rebalance`` in the file) is set,
    in which case the mismatch is removed by a uniform shift.
    """
    path = Path(path)
    doc = _read_toml(path)
    if doc.get("kind") == "topology":
        raise SchemaError(f"{path} is a topology file; reference it from a case file with topology = ... and supply parameters")
    version = _need(doc, "version", str(path))
    if version != CASE_VERSION:
        raise SchemaError(f"{path}: unsupported case version {version!r} (expected {CASE_VERSION})")
    buses = _need(doc, "buses", str(path))
    if not isinstance(buses, list) or not buses:
        raise SchemaError(f"{path}: 'buses' must be a non-empty array of tables")
    ids = []
    M, E, P = [], [], []
    for k, b in enumerate(buses):
        where = f"{path}: buses[{k}]"
        ids.append(int(_need(b, "id", where)))
        M.append(_number(_need(b, "inertia", where), where))
        E.append(_number(_need(b, "damping", where), where))
        P.append(_number(_need(b, "injection", where), where))
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate bus ids")
    index = {bid: k for k, bid in enumerate(ids)}

    def bus(bid, where):
        if bid not in index:
            raise SchemaError(f"{where}: unknown bus id {bid}")
        return index[bid]

    if "topology" in doc:
        topo_path = (path.parent / doc["topology"]).resolve()
        topo = _read_toml(topo_path)
        raw_edges = [(int(_need(e, "from", str(topo_path))), int(_need(e, "to", str(topo_path)))) for e in _need(topo, "edges", str(topo_path))]
        sus = _need(doc, "susceptance", str(path))
        if len(sus) != len(raw_edges):
            raise SchemaError(f"{path}: susceptance has {len(sus)} entries, topology has {len(raw_edges)} lines")
        b = [_number(x, f"{path}: susceptance") for x in sus]
    else:
        raw_edges, b = [], []
        for k, e in enumerate(_need(doc, "edges", str(path))):
            where = f"{path}: edges[{k}]"
            raw_edges.append((int(_need(e, "from", where)), int(_need(e, "to", where))))
            b.append(_number(_need(e, "susceptance", where), where))
    edges = [(bus(a, f"{path}: line {a}-{c}"), bus(c, f"{path}: line {a}-{c}")) for a, c in raw_edges]

    sets = doc.get("sets", {})
    controlled = [bus(int(i), f"{path}: sets.controlled") for i in sets.get("controlled", [])]
    safety = [bus(int(i), f"{path}: sets.safety") for i in sets.get("safety", [])]

    sc = doc.get("scenario", {})
    rb = bool(sc.get("rebalance", False)) if rebalance is None else rebalance
    P = np.array(P)
    if rb:
        P = P - P.mean()
    net = PowerNetwork(len(ids), edges, b, M, E, P, controlled, safety, tuple(ids), str(doc.get("name", path.stem)))

    ctrl_tab = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.get("controller", {}).items()}
    for key in ("shift_buses",):
        if key in ctrl_tab:
            ctrl_tab[key] = tuple(bus(int(i), f"{path}: controller.{key}") for i in ctrl_tab[key])
    known = {f.name for f in fields(ControllerConfig)}
    unknown = set(ctrl_tab) - known
    if unknown:
        raise SchemaError(f"{path}: unknown controller settings {sorted(unknown)}")
    cfg = ControllerConfig(**ctrl_tab)

    dist = _disturbance(sc.get("disturbance", {}), bus, path, cfg.forecast_mode)
    init = sc.get("initial", {})
    scenario = ScenarioConfig(
        name=net.name, case_path=str(path), controller=cfg, disturbance=dist,
        t_end=float(sc.get("t_end", 180.0)), dt=float(sc.get("dt", 1e-3)),
        log_every=int(sc.get("log_every", 10)), seed=int(sc.get("seed", 0)),
        initial_omega_hz=tuple(init["omega_hz"]) if "omega_hz" in init else None,
        initial_alpha_bl=tuple(init["alpha_bl"]) if "alpha_bl" in init else None,
    )
    scenario.validate()
    return net, scenario


def _disturbance(tab: dict, bus, path, forecast_mode) -> DisturbanceProfile:
    profile = tab.get("profile", "none")
    buses = [bus(int(i), f"{path}: scenario.disturbance.buses") for i in tab.get("buses", [])]
    if profile == "none":
        return DisturbanceProfile(forecast_mode=forecast_mode)
    if profile == "ramp-hold-release":
        return DisturbanceProfile.ramp_hold_release(buses, float(tab.get("level", 0.2)), forecast_mode)
    if profile == "pieces":
        pieces = []
        for k, q in enumerate(_need(tab, "pieces", f"{path}: scenario.disturbance")):
            where = f"{path}: scenario.disturbance.pieces[{k}]"
            shape = q.get("shape", "const")
            if shape not in ("const", "sine"):
                raise SchemaError(f"{where}: shape must be 'const' or 'sine'")
            pieces.append(Piece(
                _number(_need(q, "start", where), where), _number(_need(q, "stop", where), where),
                _number(_need(q, "amplitude", where), where), shape,
                _number(q.get("rate", 0.0), where), _number(q.get("shift", 0.0), where),
            ))
        return DisturbanceProfile(tuple(pieces), tuple(buses), forecast_mode)
    raise SchemaError(f"{path}: unknown disturbance profile {profile!r}")


# --- QP dump -------------------------------------------------------------------

DUMP_MAGIC = "swingsafe-qp"
DUMP_VERSION = 1


@dataclass(frozen=True)
class Topology:
    """Bus count and line list; enough to place agents and measure hop distances."""

    n_buses: int
    edges: tuple

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def dump_qp(qp: QpInstance, edges, path) -> None:
    """Write ``qp`` as self-describing sparse triplets (one section per matrix or vector)."""
    out = [f"{DUMP_MAGIC} {DUMP_VERSION}"]
    out.append(f"dims {qp.n_var} {qp.R1.shape[0]} {qp.R2.shape[0]} {qp.n_buses} {qp.n_edges} {qp.N}")
    out.append(f"a {_fmt(qp.a)}")
    out.append(f"edges {len(edges)}")
    out += [f"{a} {b}" for a, b in edges]
    for name in ("H", "R1", "R2"):
        A = getattr(qp, name).tocoo()
        out.append(f"{name} {A.nnz}")
        out += [f"{i} {j} {_fmt(v)}" for i, j, v in zip(A.row, A.col, A.data)]
    for name in ("f", "r1", "r2"):
        v = getattr(qp, name)
        out.append(f"{name} {v.size}")
        out += [_fmt(x) for x in v]
    for name in ("owner", "owner_r1", "owner_r2"):
        v = getattr(qp, name)
        out.append(f"{name} {v.size}")
        out.append(" ".join(str(int(x)) for x in v))
    for name in ("safety", "controlled"):
        v = getattr(qp, name)
        out.append(f"{name} {len(v)}")
        out.append(" ".join(str(int(x)) for x in v))
    out.append(f"sign_pattern {len(qp.sign_pattern)}")
    out.append(" ".join(_fmt(x) for x in qp.sign_pattern))
    out.append("end")
    Path(path).write_text("\n".join(out) + "\n")


def load_qp(path) -> tuple[QpInstance, Topology]:
    """Parse a dump written by :func:`dump_qp`; any inconsistency raises :class:`SchemaError`."""
    import scipy.sparse as sp

    lines = Path(path).read_text().splitlines()
    pos = 0

    def nxt():
        nonlocal pos
        if pos >= len(lines):
            raise SchemaError(f"{path}: unexpected end of file")
        pos += 1
        return lines[pos - 1].split()

    def header(name, nfields=1):
        tok = nxt()
        if not tok or tok[0] != name or len(tok) != nfields + 1:
            raise SchemaError(f"{path}: line {pos}: expected section {name!r}")
        try:
            return [int(x) for x in tok[1:]] if name not in ("a",) else [float(tok[1])]
        except ValueError as exc:
            raise SchemaError(f"{path}: line {pos}: bad header") from exc

    try:
        tok = nxt()
        if tok != [DUMP_MAGIC, str(DUMP_VERSION)]:
            raise SchemaError(f"{path}: not a {DUMP_MAGIC} v{DUMP_VERSION} file")
        nv, ni, ne, n, m, N = header("dims", 6)
        (a,) = header("a")
        (me,) = header("edges")
        edges = tuple(tuple(int(x) for x in nxt()) for _ in range(me))
        if me != m or any(len(e) != 2 for e in edges):
            raise SchemaError(f"{path}: edge list does not match dims")
        mats = {}
        for name, shape in (("H", (nv, nv)), ("R1", (ni, nv)), ("R2", (ne, nv))):
            (nnz,) = header(name)
            trip = [nxt() for _ in range(nnz)]
            if any(len(t) != 3 for t in trip):
                raise SchemaError(f"{path}: malformed triplet in {name}")
            r = np.array([int(t[0]) for t in trip], dtype=int)
            c = np.array([int(t[1]) for t in trip], dtype=int)
            v = np.array([float(t[2]) for t in trip])
            if nnz and (r.min() < 0 or c.min() < 0 or r.max() >= shape[0] or c.max() >= shape[1]):
                raise SchemaError(f"{path}: index out of range in {name}")
            mats[name] = sp.csr_matrix((v, (r, c)), shape=shape)
        vecs = {}
        for name, size in (("f", nv), ("r1", ni), ("r2", ne)):
            (k,) = header(name)
            if k != size:
                raise SchemaError(f"{path}: {name} has {k} entries, expected {size}")
            vecs[name] = np.array([float(nxt()[0]) for _ in range(k)])
        ints = {}
        for name, size in (("owner", nv), ("owner_r1", ni), ("owner_r2", ne), ("safety", None), ("controlled", None)):
            (k,) = header(name)
            vals = nxt()
            if size is not None and k != size:
                raise SchemaError(f"{path}: {name} has {k} entries, expected {size}")
            if len(vals) != k:
                raise SchemaError(f"{path}: {name} lists {len(vals)} values, header says {k}")
            ints[name] = np.array([int(x) for x in vals], dtype=int)
        (k,) = header("sign_pattern")
        vals = nxt()
        if len(vals) != k:
            raise SchemaError(f"{path}: sign_pattern length mismatch")
        sign = np.array([float(x) for x in vals])
        if nxt() != ["end"]:
            raise SchemaError(f"{path}: missing end marker")
    except ValueError as exc:
        raise SchemaError(f"{path}: line {pos}: {exc}") from exc
    if not np.all(np.isfinite(mats["H"].data)) or not np.all(np.isfinite(vecs["f"])):
        raise SchemaError(f"{path}: non-finite entries")
    if ints["owner"].size and (ints["owner"].min() < 0 or ints["owner"].max() >= max(1, n + m)):
        raise SchemaError(f"{path}: owner ids out of range")
    qp = QpInstance(
        H=mats["H"], f=vecs["f"], a=a, R1=mats["R1"], r1=vecs["r1"], R2=mats["R2"], r2=vecs["r2"],
        owner=ints["owner"], owner_r1=ints["owner_r1"], owner_r2=ints["owner_r2"], sign_pattern=sign,
        n_buses=n, n_edges=m, N=N, safety=tuple(ints["safety"].tolist()), controlled=tuple(ints["controlled"].tolist()),
    )
    return qp, Topology(n, edges)

