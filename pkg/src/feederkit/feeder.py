"""Feeder dataset: parsing, validation, switch merging and line impedances.

The on-disk format is a directory of six CSV files whose headers are the
column titles of the original spreadsheet tabs::

    general.csv   General Data,<value>  (key/value rows)
    lines.csv     Node A,Node B,Length (ft.),Config.
    configs.csv   Conf,Lin=1, Trafo=0,R11..R33,X11..X33,B11..B33
    loads.csv     Node,Y=1, D=0,Alfa (PQ=0, I=1, Z=2),Ph-1 (kW),...
    coords.csv    Node,Pos X,Pos Y
    switches.csv  NODE1,NODE2,Closed=1

Config matrices are per mile (ohm and micro-siemens), segment lengths in feet.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FeederFormatError, TopologyError

PHASES = ("A", "B", "C")
FEET_PER_MILE = 5280.0
#: three-phase apparent power base, used for per-unit currents/powers and for
#: transformer impedances given in per unit
S_BASE_KVA = 1000.0

ZIP_KINDS = ("PQ", "I", "Z")

GENERAL_HEADER = ("General Data",)
LINES_HEADER = ("Node A", "Node B", "Length (ft.)", "Config.")
_UPPER = ("11", "12", "13", "22", "23", "33")
CONFIGS_HEADER = (
    ("Conf", "Lin=1, Trafo=0")
    + tuple("R" + s for s in _UPPER)
    + tuple("X" + s for s in _UPPER)
    + tuple("B" + s for s in _UPPER)
)
LOADS_HEADER = (
    "Node",
    "Y=1, D=0",
    "Alfa (PQ=0, I=1, Z=2)",
    "Ph-1 (kW)",
    "Ph-1 (kVAr)",
    "Ph-2 (kW)",
    "Ph-2 (kVAr)",
    "Ph-3 (kW)",
    "Ph-3 (kVAr)",
)
COORDS_HEADER = ("Node", "Pos X", "Pos Y")
SWITCHES_HEADER = ("NODE1", "NODE2", "Closed=1")

FILES = {
    "general": ("general.csv", GENERAL_HEADER),
    "lines": ("lines.csv", LINES_HEADER),
    "configs": ("configs.csv", CONFIGS_HEADER),
    "loads": ("loads.csv", LOADS_HEADER),
    "coords": ("coords.csv", COORDS_HEADER),
    "switches": ("switches.csv", SWITCHES_HEADER),
}
OPTIONAL_FILES = frozenset({"coords"})


def _num(text: str) -> float:
    return float(text)


def _fmt(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def _sym(values: Sequence[float]) -> np.ndarray:
    """3x3 symmetric matrix from the upper triangle (11,12,13,22,23,33)."""
    a11, a12, a13, a22, a23, a33 = values
    m = np.array([[a11, a12, a13], [a12, a22, a23], [a13, a23, a33]], dtype=float)
    m.setflags(write=False)
    return m


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class GeneralData:
    slack_bus: int
    v_nom_kv: float
    slack_mag_pu: tuple[float, float, float] = (1.0, 1.0, 1.0)
    slack_ang_deg: tuple[float, float, float] = (0.0, -120.0, 120.0)
    international_system: int = 0
    delta_lf: int = 0
    # (from_bus, to_bus) -> per-phase ideal regulator ratio at the sending end
    taps: Mapping[tuple[int, int], tuple[float, float, float]] = field(default_factory=dict)
    text: tuple[tuple[str, str], ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.v_nom_kv > 0:
            raise FeederFormatError(f"Vnom must be positive, got {self.v_nom_kv}", "invalid-value")
        if len(self.slack_mag_pu) != 3 or len(self.slack_ang_deg) != 3:
            raise FeederFormatError("slack needs three magnitudes and three angles", "invalid-value")
        for m in self.slack_mag_pu:
            if not 0.5 < m < 1.5:
                raise FeederFormatError(f"slack magnitude {m} pu outside (0.5, 1.5)", "invalid-value")
        for i in range(3):
            d = (self.slack_ang_deg[(i + 1) % 3] - self.slack_ang_deg[i]) % 360.0
            if min(abs(d - 120.0), abs(d - 240.0)) > 1e-9:
                raise FeederFormatError(
                    f"slack angles {self.slack_ang_deg} are not 120 degrees apart", "invalid-value"
                )

    @property
    def v_base_ln(self) -> float:
        """Line-to-neutral base voltage in volts."""
        return self.v_nom_kv * 1000.0 / math.sqrt(3.0)

    @property
    def z_base(self) -> float:
        return (self.v_nom_kv * 1000.0) ** 2 / (S_BASE_KVA * 1000.0)

    @property
    def i_base(self) -> float:
        """Per-phase base current in amperes."""
        return S_BASE_KVA * 1000.0 / 3.0 / self.v_base_ln

    def slack_phasors(self) -> np.ndarray:
        mag = np.asarray(self.slack_mag_pu) * self.v_base_ln
        return mag * np.exp(1j * np.deg2rad(np.asarray(self.slack_ang_deg)))

    def to_rows(self) -> list[tuple[str, str]]:
        if self.text is not None and GeneralData.from_rows(self.text) == self:
            return list(self.text)
        rows = [
            ("Slack", _fmt(self.slack_bus)),
            ("Vnom (kV)", _fmt(self.v_nom_kv)),
            ("InternationalSystem", _fmt(self.international_system)),
            ("DeltaLF", _fmt(self.delta_lf)),
        ]
        rows += [(f"V_slack_ph_{p}", _fmt(m)) for p, m in zip(PHASES, self.slack_mag_pu)]
        rows += [(f"Ang_slack_ph_{p}", _fmt(a)) for p, a in zip(PHASES, self.slack_ang_deg)]
        for (a, b), taps in sorted(self.taps.items()):
            rows += [(f"Tap_{a}_{b}_ph_{p}", _fmt(t)) for p, t in zip(PHASES, taps)]
        return rows

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str]]) -> "GeneralData":
        rows = tuple((k.strip(), v.strip()) for k, v in rows)
        kv = {}
        taps: dict[tuple[int, int], list[float]] = {}
        for lineno, (key, value) in enumerate(rows, start=2):
            try:
                if key.startswith("Tap_"):
                    _, a, b, _ph, p = key.split("_")
                    taps.setdefault((int(a), int(b)), [1.0, 1.0, 1.0])[PHASES.index(p)] = _num(value)
                else:
                    kv[key] = _num(value)
            except ValueError:
                raise FeederFormatError(
                    f"general.csv row {lineno}: cannot parse {key!r} = {value!r}", "unparseable-cell"
                ) from None
        required = ["Slack", "Vnom (kV)"]
        required += [f"V_slack_ph_{p}" for p in PHASES] + [f"Ang_slack_ph_{p}" for p in PHASES]
        missing = [k for k in required if k not in kv]
        if missing:
            raise FeederFormatError(f"general.csv lacks rows {missing}", "bad-header")
        return cls(
            slack_bus=int(kv["Slack"]),
            v_nom_kv=kv["Vnom (kV)"],
            slack_mag_pu=tuple(kv[f"V_slack_ph_{p}"] for p in PHASES),
            slack_ang_deg=tuple(kv[f"Ang_slack_ph_{p}"] for p in PHASES),
            international_system=int(kv.get("InternationalSystem", 0)),
            delta_lf=int(kv.get("DeltaLF", 0)),
            taps={k: tuple(v) for k, v in taps.items()},
            text=rows,
        )


@dataclass(frozen=True, eq=False)
class LineConfig:
    config_id: int
    is_line: bool
    r_ohm_per_mile: np.ndarray
    x_ohm_per_mile: np.ndarray
    b_usiemens_per_mile: np.ndarray
    text: tuple[str, ...] | None = field(default=None, repr=False)

    @property
    def phasing(self) -> tuple[int, ...]:
        diag = np.abs(np.diag(self.r_ohm_per_mile)) + np.abs(np.diag(self.x_ohm_per_mile))
        return tuple(int(i) for i in np.flatnonzero(diag > 0))

    def __eq__(self, other):
        if not isinstance(other, LineConfig):
            return NotImplemented
        return (
            self.config_id == other.config_id
            and self.is_line == other.is_line
            and np.array_equal(self.r_ohm_per_mile, other.r_ohm_per_mile)
            and np.array_equal(self.x_ohm_per_mile, other.x_ohm_per_mile)
            and np.array_equal(self.b_usiemens_per_mile, other.b_usiemens_per_mile)
        )

    __hash__ = None

    @classmethod
    def from_row(cls, cells: Sequence[str]) -> "LineConfig":
        v = [_num(c) for c in cells]
        return cls(int(v[0]), bool(int(v[1])), _sym(v[2:8]), _sym(v[8:14]), _sym(v[14:20]), tuple(cells))

    def to_row(self) -> tuple[str, ...]:
        if self.text is not None and LineConfig.from_row(self.text) == self:
            return self.text
        iu = np.triu_indices(3)
        vals = [m[iu] for m in (self.r_ohm_per_mile, self.x_ohm_per_mile, self.b_usiemens_per_mile)]
        return (str(self.config_id), str(int(self.is_line))) + tuple(
            f"{x:.4f}" for x in np.concatenate(vals)
        )


@dataclass(frozen=True)
class LineSegment:
    from_bus: int
    to_bus: int
    length_ft: float
    config_id: int
    text: tuple[str, ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.length_ft > 0:
            raise FeederFormatError(
                f"segment {self.from_bus}-{self.to_bus}: length must be positive", "invalid-value"
            )

    @property
    def key(self) -> frozenset:
        return frozenset((self.from_bus, self.to_bus))

    def other(self, bus: int) -> int:
        return self.to_bus if bus == self.from_bus else self.from_bus

    @classmethod
    def from_row(cls, cells):
        return cls(int(cells[0]), int(cells[1]), _num(cells[2]), int(cells[3]), tuple(cells))

    def to_row(self):
        if self.text is not None and LineSegment.from_row(self.text) == self:
            return self.text
        return (str(self.from_bus), str(self.to_bus), _fmt(self.length_ft), str(self.config_id))


@dataclass(frozen=True)
class SpotLoad:
    bus: int
    wye: bool
    zip_kind: str
    p_kw: tuple[float, float, float]
    q_kvar: tuple[float, float, float]
    text: tuple[str, ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.zip_kind not in ZIP_KINDS:
            raise FeederFormatError(f"load {self.bus}: unknown ZIP kind {self.zip_kind!r}", "invalid-value")
        if min(self.p_kw) < 0 or min(self.q_kvar) < 0:
            raise FeederFormatError(f"load {self.bus}: negative power", "invalid-value")

    @property
    def s_va(self) -> np.ndarray:
        """Rated complex power per phase (wye) or per delta leg AB/BC/CA, in VA."""
        return (np.asarray(self.p_kw) + 1j * np.asarray(self.q_kvar)) * 1000.0

    @property
    def phases_used(self) -> set[int]:
        legs = [i for i in range(3) if self.p_kw[i] or self.q_kvar[i]]
        if self.wye:
            return set(legs)
        return {p for i in legs for p in (i, (i + 1) % 3)}

    @classmethod
    def from_row(cls, cells):
        v = [_num(c) for c in cells]
        alfa = int(v[2])
        if alfa not in (0, 1, 2):
            raise FeederFormatError(f"load {cells[0]}: Alfa must be 0, 1 or 2", "invalid-value")
        return cls(
            int(v[0]), bool(int(v[1])), ZIP_KINDS[alfa], (v[3], v[5], v[7]), (v[4], v[6], v[8]), tuple(cells)
        )

    def to_row(self):
        if self.text is not None and SpotLoad.from_row(self.text) == self:
            return self.text
        cells = [str(self.bus), str(int(self.wye)), str(ZIP_KINDS.index(self.zip_kind))]
        for p, q in zip(self.p_kw, self.q_kvar):
            cells += [_fmt(p), _fmt(q)]
        return tuple(cells)


@dataclass(frozen=True)
class SwitchLink:
    bus_a: int
    bus_b: int
    closed: bool = True
    text: tuple[str, ...] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.bus_a == self.bus_b:
            raise FeederFormatError(f"switch {self.bus_a}-{self.bus_b} connects a bus to itself", "invalid-value")

    @classmethod
    def from_row(cls, cells):
        return cls(int(cells[0]), int(cells[1]), bool(int(_num(cells[2]))), tuple(cells))

    def to_row(self):
        if self.text is not None and SwitchLink.from_row(self.text) == self:
            return self.text
        return (str(self.bus_a), str(self.bus_b), str(int(self.closed)))


@dataclass(frozen=True)
class NodeCoord:
    bus: int
    x: float
    y: float
    text: tuple[str, ...] | None = field(default=None, compare=False, repr=False)

    @classmethod
    def from_row(cls, cells):
        return cls(int(cells[0]), _num(cells[1]), _num(cells[2]), tuple(cells))

    def to_row(self):
        if self.text is not None and NodeCoord.from_row(self.text) == self:
            return self.text
        return (str(self.bus), f"{self.x:.4f}", f"{self.y:.4f}")


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class RadialTree:
    """Slack-rooted orientation of a radial feeder."""

    root: int
    order: tuple[int, ...]  # breadth-first, root first
    parent: Mapping[int, int]
    incoming: Mapping[int, LineSegment]
    children: Mapping[int, tuple[int, ...]]
    phases: Mapping[int, tuple[int, ...]]
    depth: Mapping[int, int]

    def distance_ft(self) -> dict[int, float]:
        dist = {self.root: 0.0}
        for bus in self.order[1:]:
            dist[bus] = dist[self.parent[bus]] + self.incoming[bus].length_ft
        return dist


@dataclass(frozen=True, eq=False)
class FeederModel:
    general: GeneralData
    configs: Mapping[int, LineConfig]
    segments: tuple[LineSegment, ...]
    loads: tuple[SpotLoad, ...] = ()
    switches: tuple[SwitchLink, ...] = ()
    coords: tuple[NodeCoord, ...] | None = None
    #: bus id -> representative id, filled by merge_switches
    aliases: Mapping[int, int] = field(default_factory=dict)

    @property
    def slack_bus(self) -> int:
        return self.general.slack_bus

    @cached_property
    def buses(self) -> tuple[int, ...]:
        ids = {self.slack_bus}
        for s in self.segments:
            ids.update((s.from_bus, s.to_bus))
        return tuple(sorted(ids))

    @cached_property
    def adjacency(self) -> dict[int, list[tuple[int, LineSegment]]]:
        adj: dict[int, list[tuple[int, LineSegment]]] = {b: [] for b in self.buses}
        for s in self.segments:
            adj[s.from_bus].append((s.to_bus, s))
            adj[s.to_bus].append((s.from_bus, s))
        for b in adj:
            adj[b].sort(key=lambda t: t[0])
        return adj

    def neighbors(self, bus: int) -> list[int]:
        return [n for n, _ in self.adjacency[bus]]

    def resolve(self, bus: int) -> int:
        return self.aliases.get(bus, bus)

    def segment_between(self, a: int, b: int) -> LineSegment:
        for n, s in self.adjacency[a]:
            if n == b:
                return s
        raise KeyError((a, b))

    @cached_property
    def tree(self) -> RadialTree:
        """Slack-rooted BFS orientation; raises if the graph is not a connected tree."""
        return _build_tree(self)

    def loads_by_bus(self) -> dict[int, list[SpotLoad]]:
        out: dict[int, list[SpotLoad]] = {}
        for ld in self.loads:
            out.setdefault(ld.bus, []).append(ld)
        return out

    def with_loads_scaled(self, factor: float) -> "FeederModel":
        loads = tuple(
            replace(ld, p_kw=tuple(p * factor for p in ld.p_kw), q_kvar=tuple(q * factor for q in ld.q_kvar))
            for ld in self.loads
        )
        return replace(self, loads=loads)

    def without_shunts(self) -> "FeederModel":
        configs = {
            k: replace(c, b_usiemens_per_mile=np.zeros((3, 3)), text=None) for k, c in self.configs.items()
        }
        return replace(self, configs=configs)


def _build_tree(model: FeederModel) -> RadialTree:
    root = model.slack_bus
    if not any(root in (s.from_bus, s.to_bus) for s in model.segments) and model.segments:
        raise TopologyError(f"slack bus {root} is not connected to any segment", "missing-slack")
    adj = model.adjacency
    parent: dict[int, int] = {}
    incoming: dict[int, LineSegment] = {}
    children: dict[int, list[int]] = {root: []}
    phases = {root: (0, 1, 2)}
    depth = {root: 0}
    order = [root]
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, seg in adj[u]:
            if v == parent.get(u):
                continue
            if v in depth:
                raise TopologyError(f"loop through buses {u} and {v}", "not-radial")
            parent[v] = u
            incoming[v] = seg
            depth[v] = depth[u] + 1
            children[u].append(v)
            children[v] = []
            phases[v] = model.configs[seg.config_id].phasing
            order.append(v)
            queue.append(v)
    if len(order) != len(model.buses):
        missing = sorted(set(model.buses) - set(order))
        raise TopologyError(f"buses not reachable from slack: {missing[:10]}", "not-radial")
    if len(model.segments) != len(order) - 1:
        raise TopologyError("parallel segments between the same buses", "not-radial")
    return RadialTree(
        root=root,
        order=tuple(order),
        parent=parent,
        incoming=incoming,
        children={k: tuple(v) for k, v in children.items()},
        phases=phases,
        depth=depth,
    )


# --------------------------------------------------------------------------
# parsing / writing


def _read_table(path: Path, header: tuple[str, ...]) -> list[list[str]]:
    text = path.read_text(encoding="utf-8-sig")
    rows = [r for r in csv.reader(io.StringIO(text)) if any(c.strip() for c in r)]
    if not rows:
        raise FeederFormatError(f"{path.name} is empty", "bad-header")
    got = tuple(c.strip() for c in rows[0])
    if header == GENERAL_HEADER:
        ok = got[:1] == header
    else:
        ok = got == header
    if not ok:
        raise FeederFormatError(f"{path.name}: header {got} does not match {header}", "bad-header")
    width = 2 if header == GENERAL_HEADER else len(header)
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        cells = [c.strip() for c in row]
        if len(cells) < width:
            raise FeederFormatError(f"{path.name} row {lineno}: expected {width} cells", "unparseable-cell")
        body.append(cells[:width])
    return body


def _parse_rows(name: str, rows, factory):
    out = []
    header = FILES[name][1]
    for lineno, cells in enumerate(rows, start=2):
        try:
            out.append(factory(cells))
        except ValueError as exc:
            if isinstance(exc, FeederFormatError):
                raise
            col = next((i for i, c in enumerate(cells) if not _is_number(c)), None)
            where = f" column {header[col]!r}" if col is not None else ""
            raise FeederFormatError(
                f"{FILES[name][0]} row {lineno}{where}: cannot parse {cells}", "unparseable-cell"
            ) from None
    return out


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def parse_feeder(directory: str | Path) -> FeederModel:
    """Read and validate the six-file feeder dataset in ``directory``.

    Closed switches are recorded on the returned model but not merged; call
    :func:`merge_switches` before solving.
    """
    directory = Path(directory)
    tables = {}
    for name, (fname, header) in FILES.items():
        path = directory / fname
        if not path.is_file():
            if name in OPTIONAL_FILES:
                continue
            raise FeederFormatError(f"missing input file {path}", "missing-file")
        tables[name] = _read_table(path, header)

    general = GeneralData.from_rows(tuple(tuple(r) for r in tables["general"]))
    configs = {}
    for cfg in _parse_rows("configs", tables["configs"], LineConfig.from_row):
        if cfg.config_id in configs:
            raise FeederFormatError(f"config {cfg.config_id} defined twice", "invalid-value")
        configs[cfg.config_id] = cfg
    segments = _parse_rows("lines", tables["lines"], LineSegment.from_row)
    seen = set()
    for s in segments:
        if s.config_id not in configs:
            raise FeederFormatError(
                f"segment {s.from_bus}-{s.to_bus} references undefined config {s.config_id}",
                "dangling-config-reference",
            )
        if s.key in seen or s.from_bus == s.to_bus:
            raise FeederFormatError(f"duplicate segment {s.from_bus}-{s.to_bus}", "duplicate-segment")
        seen.add(s.key)
    loads = _parse_rows("loads", tables["loads"], SpotLoad.from_row)
    for ld in loads:
        if not ld.phases_used:
            raise FeederFormatError(f"load at bus {ld.bus} has no nonzero phase", "invalid-value")
    switches = _parse_rows("switches", tables["switches"], SwitchLink.from_row)
    coords = None
    if "coords" in tables:
        coords = tuple(_parse_rows("coords", tables["coords"], NodeCoord.from_row))
    return FeederModel(
        general=general,
        configs=configs,
        segments=tuple(segments),
        loads=tuple(loads),
        switches=tuple(switches),
        coords=coords,
    )


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_feeder(model: FeederModel, directory: str | Path) -> None:
    """Write ``model`` back to the six-file format (inverse of parse_feeder)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_csv(directory / "general.csv", ("General Data", ""), model.general.to_rows())
    _write_csv(directory / "lines.csv", LINES_HEADER, [s.to_row() for s in model.segments])
    _write_csv(directory / "configs.csv", CONFIGS_HEADER, [c.to_row() for c in model.configs.values()])
    _write_csv(directory / "loads.csv", LOADS_HEADER, [ld.to_row() for ld in model.loads])
    _write_csv(directory / "switches.csv", SWITCHES_HEADER, [s.to_row() for s in model.switches])
    if model.coords is not None:
        _write_csv(directory / "coords.csv", COORDS_HEADER, [c.to_row() for c in model.coords])


def model_to_dict(model: FeederModel) -> dict:
    """Normalized JSON-ready dump of a model."""
    g = model.general
    return {
        "general": {
            "slack_bus": g.slack_bus,
            "v_nom_kv": g.v_nom_kv,
            "slack_mag_pu": list(g.slack_mag_pu),
            "slack_ang_deg": list(g.slack_ang_deg),
            "taps": [{"from": a, "to": b, "ratio": list(t)} for (a, b), t in sorted(g.taps.items())],
        },
        "configs": [
            {
                "id": c.config_id,
                "is_line": c.is_line,
                "phasing": [PHASES[i] for i in c.phasing],
                "r_ohm_per_mile": c.r_ohm_per_mile.tolist(),
                "x_ohm_per_mile": c.x_ohm_per_mile.tolist(),
                "b_usiemens_per_mile": c.b_usiemens_per_mile.tolist(),
            }
            for c in model.configs.values()
        ],
        "segments": [
            {"from": s.from_bus, "to": s.to_bus, "length_ft": s.length_ft, "config": s.config_id}
            for s in model.segments
        ],
        "loads": [
            {
                "bus": ld.bus,
                "connection": "wye" if ld.wye else "delta",
                "zip": ld.zip_kind,
                "p_kw": list(ld.p_kw),
                "q_kvar": list(ld.q_kvar),
            }
            for ld in model.loads
        ],
        "switches": [{"a": s.bus_a, "b": s.bus_b, "closed": s.closed} for s in model.switches],
        "aliases": {str(k): v for k, v in sorted(model.aliases.items())},
        "buses": list(model.buses),
    }


def default_dataset_path() -> Path:
    return Path(__file__).parent / "data" / "ieee123"


def load_default_feeder(merged: bool = True) -> FeederModel:
    model = parse_feeder(default_dataset_path())
    return merge_switches(model) if merged else model


# --------------------------------------------------------------------------
# impedances


def branch_impedance(segment: LineSegment, config: LineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Series impedance (ohm) and total shunt susceptance (micro-siemens) of a line."""
    if not config.is_line:
        raise FeederFormatError(
            f"config {config.config_id} is a transformer; use transformer_impedance", "transformer-config-passed"
        )
    scale = segment.length_ft / FEET_PER_MILE
    z = (config.r_ohm_per_mile + 1j * config.x_ohm_per_mile) * scale
    b = config.b_usiemens_per_mile * scale
    return z, b


def transformer_impedance(config: LineConfig, general: GeneralData) -> np.ndarray:
    """Series impedance (ohm) of a transformer config whose entries are per unit."""
    return (config.r_ohm_per_mile + 1j * config.x_ohm_per_mile) * general.z_base


def segment_impedance(model: FeederModel, segment: LineSegment) -> tuple[np.ndarray, np.ndarray]:
    """Series Z (ohm) and shunt B (micro-siemens) for any segment kind."""
    cfg = model.configs[segment.config_id]
    if cfg.is_line:
        return branch_impedance(segment, cfg)
    return transformer_impedance(cfg, model.general), np.zeros((3, 3))


# --------------------------------------------------------------------------
# switches and validation


class _UnionFind:
    def __init__(self):
        self.parent: dict[int, int] = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def _tree_path(edges: dict[int, set[int]], a: int, b: int) -> list[int]:
    prev = {a: None}
    queue = deque([a])
    while queue:
        u = queue.popleft()
        if u == b:
            break
        for v in sorted(edges.get(u, ())):
            if v not in prev:
                prev[v] = u
                queue.append(v)
    path = [b]
    while prev.get(path[-1]) is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def merge_switches(model: FeederModel) -> FeederModel:
    """Identify the two buses of every closed switch.

    Each group of identified buses is represented by the slack bus if it is in
    the group, otherwise by its lowest id, so the result does not depend on the
    order of the switch list.
    """
    closed = [s for s in model.switches if s.closed]
    if not closed:
        return model
    uf = _UnionFind()
    for sw in closed:
        a, b = model.resolve(sw.bus_a), model.resolve(sw.bus_b)
        if not uf.union(a, b):
            raise TopologyError(
                f"switch {sw.bus_a}-{sw.bus_b} closes a loop: buses already identified", "merge-creates-cycle"
            )
    groups: dict[int, list[int]] = {}
    for bus in list(uf.parent):
        groups.setdefault(uf.find(bus), []).append(bus)
    rep = {}
    for members in groups.values():
        r = model.slack_bus if model.slack_bus in members else min(members)
        for m in members:
            rep[m] = r

    def m(bus):
        return rep.get(bus, bus)

    aliases = {k: m(v) for k, v in model.aliases.items()}
    aliases.update({b: r for b, r in rep.items() if b != r})

    check = _UnionFind()
    forest: dict[int, set[int]] = {}
    segments = []
    for s in model.segments:
        a, b = m(s.from_bus), m(s.to_bus)
        if a == b or not check.union(a, b):
            loop = [a] if a == b else _tree_path(forest, a, b)
            raise TopologyError(
                f"merging closed switches creates a loop {loop + [loop[0]]} via segment {s.from_bus}-{s.to_bus}",
                "merge-creates-cycle",
            )
        forest.setdefault(a, set()).add(b)
        forest.setdefault(b, set()).add(a)
        segments.append(replace(s, from_bus=a, to_bus=b) if (a, b) != (s.from_bus, s.to_bus) else s)
    loads = tuple(replace(ld, bus=m(ld.bus)) if m(ld.bus) != ld.bus else ld for ld in model.loads)
    return replace(
        model,
        segments=tuple(segments),
        loads=loads,
        switches=tuple(s for s in model.switches if not s.closed),
        aliases=aliases,
    )


@dataclass(frozen=True)
class Finding:
    kind: str  # connectivity | radiality | phase-consistency
    message: str


def validate_topology(model: FeederModel) -> list[Finding]:
    """Structural findings for ``model``; an empty list means valid."""
    findings: list[Finding] = []
    try:
        model = merge_switches(model)
    except TopologyError as exc:
        return [Finding("radiality", str(exc))]

    adj = model.adjacency
    slack = model.slack_bus
    if model.segments and not adj[slack]:
        findings.append(Finding("connectivity", f"slack bus {slack} has no segments"))

    seen: set[int] = set()
    components = []
    for start in [slack] + list(model.buses):
        if start in seen:
            continue
        comp = []
        queue = deque([start])
        seen.add(start)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v, _ in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        components.append(sorted(comp))
    for comp in components[1:]:
        findings.append(Finding("connectivity", f"buses {comp} are not connected to slack {slack}"))
    for ld in model.loads:
        if ld.bus not in adj:
            findings.append(Finding("connectivity", f"load at bus {ld.bus} is not on any segment"))

    main = set(components[0])
    n_edges = sum(1 for s in model.segments if s.from_bus in main)
    if n_edges != len(main) - 1:
        findings.append(
            Finding("radiality", f"{n_edges} segments for {len(main)} buses; expected {len(main) - 1}")
        )
        return findings

    # phase consistency on the slack-rooted spanning tree
    parent: dict[int, int] = {}
    order = [slack]
    for u in order:
        for v, _ in adj[u]:
            if v != parent.get(u) and v not in parent and v != slack:
                parent[v] = u
                order.append(v)
    needed: dict[int, set[int]] = {b: set() for b in order}
    for ld in model.loads:
        if ld.bus in needed:
            needed[ld.bus] |= ld.phases_used
    for v in reversed(order[1:]):
        u = parent[v]
        seg = model.segment_between(u, v)
        have = set(model.configs[seg.config_id].phasing)
        if not needed[v] <= have:
            missing = "".join(PHASES[i] for i in sorted(needed[v] - have))
            findings.append(
                Finding(
                    "phase-consistency",
                    f"segment {seg.from_bus}-{seg.to_bus} (config {seg.config_id}) lacks phase {missing} "
                    f"loaded downstream",
                )
            )
        # report only the deepest violation along a path
        needed[u] |= needed[v] & have
    return findings


def feeder_from_edges(
    edges: Iterable[tuple[int, int]],
    slack: int | None = None,
    length_ft: float = 500.0,
    config: LineConfig | None = None,
    loads: Iterable[SpotLoad] = (),
) -> FeederModel:
    """Small synthetic feeder on a given edge list, all segments sharing one config.

    The config defaults to the bundled dataset's three-phase config 1 and the
    general data to the bundled 4.16 kV slack.
    """
    edges = [tuple(e) for e in edges]
    base = parse_feeder(default_dataset_path())
    cfg = config or replace(base.configs[1], text=None)
    if slack is None:
        slack = min(min(e) for e in edges) if edges else 1
    general = replace(base.general, slack_bus=slack, taps={}, text=None)
    segs = tuple(LineSegment(a, b, length_ft, cfg.config_id) for a, b in edges)
    return FeederModel(general, {cfg.config_id: cfg}, segs, tuple(loads))
