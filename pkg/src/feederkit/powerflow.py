"""Unbalanced three-phase radial power flow (forward/backward sweep).

All internal arithmetic is in SI units (volts, amperes, ohms); per-unit values
only appear in reported magnitudes and mismatches.  A segment is modelled as a
pi section: series impedance with half of its shunt susceptance at each end.
An optional ideal per-phase regulator ratio sits at the sending end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import PowerFlowError, TopologyError
from .feeder import PHASES, FeederModel, SpotLoad, segment_impedance

__all__ = [
    "PhasorSet",
    "SweepOptions",
    "PowerFlowSolution",
    "load_current",
    "solve_power_flow",
    "kcl_residual",
    "Network",
    "compile_network",
]


@dataclass(frozen=True, eq=False)
class PhasorSet:
    """Per-bus, per-phase complex line-to-neutral voltages.

    ``values`` is an (n_bus, 3) complex array in volts; ``mask`` marks which
    phases exist at each bus.  Absent phases hold 0 and are never reported.
    """

    buses: tuple[int, ...]
    values: np.ndarray
    mask: np.ndarray
    v_base: float
    aliases: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_index", {b: i for i, b in enumerate(self.buses)})

    def index(self, bus: int) -> int:
        return self._index[self.aliases.get(bus, bus)]

    def __contains__(self, bus) -> bool:
        return self.aliases.get(bus, bus) in self._index

    def phases(self, bus: int) -> tuple[str, ...]:
        row = self.mask[self.index(bus)]
        return tuple(p for p, present in zip(PHASES, row) if present)

    def voltage(self, bus: int, phase: str) -> complex:
        i, k = self.index(bus), PHASES.index(phase)
        if not self.mask[i, k]:
            raise KeyError(f"bus {bus} has no phase {phase}")
        return complex(self.values[i, k])

    def magnitude_pu(self, bus: int, phase: str) -> float:
        return abs(self.voltage(bus, phase)) / self.v_base

    def angle_deg(self, bus: int, phase: str) -> float:
        return math.degrees(np.angle(self.voltage(bus, phase)))

    def rows(self, include_aliases: bool = True) -> Iterator[tuple[int, str, float, float]]:
        """(bus, phase, mag_pu, angle_deg) sorted by bus id then phase."""
        ids = set(self.buses)
        if include_aliases:
            ids |= set(self.aliases)
        for bus in sorted(ids):
            for ph in self.phases(bus):
                yield bus, ph, self.magnitude_pu(bus, ph), self.angle_deg(bus, ph)


@dataclass(frozen=True)
class SweepOptions:
    tolerance_pu: float = 1e-6
    max_iterations: int = 100
    flat_start: bool = True

    def __post_init__(self):
        if not self.tolerance_pu > 0:
            raise ValueError("tolerance_pu must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    voltages: PhasorSet
    iterations: int
    converged: bool
    max_mismatch_pu: float
    total_source_kw: float
    total_source_kvar: float
    total_load_kw: float
    total_load_kvar: float
    total_loss_kw: float
    total_loss_kvar: float
    total_shunt_kvar: float  # reactive generation of line charging
    mismatch_history: tuple[float, ...] = ()

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "max_mismatch_pu": self.max_mismatch_pu,
            "total_source_kw": self.total_source_kw,
            "total_source_kvar": self.total_source_kvar,
            "total_load_kw": self.total_load_kw,
            "total_load_kvar": self.total_load_kvar,
            "total_loss_kw": self.total_loss_kw,
            "total_loss_kvar": self.total_loss_kvar,
            "total_shunt_kvar": self.total_shunt_kvar,
        }


# --------------------------------------------------------------------------
# loads


def _zip_current(s: complex, v: complex, v_nom: float, kind: str) -> complex:
    if s == 0:
        return 0j
    if v == 0:
        raise PowerFlowError("zero voltage at a loaded terminal", "zero-voltage-at-load")
    if kind == "PQ":
        return (s / v).conjugate()
    if kind == "I":
        return abs(s) / v_nom * np.exp(1j * (np.angle(v) - np.angle(s)))
    # constant impedance: Z = v_nom^2 / conj(S)
    return v * s.conjugate() / v_nom**2


def load_current(load: SpotLoad, v: np.ndarray, v_nominal: float = 4160.0 / math.sqrt(3.0)) -> np.ndarray:
    """Per-phase line currents (A) drawn by ``load`` at phase voltages ``v`` (V).

    ``v_nominal`` is the line-to-neutral rated voltage; delta legs use
    ``sqrt(3) * v_nominal``.
    """
    v = np.asarray(v, dtype=complex)
    s = load.s_va
    if load.wye:
        return np.array([_zip_current(s[k], v[k], v_nominal, load.zip_kind) for k in range(3)])
    v_ll = math.sqrt(3.0) * v_nominal
    legs = v - np.roll(v, -1)  # ab, bc, ca
    i_leg = np.array([_zip_current(s[k], legs[k], v_ll, load.zip_kind) for k in range(3)])
    return i_leg - np.roll(i_leg, 1)  # a = ab - ca, b = bc - ab, c = ca - bc


# --------------------------------------------------------------------------
# compiled network


@dataclass(frozen=True, eq=False)
class Network:
    """Array form of a merged radial model, indexed in breadth-first order."""

    model: FeederModel
    buses: tuple[int, ...]
    parent: np.ndarray  # index of parent, -1 for the root
    mask: np.ndarray  # (n, 3) phase presence
    z: np.ndarray  # (n, 3, 3) series impedance of the incoming segment
    y_half: np.ndarray  # (n, 3, 3) half shunt admittance (S) of the incoming segment
    tap: np.ndarray  # (n, 3) regulator ratio of the incoming segment
    children: tuple[tuple[int, ...], ...]
    loads: tuple[tuple[SpotLoad, ...], ...]
    v_slack: np.ndarray
    v_base: float
    i_base: float

    @property
    def n(self) -> int:
        return len(self.buses)

    def index(self, bus: int) -> int:
        return self.buses.index(bus)

    def load_currents(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n, 3), dtype=complex)
        for i, lds in enumerate(self.loads):
            for ld in lds:
                out[i] += load_current(ld, v[i], self.v_base)
        return out * self.mask

    def series_admittance(self, i: int) -> np.ndarray:
        """Inverse of the incoming series impedance restricted to present phases."""
        ph = np.flatnonzero(self.mask[i])
        ys = np.zeros((3, 3), dtype=complex)
        ys[np.ix_(ph, ph)] = np.linalg.inv(self.z[i][np.ix_(ph, ph)])
        return ys


def compile_network(model: FeederModel) -> Network:
    try:
        tree = model.tree
    except TopologyError:
        raise
    buses = tree.order
    pos = {b: i for i, b in enumerate(buses)}
    n = len(buses)
    parent = np.full(n, -1)
    mask = np.zeros((n, 3), dtype=bool)
    z = np.zeros((n, 3, 3), dtype=complex)
    y_half = np.zeros((n, 3, 3), dtype=complex)
    tap = np.ones((n, 3))
    for i, bus in enumerate(buses):
        mask[i, list(tree.phases[bus])] = True
        if bus == tree.root:
            continue
        seg = tree.incoming[bus]
        p = tree.parent[bus]
        parent[i] = pos[p]
        zs, b = segment_impedance(model, seg)
        z[i] = zs
        y_half[i] = 0.5j * b * 1e-6
        taps = model.general.taps.get((seg.from_bus, seg.to_bus)) or model.general.taps.get((p, bus))
        if taps is not None:
            tap[i] = taps
    by_bus = model.loads_by_bus()
    unknown = set(by_bus) - set(buses)
    if unknown:
        raise TopologyError(f"loads at buses not in the network: {sorted(unknown)}", "not-radial")
    return Network(
        model=model,
        buses=buses,
        parent=parent,
        mask=mask,
        z=z,
        y_half=y_half,
        tap=tap,
        children=tuple(tuple(pos[c] for c in tree.children[b]) for b in buses),
        loads=tuple(tuple(by_bus.get(b, ())) for b in buses),
        v_slack=model.general.slack_phasors(),
        v_base=model.general.v_base_ln,
        i_base=model.general.i_base,
    )


def _backward(net: Network, v: np.ndarray):
    """Series currents of every incoming segment and sending-end currents."""
    i_load = net.load_currents(v)
    i_series = np.zeros((net.n, 3), dtype=complex)
    i_send = np.zeros((net.n, 3), dtype=complex)  # into the line at the sending end, line side
    upstream = np.zeros((net.n, 3), dtype=complex)  # reflected to the parent bus
    for i in range(net.n - 1, 0, -1):
        acc = i_load[i] + net.y_half[i] @ v[i]
        for c in net.children[i]:
            acc = acc + upstream[c]
        i_series[i] = acc * net.mask[i]
        vs = net.tap[i] * v[net.parent[i]]
        i_send[i] = (i_series[i] + net.y_half[i] @ vs) * net.mask[i]
        upstream[i] = net.tap[i] * i_send[i]
    root_total = i_load[0] + sum((upstream[c] for c in net.children[0]), np.zeros(3, complex))
    return i_series, i_send, i_load, root_total


def _forward(net: Network, v: np.ndarray, i_series: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    out[0] = v[0]
    for i in range(1, net.n):
        out[i] = (net.tap[i] * out[net.parent[i]] - net.z[i] @ i_series[i]) * net.mask[i]
    return out


def solve_power_flow(model: FeederModel, opts: SweepOptions | None = None) -> PowerFlowSolution:
    """Solve ``model`` (already switch-merged) by forward/backward sweep.

    The slack is held at the general-data phasors.  Returns the last iterate
    with ``converged=False`` if the tolerance is not met within
    ``opts.max_iterations`` sweeps.
    """
    opts = opts or SweepOptions()
    if any(s.closed for s in model.switches):
        raise TopologyError("merge closed switches before solving", "not-radial")
    net = compile_network(model)
    v = np.where(net.mask, net.v_slack[None, :], 0j)

    history = []
    converged = False
    it = 0
    for it in range(1, opts.max_iterations + 1):
        i_series, _, _, _ = _backward(net, v)
        v_new = _forward(net, v, i_series)
        delta = float(np.max(np.abs(v_new - v))) / net.v_base
        history.append(delta)
        v = v_new
        if delta <= opts.tolerance_pu:
            converged = True
            break

    i_series, _, i_load, root_total = _backward(net, v)
    s_source = np.sum(v[0] * np.conj(root_total))
    s_load = np.sum(v * np.conj(i_load))
    s_loss = sum(np.sum((net.z[i] @ i_series[i]) * np.conj(i_series[i])) for i in range(1, net.n))
    q_shunt = 0.0
    for i in range(1, net.n):
        vs = net.tap[i] * v[net.parent[i]]
        for vv in (vs, v[i]):
            q_shunt += -np.sum(vv * np.conj(net.y_half[i] @ vv)).imag

    voltages = PhasorSet(net.buses, v, net.mask.copy(), net.v_base, dict(model.aliases))
    return PowerFlowSolution(
        voltages=voltages,
        iterations=it,
        converged=converged,
        max_mismatch_pu=history[-1],
        total_source_kw=float(s_source.real) / 1e3,
        total_source_kvar=float(s_source.imag) / 1e3,
        total_load_kw=float(s_load.real) / 1e3,
        total_load_kvar=float(s_load.imag) / 1e3,
        total_loss_kw=float(np.real(s_loss)) / 1e3,
        total_loss_kvar=float(np.imag(s_loss)) / 1e3,
        total_shunt_kvar=float(q_shunt) / 1e3,
        mismatch_history=tuple(history),
    )


def kcl_residual(model: FeederModel, solution: PowerFlowSolution | PhasorSet) -> float:
    """Worst per-unit current mismatch over non-slack bus phases.

    Branch currents are recomputed from the voltages by Ohm's law, independent
    of the sweep's own current bookkeeping.
    """
    ps = solution.voltages if isinstance(solution, PowerFlowSolution) else solution
    net = compile_network(model)
    v = np.array([ps.values[ps.index(b)] for b in net.buses]) * net.mask
    i_load = net.load_currents(v)
    arriving = np.zeros((net.n, 3), dtype=complex)  # series current at receiving end
    leaving = np.zeros((net.n, 3), dtype=complex)  # sending-end current seen by the parent
    for i in range(1, net.n):
        vs = net.tap[i] * v[net.parent[i]]
        i_ser = net.series_admittance(i) @ (vs - v[i])
        arriving[i] = i_ser
        leaving[i] = net.tap[i] * (i_ser + net.y_half[i] @ vs) * net.mask[i]
    worst = 0.0
    for i in range(1, net.n):
        out = i_load[i] + net.y_half[i] @ v[i]
        for c in net.children[i]:
            out = out + leaving[c]
        r = (arriving[i] - out) * net.mask[i]
        worst = max(worst, float(np.max(np.abs(r))) / net.i_base)
    return worst
