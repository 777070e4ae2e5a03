"""Topological PMU observability, placement and zone partitioning.

Observability rule: a PMU observes its own bus voltage and the currents of up
to ``channels`` incident branches.  A measured branch current together with
an observed endpoint voltage yields the other endpoint (Ohm's law).  With the
optional zero-injection rule, a zero-injection bus whose own voltage and all
but one neighbour are observed also reveals the remaining neighbour.

Zones are the hop-distance Voronoi cells of the PMU buses (ties to the
lowest root id).  Every branch between two zones must be current-measured by
a PMU on one of its ends.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import ObservabilityError, TopologyError
from .feeder import FeederModel

__all__ = [
    "PmuDevice",
    "Placement",
    "ZonePartition",
    "assign_channels",
    "observable_set",
    "brute_force_placement",
    "greedy_placement",
    "partition_zones",
    "placement_to_dict",
    "placement_from_dict",
]

ORACLE_MAX_BUSES = 20


@dataclass(frozen=True, order=True)
class PmuDevice:
    bus: int
    channels: float = math.inf

    def __post_init__(self):
        if not self.channels >= 0:
            raise ValueError("channels must be non-negative")


@dataclass(frozen=True)
class Placement:
    devices: tuple[PmuDevice, ...]

    def __post_init__(self):
        devices = tuple(sorted(self.devices))
        buses = [d.bus for d in devices]
        if len(set(buses)) != len(buses):
            raise ValueError("at most one PMU per bus")
        object.__setattr__(self, "devices", devices)

    @classmethod
    def at(cls, buses: Iterable[int], channels: float = math.inf) -> "Placement":
        return cls(tuple(PmuDevice(b, channels) for b in buses))

    @property
    def buses(self) -> tuple[int, ...]:
        return tuple(d.bus for d in self.devices)

    def __len__(self):
        return len(self.devices)

    def channels_at(self, bus: int) -> float:
        for d in self.devices:
            if d.bus == bus:
                return d.channels
        raise KeyError(bus)


@dataclass(frozen=True)
class ZonePartition:
    zones: tuple[tuple[int, frozenset[int]], ...]  # (root PMU bus, members), ordered by root
    boundary: tuple[tuple[int, int, int], ...]  # (bus_a, bus_b, measuring PMU bus)
    measured: Mapping[int, tuple[int, ...]] = field(default_factory=dict)  # PMU bus -> measured neighbours

    def zone_of(self, bus: int) -> int:
        for k, (_, members) in enumerate(self.zones):
            if bus in members:
                return k
        raise KeyError(bus)


def _check_buses(model: FeederModel, placement: Placement):
    unknown = [b for b in placement.buses if b not in model.adjacency]
    if unknown:
        raise ObservabilityError(f"PMU at unknown bus {unknown}", "unknown-bus")


def _zero_injection_buses(model: FeederModel) -> set[int]:
    loaded = {ld.bus for ld in model.loads}
    return {b for b in model.buses if b not in loaded and b != model.slack_bus}


class _ChannelMatcher:
    """Maximum assignment of PMU channels to distinct unmeasured neighbours.

    Augmenting paths over the PMU/neighbour bipartite graph, with PMUs and
    neighbours visited in ascending bus id so the matching is canonical.  A
    vertex that has no augmenting path never regains one, so adding a PMU only
    needs augmentation from the new PMU and from the PMU whose channel it frees.
    """

    def __init__(self, model: FeederModel, caps: Mapping[int, float], covered: Iterable[int] = ()):
        self.model = model
        self.caps = dict(caps)
        self.fixed = set(covered)
        self.owner: dict[int, int] = {}
        self.load = {p: 0 for p in self.caps}
        for p in sorted(self.caps):
            self._fill(p)

    def _target(self, n: int) -> bool:
        return n not in self.caps and n not in self.fixed

    def _augment(self, p: int, seen: set) -> bool:
        for n in self.model.neighbors(p):
            if n in seen or not self._target(n):
                continue
            seen.add(n)
            q = self.owner.get(n)
            if q is None or self._augment(q, seen):
                self.owner[n] = p
                return True
        return False

    def _fill(self, p: int):
        while self.load[p] < self.caps[p] and self._augment(p, set()):
            self.load[p] += 1

    def with_pmu(self, bus: int, cap: float) -> "_ChannelMatcher":
        new = object.__new__(_ChannelMatcher)
        new.model, new.fixed = self.model, self.fixed
        new.caps = {**self.caps, bus: cap}
        new.owner = dict(self.owner)
        new.load = {**self.load, bus: 0}
        freed = new.owner.pop(bus, None)
        if freed is not None:
            new.load[freed] -= 1
        new._fill(bus)
        if freed is not None:
            new._fill(freed)
        return new

    def covered(self) -> set[int]:
        return set(self.caps) | self.fixed | set(self.owner)


def assign_channels(
    model: FeederModel, placement: Placement, required: Mapping[int, Iterable[int]] | None = None
) -> dict[int, tuple[int, ...]]:
    """Choose which incident branches each PMU measures.

    Required branches (e.g. zone boundaries) are taken first.  Remaining
    channels maximize the number of newly covered non-PMU neighbours (a
    maximum bipartite assignment, the optimum over all subset choices), and
    any spare channels go to the lowest-id unmeasured neighbours.
    """
    _check_buses(model, placement)
    required = {b: tuple(sorted(set(v))) for b, v in (required or {}).items()}
    chosen: dict[int, list[int]] = {}
    budget: dict[int, float] = {}
    for dev in placement.devices:
        req = list(required.get(dev.bus, ()))
        if len(req) > dev.channels:
            raise ObservabilityError(
                f"PMU at {dev.bus} needs {len(req)} channels, has {dev.channels}", "uncoverable-boundary"
            )
        chosen[dev.bus] = req
        budget[dev.bus] = dev.channels - len(req)

    if all(budget[d.bus] >= len(model.adjacency[d.bus]) for d in placement.devices):
        # unlimited budget: measure every incident branch
        return {d.bus: tuple(model.neighbors(d.bus)) for d in placement.devices}

    pre = {n for v in chosen.values() for n in v}
    match = _ChannelMatcher(model, budget, pre)
    for n, p in match.owner.items():
        chosen[p].append(n)
        budget[p] -= 1
    for dev in placement.devices:
        for n in model.neighbors(dev.bus):
            if budget[dev.bus] <= 0:
                break
            if n not in chosen[dev.bus]:
                chosen[dev.bus].append(n)
                budget[dev.bus] -= 1
    return {b: tuple(sorted(v)) for b, v in chosen.items()}


def _closure(model: FeederModel, measured: Mapping[int, tuple[int, ...]], zero_injection: bool) -> set[int]:
    obs = set(measured)
    for nbrs in measured.values():
        obs.update(nbrs)
    if zero_injection:
        zi = _zero_injection_buses(model)
        changed = True
        while changed:
            changed = False
            for b in sorted(zi):
                group = [b] + model.neighbors(b)
                missing = [x for x in group if x not in obs]
                if len(missing) == 1:
                    obs.add(missing[0])
                    changed = True
    return obs


def observable_set(
    model: FeederModel, placement: Placement, zero_injection: bool = False, measured=None
) -> set[int]:
    """Buses whose voltage follows from the PMU measurements."""
    if measured is None:
        measured = assign_channels(model, placement)
    return _closure(model, measured, zero_injection)


def _fully_observable(model, placement, zero_injection=False) -> bool:
    return len(observable_set(model, placement, zero_injection)) == len(model.buses)


def brute_force_placement(
    model: FeederModel, channels_per_pmu: float = math.inf, zero_injection: bool = False
) -> list[Placement]:
    """All minimum-cardinality fully observable placements, sorted by bus ids."""
    buses = model.buses
    if len(buses) > ORACLE_MAX_BUSES:
        raise ObservabilityError(
            f"{len(buses)} buses is too many for exhaustive search (max {ORACLE_MAX_BUSES})", "too-large-for-oracle"
        )
    for size in range(1, len(buses) + 1):
        found = [
            Placement.at(combo, channels_per_pmu)
            for combo in itertools.combinations(buses, size)
            if _fully_observable(model, Placement.at(combo, channels_per_pmu), zero_injection)
        ]
        if found:
            return sorted(found, key=lambda p: p.buses)
    raise ObservabilityError("no placement observes the network", "unobservable-input")


def greedy_placement(
    model: FeederModel,
    channels_per_pmu: float = math.inf,
    max_zone_size: int | None = None,
    *,
    initial: Placement | None = None,
    zone_ready: bool = False,
    zero_injection: bool = False,
) -> Placement:
    """Greedy maximum-gain placement until the network is fully observable.

    With ``max_zone_size`` (or ``zone_ready``) PMUs keep being added until
    :func:`partition_zones` accepts the placement and, if given, its largest
    zone has at most ``max_zone_size`` buses.
    """
    if max_zone_size is not None and max_zone_size < 1:
        raise ObservabilityError("zone size bound must be at least 1", "infeasible-zone-bound")
    try:
        model.tree
    except TopologyError as exc:
        raise ObservabilityError(f"greedy placement needs a connected radial model: {exc}", "not-connected")
    chosen = list(initial.buses) if initial is not None else []
    devices = {d.bus: d for d in initial.devices} if initial is not None else {}

    def current():
        return Placement(tuple(devices.get(b, PmuDevice(b, channels_per_pmu)) for b in chosen))

    obs = observable_set(model, current(), zero_injection) if chosen else set()
    n = len(model.buses)
    while len(obs) < n:
        best, best_gain, best_obs = None, 0, obs
        unseen = set(model.buses) - obs
        base = current().devices
        # a new PMU adds itself plus at most one bus per channel (or one freed
        # channel elsewhere), so candidates are scanned lazily by that bound
        cands = []
        for b in model.buses:
            if b in chosen:
                continue
            deg = len(model.adjacency[b])
            if zero_injection:
                bound = n
            elif b not in unseen and not unseen.intersection(model.neighbors(b)):
                continue
            else:
                bound = 1 + min(channels_per_pmu, deg)
            cands.append((-bound, b))
        match = None if zero_injection else _ChannelMatcher(model, {d.bus: d.channels for d in base})
        for neg_bound, b in sorted(cands):
            if -neg_bound < best_gain:
                break
            if match is None:
                trial = observable_set(model, Placement(base + (PmuDevice(b, channels_per_pmu),)), True)
            else:
                trial = match.with_pmu(b, channels_per_pmu).covered()
            gain = len(trial) - len(obs)
            if gain > best_gain:
                best, best_gain, best_obs = b, gain, trial
        if best is None:
            raise ObservabilityError("no PMU addition increases observability", "unobservable-input")
        chosen.append(best)
        obs = best_obs

    if max_zone_size is None and not zone_ready:
        return current()

    while True:
        try:
            part = partition_zones(model, current())
        except ObservabilityError as exc:
            branch = getattr(exc, "branch", None)
            free = [x for x in branch or () if x not in chosen]
            if not free and branch:
                # both ends already metered: relieve the first end's channels
                free = [x for x in model.neighbors(branch[0]) if x not in chosen]
            if not free:
                raise
            # a PMU at the unmetered end of the offending branch
            pick = min(free)
            chosen.append(pick)
            continue
        sizes = [len(m) for _, m in part.zones]
        if max_zone_size is None or max(sizes) <= max_zone_size:
            return current()
        k = max(range(len(sizes)), key=lambda i: (sizes[i], -part.zones[i][0]))
        root, members = part.zones[k]
        far = _hops(model, root)
        pick = max((b for b in members if b not in chosen), key=lambda b: (far[b], -b))
        chosen.append(pick)


def _hops(model: FeederModel, src: int) -> dict[int, int]:
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in model.neighbors(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _boundary_error(message, branch):
    exc = ObservabilityError(message, "uncoverable-boundary")
    exc.branch = branch
    return exc


def partition_zones(model: FeederModel, placement: Placement, zero_injection: bool = False) -> ZonePartition:
    """Assign every bus to its nearest PMU (hop count, ties to the lowest root id)."""
    if not placement.devices:
        raise ObservabilityError("empty placement", "unobservable-input")
    measured = assign_channels(model, placement)
    if len(_closure(model, measured, zero_injection)) != len(model.buses):
        raise ObservabilityError("placement does not observe every bus", "unobservable-input")
    roots = placement.buses
    dist = {r: _hops(model, r) for r in roots}
    owner = {}
    for b in model.buses:
        owner[b] = min(roots, key=lambda r: (dist[r].get(b, math.inf), r))

    pmu = set(roots)
    crossing = sorted(
        (min(s.from_bus, s.to_bus), max(s.from_bus, s.to_bus))
        for s in model.segments
        if owner[s.from_bus] != owner[s.to_bus]
    )
    boundary = []
    required: dict[int, list[int]] = {}
    needs_reassign = False
    for a, b in crossing:
        meter = next((p for p in (a, b) if p in pmu and (b if p == a else a) in measured[p]), None)
        if meter is None:
            ends = [p for p in (a, b) if p in pmu]
            if not ends:
                raise _boundary_error(f"boundary branch {a}-{b} has no PMU on either end", (a, b))
            spare = [p for p in ends if len(required.get(p, ())) < placement.channels_at(p)]
            meter = (spare or ends)[0]
            needs_reassign = True
        required.setdefault(meter, []).append(b if meter == a else a)
        if len(required[meter]) > placement.channels_at(meter):
            raise _boundary_error(f"PMU at {meter} has too few channels for its boundary branches", (a, b))
        boundary.append((a, b, meter))

    if needs_reassign:
        measured = assign_channels(model, placement, required)
        lost = set(model.buses) - _closure(model, measured, zero_injection)
        if lost:
            raise _boundary_error(
                "re-assigning channels to boundary branches loses observability of " + str(sorted(lost)),
                (min(lost), min(lost)),
            )

    zones = tuple((r, frozenset(b for b in model.buses if owner[b] == r)) for r in roots)
    return ZonePartition(zones, tuple(boundary), measured)


def placement_to_dict(model: FeederModel, placement: Placement, partition: ZonePartition | None = None) -> dict:
    measured = partition.measured if partition is not None else assign_channels(model, placement)
    out = {
        "devices": [
            {
                "bus": d.bus,
                "channels": "inf" if math.isinf(d.channels) else int(d.channels),
                "measured_branches": [[d.bus, n] for n in measured[d.bus]],
            }
            for d in placement.devices
        ],
        "observable": sorted(observable_set(model, placement, measured=measured)),
    }
    if partition is not None:
        out["zones"] = [{"root": r, "members": sorted(m)} for r, m in partition.zones]
        out["boundary"] = [{"a": a, "b": b, "pmu": p} for a, b, p in partition.boundary]
    return out


def placement_from_dict(d: dict) -> Placement:
    devs = []
    for item in d["devices"]:
        ch = item.get("channels", "inf")
        devs.append(PmuDevice(int(item["bus"]), math.inf if ch in ("inf", None) else float(ch)))
    return Placement(tuple(devs))
