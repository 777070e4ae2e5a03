"""Weighted least-squares state estimation from PMU phasors and pseudo-injections.

Everything here is in per unit: voltages on the line-to-neutral base,
currents on the per-phase base current and powers on one third of the
three-phase base.  The state is the rectangular voltage ``e + jf`` of every
present bus phase, the slack included.

Measurement kinds

* ``pmu-voltage``: bus voltage phasor, linear in the state.
* ``pmu-current``: current leaving the PMU bus into one branch, linear.
* ``pseudo-injection``: load P and Q of one bus phase, ``S = -V conj(I_net)``
  where ``I_net`` is the current the bus pushes into its branches.

Zone solves use the zone's buses plus the far end of every boundary branch,
so a PMU-metered boundary current enters the neighbouring zone as a branch
current measurement.  Pseudo-injections are kept only for the zone's own
buses because only those have all their branches inside the block.
"""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import EstimationError, ObservabilityError
from .feeder import PHASES, S_BASE_KVA, FeederModel
from .placement import Placement, ZonePartition, assign_channels, observable_set, partition_zones
from .powerflow import PhasorSet, PowerFlowSolution, compile_network

__all__ = [
    "KINDS",
    "Measurement",
    "MeasurementSet",
    "NoiseSpec",
    "EstimationOptions",
    "EstimationResult",
    "EstimationReport",
    "generate_measurements",
    "wls_linear_pmu",
    "wls_gauss_newton",
    "estimate_parallel",
    "weighted_sse",
    "error_report",
    "write_measurements_csv",
    "read_measurements_csv",
    "write_estimate_csv",
]

KINDS = ("pmu-voltage", "pmu-current", "pseudo-injection")
SIGMA_FLOOR = 1e-9


@dataclass(frozen=True)
class Measurement:
    kind: str
    bus: int
    phase: int  # 0, 1, 2 for A, B, C
    value: complex  # phasor, or P + jQ for pseudo-injections
    sigma: float
    to_bus: int | None = None  # far end of a measured branch

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if (self.kind == "pmu-current") != (self.to_bus is not None):
            raise ValueError("only branch currents carry a far-end bus")

    @property
    def sort_key(self):
        return (self.bus, self.phase, KINDS.index(self.kind), -1 if self.to_bus is None else self.to_bus)

    @property
    def location(self) -> str:
        return str(self.bus) if self.to_bus is None else f"{self.bus}-{self.to_bus}"

    def buses(self) -> tuple[int, ...]:
        return (self.bus,) if self.to_bus is None else (self.bus, self.to_bus)


@dataclass(frozen=True)
class MeasurementSet:
    measurements: tuple[Measurement, ...]
    seed: int | None = None
    truth_id: str = ""

    def __post_init__(self):
        ms = tuple(sorted(self.measurements, key=lambda m: m.sort_key))
        object.__setattr__(self, "measurements", ms)

    def __len__(self):
        return len(self.measurements)

    def __iter__(self):
        return iter(self.measurements)

    @property
    def scalar_count(self) -> int:
        return 2 * len(self.measurements)

    def of_kind(self, *kinds: str) -> "MeasurementSet":
        return MeasurementSet(tuple(m for m in self if m.kind in kinds), self.seed, self.truth_id)

    def scaled(self, factor: float) -> "MeasurementSet":
        """Same values with every sigma multiplied by ``factor``."""
        return MeasurementSet(
            tuple(Measurement(m.kind, m.bus, m.phase, m.value, m.sigma * factor, m.to_bus) for m in self),
            self.seed,
            self.truth_id,
        )


@dataclass(frozen=True)
class NoiseSpec:
    sigma_v: float = 0.001
    sigma_i: float = 0.002
    pseudo_fraction: float = 0.10
    add_noise: bool = True

    def floored(self) -> tuple["NoiseSpec", list[str]]:
        findings = []
        vals = {}
        for name in ("sigma_v", "sigma_i", "pseudo_fraction"):
            v = getattr(self, name)
            if not v > 0:
                findings.append(f"{name}={v} is not positive; floored to {SIGMA_FLOOR}")
                v = SIGMA_FLOOR
            vals[name] = v
        return NoiseSpec(add_noise=self.add_noise, **vals), findings


@dataclass(frozen=True)
class EstimationOptions:
    tolerance: float = 1e-6
    max_iterations: int = 50
    init: str = "linear"  # "linear" (PMU-only solve, flat start fallback) or "flat"
    workers: int | None = None


@dataclass(frozen=True, eq=False)
class EstimationResult:
    voltages: PhasorSet
    chi_square: float
    degrees_of_freedom: int
    zone_stats: tuple[dict, ...] = ()
    variances: np.ndarray | None = field(default=None, repr=False)  # (n, 3) complex: var(e) + j var(f)
    converged: bool = True

    @property
    def iterations(self) -> int:
        return max((z["iterations"] for z in self.zone_stats), default=0)


@dataclass(frozen=True)
class EstimationReport:
    rows: tuple[tuple[int, str, float, float], ...]  # bus, phase, magnitude error %, angle error deg
    max_magnitude_pct: float
    mean_magnitude_pct: float
    max_angle_deg: float
    mean_angle_deg: float

    def to_dict(self) -> dict:
        return {
            "max_magnitude_error_pct": self.max_magnitude_pct,
            "mean_magnitude_error_pct": self.mean_magnitude_pct,
            "max_angle_error_deg": self.max_angle_deg,
            "mean_angle_error_deg": self.mean_angle_deg,
            "rows": [
                {"bus": b, "phase": p, "magnitude_error_pct": e, "angle_error_deg": a} for b, p, e, a in self.rows
            ],
        }


# --------------------------------------------------------------------------
# network in per unit


class _Grid:
    """Per-unit branch admittances and the measurement coefficient rows."""

    def __init__(self, model: FeederModel):
        net = compile_network(model)
        self.model = model
        self.net = net
        self.pos = {b: i for i, b in enumerate(net.buses)}
        self.mask = {b: net.mask[i] for b, i in self.pos.items()}
        k = net.v_base / net.i_base
        self.branch = {}  # (u, v) -> (coef on u, coef on v), 3x3 each: current leaving u toward v
        for i in range(1, net.n):
            child, parent = net.buses[i], net.buses[net.parent[i]]
            ys = net.series_admittance(i) * k
            yh = net.y_half[i] * k
            t = np.diag(net.tap[i])
            self.branch[(parent, child)] = (t @ (ys + yh) @ t, -t @ ys)
            self.branch[(child, parent)] = (ys + yh, -ys @ t)
        self.branch_phases = {}
        for i in range(1, net.n):
            child, parent = net.buses[i], net.buses[net.parent[i]]
            ph = tuple(np.flatnonzero(net.mask[i]))
            self.branch_phases[(parent, child)] = ph
            self.branch_phases[(child, parent)] = ph

    def injection_rows(self, bus: int):
        """Coefficients of the current leaving ``bus`` into all its branches."""
        out = {}
        for nb in self.model.neighbors(bus):
            cu, cv = self.branch[(bus, nb)]
            for b, c in ((bus, cu), (nb, cv)):
                out[b] = out.get(b, 0) + c
        return out

    def truth_values(self, truth: PhasorSet) -> dict[int, np.ndarray]:
        return {b: truth.values[truth.index(b)] / truth.v_base for b in self.pos}


def _rated_phase_power(model: FeederModel, bus: int) -> np.ndarray:
    """Rated |S| per phase in per unit; delta legs split evenly over their phases."""
    out = np.zeros(3)
    base = S_BASE_KVA * 1000.0 / 3.0
    for ld in model.loads_by_bus().get(bus, ()):
        mags = np.abs(ld.s_va) / base
        if ld.wye:
            out += mags
        else:
            for leg in range(3):
                out[leg] += mags[leg] / 2
                out[(leg + 1) % 3] += mags[leg] / 2
    return out


def _truth_id(truth: PhasorSet) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(truth.buses, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(truth.values).tobytes())
    return h.hexdigest()[:16]


def generate_measurements(
    truth: PowerFlowSolution | PhasorSet,
    model: FeederModel,
    placement: Placement,
    noise: NoiseSpec | None = None,
    seed: int | None = 0,
    measured: Mapping[int, Sequence[int]] | None = None,
) -> MeasurementSet:
    """Synthetic PMU and pseudo-injection measurements of a power-flow truth.

    ``measured`` fixes which branches each PMU meters.  By default the zone
    partition's channel assignment is used when the placement admits one,
    otherwise the plain coverage-maximizing assignment.
    """
    noise = noise or NoiseSpec()
    noise, findings = noise.floored()
    for f in findings:
        warnings.warn(f, stacklevel=2)
    volts = truth.voltages if isinstance(truth, PowerFlowSolution) else truth
    if measured is None:
        try:
            measured = partition_zones(model, placement).measured
        except ObservabilityError:
            measured = assign_channels(model, placement)
    if len(observable_set(model, placement, measured=measured)) != len(model.buses):
        raise ObservabilityError("placement does not observe every bus", "unobservable-placement")

    grid = _Grid(model)
    v = grid.truth_values(volts)
    ms = []
    for p in placement.buses:
        for ph in np.flatnonzero(grid.mask[p]):
            ms.append(Measurement("pmu-voltage", p, int(ph), complex(v[p][ph]), noise.sigma_v))
        for nb in measured[p]:
            cu, cv = grid.branch[(p, nb)]
            cur = cu @ v[p] + cv @ v[nb]
            for ph in grid.branch_phases[(p, nb)]:
                ms.append(Measurement("pmu-current", p, int(ph), complex(cur[ph]), noise.sigma_i, nb))

    base = S_BASE_KVA * 1000.0 / 3.0
    loads = model.loads_by_bus()
    i_load = grid.net.load_currents(volts.values)
    for bus in sorted(loads):
        if bus == model.slack_bus:
            continue
        rated = _rated_phase_power(model, bus)
        k = grid.pos[bus]
        s = volts.values[k] * np.conj(i_load[k]) / base
        for ph in range(3):
            if rated[ph] > 0 and grid.mask[bus][ph]:
                sigma = max(noise.pseudo_fraction * rated[ph], SIGMA_FLOOR)
                ms.append(Measurement("pseudo-injection", bus, ph, complex(s[ph]), sigma))

    ordered = sorted(ms, key=lambda m: m.sort_key)
    if noise.add_noise:
        rng = np.random.default_rng(seed)
        draws = rng.standard_normal((len(ordered), 2))
        ordered = [
            Measurement(m.kind, m.bus, m.phase, m.value + m.sigma * complex(d[0], d[1]), m.sigma, m.to_bus)
            for m, d in zip(ordered, draws)
        ]
    return MeasurementSet(tuple(ordered), seed, _truth_id(volts))


# --------------------------------------------------------------------------
# block solver


class _Block:
    """Measurement model over a set of buses, state ordered by (bus, phase)."""

    def __init__(
        self,
        grid: _Grid,
        buses: Iterable[int],
        measurements: Iterable[Measurement],
        own: Iterable[int] | None = None,
        phases: Mapping[int, Iterable[int]] | None = None,
    ):
        self.grid = grid
        self.buses = tuple(sorted(buses))
        inside = set(self.buses)
        own = inside if own is None else set(own)
        phases = phases or {}
        self.index = {}
        for b in self.buses:
            present = phases.get(b, np.flatnonzero(grid.mask[b]))
            for ph in sorted(int(p) for p in present):
                self.index[(b, ph)] = len(self.index)
        n = len(self.index)
        self.n = n

        lin, pse = [], []
        for m in measurements:
            if m.kind == "pseudo-injection":
                if m.bus in own and m.bus in inside:
                    pse.append(m)
            elif all(b in inside for b in m.buses()) and (m.bus, m.phase) in self.index:
                lin.append(m)
        self.linear = tuple(lin)
        self.pseudo = tuple(pse)

        self.L = np.zeros((len(lin), n), dtype=complex)
        for r, m in enumerate(lin):
            if m.kind == "pmu-voltage":
                self.L[r, self.index[(m.bus, m.phase)]] = 1.0
            else:
                cu, cv = grid.branch[(m.bus, m.to_bus)]
                for b, c in ((m.bus, cu), (m.to_bus, cv)):
                    self._put(self.L, r, b, c[m.phase])
        self.A = np.zeros((len(pse), n), dtype=complex)
        self.k = np.zeros(len(pse), dtype=int)
        for r, m in enumerate(pse):
            self.k[r] = self.index[(m.bus, m.phase)]
            for b, c in grid.injection_rows(m.bus).items():
                self._put(self.A, r, b, c[m.phase])
        self.z = np.concatenate(
            [np.array([m.value for m in lin]).view(float).reshape(-1, 2).reshape(-1) if lin else np.zeros(0),
             np.array([m.value for m in pse]).view(float).reshape(-1, 2).reshape(-1) if pse else np.zeros(0)]
        )
        self.sigma = np.repeat([m.sigma for m in lin] + [m.sigma for m in pse], 2).astype(float)

    def _put(self, mat, r, bus, row):
        for ph in range(3):
            j = self.index.get((bus, ph))
            if j is not None:
                mat[r, j] += row[ph]
            elif row[ph] != 0:
                raise EstimationError(f"measurement references absent phase {PHASES[ph]} at bus {bus}", "index-mismatch")

    @property
    def m(self) -> int:
        return self.z.size

    def h(self, v: np.ndarray) -> np.ndarray:
        lin = self.L @ v
        u = self.A @ v
        s = -v[self.k] * np.conj(u)
        return np.concatenate([np.column_stack([lin.real, lin.imag]).ravel(), np.column_stack([s.real, s.imag]).ravel()])

    def jacobian(self, v: np.ndarray) -> np.ndarray:
        n = self.n
        H = np.empty((self.m, 2 * n))
        q = self.L.shape[0]
        H[0 : 2 * q : 2, :n] = self.L.real
        H[0 : 2 * q : 2, n:] = -self.L.imag
        H[1 : 2 * q : 2, :n] = self.L.imag
        H[1 : 2 * q : 2, n:] = self.L.real
        if self.A.shape[0]:
            u = self.A @ v
            vk = v[self.k][:, None]
            ds_de = -vk * np.conj(self.A)
            ds_df = 1j * vk * np.conj(self.A)
            rows = np.arange(self.A.shape[0])
            ds_de[rows, self.k] -= np.conj(u)
            ds_df[rows, self.k] -= 1j * np.conj(u)
            H[2 * q :: 2, :n] = ds_de.real
            H[2 * q :: 2, n:] = ds_df.real
            H[2 * q + 1 :: 2, :n] = ds_de.imag
            H[2 * q + 1 :: 2, n:] = ds_df.imag
        return H

    def flat_start(self) -> np.ndarray:
        shifts = np.exp(1j * np.deg2rad([0.0, -120.0, 120.0]))
        slack = self.grid.model.general.slack_phasors() / self.grid.net.v_base
        ref = shifts if np.allclose(np.abs(slack), 0) else slack / np.abs(slack)
        return np.array([ref[ph] for (_, ph) in self.index])

    def to_phasors(self, v: np.ndarray, variances: np.ndarray | None = None):
        vals = np.zeros((len(self.buses), 3), dtype=complex)
        var = np.zeros((len(self.buses), 3), dtype=complex)
        mask = np.zeros((len(self.buses), 3), dtype=bool)
        pos = {b: i for i, b in enumerate(self.buses)}
        for (b, ph), j in self.index.items():
            vals[pos[b], ph] = v[j]
            mask[pos[b], ph] = True
            if variances is not None:
                var[pos[b], ph] = variances[j] + 1j * variances[j + self.n]
        return vals, var, mask


def _weighted_lstsq(H: np.ndarray, r: np.ndarray, sigma: np.ndarray, name: str, want_cov: bool = False):
    Hw = H / sigma[:, None]
    rw = r / sigma
    if Hw.shape[0] < Hw.shape[1]:
        raise EstimationError(f"{name}: {Hw.shape[0]} measurements for {Hw.shape[1]} states", "rank-deficient-H")
    Q, R, piv = sla.qr(Hw, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size and d[-1] <= d[0] * max(Hw.shape) * np.finfo(float).eps * 10:
        raise EstimationError(f"{name}: measurement Jacobian is rank deficient", "rank-deficient-H")
    y = sla.solve_triangular(R, Q.T @ rw)
    dx = np.empty_like(y)
    dx[piv] = y
    var = None
    if want_cov:
        Rinv = sla.solve_triangular(R, np.eye(R.shape[0]))
        var = np.empty(R.shape[0])
        var[piv] = np.sum(Rinv**2, axis=1)
    return dx, var


def _weighted_normal(H: np.ndarray, r: np.ndarray, sigma: np.ndarray, name: str, want_cov: bool = False):
    """Same solution as :func:`_weighted_lstsq` via sparse normal equations.

    The Jacobian has a dozen nonzeros per row, so the gain matrix factors far
    faster than a dense QR.  Pivoting stays on the diagonal of the symmetric
    gain matrix and the pivot ratio is the rank test.
    """
    if H.shape[0] < H.shape[1]:
        raise EstimationError(f"{name}: {H.shape[0]} measurements for {H.shape[1]} states", "rank-deficient-H")
    w = 1.0 / sigma**2
    Hs = sp.csr_matrix(H)
    G = (Hs.T @ sp.diags(w) @ Hs).tocsc()
    try:
        lu = spla.splu(G, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise EstimationError(f"{name}: gain matrix is singular", "rank-deficient-H") from exc
    d = np.abs(lu.U.diagonal())
    if d.size and (not np.all(np.isfinite(d)) or d.min() <= d.max() * H.shape[1] * np.finfo(float).eps * 1e3):
        raise EstimationError(f"{name}: measurement Jacobian is rank deficient", "rank-deficient-H")
    dx = lu.solve(Hs.T @ (w * r))
    var = None
    if want_cov:
        var = np.diag(lu.solve(np.eye(H.shape[1]))).copy()
    return dx, var


def _linear_solve(block: _Block, name: str, solver=_weighted_lstsq) -> np.ndarray:
    q = block.L.shape[0]
    n = block.n
    H = block.jacobian(np.zeros(n, dtype=complex))[: 2 * q]
    dx, _ = solver(H, block.z[: 2 * q], block.sigma[: 2 * q], name)
    return dx[:n] + 1j * dx[n:]


def _solve_block(block: _Block, opts: EstimationOptions, name: str):
    """Gauss-Newton on one block; returns (v, variances, stats)."""
    if block.n == 0:
        raise EstimationError(f"{name}: no state variables", "rank-deficient-H")
    v = None
    if opts.init == "linear":
        try:
            v = _linear_solve(block, name, _weighted_normal)
        except EstimationError:
            v = None
    if v is None:
        v = block.flat_start()
    steps = []
    grow = 0
    it = 0
    converged = False
    for it in range(1, opts.max_iterations + 1):
        r = block.z - block.h(v)
        dx, _ = _weighted_normal(block.jacobian(v), r, block.sigma, name)
        v = v + dx[: block.n] + 1j * dx[block.n :]
        step = float(np.max(np.abs(dx))) if dx.size else 0.0
        if steps and step > steps[-1]:
            grow += 1
            if grow >= 3:
                raise EstimationError(f"{name}: step norm grew for 3 consecutive iterations", "diverged")
        else:
            grow = 0
        steps.append(step)
        if step <= opts.tolerance:
            converged = True
            break
    if not converged:
        raise EstimationError(f"{name}: no convergence in {opts.max_iterations} iterations", "max-iterations")
    r = block.z - block.h(v)
    _, var = _weighted_normal(block.jacobian(v), r, block.sigma, name, want_cov=True)
    chi = float(np.sum((r / block.sigma) ** 2))
    stats = {
        "iterations": it,
        "chi_square": chi,
        "dof": block.m - 2 * block.n,
        "residual_norm": math.sqrt(chi),
        "measurements": block.m,
        "states": 2 * block.n,
    }
    return v, var, stats


# --------------------------------------------------------------------------
# public estimators


def _phasor_set(grid: _Grid, buses, vals, mask) -> PhasorSet:
    v_base = grid.net.v_base
    return PhasorSet(tuple(buses), vals * v_base, mask, v_base, dict(grid.model.aliases))


def wls_linear_pmu(zone: Iterable[int] | None, model: FeederModel, measurements: MeasurementSet) -> PhasorSet:
    """PMU-only linear WLS over ``zone`` (all buses when ``None``)."""
    grid = _Grid(model)
    buses = model.buses if zone is None else zone
    block = _Block(grid, buses, measurements.of_kind("pmu-voltage", "pmu-current"))
    v = _linear_solve(block, "zone")
    vals, _, mask = block.to_phasors(v)
    return _phasor_set(grid, block.buses, vals, mask)


def wls_gauss_newton(
    model: FeederModel, measurements: MeasurementSet, options: EstimationOptions | None = None
) -> EstimationResult:
    """Monolithic estimate over the whole network."""
    opts = options or EstimationOptions()
    grid = _Grid(model)
    block = _Block(grid, model.buses, measurements)
    v, var, stats = _solve_block(block, opts, "network")
    vals, variances, mask = block.to_phasors(v, var)
    stats = {"zone": 0, "root": None, **stats}
    return EstimationResult(
        _phasor_set(grid, block.buses, vals, mask), stats["chi_square"], stats["dof"], (stats,), variances
    )


def _zone_blocks(grid: _Grid, model: FeederModel, partition: ZonePartition, measurements: MeasurementSet):
    blocks = []
    for root, members in partition.zones:
        ext = set(members)
        far: dict[int, set[int]] = {}
        for b in members:
            for nb in model.neighbors(b):
                if nb not in members:
                    # only the phases reaching into the zone are visible from it
                    far.setdefault(nb, set()).update(grid.branch_phases[(b, nb)])
        ext.update(far)
        blocks.append((root, _Block(grid, ext, measurements, own=members, phases=far)))
    return blocks


def estimate_parallel(
    model: FeederModel,
    partition: ZonePartition,
    measurements: MeasurementSet,
    options: EstimationOptions | None = None,
) -> EstimationResult:
    """Solve every zone independently and merge in zone order."""
    opts = options or EstimationOptions()
    covered = set()
    for _, members in partition.zones:
        if covered & members:
            raise EstimationError("zones overlap", "invalid-partition")
        covered |= members
    if covered != set(model.buses):
        raise EstimationError("zones do not cover the network", "invalid-partition")
    grid = _Grid(model)
    blocks = _zone_blocks(grid, model, partition, measurements)

    def run(item):
        k, (root, block) = item
        try:
            return _solve_block(block, opts, f"zone {k} (root {root})")
        except EstimationError as exc:
            kind = "zone-rank-deficient" if exc.kind == "rank-deficient-H" else exc.kind
            raise EstimationError(str(exc), kind) from exc

    workers = opts.workers or min(8, len(blocks)) or 1
    if workers == 1:
        solved = [run(item) for item in enumerate(blocks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            solved = list(pool.map(run, enumerate(blocks)))

    buses = tuple(sorted(model.buses))
    pos = {b: i for i, b in enumerate(buses)}
    num = np.zeros((len(buses), 3), dtype=complex)
    wsum = np.zeros((len(buses), 3), dtype=complex)
    first = {}
    mask = np.zeros((len(buses), 3), dtype=bool)
    stats = []
    chi, dof = 0.0, 0
    for k, ((root, block), (v, var, st)) in enumerate(zip(blocks, solved)):
        stats.append({"zone": k, "root": root, **st})
        chi += st["chi_square"]
        dof += st["dof"]
        for (b, ph), j in block.index.items():
            x = v[j]
            w = complex(1.0 / max(var[j], 1e-300), 1.0 / max(var[j + block.n], 1e-300))
            i = pos[b]
            if mask[i, ph]:
                x0, v0 = first[(b, ph)]
                for comp0, compx, var0, varx in ((x0.real, x.real, v0.real, var[j]), (x0.imag, x.imag, v0.imag, var[j + block.n])):
                    if abs(comp0 - compx) > 6.0 * math.sqrt(var0 + varx):
                        raise EstimationError(
                            f"bus {b} phase {PHASES[ph]}: zone estimates disagree beyond 6 sigma", "merge-conflict"
                        )
            else:
                first[(b, ph)] = (x, complex(var[j], var[j + block.n]))
            mask[i, ph] = True
            num[i, ph] += complex(w.real * x.real, w.imag * x.imag)
            wsum[i, ph] += w
    vals = np.where(mask, (num.real / np.where(mask, wsum.real, 1)) + 1j * (num.imag / np.where(mask, wsum.imag, 1)), 0)
    variances = np.where(mask, 1 / np.where(mask, wsum.real, 1) + 1j / np.where(mask, wsum.imag, 1), 0)
    # a single zone keeps its own numbers untouched
    if len(blocks) == 1:
        block = blocks[0][1]
        v, var, _ = solved[0]
        vals, variances, mask = block.to_phasors(v, var)
    return EstimationResult(_phasor_set(grid, buses, vals, mask), chi, dof, tuple(stats), variances)


def weighted_sse(model: FeederModel, measurements: MeasurementSet, voltages: PhasorSet) -> float:
    """Weighted squared residual of ``measurements`` at the given state."""
    grid = _Grid(model)
    block = _Block(grid, model.buses, measurements)
    v = np.zeros(block.n, dtype=complex)
    for (b, ph), j in block.index.items():
        v[j] = voltages.voltage(b, PHASES[ph]) / voltages.v_base
    r = (block.z - block.h(v)) / block.sigma
    return float(r @ r)


def error_report(estimate: EstimationResult | PhasorSet, truth: PowerFlowSolution | PhasorSet) -> EstimationReport:
    est = estimate.voltages if isinstance(estimate, EstimationResult) else estimate
    tru = truth.voltages if isinstance(truth, PowerFlowSolution) else truth
    if set(est.buses) != set(tru.buses):
        raise EstimationError("estimate and truth cover different buses", "index-mismatch")
    rows = []
    for b in sorted(tru.buses):
        if est.phases(b) != tru.phases(b):
            raise EstimationError(f"bus {b}: phase sets differ", "index-mismatch")
        for p in tru.phases(b):
            ve, vt = est.voltage(b, p), tru.voltage(b, p)
            mag = 100.0 * abs(ve - vt) / abs(vt)
            ang = abs((math.degrees(np.angle(ve) - np.angle(vt)) + 180.0) % 360.0 - 180.0)
            rows.append((b, p, mag, ang))
    mags = np.array([r[2] for r in rows])
    angs = np.array([r[3] for r in rows])
    return EstimationReport(
        tuple(rows), float(mags.max()), float(mags.mean()), float(angs.max()), float(angs.mean())
    )


# --------------------------------------------------------------------------
# files

_MEAS_HEADER = ("kind", "location", "phase", "re|p", "im|q", "sigma")


def _g(x: float) -> str:
    return repr(float(x))


def write_measurements_csv(ms: MeasurementSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_MEAS_HEADER)
        for m in ms:
            w.writerow((m.kind, m.location, PHASES[m.phase], _g(m.value.real), _g(m.value.imag), _g(m.sigma)))


def read_measurements_csv(path: str | Path, seed: int | None = None, truth_id: str = "") -> MeasurementSet:
    out = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != _MEAS_HEADER:
        raise EstimationError(f"{path}: expected header {','.join(_MEAS_HEADER)}", "bad-header")
    for line, row in enumerate(rows[1:], start=2):
        try:
            kind, loc, ph, a, b, s = row
            bus, _, to = loc.partition("-")
            out.append(
                Measurement(kind, int(bus), PHASES.index(ph), complex(float(a), float(b)), float(s), int(to) if to else None)
            )
        except (ValueError, IndexError) as exc:
            raise EstimationError(f"{path}:{line}: {exc}", "unparseable-cell") from exc
    return MeasurementSet(tuple(out), seed, truth_id)


def write_estimate_csv(result: EstimationResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bus", "phase", "magnitude_pu", "angle_deg"))
        for bus, ph, mag, ang in result.voltages.rows(include_aliases=False):
            w.writerow((bus, ph, f"{mag:.4f}", f"{ang:.4f}"))
