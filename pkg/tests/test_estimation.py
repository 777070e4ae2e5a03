import math
import re
import warnings
from dataclasses import replace

import numpy as np
import pytest

from feederkit.errors import EstimationError, ObservabilityError
from feederkit.estimation import (
    EstimationOptions,
    Measurement,
    MeasurementSet,
    NoiseSpec,
    _Block,
    _Grid,
    error_report,
    estimate_parallel,
    generate_measurements,
    read_measurements_csv,
    weighted_sse,
    wls_gauss_newton,
    wls_linear_pmu,
    write_estimate_csv,
    write_measurements_csv,
)
from feederkit.feeder import branch_impedance
from feederkit.placement import Placement, ZonePartition, greedy_placement, partition_zones
from feederkit.powerflow import PhasorSet, solve_power_flow

from graphs import INF, path_graph

QUIET = NoiseSpec(add_noise=False)


@pytest.fixture(scope="module")
def clean(feeder, tight_solution, zone_placement):
    placement, _ = zone_placement
    return generate_measurements(tight_solution, feeder, placement, QUIET)


@pytest.fixture(scope="module")
def noisy(feeder, tight_solution, zone_placement):
    placement, _ = zone_placement
    return generate_measurements(tight_solution, feeder, placement, seed=7)


def _max_diff(a: PhasorSet, b: PhasorSet) -> float:
    worst = 0.0
    for bus, ph, _, _ in b.rows(include_aliases=False):
        worst = max(worst, abs(a.voltage(bus, ph) - b.voltage(bus, ph)) / b.v_base)
    return worst


# -- measurement generation


def test_zero_sigmas_floored_with_warning(feeder, tight_solution, zone_placement):
    with pytest.warns(UserWarning, match="floored"):
        ms = generate_measurements(tight_solution, feeder, zone_placement[0], NoiseSpec(0, 0, 0))
    assert min(m.sigma for m in ms) >= 1e-9


def test_regeneration_is_byte_identical(tmp_path, feeder, tight_solution, zone_placement):
    paths = []
    for k in range(2):
        ms = generate_measurements(tight_solution, feeder, zone_placement[0], seed=11)
        paths.append(tmp_path / f"m{k}.csv")
        write_measurements_csv(ms, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_noise_std_matches_sigma(feeder, tight_solution, zone_placement):
    placement = zone_placement[0]
    bus = placement.buses[3]
    draws = []
    for seed in range(200):
        ms = generate_measurements(tight_solution, feeder, placement, seed=seed)
        m = next(m for m in ms if m.kind == "pmu-voltage" and m.bus == bus)
        draws.append(m.value.real)
    assert abs(np.std(draws, ddof=1) / 0.001 - 1) < 0.15


def test_measurement_order_and_kinds(clean, zone_placement):
    keys = [m.sort_key for m in clean]
    assert keys == sorted(keys)
    assert {m.kind for m in clean} == {"pmu-voltage", "pmu-current", "pseudo-injection"}
    assert {m.bus for m in clean.of_kind("pmu-voltage")} == set(zone_placement[0].buses)


def test_unobservable_placement(feeder, tight_solution):
    with pytest.raises(ObservabilityError) as exc:
        generate_measurements(tight_solution, feeder, Placement.at([1, 13]))
    assert exc.value.kind == "unobservable-placement"


def test_measurement_validation():
    with pytest.raises(ValueError):
        Measurement("pmu-voltage", 1, 0, 1 + 0j, 0.0)
    with pytest.raises(ValueError):
        Measurement("scada", 1, 0, 1 + 0j, 0.1)
    with pytest.raises(ValueError):
        Measurement("pmu-current", 1, 0, 1 + 0j, 0.1)


def test_measurement_csv_round_trip(tmp_path, noisy):
    path = tmp_path / "m.csv"
    write_measurements_csv(noisy, path)
    back = read_measurements_csv(path)
    assert back.measurements == noisy.measurements


def test_measurement_csv_bad_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("a,b\n")
    with pytest.raises(EstimationError):
        read_measurements_csv(path)


# -- linear PMU-only estimate


def test_linear_noise_free(feeder, tight_solution, clean):
    est = wls_linear_pmu(None, feeder, clean)
    assert _max_diff(est, tight_solution.voltages) < 1e-10


def test_linear_duplicate_invariance(feeder, noisy):
    once = wls_linear_pmu(None, feeder, noisy)
    twice = wls_linear_pmu(None, feeder, MeasurementSet(noisy.measurements * 2))
    assert _max_diff(twice, once) <= 1e-12


def test_linear_single_bus_identity(feeder, noisy, zone_placement):
    bus = zone_placement[0].buses[0]
    only = MeasurementSet(tuple(m for m in noisy if m.kind == "pmu-voltage" and m.bus == bus))
    est = wls_linear_pmu([bus], feeder, only)
    for m in only:
        got = est.voltage(bus, "ABC"[m.phase]) / est.v_base
        assert abs(got - m.value) <= 1e-15


def test_linear_rank_deficient(feeder, noisy):
    with pytest.raises(EstimationError) as exc:
        wls_linear_pmu(None, feeder, noisy.of_kind("pmu-voltage"))
    assert exc.value.kind == "rank-deficient-H"


def test_linear_noisy_error_small(feeder, tight_solution, noisy):
    report = error_report(wls_linear_pmu(None, feeder, noisy), tight_solution)
    assert report.mean_magnitude_pct < 0.2


# -- Gauss-Newton


def test_gauss_newton_noise_free(feeder, tight_solution, clean):
    res = wls_gauss_newton(feeder, clean)
    assert error_report(res, tight_solution).max_magnitude_pct < 1e-6
    assert res.degrees_of_freedom == clean.scalar_count - 2 * sum(len(feeder.tree.phases[b]) for b in feeder.buses)


def test_gauss_newton_from_flat_start(feeder, tight_solution, clean):
    res = wls_gauss_newton(feeder, clean, EstimationOptions(init="flat"))
    assert error_report(res, tight_solution).max_magnitude_pct < 1e-6


def test_jacobian_matches_central_difference(feeder, noisy):
    block = _Block(_Grid(feeder), feeder.buses, noisy)
    rng = np.random.default_rng(2)
    v = block.flat_start() * (1 + 0.05 * rng.standard_normal(block.n)) + 0.02j * rng.standard_normal(block.n)
    H = block.jacobian(v)
    h = 1e-6
    worst = 0.0
    for j in range(2 * block.n):
        d = np.zeros(block.n, dtype=complex)
        d[j % block.n] = h if j < block.n else 1j * h
        col = (block.h(v + d) - block.h(v - d)) / (2 * h)
        scale = max(np.max(np.abs(col)), 1e-12)
        worst = max(worst, np.max(np.abs(H[:, j] - col)) / scale)
    assert worst < 1e-5


def test_chi_square_grows_when_truth_moves(feeder, tight_solution, clean, zone_placement):
    base = weighted_sse(feeder, clean, tight_solution.voltages)
    v = tight_solution.voltages
    bus = next(b for b in feeder.buses if b not in zone_placement[0].buses)
    vals = v.values.copy()
    vals[v.index(bus)] *= 1.001
    moved = PhasorSet(v.buses, vals, v.mask, v.v_base, v.aliases)
    assert weighted_sse(feeder, clean, moved) > base


def test_weight_invariance(feeder, noisy):
    a = wls_gauss_newton(feeder, noisy)
    b = wls_gauss_newton(feeder, noisy.scaled(2.0))
    assert b.chi_square == pytest.approx(a.chi_square / 4, rel=1e-9)
    assert _max_diff(b.voltages, a.voltages) <= 1e-12


def test_max_iterations(feeder, noisy):
    with pytest.raises(EstimationError) as exc:
        wls_gauss_newton(feeder, noisy, EstimationOptions(tolerance=1e-30, max_iterations=2))
    assert exc.value.kind in ("max-iterations", "diverged")


# -- zone-parallel estimate


def test_single_zone_is_monolithic(feeder, noisy):
    whole = ZonePartition(((feeder.slack_bus, frozenset(feeder.buses)),), ())
    par = estimate_parallel(feeder, whole, noisy)
    mono = wls_gauss_newton(feeder, noisy)
    assert np.array_equal(par.voltages.values, mono.voltages.values)
    assert par.chi_square == mono.chi_square


def _partitions(feeder):
    yield "zone-ready inf", greedy_placement(feeder, INF, zone_ready=True)
    yield "zone-ready 3", greedy_placement(feeder, 3, zone_ready=True)
    yield "zones of 2", greedy_placement(feeder, INF, max_zone_size=2)
    yield "zones of 3", greedy_placement(feeder, INF, max_zone_size=3)


@pytest.mark.parametrize("which", range(4))
def test_parallel_matches_monolithic_noise_free(feeder, tight_solution, which):
    _, placement = list(_partitions(feeder))[which]
    part = partition_zones(feeder, placement)
    ms = generate_measurements(tight_solution, feeder, placement, QUIET, measured=part.measured)
    par = estimate_parallel(feeder, part, ms)
    mono = wls_gauss_newton(feeder, ms)
    assert len(part.zones) > 1
    assert _max_diff(par.voltages, mono.voltages) <= 1e-8


def test_parallel_independent_of_workers(tmp_path, feeder, zone_placement, noisy):
    _, part = zone_placement
    outs = []
    for workers in (1, 2, 3, 8):
        res = estimate_parallel(feeder, part, noisy, EstimationOptions(workers=workers))
        path = tmp_path / f"e{workers}.csv"
        write_estimate_csv(res, path)
        outs.append((res.voltages.values.tobytes(), res.chi_square, path.read_bytes()))
    assert all(o == outs[0] for o in outs)


def test_invalid_partition(feeder, noisy):
    half = ZonePartition(((1, frozenset([1, 2])),), ())
    with pytest.raises(EstimationError) as exc:
        estimate_parallel(feeder, half, noisy)
    assert exc.value.kind == "invalid-partition"


def test_zone_rank_deficient_names_zone(feeder, zone_placement, noisy):
    _, part = zone_placement
    root, members = part.zones[2]
    starved = MeasurementSet(tuple(m for m in noisy if not set(m.buses()) & members))
    with pytest.raises(EstimationError) as exc:
        estimate_parallel(feeder, part, starved)
    assert exc.value.kind == "zone-rank-deficient"
    # the starved zone or a neighbour that shared its boundary measurements
    touching = {root} | {
        part.zones[part.zone_of(x)][0] for a, b, _ in part.boundary if {a, b} & members for x in (a, b)
    }
    named = re.search(r"root (\d+)", str(exc.value))
    assert named and int(named.group(1)) in touching


def _hand_path():
    m = path_graph(3)
    p = Placement.at([1, 3])
    part = partition_zones(m, p)
    pf = solve_power_flow(m)
    return m, p, part, pf


def _complex_wls(rows, z, sigma):
    """Rectangular WLS of a complex linear model; returns estimate and component variances."""
    H = np.block([[rows.real, -rows.imag], [rows.imag, rows.real]])
    y = np.concatenate([z.real, z.imag])
    w = np.concatenate([1 / sigma**2, 1 / sigma**2])
    G = H.T @ (w[:, None] * H)
    x = np.linalg.solve(G, H.T @ (w * y))
    var = np.diag(np.linalg.inv(G))
    n = rows.shape[1]
    return x[:n] + 1j * x[n:], var[:n] + 1j * var[n:]


def test_three_bus_two_zones_by_hand():
    m, p, part, pf = _hand_path()
    assert [sorted(z) for _, z in part.zones] == [[1, 2], [3]]
    assert part.boundary == ((2, 3, 3),)
    ms = generate_measurements(pf, m, p, seed=5, measured=part.measured)
    got = estimate_parallel(m, part, ms)

    g = m.general
    z, b = branch_impedance(m.segments[0], m.configs[1])
    k = g.v_base_ln / g.i_base
    ys = np.linalg.inv(z) * k
    yh = 0.5j * b * 1e-6 * k
    eye, zero = np.eye(3), np.zeros((3, 3))
    val = {(mm.kind, mm.bus, mm.to_bus, mm.phase): mm for mm in ms}

    def rows_for(kind, bus, to, coeffs):
        out = []
        for ph in range(3):
            mm = val[(kind, bus, to, ph)]
            out.append((np.concatenate([c[ph] for c in coeffs]), mm.value, mm.sigma))
        return out

    # zone 1 state: V1, V2, V3 (bus 3 is its far end)
    rows = (
        rows_for("pmu-voltage", 1, None, [eye, zero, zero])
        + rows_for("pmu-current", 1, 2, [ys + yh, -ys, zero])
        + rows_for("pmu-voltage", 3, None, [zero, zero, eye])
        + rows_for("pmu-current", 3, 2, [zero, -ys, ys + yh])
    )
    H = np.array([r[0] for r in rows])
    x1, var1 = _complex_wls(H, np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))
    # zone 2 state: V2 (far end), V3
    rows = rows_for("pmu-voltage", 3, None, [zero, eye]) + rows_for("pmu-current", 3, 2, [-ys, ys + yh])
    H = np.array([r[0] for r in rows])
    x2, var2 = _complex_wls(H, np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))

    def merge(a, va, b, vb):
        re = (a.real / va.real + b.real / vb.real) / (1 / va.real + 1 / vb.real)
        im = (a.imag / va.imag + b.imag / vb.imag) / (1 / va.imag + 1 / vb.imag)
        return re + 1j * im

    expected = {
        1: x1[0:3],
        2: merge(x1[3:6], var1[3:6], x2[0:3], var2[0:3]),
        3: merge(x1[6:9], var1[6:9], x2[3:6], var2[3:6]),
    }
    for bus, vals in expected.items():
        for ph in range(3):
            # roundoff bound: the per-unit series admittance makes the gain matrix stiff
            assert abs(got.voltages.voltage(bus, "ABC"[ph]) / g.v_base_ln - vals[ph]) < 1e-10


def test_merge_conflict_detected():
    m, p, part, pf = _hand_path()
    ms = generate_measurements(pf, m, p, seed=5, measured=part.measured)
    # only zone 1 sees the bus-1 voltage, so a gross error there drags its view of bus 2 away
    spoiled = tuple(replace(x, value=x.value + 0.05) if x.kind == "pmu-voltage" and x.bus == 1 else x for x in ms)
    with pytest.raises(EstimationError) as exc:
        estimate_parallel(m, part, MeasurementSet(spoiled))
    assert exc.value.kind == "merge-conflict"


# -- error report


def test_error_report_zero(tight_solution):
    r = error_report(tight_solution.voltages, tight_solution)
    assert r.max_magnitude_pct == 0 and r.max_angle_deg == 0


def test_error_report_one_percent(tight_solution):
    v = tight_solution.voltages
    vals = v.values.copy()
    vals[v.index(13), 0] *= 1.01
    r = error_report(PhasorSet(v.buses, vals, v.mask, v.v_base, v.aliases), tight_solution)
    row = next(x for x in r.rows if x[0] == 13 and x[1] == "A")
    assert f"{row[2]:.4f}" == "1.0000"
    assert r.max_magnitude_pct == pytest.approx(1.0)
    assert all(x[2] == 0 for x in r.rows if (x[0], x[1]) != (13, "A"))


def test_error_report_index_mismatch(tight_solution):
    v = tight_solution.voltages
    keep = [i for i, b in enumerate(v.buses) if b != 13]
    short = PhasorSet(tuple(v.buses[i] for i in keep), v.values[keep], v.mask[keep], v.v_base)
    with pytest.raises(EstimationError) as exc:
        error_report(short, tight_solution)
    assert exc.value.kind == "index-mismatch"


def test_estimate_csv_format(tmp_path, feeder, noisy):
    path = tmp_path / "e.csv"
    write_estimate_csv(wls_gauss_newton(feeder, noisy), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "bus,phase,magnitude_pu,angle_deg"
    bus, ph, mag, ang = lines[1].split(",")
    assert len(mag.split(".")[1]) == 4 and len(ang.split(".")[1]) == 4


def test_warning_free_default_generation(feeder, tight_solution, zone_placement):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        generate_measurements(tight_solution, feeder, zone_placement[0])
