"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (not radial, unobservable, diverged,
...), 2 usage or input-file problems.  Every subcommand records itself in
``manifest.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FeederFormatError, FeederkitError
from .feeder import (
    FILES,
    default_dataset_path,
    merge_switches,
    model_to_dict,
    parse_feeder,
    validate_topology,
)

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad flags or a missing input file (exit code 2)."""


# --------------------------------------------------------------------------
# helpers


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _feeder_inputs(directory: Path) -> dict[str, str]:
    out = {}
    for name in FILES:
        p = directory / f"{name}.csv"
        if p.exists():
            out[f"feeder/{p.name}"] = _digest(p)
    return out


def _load_model(args):
    directory = Path(args.feeder)
    if not directory.is_dir():
        raise UsageError(f"feeder directory not found: {directory}")
    raw = parse_feeder(directory)
    return raw, merge_switches(raw)


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing input {what}: {path}")
    return path


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _flags(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func",):
            continue
        if isinstance(v, float) and math.isinf(v):
            v = "inf"
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _record(args, inputs: dict[str, str], outputs: list[str]) -> dict:
    """Add this run to manifest.json; returns the reference stored in artifacts."""
    out = Path(args.out)
    path = out / MANIFEST
    manifest = {"tool": "feederkit", "version": __version__, "runs": {}}
    if path.exists():
        try:
            manifest = json.loads(path.read_text())
            manifest.setdefault("runs", {})
        except json.JSONDecodeError:
            pass
    manifest["version"] = __version__
    manifest["runs"][args.command] = {
        "subcommand": args.command,
        "flags": _flags(args),
        "inputs": dict(sorted(inputs.items())),
        "outputs": sorted(outputs),
        "seed": args.seed,
        "version": __version__,
    }
    _write_json(path, manifest)
    return {"file": MANIFEST, "run": args.command}


def _ref(args) -> dict:
    return {"file": MANIFEST, "run": args.command}


def _sweep_options(args):
    from .powerflow import SweepOptions

    return SweepOptions(tolerance_pu=args.tolerance, max_iterations=args.max_iter)


def _placement_path(args) -> Path:
    return Path(args.placement) if args.placement else Path(args.out) / "placement.json"


# --------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    directory = Path(args.feeder)
    if not directory.is_dir():
        raise UsageError(f"feeder directory not found: {directory}")
    raw = parse_feeder(directory)
    findings = validate_topology(raw)
    data = {
        "valid": not findings,
        "findings": [{"kind": f.kind, "message": f.message} for f in findings],
        "model": model_to_dict(merge_switches(raw)) if not findings else None,
        "manifest": _ref(args),
    }
    _write_json(Path(args.out) / "validation.json", data)
    _record(args, _feeder_inputs(directory), ["validation.json"])
    for f in findings:
        print(f"{f.kind}: {f.message}", file=sys.stderr)
    return 0 if not findings else 1


def cmd_powerflow(args) -> int:
    from .powerflow import solve_power_flow

    _, model = _load_model(args)
    sol = solve_power_flow(model, _sweep_options(args))
    out = Path(args.out)
    with open(out / "solution.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bus", "phase", "mag_pu", "angle_deg"))
        for bus, ph, mag, ang in sol.voltages.rows():
            w.writerow((bus, ph, f"{mag:.4f}", f"{ang:.4f}"))
    summary = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in sol.summary().items()}
    summary["manifest"] = _ref(args)
    _write_json(out / "summary.json", summary)
    _record(args, _feeder_inputs(Path(args.feeder)), ["solution.csv", "summary.json"])
    if not sol.converged:
        print(f"power flow did not converge in {sol.iterations} iterations", file=sys.stderr)
        return 1
    return 0


def _channels(text: str) -> float:
    if text.lower() in ("inf", "infinity"):
        return math.inf
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"channels must be an integer or 'inf', got {text!r}")
    if n < 0:
        raise argparse.ArgumentTypeError("channels must be non-negative")
    return float(n)


def cmd_place_pmu(args) -> int:
    from .placement import brute_force_placement, greedy_placement, partition_zones, placement_to_dict

    _, model = _load_model(args)
    if args.oracle:
        best = brute_force_placement(model, args.channels)
        placement = best[0]
        partition = None
        try:
            partition = partition_zones(model, placement)
        except FeederkitError as exc:
            print(f"oracle placement has no zone partition: {exc}", file=sys.stderr)
    else:
        placement = greedy_placement(model, args.channels, args.max_zone_size, zone_ready=True)
        partition = partition_zones(model, placement)
    data = placement_to_dict(model, placement, partition)
    data["method"] = "oracle" if args.oracle else "greedy"
    data["manifest"] = _ref(args)
    _write_json(Path(args.out) / "placement.json", data)
    _record(args, _feeder_inputs(Path(args.feeder)), ["placement.json"])
    return 0


def _read_placement(args, model):
    from .placement import placement_from_dict

    path = _need(_placement_path(args), "placement file")
    try:
        data = json.loads(path.read_text())
        placement = placement_from_dict(data)
        measured = {d["bus"]: tuple(b for _, b in d["measured_branches"]) for d in data["devices"]}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"unreadable placement file {path}: {exc}")
    return path, data, placement, measured


def cmd_simulate(args) -> int:
    from .estimation import NoiseSpec, generate_measurements, write_measurements_csv
    from .powerflow import solve_power_flow

    _, model = _load_model(args)
    path, _, placement, measured = _read_placement(args, model)
    truth = solve_power_flow(model, _sweep_options(args))
    noise = NoiseSpec(args.sigma_v, args.sigma_i, args.sigma_pseudo, add_noise=not args.no_noise)
    ms = generate_measurements(truth, model, placement, noise, args.seed, measured=measured)
    write_measurements_csv(ms, Path(args.out) / "measurements.csv")
    inputs = _feeder_inputs(Path(args.feeder))
    inputs[path.name] = _digest(path)
    _record(args, inputs, ["measurements.csv"])
    return 0


def cmd_estimate(args) -> int:
    from .estimation import (
        EstimationOptions,
        error_report,
        estimate_parallel,
        read_measurements_csv,
        wls_gauss_newton,
        write_estimate_csv,
    )
    from .placement import ZonePartition
    from .powerflow import solve_power_flow

    _, model = _load_model(args)
    ppath, pdata, placement, measured = _read_placement(args, model)
    mpath = _need(Path(args.measurements) if args.measurements else Path(args.out) / "measurements.csv", "measurements file")
    ms = read_measurements_csv(mpath, seed=args.seed)
    opts = EstimationOptions(workers=args.workers)
    if args.monolithic:
        result = wls_gauss_newton(model, ms, opts)
    else:
        if "zones" not in pdata:
            raise UsageError(f"{ppath} has no zone partition; rerun place-pmu or use --monolithic")
        zones = tuple((z["root"], frozenset(z["members"])) for z in pdata["zones"])
        boundary = tuple((b["a"], b["b"], b["pmu"]) for b in pdata.get("boundary", ()))
        result = estimate_parallel(model, ZonePartition(zones, boundary, measured), ms, opts)
    out = Path(args.out)
    write_estimate_csv(result, out / "estimate.csv")
    truth = solve_power_flow(model, _sweep_options(args))
    errs = error_report(result, truth)
    report = {
        "estimation": {
            "mode": "monolithic" if args.monolithic else "parallel",
            "chi_square": result.chi_square,
            "degrees_of_freedom": result.degrees_of_freedom,
            "zones": list(result.zone_stats),
            "errors": errs.to_dict(),
        },
        "manifest": _ref(args),
    }
    _write_json(out / "report.json", report)
    inputs = _feeder_inputs(Path(args.feeder))
    inputs[ppath.name] = _digest(ppath)
    inputs[mpath.name] = _digest(mpath)
    _record(args, inputs, ["estimate.csv", "report.json"])
    return 0


DEFAULT_SCENARIO = {
    "fundamental_hz": 60.0,
    "cycles": 4,
    "samples_per_cycle": 64,
    "v_lm": 1.0,
    "i_1": 1.0,
    "voltage_harmonics": [{"order": 5, "fraction": 0.08}, {"order": 7, "fraction": 0.05}],
    "current_harmonics": [{"order": 3, "fraction": 0.10}, {"order": 5, "fraction": 0.06}],
    "band": 0.02,
    "balance": {"v_s": 1.0, "i_s": 1.0, "v_l": 1.0, "i_l": 1.0, "phi_sr": 60.0, "phi_sh": 0.0},
}


def _polluted(reference, omega, harmonics):
    t = reference.times
    peak = reference.samples.max() if reference.samples.size else 1.0
    shifts = np.deg2rad([0.0, -120.0, 120.0])
    out = reference.samples.copy()
    for h in harmonics:
        k = int(h["order"])
        out += float(h["fraction"]) * peak * np.sin(k * (omega * t[:, None] + shifts[None, :]))
    return out


def cmd_upfc_sim(args) -> int:
    from .upfc import (
        HysteresisBand,
        UpfcPowerBalance,
        hysteresis_pulses,
        power_balance,
        series_compensation,
        series_reference,
        shunt_compensation,
        shunt_reference,
        thd,
        time_grid,
    )

    inputs = {}
    scenario = dict(DEFAULT_SCENARIO)
    if args.scenario:
        path = _need(Path(args.scenario), "scenario file")
        try:
            scenario.update(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"unreadable scenario {path}: {exc}")
        inputs[path.name] = _digest(path)
    f0 = float(scenario["fundamental_hz"])
    omega = 2 * math.pi * f0
    t = time_grid(f0, scenario["cycles"], scenario["samples_per_cycle"])
    band = HysteresisBand(float(scenario["band"]))
    vref = series_reference(float(scenario["v_lm"]), omega, t)
    iref = shunt_reference(float(scenario["i_1"]), omega, t)
    v_act = _polluted(vref, omega, scenario["voltage_harmonics"])
    i_act = _polluted(iref, omega, scenario["current_harmonics"])
    vc = series_compensation(vref, v_act)
    ic = shunt_compensation(iref, i_act)
    v_fix = v_act + vc.samples
    i_fix = i_act + ic.samples
    vp = hysteresis_pulses(vc.samples, band)
    ip = hysteresis_pulses(ic.samples, band)

    cols = {"t": t}
    for tag, ref, act, comp, fixed, pulse in (
        ("v", vref.samples, v_act, vc.samples, v_fix, vp),
        ("i", iref.samples, i_act, ic.samples, i_fix, ip),
    ):
        for k, ph in enumerate("abc"):
            cols[f"{tag}_reference_{ph}"] = ref[:, k]
            cols[f"{tag}_actual_{ph}"] = act[:, k]
            cols[f"{tag}_compensation_{ph}"] = comp[:, k]
            cols[f"{tag}_corrected_{ph}"] = fixed[:, k]
            cols[f"{tag}_pulse_{ph}"] = pulse[:, k]
    out = Path(args.out)
    with open(out / "waveforms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(t.size):
            w.writerow(
                [str(int(v[i])) if "_pulse_" in k else repr(float(v[i])) for k, v in cols.items()]
            )
    rate = f0 * scenario["samples_per_cycle"]
    bal = power_balance(UpfcPowerBalance(**scenario["balance"]), shunt_uses_ish=args.shunt_uses_ish)
    data = {
        "fundamental_hz": f0,
        "balance": bal.outputs(),
        "thd_pct": {
            f"{tag}_{kind}_{ph}": thd(x[:, k], f0, rate)
            for tag, a, b in (("v", v_act, v_fix), ("i", i_act, i_fix))
            for kind, x in (("actual", a), ("corrected", b))
            for k, ph in enumerate("abc")
        },
        "manifest": _ref(args),
    }
    _write_json(out / "balance.json", data)
    _record(args, inputs, ["waveforms.csv", "balance.json"])
    return 0


def _synthetic_traces(seed: int, n: int = 200) -> np.ndarray:
    rng = np.random.default_rng(seed)
    dp = rng.uniform(-1.0, 1.0, n)  # load power error
    dv = rng.uniform(-1.0, 1.0, n)  # dc-link voltage error
    target = 1.0 + 0.3 * dp - 0.2 * dv + 0.05 * np.tanh(2 * dp * dv)
    return np.column_stack([dp, dv, target])


def cmd_anfis_train(args) -> int:
    from .anfis import AnfisRegressor

    inputs = {}
    if args.data:
        path = _need(Path(args.data), "training data")
        try:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            data = np.array([[float(r["x"]), float(r["y"]), float(r["target"])] for r in rows])
        except (KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"{path}: expected columns x,y,target ({exc})")
        if data.size == 0:
            raise UsageError(f"{path}: no training rows")
        inputs[path.name] = _digest(path)
    else:
        data = _synthetic_traces(args.seed)
    reg = AnfisRegressor(n_mf=args.n_mf, wiring=args.wiring, epochs=args.epochs, learn_rate=args.learn_rate)
    reg.fit(data[:, :2], data[:, 2])
    out = Path(args.out)
    model = reg.model_.to_dict()
    model["manifest"] = _ref(args)
    _write_json(out / "anfis_model.json", model)
    with open(out / "rmse.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "rmse"))
        for i, r in enumerate(reg.report_.rmse):
            w.writerow((i, repr(float(r))))
    _record(args, inputs, ["anfis_model.json", "rmse.csv"])
    return 0


def cmd_report(args) -> int:
    from .report import write_report

    run = Path(args.run_dir) if args.run_dir else Path(args.out)
    if not run.is_dir():
        raise UsageError(f"run directory not found: {run}")
    model = None
    try:
        model = merge_switches(parse_feeder(Path(args.feeder)))
    except FeederFormatError:
        model = None
    inputs = {}
    for name in ("solution.csv", "estimate.csv", "report.json", "waveforms.csv", "rmse.csv"):
        p = run / name
        if p.exists():
            inputs[name] = _digest(p)
    written = write_report(run, model, manifest={"file": MANIFEST, "run": "report"})
    if run == Path(args.out):
        _record(args, inputs, written)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--feeder", default=str(default_dataset_path()), help="feeder CSV directory (default: bundled)")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--tolerance", type=float, default=1e-6, help="power-flow tolerance in pu")
    common.add_argument("--max-iter", type=int, default=100, help="power-flow sweep limit")

    parser = argparse.ArgumentParser(prog="feederkit", description="Distribution feeder analysis toolkit.")
    parser.add_argument("--version", action="version", version=f"feederkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("validate", parents=[common], help="parse and check a feeder dataset")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("powerflow", parents=[common], help="forward/backward sweep power flow")
    p.set_defaults(func=cmd_powerflow)

    p = sub.add_parser("place-pmu", parents=[common], help="PMU placement and zone partition")
    p.add_argument("--channels", type=_channels, default=math.inf, help="current channels per PMU (N or inf)")
    p.add_argument("--max-zone-size", type=int, default=None)
    p.add_argument("--oracle", action="store_true", help="exhaustive search (small networks only)")
    p.set_defaults(func=cmd_place_pmu)

    p = sub.add_parser("simulate-measurements", parents=[common], help="synthetic measurements from power flow")
    p.add_argument("--placement", default=None, help="placement.json (default: OUT/placement.json)")
    p.add_argument("--sigma-v", type=float, default=0.001)
    p.add_argument("--sigma-i", type=float, default=0.002)
    p.add_argument("--sigma-pseudo", type=float, default=0.10, help="fraction of rated load power")
    p.add_argument("--no-noise", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", parents=[common], help="WLS state estimation")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--parallel", action="store_true", default=True)
    mode.add_argument("--monolithic", action="store_true")
    p.add_argument("--placement", default=None)
    p.add_argument("--measurements", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("upfc-sim", parents=[common], help="UPFC compensation waveforms and power balance")
    p.add_argument("--scenario", default=None, help="scenario JSON (default: built-in)")
    p.add_argument("--shunt-uses-ish", action="store_true", help="alternate shunt P/Q terms")
    p.set_defaults(func=cmd_upfc_sim)

    p = sub.add_parser("anfis-train", parents=[common], help="train the dc-voltage reference estimator")
    p.add_argument("--data", default=None, help="CSV with x,y,target (default: synthetic traces)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--learn-rate", type=float, default=0.01)
    p.add_argument("--n-mf", type=int, default=2)
    p.add_argument("--wiring", choices=("grid", "paired"), default="grid")
    p.set_defaults(func=cmd_anfis_train)

    p = sub.add_parser("report", parents=[common], help="per-bus report and plots for a run directory")
    p.add_argument("run_dir", nargs="?", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FeederFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FeederkitError as exc:
        print(f"error [{exc.kind}]: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
