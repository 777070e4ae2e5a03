"""Run-directory report: per-bus voltage table and static SVG plots."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import FeederkitError
from .feeder import FeederModel
from .upfc import thd

__all__ = ["voltage_percent", "drop_percent", "build_report", "write_report"]


def voltage_percent(mag_pu: float) -> float:
    return 100.0 * mag_pu


def drop_percent(mag_pu: float) -> float:
    """Drop below nominal in percent; negative above nominal."""
    return 100.0 * (1.0 - mag_pu)


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _magnitudes(path: Path) -> dict[tuple[int, str], tuple[float, float]]:
    out = {}
    for row in _read_rows(path):
        mag = row.get("mag_pu", row.get("magnitude_pu"))
        ang = row.get("angle_deg")
        out[(int(row["bus"]), row["phase"])] = (float(mag), float(ang))
    return out


def build_report(run_dir: str | Path, model: FeederModel | None = None) -> dict:
    run = Path(run_dir)
    solution = run / "solution.csv"
    estimate = run / "estimate.csv"
    previous = run / "report.json"
    waves = run / "waveforms.csv"
    rmse = run / "rmse.csv"
    if not any(p.exists() for p in (solution, estimate, waves, rmse)):
        raise FeederkitError(f"{run} holds no solution, estimate, waveform or training artifacts", "empty-run-directory")

    report: dict = {}
    volts = _magnitudes(solution) if solution.exists() else _magnitudes(estimate) if estimate.exists() else {}
    errors = {}
    if previous.exists():
        est = json.loads(previous.read_text()).get("estimation")
        if est is not None:
            report["estimation"] = est
            for r in est["errors"]["rows"]:
                errors[(r["bus"], r["phase"])] = r["magnitude_error_pct"]
    if volts:
        report["voltage_source"] = "solution.csv" if solution.exists() else "estimate.csv"
        rows = []
        for (bus, ph), (mag, ang) in sorted(volts.items()):
            row = {
                "bus": bus,
                "phase": ph,
                "mag_pu": round(mag, 4),
                "angle_deg": round(ang, 4),
                "voltage_pct": round(voltage_percent(mag), 2),
                "drop_pct": round(drop_percent(mag), 2),
            }
            if errors:
                row["error_pct"] = errors.get((bus, ph))
            rows.append(row)
        report["buses"] = rows
    if waves.exists():
        report["thd_pct"] = _waveform_thd(waves)
    if rmse.exists():
        report["training_rmse"] = [float(r["rmse"]) for r in _read_rows(rmse)]
    return report


def _waveform_thd(path: Path) -> dict:
    rows = _read_rows(path)
    t = np.array([float(r["t"]) for r in rows])
    out = {}
    if t.size < 2:
        return out
    rate = 1.0 / (t[1] - t[0])
    meta = path.with_name("balance.json")
    f0 = json.loads(meta.read_text()).get("fundamental_hz", 60.0) if meta.exists() else 60.0
    for col in rows[0]:
        if col.startswith(("v_actual_", "i_actual_", "v_corrected_", "i_corrected_")):
            x = np.array([float(r[col]) for r in rows])
            try:
                out[col] = round(thd(x, f0, rate), 4)
            except FeederkitError:
                out[col] = None
    return out


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "feederkit"
    fig, ax = plt.subplots(figsize=(7, 4))
    return plt, fig, ax


def _save(plt, fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_report(run_dir: str | Path, model: FeederModel | None = None, manifest: dict | None = None) -> list[str]:
    """Write report.json and the applicable plots; returns the file names written."""
    run = Path(run_dir)
    report = build_report(run, model)
    written = []

    if "buses" in report and model is not None:
        dist = model.tree.distance_ft()
        plt, fig, ax = _figure()
        for ph, marker in zip("ABC", "o^s"):
            pts = sorted(
                (dist[model.resolve(r["bus"])] / 5280.0, r["mag_pu"]) for r in report["buses"] if r["phase"] == ph
            )
            if pts:
                ax.plot(*zip(*pts), marker, ms=3, label=f"phase {ph}")
        ax.set_xlabel("distance from slack (mi)")
        ax.set_ylabel("voltage (pu)")
        ax.legend()
        _save(plt, fig, run / "voltage_profile.svg")
        written.append("voltage_profile.svg")

    if "estimation" in report:
        errs = [r["magnitude_error_pct"] for r in report["estimation"]["errors"]["rows"]]
        plt, fig, ax = _figure()
        ax.hist(errs, bins=30)
        ax.set_xlabel("estimation error (%)")
        ax.set_ylabel("bus phases")
        _save(plt, fig, run / "error_histogram.svg")
        written.append("error_histogram.svg")

    if "training_rmse" in report:
        plt, fig, ax = _figure()
        ax.semilogy(range(len(report["training_rmse"])), report["training_rmse"])
        ax.set_xlabel("epoch")
        ax.set_ylabel("RMSE")
        _save(plt, fig, run / "rmse.svg")
        written.append("rmse.svg")

    if manifest is not None:
        report["manifest"] = manifest
    report["plots"] = written
    (run / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return ["report.json"] + written

