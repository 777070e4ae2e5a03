"""UPFC series/shunt reference generation, compensation, hysteresis switching,
power balance and THD over uniformly sampled three-phase waveforms.

Phase rotation is A/B/C = 0/-120/+120 degrees throughout the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import SignalError

__all__ = [
    "SeriesReference",
    "ShuntReference",
    "CompensationSignal",
    "HysteresisBand",
    "UpfcPowerBalance",
    "UpfcParameters",
    "series_reference",
    "series_compensation",
    "shunt_reference",
    "shunt_compensation",
    "hysteresis_pulses",
    "power_balance",
    "thd",
    "time_grid",
]

_SHIFTS = np.deg2rad([0.0, -120.0, 120.0])


def time_grid(fundamental_hz: float = 60.0, cycles: float = 4, samples_per_cycle: int = 64) -> np.ndarray:
    n = int(round(cycles * samples_per_cycle))
    return np.arange(n) / (fundamental_hz * samples_per_cycle)


def _balanced(peak: float, omega: float, times) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise SignalError("time grid is empty", "empty-time-grid")
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise SignalError("time grid must be strictly increasing", "bad-time-grid")
    if not (peak > 0 and omega > 0):
        raise SignalError("peak and omega must be positive", "invalid-value")
    return t, peak * np.sin(omega * t[:, None] + _SHIFTS[None, :])


@dataclass(frozen=True, eq=False)
class SeriesReference:
    v_lm: float
    omega: float
    times: np.ndarray
    samples: np.ndarray  # (n, 3): V*_La, V*_Lb, V*_Lc


@dataclass(frozen=True, eq=False)
class ShuntReference:
    i_1: float
    omega: float
    times: np.ndarray
    samples: np.ndarray  # (n, 3): I*_sa, I*_sb, I*_sc


@dataclass(frozen=True, eq=False)
class CompensationSignal:
    kind: str  # "series-voltage" | "shunt-current"
    times: np.ndarray
    samples: np.ndarray


@dataclass(frozen=True)
class HysteresisBand:
    half_width: float

    def __post_init__(self):
        if not self.half_width > 0:
            raise SignalError("hysteresis half width must be positive", "invalid-value")


def series_reference(v_lm: float, omega: float, times) -> SeriesReference:
    """Balanced reference load voltage with peak ``v_lm``."""
    t, s = _balanced(v_lm, omega, times)
    return SeriesReference(v_lm, omega, t, s)


def shunt_reference(i_1: float, omega: float, times) -> ShuntReference:
    """Balanced reference source current with peak ``i_1``."""
    t, s = _balanced(i_1, omega, times)
    return ShuntReference(i_1, omega, t, s)


def _compensate(reference, actual, kind) -> CompensationSignal:
    actual = np.asarray(actual, dtype=float)
    if actual.shape != reference.samples.shape:
        raise SignalError(
            f"actual waveform shape {actual.shape} does not match reference {reference.samples.shape}",
            "grid-mismatch",
        )
    return CompensationSignal(kind, reference.times, reference.samples - actual)


def series_compensation(reference: SeriesReference, actual) -> CompensationSignal:
    """Series injection V_C = V*_L - V_L per phase and sample."""
    return _compensate(reference, actual, "series-voltage")


def shunt_compensation(reference: ShuntReference, actual) -> CompensationSignal:
    """Shunt injection I_c = I*_s - I_s per phase and sample."""
    return _compensate(reference, actual, "shunt-current")


def hysteresis_pulses(error, band: HysteresisBand) -> np.ndarray:
    """Two-level switching states (+1/-1) of a hysteresis comparator.

    Works on a 1-D trace or column-wise on an (n, phases) array.
    """
    e = np.asarray(error, dtype=float)
    flat = e.ndim == 1
    if flat:
        e = e[:, None]
    h = band.half_width
    out = np.empty(e.shape, dtype=np.int8)
    if e.shape[0] == 0:
        return out[:, 0] if flat else out
    state = np.where(e[0] >= 0, 1, -1).astype(np.int8)
    for k in range(e.shape[0]):
        state = np.where(e[k] > h, 1, np.where(e[k] < -h, -1, state)).astype(np.int8)
        out[k] = state
    return out[:, 0] if flat else out


@dataclass(frozen=True)
class UpfcParameters:
    c_sh: float
    c_l: float
    v_dc_ref: float
    v_dc: float

    def __post_init__(self):
        if not (self.c_sh > 0 and self.c_l > 0):
            raise ValueError("capacitances must be positive")


@dataclass(frozen=True)
class UpfcPowerBalance:
    """Scalar quantities of the compensated source/series/shunt/load balance.

    Magnitudes are RMS, angles in degrees.  The source angle is zero by
    construction.  ``p_*``/``q_*`` are filled by :func:`power_balance`.
    """

    v_s: float
    i_s: float
    v_l: float = 0.0
    i_l: float = 0.0
    v_sr: float = 0.0
    i_sh: float = 0.0
    phi_sr: float = 0.0
    phi_sh: float = 0.0
    phi_l: float = 0.0
    z_s: complex = 0j
    z_sr: complex = 0j
    v_r: float = 0.0
    p_s: float | None = None
    q_s: float | None = None
    p_sr: float | None = None
    q_sr: float | None = None
    p_sh: float | None = None
    q_sh: float | None = None
    p_l: float | None = None
    q_l: float | None = None

    def outputs(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("p_s", "q_s", "p_sr", "q_sr", "p_sh", "q_sh", "p_l", "q_l")}


def power_balance(inputs: UpfcPowerBalance, shunt_uses_ish: bool = False) -> UpfcPowerBalance:
    """Fill the source, series, shunt and load P/Q terms.

    The shunt pair uses the default form ``V_L I_s cos(phi_sr)`` /
    ``V_s I_s sin(phi_sr)`` unless ``shunt_uses_ish`` selects
    ``V_L I_sh cos(phi_sh)`` / ``V_L I_sh sin(phi_sh)``.
    """
    x = inputs
    if min(x.v_s, x.i_s, x.v_l, x.i_l, x.v_sr, x.i_sh) < 0:
        raise ValueError("magnitudes must be non-negative")
    sr, sh = math.radians(x.phi_sr), math.radians(x.phi_sh)
    p_s, q_s = x.v_s * x.i_s, 0.0
    p_sr = x.v_s * x.i_s * math.cos(sr)
    q_sr = x.v_s * x.i_s * math.sin(sr)
    if shunt_uses_ish:
        p_sh = x.v_l * x.i_sh * math.cos(sh)
        q_sh = x.v_l * x.i_sh * math.sin(sh)
    else:
        p_sh = x.v_l * x.i_s * math.cos(sr)
        q_sh = x.v_s * x.i_s * math.sin(sr)
    p_l = x.v_s * x.i_s * (1 - math.cos(sr)) + x.v_l * x.i_s * (math.cos(sr) - math.cos(sh)) - x.v_s * x.i_s * math.cos(sh)
    q_l = x.v_l * x.i_s * (math.sin(sr) - math.sin(sh)) + x.v_l * x.i_l * math.sin(sh) - x.v_s * x.i_s * math.sin(sr)
    return replace(x, p_s=p_s, q_s=q_s, p_sr=p_sr, q_sr=q_sr, p_sh=p_sh, q_sh=q_sh, p_l=p_l, q_l=q_l)


def thd(samples, fundamental_hz: float, sample_rate: float, max_order: int = 50) -> float:
    """Total harmonic distortion in percent, harmonics 2..max_order.

    Uses the DFT over the largest whole number of fundamental periods that fits
    in ``samples``; harmonics at or above Nyquist are ignored.
    """
    x = np.asarray(samples, dtype=float)
    per_period = sample_rate / fundamental_hz
    periods = int(math.floor(x.size / per_period + 1e-9))
    if periods < 1:
        raise SignalError("need at least one full fundamental period", "too-few-samples")
    n = int(round(periods * per_period))
    spectrum = np.abs(np.fft.rfft(x[:n])) * 2.0 / n
    fund = spectrum[periods]
    if fund <= 1e-12 * max(1.0, float(np.max(np.abs(x[:n])))):
        raise SignalError("fundamental component is zero", "zero-fundamental")
    bins = [h * periods for h in range(2, max_order + 1) if h * periods < n / 2]
    return float(math.sqrt(sum(spectrum[b] ** 2 for b in bins)) / fund * 100.0)
