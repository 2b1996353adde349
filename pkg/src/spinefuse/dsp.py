"""Signal conditioning for force and ultrasound sweeps.

Second-order Butterworth low-pass sections are designed by bilinear
transform with prewarping and applied forward-backward, so vertebra peaks
are not displaced along the spine.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import lfilter, lfilter_zi

from spinefuse.errors import DataError, ParameterError
from spinefuse.labels import LevelSegmentation

DRIFT_CUTOFF_HZ = 0.05
SMOOTH_CUTOFF_HZ = 0.3
DEFAULT_SPACING_MM = 0.5
MIN_SETTLE = 12


@dataclass(frozen=True)
class BiquadCoeffs:
    """Second-order section with ``a0`` normalised to one."""

    b0: float
    b1: float
    b2: float
    a1: float
    a2: float
    cutoff_ratio: float | None = None  # fc / fs, recorded by the designer

    @property
    def b(self) -> np.ndarray:
        return np.array([self.b0, self.b1, self.b2])

    @property
    def a(self) -> np.ndarray:
        return np.array([1.0, self.a1, self.a2])

    def poles(self) -> np.ndarray:
        return np.roots(self.a)

    def is_stable(self, margin: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0 - margin))

    def response(self, freq_hz, sample_rate_hz):
        """Complex frequency response at ``freq_hz``."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freq_hz, dtype=float) / sample_rate_hz)
        zi = 1.0 / z
        return (self.b0 + self.b1 * zi + self.b2 * zi**2) / (1.0 + self.a1 * zi + self.a2 * zi**2)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class UniformTrace:
    origin_mm: float
    spacing_mm: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.spacing_mm <= 0:
            raise ParameterError("spacing_mm must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("trace values must be finite")

    def __len__(self):
        return self.values.size

    @property
    def positions_mm(self) -> np.ndarray:
        return self.origin_mm + self.spacing_mm * np.arange(self.values.size)

    def same_grid(self, other: "UniformTrace") -> bool:
        return (
            len(self) == len(other)
            and self.origin_mm == other.origin_mm
            and self.spacing_mm == other.spacing_mm
        )


def design_butterworth_lp(order: int, cutoff_hz: float, sample_rate_hz: float) -> BiquadCoeffs:
    if order != 2:
        raise ParameterError("only second-order sections are supported")
    if sample_rate_hz <= 0 or not 0 < cutoff_hz < sample_rate_hz / 2:
        raise ParameterError(
            f"cutoff {cutoff_hz} Hz must lie in (0, {sample_rate_hz / 2}) for fs={sample_rate_hz} Hz"
        )
    k = math.tan(math.pi * cutoff_hz / sample_rate_hz)
    k2 = k * k
    norm = 1.0 / (1.0 + math.sqrt(2.0) * k + k2)
    b0 = k2 * norm
    return BiquadCoeffs(
        b0=b0,
        b1=2.0 * b0,
        b2=b0,
        a1=2.0 * (k2 - 1.0) * norm,
        a2=(1.0 - math.sqrt(2.0) * k + k2) * norm,
        cutoff_ratio=cutoff_hz / sample_rate_hz,
    )


def settle_length(coeffs: BiquadCoeffs, n: int) -> int:
    """Transient length in samples, ``6 / (fc/fs)`` capped at a third of the signal.

    Coefficients without a recorded cutoff fall back to six pole time constants.
    """
    if coeffs.cutoff_ratio is not None:
        raw = 6.0 / coeffs.cutoff_ratio
    else:
        r = float(np.max(np.abs(coeffs.poles())))
        raw = 6.0 / -math.log(r) if 0 < r < 1 else MIN_SETTLE
    return int(min(math.ceil(raw), (n - 1) // 3))


def pad_length(coeffs: BiquadCoeffs, n: int) -> int:
    return 3 * max(settle_length(coeffs, n), MIN_SETTLE)


def _single_pass(coeffs: BiquadCoeffs, x: np.ndarray) -> np.ndarray:
    zi = lfilter_zi(coeffs.b, coeffs.a) * x[0]
    y, _ = lfilter(coeffs.b, coeffs.a, x, zi=zi)
    return y


def filtfilt(coeffs: BiquadCoeffs, x) -> np.ndarray:
    """Zero-phase filtering with odd-symmetric edge extension."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ParameterError("filtfilt expects a 1D signal")
    n = x.size
    pad = pad_length(coeffs, n)
    if n <= pad:
        raise ParameterError(
            f"signal of {n} samples is too short; need more than {pad} for this filter"
        )
    head = 2 * x[0] - x[pad:0:-1]
    tail = 2 * x[-1] - x[-2:-pad - 2:-1]
    ext = np.concatenate([head, x, tail])
    y = _single_pass(coeffs, ext)
    y = _single_pass(coeffs, y[::-1])[::-1]
    return y[pad:pad + n]


def remove_drift(x, sample_rate_hz: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    coeffs = design_butterworth_lp(2, DRIFT_CUTOFF_HZ, sample_rate_hz)
    return x - filtfilt(coeffs, x)


def smooth(x, sample_rate_hz: float) -> np.ndarray:
    coeffs = design_butterworth_lp(2, SMOOTH_CUTOFF_HZ, sample_rate_hz)
    return filtfilt(coeffs, x)


def normalize01(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ParameterError("cannot normalise an empty signal")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _collapse_duplicates(positions, values):
    uniq, inverse = np.unique(positions, return_inverse=True)
    if uniq.size == positions.size:
        return positions, values
    sums = np.bincount(inverse, weights=values)
    counts = np.bincount(inverse)
    return uniq, sums / counts


def _check_positions(positions):
    if positions.ndim != 1 or positions.size < 2:
        raise ParameterError("need at least two positions")
    if np.any(np.diff(positions) < 0):
        raise ParameterError("positions must be monotone nondecreasing")
    if positions[-1] == positions[0]:
        raise ParameterError("positions span zero distance")


def grid_size(start: float, stop: float, spacing_mm: float) -> int:
    return int(math.floor((stop - start) / spacing_mm + 1e-9)) + 1


def resample_to_grid(positions_mm, values, spacing_mm: float = DEFAULT_SPACING_MM) -> UniformTrace:
    positions = np.asarray(positions_mm, dtype=float)
    values = np.asarray(values, dtype=float)
    if positions.shape != values.shape:
        raise ParameterError("positions and values must have the same length")
    if spacing_mm <= 0:
        raise ParameterError("spacing_mm must be positive")
    _check_positions(positions)
    pos, val = _collapse_duplicates(positions, values)
    origin = float(pos[0])
    grid = origin + spacing_mm * np.arange(grid_size(origin, pos[-1], spacing_mm))
    return UniformTrace(origin, spacing_mm, np.interp(grid, pos, val))


def resample_labels(positions_mm, labels, origin_mm: float, spacing_mm: float, n: int) -> LevelSegmentation:
    """Nearest-sample label at every grid point (ties go to the earlier sample)."""
    positions = np.asarray(positions_mm, dtype=float)
    labels = np.asarray(labels)
    grid = origin_mm + spacing_mm * np.arange(n)
    right = np.clip(np.searchsorted(positions, grid, side="left"), 1, positions.size - 1)
    left = right - 1
    pick = np.where(grid - positions[left] <= positions[right] - grid, left, right)
    return LevelSegmentation(labels[pick], origin_mm, spacing_mm)


def preprocess_scan(record, spacing_mm: float = DEFAULT_SPACING_MM):
    """Condition one sweep into force and ultrasound traces on a shared grid.

    Returns ``(force, us, labels)``.
    """
    t = np.asarray(record.timestamps, dtype=float)
    if t.size < 2 or np.any(np.diff(t) <= 0):
        raise ParameterError("timestamps must be strictly increasing")
    fs = (t.size - 1) / (t[-1] - t[0])
    force = normalize01(smooth(remove_drift(record.fy, fs), fs))
    us = normalize01(smooth(record.us_prob, fs))
    force_trace = resample_to_grid(record.positions, force, spacing_mm)
    us_trace = resample_to_grid(record.positions, us, spacing_mm)
    labels = resample_labels(
        record.positions, record.ground_truth, force_trace.origin_mm, spacing_mm, len(force_trace)
    )
    return force_trace, us_trace, labels


# --- files -----------------------------------------------------------------

TRACE_COLUMNS = ("pos_mm", "value")


def write_trace_csv(trace: UniformTrace, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for p, v in zip(trace.positions_mm, trace.values):
            w.writerow([repr(float(p)), repr(float(v))])


def read_trace_csv(path) -> UniformTrace:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    if not rows or tuple(h.strip() for h in rows[0]) != TRACE_COLUMNS:
        raise DataError(f"{path}:1: expected header pos_mm,value")
    pos, val = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        try:
            pos.append(float(row[0]))
            val.append(float(row[1]))
        except ValueError:
            raise DataError(f"{path}:{lineno}: not a number") from None
    if len(pos) < 2:
        raise DataError(f"{path}: trace needs at least two rows")
    pos = np.asarray(pos)
    spacing = float(np.round((pos[-1] - pos[0]) / (len(pos) - 1), 12))
    if spacing <= 0 or not np.allclose(np.diff(pos), spacing, rtol=0, atol=1e-9):
        raise DataError(f"{path}: positions are not equally spaced")
    return UniformTrace(float(pos[0]), spacing, np.asarray(val))
