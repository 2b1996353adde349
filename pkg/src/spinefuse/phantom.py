"""Synthetic robotic back sweeps.

A phantom is a 1D back profile made of one Gaussian bump per lumbar level.
The probe slides along it at constant speed while pressing with a constant
normal force; the along-spine reaction force follows the small-angle model
``Fy = -Fz * dh/dy``.  The ultrasound channel stands in for a frame-level
classifier: a train of probability peaks at the vertebra centres plus noise.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from spinefuse.errors import DataError, DomainError, ParameterError
from spinefuse.labels import CLASS_NAMES, GAP, NUM_LEVELS, level_index

SCAN_COLUMNS = ("t_s", "pos_mm", "fy_n", "fz_n", "us_prob")
LABEL_COLUMNS = ("pos_mm", "level")
DRIFT_CUTOFF_HZ = 0.05


@dataclass
class MotionBurst:
    position: float
    width: float
    amplitude: float


@dataclass
class CorruptionSpec:
    """Per-sensor degradations applied while sampling a sweep.

    ``dropped_us_levels`` removes ultrasound peaks; ``attenuated_force_levels``
    scales the force response of individual bumps; ``motion_burst`` adds a
    transient to Fy, as a patient movement would.
    """

    dropped_us_levels: frozenset[int] = frozenset()
    attenuated_force_levels: dict[int, float] = field(default_factory=dict)
    motion_burst: MotionBurst | None = None

    def __post_init__(self):
        self.dropped_us_levels = frozenset(int(k) for k in self.dropped_us_levels)
        self.attenuated_force_levels = {
            int(k): float(v) for k, v in self.attenuated_force_levels.items()
        }
        if isinstance(self.motion_burst, dict):
            self.motion_burst = MotionBurst(**self.motion_burst)
        for k in set(self.dropped_us_levels) | set(self.attenuated_force_levels):
            if not 0 <= k < NUM_LEVELS:
                raise ParameterError(f"level index {k} outside 0..{NUM_LEVELS - 1}")
        for k, gain in self.attenuated_force_levels.items():
            if not 0.0 <= gain <= 1.0:
                raise ParameterError(f"force gain for level {k} must lie in [0, 1], got {gain}")

    @property
    def is_clean(self) -> bool:
        return (
            not self.dropped_us_levels
            and all(g == 1.0 for g in self.attenuated_force_levels.values())
            and self.motion_burst is None
        )

    def to_dict(self) -> dict:
        return {
            "dropped_us_levels": sorted(self.dropped_us_levels),
            "attenuated_force_levels": {
                str(k): v for k, v in sorted(self.attenuated_force_levels.items())
            },
            "motion_burst": None if self.motion_burst is None else asdict(self.motion_burst),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        return cls(
            dropped_us_levels=frozenset(d.get("dropped_us_levels", ())),
            attenuated_force_levels={
                int(k): v for k, v in d.get("attenuated_force_levels", {}).items()
            },
            motion_burst=d.get("motion_burst"),
        )


@dataclass
class DriftParams:
    """Slow baseline wander: a sinusoid below the drift cutoff plus a ramp."""

    amplitude: float = 0.0
    frequency: float = 0.01
    phase: float = 0.0
    ramp: float = 0.0  # N/s


@dataclass
class SpinePhantom:
    scan_length: float = 150.0
    vertebra_centers: tuple[float, ...] = (15.0, 45.0, 75.0, 105.0, 135.0)
    bump_amplitude_per_level: tuple[float, ...] = (2.0,) * NUM_LEVELS
    bump_sigma_per_level: tuple[float, ...] = (4.0,) * NUM_LEVELS
    applied_fz: float = 10.0
    robot_speed: float = 20.0
    sample_rate: float = 30.0
    drift_params: DriftParams = field(default_factory=DriftParams)
    noise_std_force: float = 0.0
    us_peak_height_per_level: tuple[float, ...] = (0.9,) * NUM_LEVELS
    us_peak_sigma_per_level: tuple[float, ...] = (5.0,) * NUM_LEVELS
    us_noise_std: float = 0.0
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    label_halfwidth: float = 5.0
    seed: int = 0

    def __post_init__(self):
        self.vertebra_centers = tuple(float(v) for v in self.vertebra_centers)
        self.bump_amplitude_per_level = tuple(float(v) for v in self.bump_amplitude_per_level)
        self.bump_sigma_per_level = tuple(float(v) for v in self.bump_sigma_per_level)
        self.us_peak_height_per_level = tuple(float(v) for v in self.us_peak_height_per_level)
        self.us_peak_sigma_per_level = tuple(float(v) for v in self.us_peak_sigma_per_level)
        if isinstance(self.drift_params, dict):
            self.drift_params = DriftParams(**self.drift_params)
        if isinstance(self.corruption, dict):
            self.corruption = CorruptionSpec.from_dict(self.corruption)
        self.validate()

    def validate(self):
        c = np.asarray(self.vertebra_centers)
        for name in (
            "vertebra_centers",
            "bump_amplitude_per_level",
            "bump_sigma_per_level",
            "us_peak_height_per_level",
            "us_peak_sigma_per_level",
        ):
            if len(getattr(self, name)) != NUM_LEVELS:
                raise ParameterError(f"{name} needs exactly {NUM_LEVELS} entries")
        if self.scan_length <= 0:
            raise ParameterError("scan_length must be positive")
        if np.any(np.diff(c) <= 0):
            raise ParameterError("vertebra_centers must be strictly increasing")
        if c[0] <= 0 or c[-1] >= self.scan_length:
            raise ParameterError("vertebra_centers must lie inside (0, scan_length)")
        if min(self.bump_sigma_per_level) <= 0 or min(self.us_peak_sigma_per_level) <= 0:
            raise ParameterError("bump widths must be positive")
        if self.sample_rate <= 0 or self.robot_speed <= 0:
            raise ParameterError("sample_rate and robot_speed must be positive")
        if not 0 <= self.drift_params.frequency < DRIFT_CUTOFF_HZ:
            raise ParameterError(
                f"drift frequency must be below {DRIFT_CUTOFF_HZ} Hz, "
                f"got {self.drift_params.frequency}"
            )
        if not all(0.0 <= h <= 1.0 for h in self.us_peak_height_per_level):
            raise ParameterError("ultrasound peak heights must lie in [0, 1]")
        if self.noise_std_force < 0 or self.us_noise_std < 0 or self.label_halfwidth < 0:
            raise ParameterError("noise levels and label_halfwidth must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vertebra_centers"] = list(self.vertebra_centers)
        d["corruption"] = self.corruption.to_dict()
        for key in (
            "bump_amplitude_per_level",
            "bump_sigma_per_level",
            "us_peak_height_per_level",
            "us_peak_sigma_per_level",
        ):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SpinePhantom":
        return cls(**d)


@dataclass
class ScanRecord:
    """Raw samples of one sweep; ``ground_truth`` holds a class per sample."""

    timestamps: np.ndarray
    positions: np.ndarray
    fy: np.ndarray
    fz: np.ndarray
    us_prob: np.ndarray
    ground_truth: np.ndarray

    def __post_init__(self):
        n = len(self.timestamps)
        for name in ("positions", "fy", "fz", "us_prob", "ground_truth"):
            if len(getattr(self, name)) != n:
                raise ParameterError(f"ScanRecord.{name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.timestamps)

    def subset(self, stop: int) -> "ScanRecord":
        return ScanRecord(
            self.timestamps[:stop],
            self.positions[:stop],
            self.fy[:stop],
            self.fz[:stop],
            self.us_prob[:stop],
            self.ground_truth[:stop],
        )


def _check_domain(phantom: SpinePhantom, y):
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y > phantom.scan_length) or not np.all(np.isfinite(y)):
        raise DomainError(f"position outside [0, {phantom.scan_length}] mm")
    return y


def _bumps(phantom: SpinePhantom, y: np.ndarray):
    mu = np.asarray(phantom.vertebra_centers)[:, None]
    sigma = np.asarray(phantom.bump_sigma_per_level)[:, None]
    amp = np.asarray(phantom.bump_amplitude_per_level)[:, None]
    g = amp * np.exp(-((y[None, :] - mu) ** 2) / (2.0 * sigma**2))
    slope = -(y[None, :] - mu) / sigma**2 * g
    return g, slope


def tissue_profile(phantom: SpinePhantom, y):
    """Back surface height (mm) above the flat baseline at position ``y``."""
    y = _check_domain(phantom, y)
    g, _ = _bumps(phantom, np.atleast_1d(y))
    h = g.sum(axis=0)
    return h if y.ndim else float(h[0])


def reaction_fy(phantom: SpinePhantom, y, gains=None):
    """Noise-free along-spine reaction force, ``-Fz * h'(y)``.

    ``gains`` optionally scales the contribution of each level.
    """
    y = _check_domain(phantom, y)
    _, slope = _bumps(phantom, np.atleast_1d(y))
    if gains is not None:
        slope = slope * np.asarray(gains, dtype=float)[:, None]
    fy = -phantom.applied_fz * slope.sum(axis=0)
    return fy if y.ndim else float(fy[0])


def ground_truth_labels(phantom: SpinePhantom, positions) -> np.ndarray:
    positions = np.asarray(positions, dtype=float)
    labels = np.full(positions.shape, GAP, dtype=np.int64)
    for k, mu in enumerate(phantom.vertebra_centers):
        labels[np.abs(positions - mu) <= phantom.label_halfwidth] = k + 1
    return labels


def generate_scan(phantom: SpinePhantom) -> ScanRecord:
    rng = np.random.default_rng(phantom.seed)
    duration = phantom.scan_length / phantom.robot_speed
    n = int(math.floor(duration * phantom.sample_rate + 1e-9)) + 1
    t = np.arange(n) / phantom.sample_rate
    y = np.minimum(phantom.robot_speed * t, phantom.scan_length)

    gains = np.ones(NUM_LEVELS)
    for k, gain in phantom.corruption.attenuated_force_levels.items():
        gains[k] = gain
    fy = reaction_fy(phantom, y, gains=gains)
    d = phantom.drift_params
    if d.amplitude or d.ramp:
        fy = fy + d.amplitude * np.sin(2 * np.pi * d.frequency * t + d.phase) + d.ramp * t
    burst = phantom.corruption.motion_burst
    if burst is not None:
        fy = fy + burst.amplitude * np.exp(-((y - burst.position) ** 2) / (2.0 * burst.width**2))
    # Draw order is fixed so a seed pins every channel.
    force_noise = rng.normal(0.0, 1.0, size=n)
    fz_noise = rng.normal(0.0, 1.0, size=n)
    us_noise = rng.normal(0.0, 1.0, size=n)
    if phantom.noise_std_force > 0:
        fy = fy + phantom.noise_std_force * force_noise
    fz = np.full(n, float(phantom.applied_fz))
    if phantom.noise_std_force > 0:
        fz = fz + phantom.noise_std_force * fz_noise

    us = np.zeros(n)
    for k, mu in enumerate(phantom.vertebra_centers):
        if k in phantom.corruption.dropped_us_levels:
            continue
        s = phantom.us_peak_sigma_per_level[k]
        us += phantom.us_peak_height_per_level[k] * np.exp(-((y - mu) ** 2) / (2.0 * s**2))
    if phantom.us_noise_std > 0:
        us = us + phantom.us_noise_std * us_noise
    us = np.clip(us, 0.0, 1.0)

    return ScanRecord(t, y, fy, fz, us, ground_truth_labels(phantom, y))


# --- cohorts ---------------------------------------------------------------

SCENARIOS = ("clean", "us_dropout", "force_attenuated")


@dataclass
class CohortConfig:
    """Recipe for a synthetic cohort with BMI-like subject variation.

    Subjects below ``bmi_threshold`` are scanned at 10 N and the rest at
    15 N; a thicker soft-tissue layer flattens the palpable bumps.
    """

    n_train: int = 27
    n_val: int = 7
    n_test: int = 5
    n_test_corrupted: int = 0
    corrupted_fraction: float = 0.4
    first_center_range: tuple[float, float] = (10.0, 22.0)
    spacing_range: tuple[float, float] = (25.0, 31.0)
    scan_length: float = 150.0
    robot_speed: float = 20.0
    sample_rate: float = 30.0
    bmi_range: tuple[float, float] = (20.0, 30.0)
    bmi_threshold: float = 23.0
    fz_low_bmi: float = 10.0
    fz_high_bmi: float = 15.0
    bump_amplitude_range: tuple[float, float] = (1.5, 3.0)
    bump_sigma_range: tuple[float, float] = (3.0, 6.0)
    noise_std_force: float = 0.3
    drift_amplitude_range: tuple[float, float] = (0.0, 4.0)
    drift_frequency_range: tuple[float, float] = (0.005, 0.04)
    drift_ramp_range: tuple[float, float] = (-0.5, 0.5)
    us_peak_height_range: tuple[float, float] = (0.6, 1.0)
    us_peak_sigma_range: tuple[float, float] = (3.0, 6.0)
    us_noise_std: float = 0.08
    attenuation_gain_max: float = 0.3
    label_halfwidth: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if isinstance(value, list):
                setattr(self, name, tuple(value))
        for name in ("n_train", "n_val", "n_test", "n_test_corrupted"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if not 0.0 <= self.corrupted_fraction <= 1.0:
            raise ParameterError("corrupted_fraction must lie in [0, 1]")


@dataclass
class CohortEntry:
    name: str
    split: str
    scenario: str
    phantom: SpinePhantom


def _uniform(rng, bounds, size=None):
    lo, hi = bounds
    return rng.uniform(lo, hi, size=size)


def sample_phantom(config: CohortConfig, rng: np.random.Generator, seed: int,
                   scenario: str = "clean") -> SpinePhantom:
    bmi = _uniform(rng, config.bmi_range)
    fz = config.fz_low_bmi if bmi < config.bmi_threshold else config.fz_high_bmi
    tissue = config.bmi_range[0] / bmi
    first = _uniform(rng, config.first_center_range)
    spacing = _uniform(rng, config.spacing_range, size=NUM_LEVELS - 1)
    centers = first + np.concatenate([[0.0], np.cumsum(spacing)])
    if centers[-1] >= config.scan_length:
        centers = centers * (config.scan_length - 1.0) / (centers[-1] + 1.0)
    amplitude = _uniform(rng, config.bump_amplitude_range, size=NUM_LEVELS) * tissue
    sigma = _uniform(rng, config.bump_sigma_range, size=NUM_LEVELS)
    drift = DriftParams(
        amplitude=float(_uniform(rng, config.drift_amplitude_range)),
        frequency=float(_uniform(rng, config.drift_frequency_range)),
        phase=float(rng.uniform(0.0, 2 * np.pi)),
        ramp=float(_uniform(rng, config.drift_ramp_range)),
    )
    us_height = _uniform(rng, config.us_peak_height_range, size=NUM_LEVELS)
    us_sigma = _uniform(rng, config.us_peak_sigma_range, size=NUM_LEVELS)

    n_corrupt = int(rng.integers(1, 3))
    levels = sorted(int(k) for k in rng.choice(NUM_LEVELS, size=n_corrupt, replace=False))
    gains = rng.uniform(0.0, config.attenuation_gain_max, size=n_corrupt)
    if scenario == "clean":
        corruption = CorruptionSpec()
    elif scenario == "us_dropout":
        corruption = CorruptionSpec(dropped_us_levels=frozenset(levels))
    elif scenario == "force_attenuated":
        corruption = CorruptionSpec(
            attenuated_force_levels={k: float(g) for k, g in zip(levels, gains)}
        )
    else:
        raise ParameterError(f"unknown scenario {scenario!r}")

    return SpinePhantom(
        scan_length=config.scan_length,
        vertebra_centers=tuple(float(c) for c in centers),
        bump_amplitude_per_level=tuple(float(a) for a in amplitude),
        bump_sigma_per_level=tuple(float(s) for s in sigma),
        applied_fz=fz,
        robot_speed=config.robot_speed,
        sample_rate=config.sample_rate,
        drift_params=drift,
        noise_std_force=config.noise_std_force,
        us_peak_height_per_level=tuple(float(h) for h in us_height),
        us_peak_sigma_per_level=tuple(float(s) for s in us_sigma),
        us_noise_std=config.us_noise_std,
        corruption=corruption,
        label_halfwidth=config.label_halfwidth,
        seed=seed,
    )


def make_cohort(config: CohortConfig) -> list[CohortEntry]:
    """Draw the phantoms of every split.

    Train and validation sequences mix clean and corrupted scenarios; the
    ``test`` split is clean and ``test_corrupted`` alternates ultrasound
    dropouts with force attenuation.
    """
    rng = np.random.default_rng(config.seed)
    entries = []
    idx = 0

    def add(split, scenario):
        nonlocal idx
        seed = int(rng.integers(0, 2**31 - 1))
        phantom = sample_phantom(config, rng, seed, scenario)
        entries.append(CohortEntry(f"{split}_{idx:03d}", split, scenario, phantom))
        idx += 1

    for split, count in (("train", config.n_train), ("val", config.n_val)):
        for _ in range(count):
            if rng.uniform() < config.corrupted_fraction:
                scenario = SCENARIOS[1 + int(rng.integers(0, 2))]
            else:
                scenario = "clean"
            add(split, scenario)
    for _ in range(config.n_test):
        add("test", "clean")
    for i in range(config.n_test_corrupted):
        add("test_corrupted", SCENARIOS[1 + i % 2])
    return entries


# --- files -----------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def write_scan_csv(record: ScanRecord, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCAN_COLUMNS)
        for row in zip(record.timestamps, record.positions, record.fy, record.fz, record.us_prob):
            w.writerow([_fmt(v) for v in row])


def write_labels_csv(positions, labels, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        for p, k in zip(positions, labels):
            w.writerow([_fmt(p), CLASS_NAMES[int(k)]])


def _read_rows(path, columns):
    path = Path(path)
    try:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != columns:
                raise DataError(f"{path}:1: expected header {','.join(columns)}, got {header}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(columns):
                    raise DataError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
                rows.append((lineno, row))
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    return rows


def _to_float(path, lineno, text):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: not a number: {text!r}") from None


def read_labels_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = _read_rows(path, LABEL_COLUMNS)
    pos = np.empty(len(rows))
    lab = np.empty(len(rows), dtype=np.int64)
    for i, (lineno, (p, name)) in enumerate(rows):
        pos[i] = _to_float(path, lineno, p)
        try:
            lab[i] = level_index(name.strip())
        except ParameterError:
            raise DataError(f"{path}:{lineno}: unknown level {name!r}") from None
    return pos, lab


def read_scan(scan_path, labels_path) -> ScanRecord:
    rows = _read_rows(scan_path, SCAN_COLUMNS)
    data = np.empty((len(rows), len(SCAN_COLUMNS)))
    for i, (lineno, row) in enumerate(rows):
        for j, text in enumerate(row):
            data[i, j] = _to_float(scan_path, lineno, text)
    pos, lab = read_labels_csv(labels_path)
    if len(pos) != len(data) or not np.array_equal(pos, data[:, 1]):
        raise DataError(f"{labels_path}: label positions do not match {scan_path}")
    return ScanRecord(data[:, 0], data[:, 1], data[:, 2], data[:, 3], data[:, 4], lab)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_dataset(phantoms, out_dir, splits=None, names=None, scenarios=None) -> dict:
    """Write every phantom's sweep, labels and description under ``out_dir``.

    ``phantoms`` may also be a list of :class:`CohortEntry`.  Returns the
    manifest, which is also written to ``out_dir/manifest.json``.
    """
    out_dir = Path(out_dir)
    items = []
    for i, p in enumerate(phantoms):
        if isinstance(p, CohortEntry):
            items.append((p.name, p.split, p.scenario, p.phantom))
        else:
            name = names[i] if names else f"seq_{i:03d}"
            split = splits[i] if splits else "train"
            scenario = scenarios[i] if scenarios else ("clean" if p.corruption.is_clean else "corrupted")
            items.append((name, split, scenario, p))
    manifest = {"version": 1, "entries": []}
    if not items:
        return manifest
    try:
        for sub in ("scans", "labels", "phantoms"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
        for name, split, scenario, phantom in items:
            record = generate_scan(phantom)
            scan_rel = f"scans/{name}.csv"
            labels_rel = f"labels/{name}.csv"
            phantom_rel = f"phantoms/{name}.json"
            write_scan_csv(record, out_dir / scan_rel)
            write_labels_csv(record.positions, record.ground_truth, out_dir / labels_rel)
            write_json(phantom.to_dict(), out_dir / phantom_rel)
            manifest["entries"].append({
                "name": name,
                "split": split,
                "scenario": scenario,
                "seed": phantom.seed,
                "scan": scan_rel,
                "labels": labels_rel,
                "phantom": phantom_rel,
            })
        write_json(manifest, out_dir / "manifest.json")
    except OSError as exc:
        raise DataError(f"{exc.filename or out_dir}: {exc.strerror or exc}") from exc
    return manifest
