"""Per-level scoring of predicted segmentations.

A level is counted as correctly classified when its predicted and true
segments overlap by more than a threshold (IoU > 0.5 by default); the
localisation error is the distance between segment centroids.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from spinefuse.errors import ParameterError
from spinefuse.labels import CLASS_NAMES, GAP, NUM_CLASSES, LevelSegmentation

MIN_RUN = 2


@dataclass(frozen=True)
class LevelSegment:
    level: int
    start_mm: float
    end_mm: float

    def __post_init__(self):
        if not self.start_mm < self.end_mm:
            raise ParameterError("segment start must precede its end")

    @property
    def centroid_mm(self) -> float:
        return 0.5 * (self.start_mm + self.end_mm)

    @property
    def length_mm(self) -> float:
        return self.end_mm - self.start_mm


def _runs(labels: np.ndarray):
    """``(value, start, stop)`` for each maximal run, ``stop`` exclusive."""
    if labels.size == 0:
        return []
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [labels.size]])
    return [(int(labels[a]), int(a), int(b)) for a, b in zip(starts, stops)]


def extract_segments(seg, spacing_mm: float | None = None, origin_mm: float | None = None):
    """One segment per level present, taken from its longest run.

    Runs shorter than two grid points are ignored; among equally long runs
    the earliest wins.  Grid point ``i`` covers
    ``[origin + i*spacing, origin + (i+1)*spacing)``.
    """
    if isinstance(seg, LevelSegmentation):
        labels = seg.labels
        spacing_mm = seg.spacing_mm if spacing_mm is None else spacing_mm
        origin_mm = seg.origin_mm if origin_mm is None else origin_mm
    else:
        labels = np.asarray(seg, dtype=np.int64)
    if spacing_mm is None or spacing_mm <= 0:
        raise ParameterError("a positive grid spacing is required")
    origin_mm = 0.0 if origin_mm is None else origin_mm
    best: dict[int, tuple[int, int]] = {}
    for value, a, b in _runs(labels):
        if value == GAP or b - a < MIN_RUN:
            continue
        if value not in best or b - a > best[value][1] - best[value][0]:
            best[value] = (a, b)
    return [
        LevelSegment(level, origin_mm + a * spacing_mm, origin_mm + b * spacing_mm)
        for level, (a, b) in sorted(best.items(), key=lambda kv: kv[1][0])
    ]


def level_overlap(pred: LevelSegment, truth: LevelSegment, criterion: str = "iou") -> float:
    """Interval overlap; ``"iou"`` or ``"recall"`` (intersection over true length)."""
    if pred.level != truth.level:
        raise ParameterError(f"cannot compare level {pred.level} with level {truth.level}")
    inter = max(0.0, min(pred.end_mm, truth.end_mm) - max(pred.start_mm, truth.start_mm))
    if criterion == "iou":
        union = pred.length_mm + truth.length_mm - inter
        return inter / union
    if criterion == "recall":
        return inter / truth.length_mm
    raise ParameterError(f"unknown overlap criterion {criterion!r}")


@dataclass
class LevelResult:
    level: str
    classified: bool
    overlap: float
    distance_mm: float | None


@dataclass
class Aggregate:
    n_correct: int
    n_total: int
    mean_distance_mm: float | None
    std_distance_mm: float | None


@dataclass
class EvalReport:
    modality: str
    per_level: list[LevelResult] = field(default_factory=list)
    aggregate: Aggregate | None = None
    sequence: str | None = None

    def distances(self) -> list[float]:
        return [r.distance_mm for r in self.per_level if r.classified]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            modality=d["modality"],
            per_level=[LevelResult(**r) for r in d["per_level"]],
            aggregate=None if d.get("aggregate") is None else Aggregate(**d["aggregate"]),
            sequence=d.get("sequence"),
        )


def summarize(distances, n_correct, n_total) -> Aggregate:
    if n_correct > n_total:
        raise ParameterError("n_correct exceeds n_total")
    if len(distances) == 0:
        return Aggregate(n_correct, n_total, None, None)
    d = np.asarray(distances, dtype=float)
    return Aggregate(int(n_correct), int(n_total), float(d.mean()), float(d.std()))


def evaluate(pred, truth, spacing_mm: float | None = None, modality: str = "",
             criterion: str = "iou", threshold: float = 0.5, sequence: str | None = None) -> EvalReport:
    pred_labels = pred.labels if isinstance(pred, LevelSegmentation) else np.asarray(pred)
    truth_labels = truth.labels if isinstance(truth, LevelSegmentation) else np.asarray(truth)
    if pred_labels.shape != truth_labels.shape:
        raise ParameterError(
            f"prediction has {pred_labels.size} points, ground truth {truth_labels.size}"
        )
    if spacing_mm is None:
        spacing_mm = truth.spacing_mm if isinstance(truth, LevelSegmentation) else None
    origin = truth.origin_mm if isinstance(truth, LevelSegmentation) else 0.0
    pred_segs = {s.level: s for s in extract_segments(pred_labels, spacing_mm, origin)}
    true_segs = {s.level: s for s in extract_segments(truth_labels, spacing_mm, origin)}
    results = []
    for level in range(1, NUM_CLASSES):
        p, t = pred_segs.get(level), true_segs.get(level)
        if p is None or t is None:
            results.append(LevelResult(CLASS_NAMES[level], False, 0.0, None))
            continue
        ov = level_overlap(p, t, criterion)
        ok = ov > threshold
        dist = abs(p.centroid_mm - t.centroid_mm)
        results.append(LevelResult(CLASS_NAMES[level], bool(ok), float(ov), float(dist)))
    report = EvalReport(modality, results, sequence=sequence)
    n_correct = sum(r.classified for r in results)
    report.aggregate = summarize(report.distances(), n_correct, len(results))
    return report


def pool_reports(reports, modality: str) -> EvalReport:
    """Table-style totals over several sequences' reports."""
    distances, n_correct, n_total = [], 0, 0
    for r in reports:
        distances += r.distances()
        n_correct += r.aggregate.n_correct
        n_total += r.aggregate.n_total
    return EvalReport(modality, [], summarize(distances, n_correct, n_total))


# --- comparison across modalities ---------------------------------------------

PLOT_COLUMNS = ("pos_mm", "force", "us", "pred_level", "true_level")


@dataclass
class PlotData:
    """Everything needed to redraw one sequence's prediction figure."""

    sequence: str
    modality: str
    pos_mm: np.ndarray
    force: np.ndarray
    us: np.ndarray
    pred_level: np.ndarray
    true_level: np.ndarray

    def write_csv(self, path) -> None:
        lines = [",".join(PLOT_COLUMNS)]
        for row in zip(self.pos_mm, self.force, self.us, self.pred_level, self.true_level):
            lines.append(f"{float(row[0])!r},{float(row[1])!r},{float(row[2])!r},{int(row[3])},{int(row[4])}")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


@dataclass
class EvalSequence:
    """A held-out sweep on its grid, tagged with its split and scenario."""

    name: str
    split: str
    scenario: str
    force: object  # dsp.UniformTrace
    us: object
    labels: LevelSegmentation


@dataclass
class Comparison:
    criterion: str
    threshold: float
    reports: dict[str, list[EvalReport]]
    plots: dict[str, list[PlotData]]
    sequences: list[EvalSequence]

    def pooled(self, modality: str, split: str | None = None, scenario: str | None = None) -> Aggregate:
        chosen = [
            r for r, s in zip(self.reports[modality], self.sequences)
            if (split is None or s.split == split) and (scenario is None or s.scenario == scenario)
        ]
        return pool_reports(chosen, modality).aggregate

    def summary_rows(self) -> list[dict]:
        """One row per (split, modality), shaped like the level-count table."""
        rows = []
        for split in dict.fromkeys(s.split for s in self.sequences):
            for modality in self.reports:
                agg = self.pooled(modality, split)
                rows.append({"split": split, "modality": modality, **asdict(agg)})
        return rows

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "threshold": self.threshold,
            "sequences": [{"name": s.name, "split": s.split, "scenario": s.scenario}
                          for s in self.sequences],
            "modalities": {
                m: {"sequences": [r.to_dict() for r in reps]} for m, reps in self.reports.items()
            },
            "summary": self.summary_rows(),
        }


def compare_modalities(models: dict, sequences, criterion: str = "iou",
                       threshold: float = 0.5) -> Comparison:
    """Score each tagged model on the same held-out sequences.

    ``models`` maps a modality tag to a trained network; the tag names the
    report, the network's own modality decides which traces it reads.
    """
    from spinefuse.trainer import predict

    if not models:
        raise ParameterError("no models to compare")
    sequences = list(sequences)
    if not sequences:
        raise ParameterError("no sequences to evaluate")
    reports, plots = {}, {}
    for tag, model in models.items():
        reports[tag], plots[tag] = [], []
        for seq in sequences:
            pred, _ = predict(model, seq.force, seq.us)
            reports[tag].append(evaluate(pred, seq.labels, modality=tag, criterion=criterion,
                                         threshold=threshold, sequence=seq.name))
            plots[tag].append(PlotData(seq.name, tag, seq.force.positions_mm, seq.force.values,
                                       seq.us.values, pred.labels, seq.labels.labels))
    return Comparison(criterion, threshold, reports, plots, sequences)
