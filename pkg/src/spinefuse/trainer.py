"""Adam optimiser, training loop and inference for the segmentation network."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from spinefuse import seqnet
from spinefuse.dsp import UniformTrace, read_trace_csv
from spinefuse.errors import DataError, NumericError, ParameterError
from spinefuse.labels import LevelSegmentation
from spinefuse.phantom import read_json, read_labels_csv

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    epochs: int = 110
    batch_size: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_smooth: float = 0.15
    tau: float = 4.0
    seed: int = 0
    modality: str = "fusion"
    num_stages: int = 3
    num_layers: int = 9
    num_f_maps: int = 32

    def __post_init__(self):
        if self.batch_size != 1:
            raise ParameterError("only batch_size 1 is supported")
        if self.epochs < 0:
            raise ParameterError("epochs must be non-negative")
        for name in ("learning_rate", "adam_eps", "tau"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ParameterError("Adam betas must lie in [0, 1)")
        if self.modality not in seqnet.MODALITIES:
            raise ParameterError(f"modality must be one of {seqnet.MODALITIES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, config: TrainConfig) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ParameterError("parameter, gradient and state lists differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ParameterError(f"gradient {i} has shape {g.shape}, parameter {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {i} at step {state.step + 1}")
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return state


@dataclass
class Sequence:
    """One preprocessed sweep ready for the network."""

    name: str
    force: UniformTrace
    us: UniformTrace
    labels: LevelSegmentation

    def __post_init__(self):
        if not self.force.same_grid(self.us):
            raise DataError(f"{self.name}: force and ultrasound traces are on different grids")
        if len(self.labels) != len(self.force):
            raise DataError(
                f"{self.name}: {len(self.labels)} labels for a trace of {len(self.force)} points"
            )


def model_input(modality: str, force: UniformTrace, us: UniformTrace) -> np.ndarray:
    if not force.same_grid(us):
        raise ParameterError("force and ultrasound traces must share one grid")
    if modality == "force":
        return force.values[None, :]
    if modality == "us":
        return us.values[None, :]
    return np.stack([force.values, us.values])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_frame_acc: float


@dataclass
class TrainResult:
    model: seqnet.FusionModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("nan")
    final_model: seqnet.FusionModel | None = None


def frame_accuracy(model: seqnet.FusionModel, sequences) -> float:
    correct = total = 0
    for seq in sequences:
        pred, _ = predict(model, seq.force, seq.us)
        correct += int(np.sum(pred.labels == seq.labels.labels))
        total += len(seq.labels)
    return correct / total


def train(model: seqnet.FusionModel, train_set, val_set, config: TrainConfig,
          progress=None) -> TrainResult:
    """Fit ``model`` in place, one Adam step per sequence.

    The returned ``TrainResult.model`` is a copy taken at the epoch with the
    best validation frame accuracy (earliest on ties); with zero epochs it is
    the initial model.
    """
    train_set, val_set = list(train_set), list(val_set)
    if not train_set:
        raise DataError("training split is empty")
    if not val_set:
        raise DataError("validation split is empty")
    if model.modality != config.modality:
        raise ParameterError(f"model modality {model.modality} differs from config {config.modality}")
    inputs = [model_input(config.modality, s.force, s.us) for s in train_set]
    targets = [s.labels.labels for s in train_set]
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdamState.zeros_like(params)
    result = TrainResult(model=model.copy())
    best = -1.0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for i in order:
            # divergence is reported below as a NumericError, not as warnings
            with np.errstate(over="ignore", invalid="ignore"):
                value, _, grads, _ = seqnet.forward_backward(
                    model, inputs[i], targets[i], config.lambda_smooth, config.tau
                )
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch} on {train_set[i].name}")
            adam_step(params, grads, state, config)
            losses.append(value)
        acc = frame_accuracy(model, val_set)
        rec = EpochRecord(epoch, float(np.mean(losses)), float(acc))
        result.history.append(rec)
        if acc > best:
            best = acc
            result.model = model.copy()
            result.best_epoch = epoch
            result.best_val_acc = acc
        if progress is not None:
            progress(rec)
        log.debug("epoch %d loss %.4f val_acc %.4f", epoch, rec.train_loss, acc)
    result.final_model = model
    return result


def predict(model: seqnet.FusionModel, force: UniformTrace, us: UniformTrace):
    """Final-stage argmax labels and class probabilities on the traces' grid."""
    x = model_input(model.modality, force, us)
    probs = seqnet.model_forward(model, x)[-1]
    # np.argmax returns the first maximum, so ties resolve toward GAP.
    labels = np.argmax(probs, axis=0)
    return LevelSegmentation(labels, force.origin_mm, force.spacing_mm), probs


# --- files -----------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "train_loss", "val_frame_acc")


def write_history_csv(history, path) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    lines += [f"{r.epoch},{r.train_loss!r},{r.val_frame_acc!r}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


def load_sequences(processed_dir, split: str | None = None) -> list[Sequence]:
    """Read preprocessed sequences listed in ``processed_dir/manifest.json``."""
    processed_dir = Path(processed_dir)
    manifest = read_json(processed_dir / "manifest.json")
    out = []
    for entry in manifest.get("entries", []):
        if split is not None and entry["split"] != split:
            continue
        force = read_trace_csv(processed_dir / entry["force"])
        us = read_trace_csv(processed_dir / entry["us"])
        pos, lab = read_labels_csv(processed_dir / entry["labels"])
        if len(pos) != len(force):
            raise DataError(f"{entry['labels']}: label and trace lengths differ")
        out.append(Sequence(entry["name"], force, us,
                            LevelSegmentation(lab, force.origin_mm, force.spacing_mm)))
    return out
