"""Command-line pipeline: generate, preprocess, train, evaluate, compare.

Every run is described by one JSON config (defaults below, overridden by
``--config`` and then by ``--set section.field=value``); the effective
config is written as ``config.json`` into each output directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from spinefuse import __version__, dsp, evaluation, phantom, plotting, replay, seqnet, trainer
from spinefuse.errors import DataError, NumericError, ParameterError

log = logging.getLogger("spinefuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EVAL_SPLITS = ("test", "test_corrupted")


class UsageError(Exception):
    pass


def _section(cls, drop=("seed",)):
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in drop}


def default_config() -> dict:
    cohort = _section(phantom.CohortConfig)
    return json.loads(json.dumps({
        "seed": 0,
        "cohort": cohort,
        "preprocess": {"spacing_mm": dsp.DEFAULT_SPACING_MM},
        "train": _section(trainer.TrainConfig),
        "evaluate": {"criterion": "iou", "threshold": 0.5, "splits": list(EVAL_SPLITS),
                     "replay_hz": None, "figures": True},
    }))


def _merge(base: dict, update: dict, prefix=""):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise UsageError(f"unknown config field {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config field {path!r} must be an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set expects section.field=value, got {assignment!r}")
    path, text = assignment.split("=", 1)
    keys = path.strip().split(".")
    update = node = {}
    for key in keys[:-1]:
        node[key] = {}
        node = node[key]
    node[keys[-1]] = _parse_value(text)
    _merge(config, update)


def load_config(path=None, overrides=(), seed=None) -> dict:
    config = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"{path}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(user, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        _merge(config, user)
    for assignment in overrides:
        apply_override(config, assignment)
    if seed is not None:
        config["seed"] = seed
    if not isinstance(config["seed"], int) or isinstance(config["seed"], bool):
        raise UsageError("config field 'seed' must be an integer")
    return config


def _build(cls, section: str, values: dict, **extra):
    try:
        return cls(**values, **extra)
    except (ParameterError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid config section {section!r}: {exc}") from None


def cohort_config(config) -> phantom.CohortConfig:
    return _build(phantom.CohortConfig, "cohort", config["cohort"], seed=config["seed"])


def train_config(config) -> trainer.TrainConfig:
    return _build(trainer.TrainConfig, "train", config["train"], seed=config["seed"])


def _check_eval_section(section: dict) -> None:
    if section["criterion"] not in ("iou", "recall"):
        raise UsageError(f"invalid config field 'evaluate.criterion': {section['criterion']!r}")
    hz = section["replay_hz"]
    if hz is not None and not (isinstance(hz, (int, float)) and hz > 0):
        raise UsageError(f"invalid config field 'evaluate.replay_hz': {hz!r}")


def _prepare_out(out, command: str, config: dict, inputs: dict) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        # relative to the output so a relocated rerun writes identical bytes
        inputs = {k: Path(os.path.relpath(Path(v).resolve(), out.resolve())).as_posix()
                  for k, v in inputs.items()}
        phantom.write_json({"command": command, "version": __version__, "inputs": inputs,
                            "config": config}, out / "config.json")
    except OSError as exc:
        raise DataError(f"{exc.filename or out}: {exc.strerror or exc}") from None
    return out


# --- dataset access ------------------------------------------------------------

def _manifest(dataset: Path) -> dict:
    path = dataset / "manifest.json"
    if not path.is_file():
        raise DataError(f"{path}: no manifest (is this a dataset directory?)")
    manifest = phantom.read_json(path)
    if not isinstance(manifest, dict) or "entries" not in manifest:
        raise DataError(f"{path}: manifest has no 'entries'")
    return manifest


def _processed_dir(dataset: Path) -> Path:
    for candidate in (dataset, dataset / "processed"):
        path = candidate / "manifest.json"
        if path.is_file():
            entries = phantom.read_json(path).get("entries", [])
            if entries and "force" in entries[0]:
                return candidate
    raise DataError(f"{dataset}: no preprocessed traces found; run 'spinefuse preprocess' first")


def _preprocess_record(record, source, spacing_mm):
    try:
        return dsp.preprocess_scan(record, spacing_mm)
    except ParameterError as exc:
        raise DataError(f"{source}: {exc}") from None


def load_eval_sequences(dataset: Path, splits, spacing_mm: float, replay_hz=None,
                        sleep=time.sleep) -> list[evaluation.EvalSequence]:
    """Raw held-out sweeps, optionally streamed at ``replay_hz``, then preprocessed."""
    manifest = _manifest(dataset)
    entries = [e for e in manifest["entries"] if e["split"] in splits]
    if not entries:
        raise DataError(f"{dataset}: no sequences in splits {list(splits)}")
    out = []
    for e in entries:
        if "scan" not in e:
            raise DataError(f"{dataset}: entry {e.get('name')} has no raw scan; pass the dataset directory")
        record = phantom.read_scan(dataset / e["scan"], dataset / e["labels"])
        if replay_hz:
            log.info("replaying %s at %g Hz", e["name"], replay_hz)
            record = replay.replay(record, replay_hz, sleep)
        f, u, lab = _preprocess_record(record, dataset / e["scan"], spacing_mm)
        out.append(evaluation.EvalSequence(e["name"], e["split"], e.get("scenario", ""), f, u, lab))
    return out


# --- commands ------------------------------------------------------------------

def cmd_generate(args, config, **_):
    entries = phantom.make_cohort(cohort_config(config))
    out = _prepare_out(args.out, "generate", config, {})
    manifest = phantom.generate_dataset(entries, out)
    counts = {}
    for e in manifest["entries"]:
        counts[e["split"]] = counts.get(e["split"], 0) + 1
    print(f"wrote {len(manifest['entries'])} sequences to {out} "
          + " ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_preprocess(args, config, **_):
    dataset = Path(args.dataset)
    spacing = config["preprocess"]["spacing_mm"]
    if not (isinstance(spacing, (int, float)) and spacing > 0):
        raise UsageError(f"invalid config field 'preprocess.spacing_mm': {spacing!r}")
    manifest = _manifest(dataset)
    out = _prepare_out(args.out or dataset / "processed", "preprocess", config,
                       {"dataset": str(args.dataset)})
    for sub in ("force", "us", "labels"):
        (out / sub).mkdir(exist_ok=True)
    processed = {"version": 1, "spacing_mm": spacing, "entries": []}
    for e in manifest["entries"]:
        record = phantom.read_scan(dataset / e["scan"], dataset / e["labels"])
        f, u, lab = _preprocess_record(record, dataset / e["scan"], spacing)
        rel = {k: f"{k}/{e['name']}.csv" for k in ("force", "us", "labels")}
        dsp.write_trace_csv(f, out / rel["force"])
        dsp.write_trace_csv(u, out / rel["us"])
        phantom.write_labels_csv(lab.positions_mm, lab.labels, out / rel["labels"])
        processed["entries"].append({"name": e["name"], "split": e["split"],
                                     "scenario": e.get("scenario", ""), "points": len(f), **rel})
    phantom.write_json(processed, out / "manifest.json")
    print(f"preprocessed {len(processed['entries'])} sequences into {out}")


def cmd_train(args, config, **_):
    if args.modality:
        config["train"]["modality"] = args.modality
    tc = train_config(config)
    proc = _processed_dir(Path(args.dataset))
    train_set = trainer.load_sequences(proc, "train")
    val_set = trainer.load_sequences(proc, "val")
    if not train_set or not val_set:
        raise DataError(f"{proc}: training needs non-empty train and val splits")
    spacing = train_set[0].force.spacing_mm
    if any(s.force.spacing_mm != spacing for s in train_set + val_set):
        raise DataError(f"{proc}: sequences use different grid spacings")
    out = _prepare_out(args.out, "train", config, {"dataset": str(args.dataset)})
    model = seqnet.init_model(tc.modality, seed=tc.seed, num_stages=tc.num_stages,
                              num_layers=tc.num_layers, num_f_maps=tc.num_f_maps,
                              grid_spacing_mm=spacing)

    def progress(rec):
        log.info("epoch %3d  loss %.4f  val_acc %.4f", rec.epoch, rec.train_loss, rec.val_frame_acc)

    result = trainer.train(model, train_set, val_set, tc, progress)
    best = result.model
    best.train_config_hash = seqnet.config_hash({**tc.to_dict(), "spacing_mm": spacing})
    best.metadata = {"seed": tc.seed, "best_epoch": result.best_epoch,
                     "best_val_frame_acc": result.best_val_acc,
                     "train_sequences": len(train_set), "val_sequences": len(val_set)}
    seqnet.save_model(best, out / "model.bin")
    trainer.write_history_csv(result.history, out / "history.csv")
    print(f"trained {tc.modality} model: best epoch {result.best_epoch}, "
          f"val frame accuracy {result.best_val_acc:.4f} -> {out / 'model.bin'}")


def _report_document(tag, comparison: evaluation.Comparison) -> dict:
    splits = dict.fromkeys(s.split for s in comparison.sequences)
    scenarios = dict.fromkeys(s.scenario for s in comparison.sequences)
    return {
        "modality": tag,
        "criterion": comparison.criterion,
        "threshold": comparison.threshold,
        "sequences": [r.to_dict() for r in comparison.reports[tag]],
        "pooled": {
            "all": asdict(comparison.pooled(tag)),
            "by_split": {s: asdict(comparison.pooled(tag, split=s)) for s in splits},
            "by_scenario": {s: asdict(comparison.pooled(tag, scenario=s)) for s in scenarios},
        },
    }


def _write_summary_csv(rows, path) -> None:
    cols = ("split", "modality", "n_correct", "n_total", "mean_distance_mm", "std_distance_mm")
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join("" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else str(r[c]))
                              for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def _run_comparison(args, config, models, command, inputs, sleep):
    section = config["evaluate"]
    if args.replay_hz is not None:
        section["replay_hz"] = args.replay_hz
    if args.no_figures:
        section["figures"] = False
    _check_eval_section(section)
    spacings = {m.grid_spacing_mm for m in models.values()}
    if len(spacings) != 1:
        raise DataError(f"models were trained on different grid spacings {sorted(spacings)}")
    sequences = load_eval_sequences(Path(args.dataset), section["splits"], spacings.pop(),
                                    section["replay_hz"], sleep)
    comparison = evaluation.compare_modalities(models, sequences, section["criterion"],
                                               section["threshold"])
    out = _prepare_out(args.out, command, config, inputs)
    (out / "plots").mkdir(exist_ok=True)
    for tag in models:
        sub = out / "plots" / tag if len(models) > 1 else out / "plots"
        sub.mkdir(exist_ok=True)
        for pd in comparison.plots[tag]:
            pd.write_csv(sub / f"{pd.sequence}.csv")
    if section["figures"]:
        (out / "figures").mkdir(exist_ok=True)
        for i, seq in enumerate(sequences):
            plotting.plot_sequence(out / "figures" / f"{seq.name}.png",
                                   [comparison.plots[tag][i] for tag in models],
                                   f"{seq.name} ({seq.scenario})")
        plotting.plot_summary(out / "figures" / "summary.png", comparison.summary_rows())
    _write_summary_csv(comparison.summary_rows(), out / "summary.csv")
    return comparison, out


def _print_summary(rows):
    for r in rows:
        mean = "n/a" if r["mean_distance_mm"] is None else \
            f"{r['mean_distance_mm']:.2f} +/- {r['std_distance_mm']:.2f} mm"
        print(f"{r['split']:>15} {r['modality']:>7}: {r['n_correct']}/{r['n_total']} levels, {mean}")


def cmd_evaluate(args, config, sleep=time.sleep, **_):
    model = seqnet.load_model(args.model)
    tag = model.modality
    comparison, out = _run_comparison(args, config, {tag: model}, "evaluate",
                                      {"model": str(args.model), "dataset": str(args.dataset)}, sleep)
    doc = _report_document(tag, comparison)
    doc["model_sha256"] = phantom.file_sha256(args.model)
    phantom.write_json(doc, out / "report.json")
    _print_summary(comparison.summary_rows())


def cmd_compare(args, config, sleep=time.sleep, **_):
    paths = {"force": args.force, "us": args.us, "fusion": args.fusion}
    models = {tag: seqnet.load_model(p) for tag, p in paths.items()}
    inputs = {**{k: str(v) for k, v in paths.items()}, "dataset": str(args.dataset)}
    comparison, out = _run_comparison(args, config, models, "compare", inputs, sleep)
    (out / "reports").mkdir(exist_ok=True)
    for tag in models:
        doc = _report_document(tag, comparison)
        doc["model_sha256"] = phantom.file_sha256(paths[tag])
        phantom.write_json(doc, out / "reports" / f"{tag}.json")
    phantom.write_json(comparison.to_dict(), out / "comparison.json")
    _print_summary(comparison.summary_rows())


# --- argument parsing --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used for missing fields)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. --set train.epochs=20 (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="spinefuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="simulate a synthetic cohort")
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", parents=[common], help="filter and regrid every sweep")
    p.add_argument("dataset")
    p.add_argument("--out", help="output directory (default: <dataset>/processed)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train one modality")
    p.add_argument("dataset", help="dataset or preprocessed directory")
    p.add_argument("--modality", choices=seqnet.MODALITIES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, help_text in (("evaluate", "score one model on the held-out splits"),
                            ("compare", "score force, ultrasound and fusion models side by side")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "evaluate":
            p.add_argument("model")
        else:
            for tag in seqnet.MODALITIES:
                p.add_argument(f"--{tag}", required=True, metavar="MODEL", help=f"{tag} model file")
        p.add_argument("dataset", help="raw dataset directory")
        p.add_argument("--out", required=True)
        p.add_argument("--replay-hz", type=float, help="stream samples at this rate before processing")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
        p.set_defaults(func=cmd_evaluate if name == "evaluate" else cmd_compare)
    return parser


def main(argv=None, sleep=time.sleep) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        config = load_config(args.config, args.set, args.seed)
        args.func(args, copy.deepcopy(config), sleep=sleep)
    except UsageError as exc:
        print(f"spinefuse: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"spinefuse: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"spinefuse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ParameterError as exc:
        print(f"spinefuse: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
