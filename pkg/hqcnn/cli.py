"""Command-line orchestration: preprocess, train, eval, ablate, report, dump-state, visualize.

Output directory layout::

    out/run.json                 config, versions, seeds and per-stage outputs
    out/preprocess.json          cache summaries
    out/cache/{train,test}.qvc   quanvolved feature caches
    out/model.qvm, epochs.csv, learning_curve.svg
    out/report.json, report.csv, confusion.csv, confusion.svg, roc*.csv, roc.svg
    out/ablate/<gate>-<shots>/   one full run per ablation cell, plus out/ablation.csv
"""
import argparse
import csv
import io
import json
import platform
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from time import perf_counter
from typing import List, Optional, Sequence

import numpy as np
from packaging import version

from hqcnn import (ConfigurationError, Convention, DatasetId, DecodeMode, EncodingGate, HqcnnError, ShapeError,
                   StaleCacheError, __version__, print_error, print_header, print_info, print_succ, print_warning,
                   py_ver_check, script_exit, time_table)
from hqcnn.cache import atomic_write, read_cache
from hqcnn.data import (CLASS_NAMES, IngestConfig, assemble_dataset, config_digest, count_audit, ingest_image,
                        read_manifest)
from hqcnn.git_puller import code_revision
from hqcnn.metrics import (DEFAULT_BETA, DEFAULT_POSITIVE_CLASS, TABLE_COLUMNS, Rounding, binary_report, confusion,
                           confusion_csv, format_table_row, per_class_report, report_csv, report_json)
from hqcnn.nn import (HqcnnModel, TrainConfig, default_layer_specs, epoch_log_csv, load_checkpoint,
                      parameter_summary, predict_proba, save_checkpoint, train)
from hqcnn.plots import confusion_matrix_svg, learning_curve_svg, roc_svg
from hqcnn.qsim import run_circuit, statevector_csv, zero_state
from hqcnn.quanv import (FEATURE_SHAPE, PATCH, QuanvConfig, cache_digest, encode_patch, preprocess_dataset,
                         quanv_image, render_feature_map)
from hqcnn.rng import BIT_GENERATOR

COMMANDS = ("preprocess", "train", "eval", "ablate", "report", "dump-state", "visualize")
ABLATION_GATES = (EncodingGate.RY, EncodingGate.RX)
ABLATION_SHOTS = (500, 1000)
ABLATION_COLUMNS = ("gate", "shots") + TABLE_COLUMNS


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetId
    manifest: Optional[str]
    quanv: QuanvConfig
    ingest: IngestConfig
    train: TrainConfig
    out: str = "out"
    positive_class: Optional[str] = None
    beta: float = DEFAULT_BETA
    convention: Convention = Convention.STANDARD
    rounding: Rounding = Rounding.HALF_UP
    jobs: int = 1

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.value,
            "manifest": self.manifest,
            "quanv": self.quanv.to_dict(),
            "ingest": self.ingest.to_dict(),
            "train": self.train.to_dict(),
            "out": self.out,
            "positive_class": self.positive_class,
            "beta": self.beta,
            "convention": self.convention.value,
            "rounding": self.rounding.value,
            "jobs": self.jobs,
        }

    def digest(self) -> str:
        return config_digest(self.to_dict()).hex()

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def class_names(self):
        return CLASS_NAMES[self.dataset]


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", help="Optional : D1, D2 or D3. Default is D1.", default="D1")
    parser.add_argument("--manifest", help="Optional : CSV manifest with header path,label,split", default=None)
    parser.add_argument("--encoding", help="Optional : angle encoding gate, ry or rx. Default is ry.", default="ry")
    parser.add_argument("--shots", help="Optional : measurement shots per patch, 0 = exact. Default is 1000.",
                        type=int, default=1000)
    parser.add_argument("--circuit-seed", help="Optional : seed of the random circuit. Default is --seed.",
                        type=int, default=None)
    parser.add_argument("--depth", help="Optional : random circuit layers. Default is 1.", type=int, default=1)
    parser.add_argument("--decode", help="Optional : feature decoding, z or p0. Default is z.", default="z")
    parser.add_argument("--divisor", help="Optional : pixel divisor. Default is 255.", type=float, default=255.0)
    parser.add_argument("--epochs", help="Optional : training epochs. Default is 20.", type=int, default=20)
    parser.add_argument("--batch", help="Optional : mini-batch size. Default is 32.", type=int, default=32)
    parser.add_argument("--lr", help="Optional : Adam learning rate. Default is 0.0001.", type=float, default=1e-4)
    parser.add_argument("--seed", help="Optional : master seed. Default is 0.", type=int, default=0)
    parser.add_argument("--jobs", help="Optional : preprocessing worker threads. Default is 1.", type=int, default=1)
    parser.add_argument("--out", help="Optional : output directory. Default is out.", default="out")
    parser.add_argument("--positive-class", help="Optional : positive label for binary metrics.", default=None)
    parser.add_argument("--beta", help="Optional : F-beta weight. Default is 2.", type=float, default=DEFAULT_BETA)
    parser.add_argument("--convention", help="Optional : standard or published for F-beta and balanced "
                        "accuracy. Default is standard.", default="standard")
    parser.add_argument("--rounding", help="Optional : half_up or truncate for table percentages. Default is half_up.",
                        default="half_up")


def parse_args(argv: Optional[Sequence[str]] = None):
    """Returns (subcommand, normalised RunConfig, raw namespace for command-specific flags)."""
    parser = argparse.ArgumentParser(prog="hqcnn-cli.py")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        _add_common(cmd)
        if name == "preprocess":
            cmd.add_argument("--audit", help="Optional : compare split counts with the published dataset table",
                             action="store_true", default=False)
        if name == "eval":
            cmd.add_argument("--checkpoint", help="Optional : QVM1 file. Default is <out>/model.qvm.", default=None)
        if name == "ablate":
            cmd.add_argument("--shots-list", help="Optional : shot counts to sweep [--shots-list 500 1000]",
                             nargs="+", type=int, default=list(ABLATION_SHOTS))
        if name == "report":
            cmd.add_argument("--runs", help="Required : run directories holding report.json", nargs="+",
                             required=True)
        if name in ("dump-state", "visualize"):
            cmd.add_argument("--image", help="Required : image file", required=True)
        if name == "dump-state":
            cmd.add_argument("--patch", help="Optional : patch row and column [--patch 0 0]", nargs=2, type=int,
                             default=[0, 0])
    args = parser.parse_args(argv)

    try:
        dataset = DatasetId(args.dataset.upper())
    except ValueError:
        raise ConfigurationError(f"dataset {args.dataset} is not one of D1, D2, D3")
    try:
        encoding = EncodingGate(args.encoding.upper())
        decode = DecodeMode(args.decode.lower())
        convention = Convention(args.convention.lower())
        rounding = Rounding(args.rounding.lower())
    except ValueError as e:
        raise ConfigurationError(str(e))
    circuit_seed = args.seed if args.circuit_seed is None else args.circuit_seed
    quanv = QuanvConfig(encoding_gate=encoding, shots=args.shots, circuit_seed=circuit_seed, circuit_depth=args.depth,
                        decode=decode, shot_seed=args.seed)
    config = RunConfig(
        dataset=dataset,
        manifest=args.manifest,
        quanv=quanv,
        ingest=IngestConfig(divisor=args.divisor),
        train=TrainConfig(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr, seed=args.seed),
        out=args.out,
        positive_class=args.positive_class.lower() if args.positive_class else None,
        beta=args.beta,
        convention=convention,
        rounding=rounding,
        jobs=args.jobs,
    )
    return args.command, config, args


def _write_text(path: Path, text: str):
    atomic_write(path, text.encode("utf-8"))


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"cannot read {path} ({e})")


def update_run_metadata(config: RunConfig, stage: str, outputs: dict):
    """Merges ``stage`` into ``<out>/run.json``; a rerun of a stage replaces its entry."""
    path = config.out_dir / "run.json"
    stages = _read_json(path).get("stages", {}) if path.exists() else {}
    stages[stage] = outputs
    meta = {
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "versions": {"hqcnn": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "rng": BIT_GENERATOR,
        "code_revision": code_revision(),
        "stages": stages,
    }
    _write_text(path, json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _check_written_by(meta: dict, path: Path):
    writer = meta.get("versions", {}).get("hqcnn")
    if writer and version.parse(writer) > version.parse(__version__):
        print_warning(f"{path} was written by hqcnn {writer}, newer than this {__version__}")


def _cache_paths(config: RunConfig):
    cache_dir = config.out_dir / "cache"
    return cache_dir / "train.qvc", cache_dir / "test.qvc"


def _expected_digest(config: RunConfig, stage: str) -> bytes:
    # The manifest is part of the cache digest, so later stages need the same one.
    if not config.manifest:
        raise ConfigurationError(f"{stage} needs the --manifest the caches were built from")
    return cache_digest(config.quanv, config.ingest, read_manifest(config.manifest, config.dataset))


def load_split(path: Path, digest: bytes):
    """Features (float64), labels and ids of a cache whose digest must equal ``digest``."""
    if not path.exists():
        raise StaleCacheError(f"no cache at {path}; run preprocess first")
    header, records = read_cache(path)
    if header.digest != digest:
        raise StaleCacheError(f"{path} was built with config digest {header.digest.hex()[:12]}, "
                              f"current config is {digest.hex()[:12]}; rerun preprocess")
    if (header.height, header.width, header.channels) != FEATURE_SHAPE:
        raise ShapeError(f"{path} holds {header.height}x{header.width}x{header.channels} maps, expected {FEATURE_SHAPE}")
    if not records:
        return np.zeros((0,) + FEATURE_SHAPE), np.zeros(0, dtype=np.int64), []
    features = np.stack([r.values for r in records]).astype(np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return features, labels, [r.image_id for r in records]


def cmd_preprocess(config: RunConfig, audit: bool = False) -> dict:
    if not config.manifest:
        raise ConfigurationError("preprocess needs --manifest")
    print_header(f"Reading manifest {config.manifest} for {config.dataset.value}")
    manifest = read_manifest(config.manifest, config.dataset)
    splits = assemble_dataset(manifest, config.dataset)
    digest = cache_digest(config.quanv, config.ingest, manifest)
    summary = {"dataset": config.dataset.value, "class_names": list(config.class_names),
               "config_digest": digest.hex(),
               "versions": {"hqcnn": __version__}, "splits": {}}
    if audit:
        report = count_audit(splits, config.dataset)
        summary["audit"] = report
        if report["mismatches"]:
            print_warning(f"counts differ from the published table for {', '.join(report['mismatches'])}")

    train_path, test_path = _cache_paths(config)
    offset = 0
    try:
        for name, split, path in (("train", splits.train, train_path), ("test", splits.test, test_path)):
            print_header(f"Quanvolving {len(split.entries)} {name} images "
                         f"({config.quanv.encoding_gate.value}, shots={config.quanv.shots})")
            result = preprocess_dataset(split, config.quanv, path, config.ingest, config.jobs, offset, digest)
            offset += len(split.entries)
            summary["splits"][name] = result.to_dict()
            if config.quanv.shots:
                print_info(f"{name} mean shot standard error {result.shot_standard_error:.4f}")
    except HqcnnError:
        for path in (train_path, test_path):
            if path.exists():
                path.unlink()
        raise
    summary["records"] = offset

    _write_text(config.out_dir / "preprocess.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    update_run_metadata(config, "preprocess", {n: s["checksum"] for n, s in summary["splits"].items()})
    print(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def cmd_train(config: RunConfig, verbose: bool = True) -> HqcnnModel:
    digest = _expected_digest(config, "train")
    summary_path = config.out_dir / "preprocess.json"
    if summary_path.exists():
        _check_written_by(_read_json(summary_path), summary_path)
    train_path, test_path = _cache_paths(config)
    features, labels, _ = load_split(train_path, digest)
    test = load_split(test_path, digest)[:2] if test_path.exists() else None
    if len(features) == 0:
        raise ConfigurationError(f"{train_path} holds no training records")

    model = HqcnnModel(default_layer_specs(len(config.class_names)), seed=config.train.seed)
    print_header(f"Training on {len(features)} feature maps for {config.train.epochs} epochs")
    for row in parameter_summary(model):
        print_info(f"{row['layer']:>2} {row['kind']:<12} {str(row['output_shape']):<14} params={row['params']}")
    print_info(f"total parameters {model.total_parameter_count}")
    model, log = train(model, features, labels, config.train, test=test, verbose=verbose)

    out = config.out_dir
    save_checkpoint(model, out / "model.qvm")
    _write_text(out / "epochs.csv", epoch_log_csv(log))
    if log:
        learning_curve_svg(log, out / "learning_curve.svg", f"{config.dataset.value} learning curve")
    update_run_metadata(config, "train", {"checkpoint": "model.qvm", "epochs": len(log)})
    print_succ(f"checkpoint written to {out / 'model.qvm'}")
    return model


def _positive_index(config: RunConfig) -> int:
    name = config.positive_class or DEFAULT_POSITIVE_CLASS[config.dataset]
    if name not in config.class_names:
        raise ConfigurationError(f"positive class {name!r} is not one of {config.class_names}")
    return config.class_names.index(name)


def cmd_eval(config: RunConfig, checkpoint: Optional[str] = None):
    out = config.out_dir
    model = load_checkpoint(checkpoint or out / "model.qvm")
    class_names = config.class_names
    if model.n_classes != len(class_names):
        raise ShapeError(f"checkpoint predicts {model.n_classes} classes, {config.dataset.value} has {len(class_names)}")
    features, labels, _ = load_split(_cache_paths(config)[1], _expected_digest(config, "eval"))
    if len(features) == 0:
        raise ConfigurationError("the test split is empty")

    print_header(f"Evaluating on {len(features)} test feature maps")
    probas = predict_proba(model, features)
    cm = confusion(labels, probas.argmax(axis=1), len(class_names))
    if len(class_names) == 2:
        report = binary_report(cm, probas, labels, class_names, _positive_index(config), config.beta,
                               config.convention)
    else:
        report = per_class_report(cm, probas, labels, class_names, config.beta, config.convention)
    for warning in report.warnings:
        print_warning(warning)

    _write_text(out / "report.json", report_json(report))
    _write_text(out / "report.csv", report_csv(report, config.rounding))
    _write_text(out / "confusion.csv", confusion_csv(cm, class_names))
    confusion_matrix_svg(cm.counts, class_names, out / "confusion.svg", f"{config.dataset.value} confusion matrix")
    if report.positive_class is not None and report.positive_class in report.roc:
        _write_text(out / "roc.csv", report.roc[report.positive_class].to_csv())
    else:
        for name, curve in report.roc.items():
            _write_text(out / f"roc-{name}.csv", curve.to_csv())
    if report.roc:
        curves = {name: (c.fpr, c.tpr, c.auc) for name, c in report.roc.items()}
        roc_svg(curves, out / "roc.svg", f"{config.dataset.value} ROC")
    update_run_metadata(config, "eval", {"report": "report.json", "accuracy": report.overall["acc"]})
    row = format_table_row(report.overall, TABLE_COLUMNS, config.rounding)
    print_succ(" ".join(f"{c}={v}" for c, v in zip(TABLE_COLUMNS, row)))
    return report


def cmd_ablate(config: RunConfig, shots_list: Sequence[int] = ABLATION_SHOTS) -> List[List[str]]:
    """Preprocess, train and evaluate every encoding gate x shot count with one training seed."""
    shots_list = list(dict.fromkeys(shots_list))
    rows = []
    for gate in ABLATION_GATES:
        for shots in shots_list:
            cell = replace(config, quanv=replace(config.quanv, encoding_gate=gate, shots=shots),
                           out=str(config.out_dir / "ablate" / f"{gate.value.lower()}-{shots}"))
            print_header(f"Ablation cell {gate.value} shots={shots}")
            cmd_preprocess(cell)
            cmd_train(cell, verbose=False)
            report = cmd_eval(cell)
            rows.append([gate.value, str(shots)] + format_table_row(report.overall, TABLE_COLUMNS, config.rounding))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_COLUMNS)
    writer.writerows(rows)
    _write_text(config.out_dir / "ablation.csv", buf.getvalue())
    update_run_metadata(config, "ablate", {"cells": len(rows), "table": "ablation.csv"})
    return rows


def cmd_report(config: RunConfig, runs: Sequence[str]) -> List[List[str]]:
    """Collects the overall scores of several runs into ``<out>/comparison.csv``."""
    rows = []
    for run in runs:
        run_dir = Path(run)
        report = _read_json(run_dir / "report.json")
        meta = _read_json(run_dir / "run.json") if (run_dir / "run.json").exists() else {}
        cfg = meta.get("config", {})
        scores = {k: (float("nan") if v is None else v) for k, v in report["overall"].items()}
        rows.append([str(run_dir), cfg.get("dataset", ""), cfg.get("quanv", {}).get("encoding_gate", ""),
                     str(cfg.get("quanv", {}).get("shots", "")), report.get("positive_class") or "macro"]
                    + format_table_row(scores, TABLE_COLUMNS, config.rounding))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("run", "dataset", "gate", "shots", "positive") + TABLE_COLUMNS)
    writer.writerows(rows)
    _write_text(config.out_dir / "comparison.csv", buf.getvalue())
    update_run_metadata(config, "report", {"runs": [str(r) for r in runs], "table": "comparison.csv"})
    print_succ(f"{len(rows)} run(s) written to {config.out_dir / 'comparison.csv'}")
    return rows


def cmd_dump_state(config: RunConfig, image: str, patch_row: int = 0, patch_col: int = 0) -> Path:
    """Statevector of one encoded patch after the random circuit, as CSV (index, re, im)."""
    pixels = ingest_image(image, config.ingest)
    rows, cols = pixels.shape[0] // PATCH, pixels.shape[1] // PATCH
    if not (0 <= patch_row < rows and 0 <= patch_col < cols):
        raise ConfigurationError(f"patch ({patch_row}, {patch_col}) outside the {rows}x{cols} patch grid")
    patch = pixels[PATCH * patch_row:PATCH * (patch_row + 1), PATCH * patch_col:PATCH * (patch_col + 1)]
    circuit = encode_patch(patch, config.quanv) + config.quanv.circuit()
    state = run_circuit(circuit, zero_state(circuit.n_qubits))
    path = config.out_dir / f"state-{patch_row}-{patch_col}.csv"
    _write_text(path, statevector_csv(state))
    update_run_metadata(config, "dump-state",
                        {"image": str(image), "patch": [patch_row, patch_col], "state": path.name})
    print_succ(f"statevector written to {path}")
    return path


def cmd_visualize(config: RunConfig, image: str) -> Path:
    pixels = ingest_image(image, config.ingest)
    fmap = quanv_image(pixels, config.quanv)
    path = config.out_dir / f"{Path(image).stem}-feature-map.png"
    render_feature_map(pixels, fmap, path, f"{config.quanv.encoding_gate.value} shots={config.quanv.shots}")
    update_run_metadata(config, "visualize", {"image": str(image), "feature_map": path.name})
    print_succ(f"feature map written to {path}")
    return path


def run_command(command: str, config: RunConfig, args: argparse.Namespace):
    if command == "preprocess":
        return cmd_preprocess(config, audit=args.audit)
    if command == "train":
        return cmd_train(config)
    if command == "eval":
        return cmd_eval(config, args.checkpoint)
    if command == "ablate":
        return cmd_ablate(config, args.shots_list)
    if command == "report":
        return cmd_report(config, args.runs)
    if command == "dump-state":
        return cmd_dump_state(config, args.image, *args.patch)
    if command == "visualize":
        return cmd_visualize(config, args.image)
    raise ConfigurationError(f"unknown command {command}")


def main(argv: Optional[Sequence[str]] = None):
    py_ver_check()
    start_time = perf_counter()
    command = argv[0] if argv else (sys.argv[1] if len(sys.argv) > 1 else "hqcnn")
    try:
        command, config, args = parse_args(argv)
        run_command(command, config, args)
    except HqcnnError as e:
        print_error(f"{command} failed: {e}")
    time_table(start_time)
    script_exit(0)
