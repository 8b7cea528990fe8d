"""Command-line entry point: ``drift-tune {pretrain,finetune,diagnose}``.

Exit codes: 0 on success, 1 on validation errors (bad flags, manifest,
paths, or input files), 2 on runtime or assertion failures.
"""

import argparse
import csv
import json
import logging
import math
import shutil
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from drift_tune.bank import PairedBanks
from drift_tune.calibration import (
    SC_MODES,
    CalibrationSwitches,
    CalibrationTransform,
    build_transform,
    center_distances,
    mmd,
)
from drift_tune.config import load_manifest
from drift_tune.data import (
    Dataset,
    load_csv_dataset,
    make_drift_benchmark,
    make_transfer_task,
    pretrain_source,
)
from drift_tune.errors import ConfigError, DataError, DriftTuneError, LabelError, ShapeError
from drift_tune.linalg import pca_axes, pca_project
from drift_tune.model import load_checkpoint, save_checkpoint
from drift_tune.trainer import METHODS, finetune, run_many

log = logging.getLogger("drift_tune")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2
VALIDATION_ERRORS = (ConfigError, DataError, LabelError, ShapeError)

SWEEP_HEADER = ("K", "lambda", "final_test_acc", "best_test_acc")
TIMING_HEADER = ("run", "wall_clock_seconds")
MMD_HEADER = ("n", "bandwidth", "mmd_raw", "mmd_calibrated")
CENTER_HEADER = ("class", "count", "dist_raw", "dist_calibrated")
PCA_HEADER = ("label", "pc1", "pc2")


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to the validation exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _k_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty K list")
    return tuple(values)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI experiment manifest")
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--k", type=int, metavar="N", help="bank size K")
    common.add_argument("--batch", type=int, metavar="N", help="mini-batch size B")
    common.add_argument("--epochs", type=int, metavar="N")
    common.add_argument("--lr", type=float, metavar="F", help="encoder learning rate")
    common.add_argument("--schedule", choices=("cosine", "linear"))
    common.add_argument("--ablate-sc", choices=tuple(m for m in SC_MODES if m != "gr+clt"),
                        help="calibration switches (a row of the ablation table)")
    common.add_argument("--k-sweep", type=_k_list, metavar="LIST", help="comma-separated bank sizes")
    common.add_argument("--freeze-encoder", action="store_true", default=None)
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="drift-tune", description="Fine-tuning with calibrated distribution regularization.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("pretrain", parents=[common], help="supervised pretraining on the source task")
    sub.add_parser("finetune", parents=[common], help="fine-tune from a pretrained checkpoint")
    diag = sub.add_parser("diagnose", parents=[common], help="MMD, center distances and PCA of bank snapshots")
    diag.add_argument("--snapshots", metavar="DIR",
                      help="run directory or bank snapshot directory (default: <out>/finetune)")
    return parser


def _overrides(args):
    """Map set flags onto ``{section: {key: value}}`` manifest overrides."""
    out = {"run": {}, "finetune": {}}
    if args.seed is not None:
        out["run"]["seed"] = args.seed
    if args.out is not None:
        out["run"]["out"] = str(Path(args.out).resolve())
    pairs = (("method", "method"), ("k", "k"), ("batch", "batch"), ("epochs", "epochs"), ("lr", "lr"),
             ("schedule", "schedule"), ("ablate_sc", "ablate_sc"), ("k_sweep", "k_sweep"),
             ("freeze_encoder", "freeze_encoder"))
    for attr, key in pairs:
        value = getattr(args, attr)
        if value is not None:
            out["finetune"][key] = value
    return out


def git_describe():
    """``git describe`` of the source tree, or ``"unknown"`` outside a repository."""
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v):
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def _prepare_out(path, manifest):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.ini").write_text(manifest.to_ini())
    return path


def _write_checkpoint(path, encoder, head, metadata):
    save_checkpoint(path, encoder, head, extra=metadata)
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def load_source_dataset(manifest):
    if manifest.data_kind == "transfer":
        return make_transfer_task(seed=manifest.effective_data_seed, **manifest.data).source
    if manifest.data_kind == "csv":
        C = manifest.data.get("source_num_classes")
        header = manifest.data.get("has_header")
        train = load_csv_dataset(manifest.resolve_path(manifest.data["source_train"]), C, header)
        if manifest.data.get("source_test"):
            test = load_csv_dataset(manifest.resolve_path(manifest.data["source_test"]), train.num_classes, header)
        else:
            test = train
        return Dataset(train, test)
    raise ConfigError(f"data.kind = {manifest.data_kind} has no source task to pretrain on")


def load_target_dataset(manifest):
    if manifest.data_kind == "transfer":
        return make_transfer_task(seed=manifest.effective_data_seed, **manifest.data).target
    if manifest.data_kind == "drift":
        return make_drift_benchmark(seed=manifest.effective_data_seed, **manifest.data)
    C = manifest.data.get("num_classes")
    header = manifest.data.get("has_header")
    train = load_csv_dataset(manifest.resolve_path(manifest.data["train"]), C, header)
    test = load_csv_dataset(manifest.resolve_path(manifest.data["test"]), train.num_classes, header)
    return Dataset(train, test)


def cmd_pretrain(manifest):
    """Pretrain on the source task; writes ``<out>/pretrain/encoder.ckpt`` and sidecars."""
    manifest.validate("pretrain")
    source = load_source_dataset(manifest)
    out = _prepare_out(manifest.out_dir / "pretrain", manifest)
    encoder, head, history = pretrain_source(manifest.pretrain, source)
    from drift_tune.trainer import FinetunedModel, evaluate

    acc = evaluate(FinetunedModel(encoder, head), source.test)
    metadata = {
        "kind": "pretrained_encoder",
        "seed": manifest.seed,
        "data_seed": manifest.effective_data_seed,
        "input_dim": encoder.input_dim,
        "feature_dim": encoder.output_dim,
        "layers": [list(W.shape) for W, _ in encoder.layers],
        "source_classes": source.num_classes,
        "source_test_acc": acc,
        "git_describe": git_describe(),
    }
    ckpt = out / "encoder.ckpt"
    _write_checkpoint(ckpt, encoder, None, metadata)
    _write_rows(out / "history.csv", ("epoch", "loss"), [(i + 1, _fmt(v)) for i, v in enumerate(history)])
    log.info("pretrained encoder written to %s (source test acc %.4f)", ckpt, acc)
    return ckpt


# files a finetune run may leave behind; cleared first so a rerun with another
# method never mixes its outputs with stale ones
RUN_ARTIFACTS = ("banks", "transform", "model.ckpt", "model.ckpt.json", "head.csv", "head.csv.json")


def _clear_run(out):
    for name in RUN_ARTIFACTS:
        path = out / name
        if path.is_dir():
            shutil.rmtree(path)
        elif path.exists():
            path.unlink()


def _save_run(out, model, report, manifest, label):
    _clear_run(out)
    report.write_csv(out / "metrics.csv")
    _write_rows(out / "timing.csv", TIMING_HEADER, [(label, f"{report.wall_clock:.3f}")])
    if model is None:
        return
    if model.banks is not None:
        model.banks.save_csv(out / "banks")
    if report.transform is not None:
        report.transform.save_csv(out / "transform")
    meta = {
        "kind": "finetuned",
        "seed": manifest.seed,
        "data_seed": manifest.effective_data_seed,
        "feature_dim": model.head.dim,
        "num_classes": model.head.num_classes,
        "config": report.config.to_dict(),
        "final_test_acc": report.final_test_acc,
        "git_describe": git_describe(),
    }
    if model.encoder is not None:
        _write_checkpoint(out / "model.ckpt", model.encoder, model.head, meta)
    else:
        # frozen feature tables: only the head is learned
        rows = [[str(c)] + [repr(float(v)) for v in row] for c, row in enumerate(model.head.prototypes)]
        _write_rows(out / "head.csv", ["class"] + [f"w{j}" for j in range(model.head.dim)], rows)
        (out / "head.csv.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _check_report(report):
    for record in report.epochs:
        values = (record.ce, record.total, record.train_acc, record.test_acc)
        if not all(math.isfinite(v) for v in values):
            raise AssertionError(f"non-finite metrics at epoch {record.epoch}")
        if not 0.0 <= record.test_acc <= 1.0:
            raise AssertionError(f"accuracy out of range at epoch {record.epoch}")
    if len(report.epochs) != report.config.epochs:
        raise AssertionError("metrics rows do not match the configured epochs")


def cmd_finetune(manifest):
    """Fine-tune into ``<out>/finetune``, or run a bank-size sweep into ``<out>/sweep``.

    Sweep points run at a fixed head learning rate, each in its own
    ``k<K>`` subdirectory, with a summary in ``sweep.csv``.
    """
    manifest.validate("finetune")
    data = load_target_dataset(manifest)
    pretrained = None
    if manifest.data_kind != "drift":
        pretrained = load_checkpoint(manifest.checkpoint_path())[0]
    config = replace(manifest.train, check_invariants=True)

    if manifest.k_sweep:
        out = _prepare_out(manifest.out_dir / "sweep", manifest)
        configs = [replace(config, method="drtune", K=k, fixed_head_lr=True) for k in manifest.k_sweep]
        reports = run_many(configs, pretrained, data)
        rows = []
        for cfg, report in zip(configs, reports):
            _check_report(report)
            sub = out / f"k{cfg.K}"
            sub.mkdir(exist_ok=True)
            _save_run(sub, None, report, manifest, f"k{cfg.K}")
            rows.append((cfg.K, _fmt(cfg.lam), _fmt(report.final_test_acc), _fmt(report.best_test_acc)))
        _write_rows(out / "sweep.csv", SWEEP_HEADER, rows)
        return out

    out = _prepare_out(manifest.out_dir / "finetune", manifest)
    model, report = finetune(config, pretrained, data)
    _check_report(report)
    _save_run(out, model, report, manifest, config.method)
    log.info("final test acc %.4f", report.final_test_acc)
    return out


def _snapshot_dir(path):
    path = Path(path)
    if (path / "banks" / "pretrained.csv").is_file():
        return path / "banks", path
    if (path / "pretrained.csv").is_file():
        return path, path
    raise ConfigError(f"no bank snapshot (pretrained.csv/downstream.csv) under {path}")


def _diagnostic_transform(run_dir, banks, num_classes, switches):
    saved = run_dir / "transform"
    if (saved / "rotation.csv").is_file():
        return CalibrationTransform.load_csv(saved)
    head = None
    if (run_dir / "model.ckpt").is_file():
        head = load_checkpoint(run_dir / "model.ckpt")[1]
    if head is None and switches.use_confidence_average:
        # no head to weight by: fall back to plain class means
        switches = CalibrationSwitches(switches.use_global_rotation, switches.use_class_translation, False)
    return build_transform(banks, head, switches, num_classes)


def cmd_diagnose(manifest, snapshots=None):
    """MMD, per-class center distances and PCA projections of a bank snapshot."""
    manifest.validate("diagnose")
    bank_dir, run_dir = _snapshot_dir(snapshots or manifest.out_dir / "finetune")
    banks = PairedBanks.load_csv(bank_dir)
    if len(banks) < 2:
        raise DataError("diagnostics need at least two bank entries", path=bank_dir)
    P, D, y = banks.pretrained, banks.downstream, banks.labels
    C = int(y.max()) + 1
    transform = _diagnostic_transform(run_dir, banks, None, manifest.train.switches)
    if transform.num_classes < C or transform.dim != P.shape[1]:
        raise ShapeError(f"saved transform ({transform.num_classes} classes, dim {transform.dim}) "
                         f"does not fit the snapshot ({C} classes, dim {P.shape[1]})")
    C = transform.num_classes
    V = transform.apply(P, y)

    out = manifest.out_dir / "diagnose"
    out.mkdir(parents=True, exist_ok=True)
    from drift_tune.calibration import median_bandwidth

    bw = median_bandwidth(P, D)
    _write_rows(out / "mmd.csv", MMD_HEADER, [(len(y), _fmt(bw), _fmt(max(mmd(P, D, bw), 0.0)),
                                               _fmt(max(mmd(V, D, bw), 0.0)))])
    counts = np.bincount(y, minlength=C)
    raw = center_distances(P, D, y, C)
    cal = center_distances(V, D, y, C)
    _write_rows(out / "centers.csv", CENTER_HEADER,
                [(c, int(counts[c]), _fmt(raw[c]), _fmt(cal[c])) for c in range(C)])
    # one basis for all three sets so the scatter plots share coordinates
    mean, axes = pca_axes(np.vstack([P, V, D]), 2)
    for name, feats in (("pretrained", P), ("calibrated", V), ("downstream", D)):
        coords = pca_project(feats, mean, axes)
        _write_rows(out / f"pca_{name}.csv", PCA_HEADER,
                    [(int(lab), _fmt(a), _fmt(b)) for lab, (a, b) in zip(y, coords)])
    return out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = load_manifest(args.config, _overrides(args))
        if args.command == "pretrain":
            path = cmd_pretrain(manifest)
        elif args.command == "finetune":
            path = cmd_finetune(manifest)
        else:
            path = cmd_diagnose(manifest, args.snapshots)
    except VALIDATION_ERRORS as exc:
        print(f"drift-tune: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DriftTuneError, AssertionError, ArithmeticError, OSError) as exc:
        print(f"drift-tune: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
