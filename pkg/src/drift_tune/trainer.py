"""Fine-tuning loops: CE-tuning, L2SP, and distribution regularization with calibration."""

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from drift_tune.bank import PairedBanks
from drift_tune.calibration import (
    CalibrationSwitches,
    CalibrationTransform,
    build_transform,
    center_distances,
    mmd,
)
from drift_tune.data import Dataset, PairedDataset, PairedSplit
from drift_tune.errors import ConfigError, DriftTuneError, ShapeError
from drift_tune.linalg import orthogonality_error
from drift_tune.losses import combined_objective, head_learning_rate, l2sp_penalty, objective_gradients
from drift_tune.model import SGD, LinearHead, MlpEncoder, load_checkpoint, lr_at

log = logging.getLogger(__name__)

METHODS = ("ce", "l2sp", "drtune")
METRICS_HEADER = ("epoch", "ce", "dr", "lambda", "total", "train_acc", "test_acc",
                  "mmd_raw", "mmd_calibrated", "rot_orth_err")


@dataclass
class TrainConfig:
    """Fine-tuning hyperparameters.

    ``lr_head`` is derived: ``(1 + K/B) * lr_encoder`` for drtune and
    ``lr_encoder`` otherwise, or ``lr_encoder`` for every method when
    ``fixed_head_lr`` is set (the bank-size sweep mode).
    """

    method: str = "drtune"
    K: int = 256
    B: int = 16
    epochs: int = 60
    lr_encoder: float = 0.01
    lr_schedule: str = "cosine"
    weight_decay: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    switches: CalibrationSwitches = field(default_factory=CalibrationSwitches)
    l2sp_beta: float = 0.01
    freeze_encoder: bool = False
    fixed_head_lr: bool = False
    # diagnostic override of lambda; None means K/B
    lambda_override: float = None
    diag_points: int = 512
    check_invariants: bool = False

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.K < 1 or self.B < 1 or self.epochs < 1:
            raise ConfigError(f"K, B and epochs must be >= 1 (K={self.K}, B={self.B}, epochs={self.epochs})")
        if self.lr_schedule not in ("cosine", "linear", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.lr_encoder <= 0:
            raise ConfigError("lr_encoder must be positive")
        if self.diag_points < 2:
            raise ConfigError("diag_points must be >= 2")
        return self

    @property
    def lam(self):
        if self.lambda_override is not None:
            return float(self.lambda_override)
        return self.K / self.B

    @property
    def lr_head(self):
        if self.method == "drtune" and not self.fixed_head_lr:
            return head_learning_rate(self.lr_encoder, self.K, self.B)
        return self.lr_encoder

    def to_dict(self):
        out = asdict(self)
        out["switches"] = self.switches.mode
        return out


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    dr: float
    lam: float
    total: float
    train_acc: float
    test_acc: float
    mmd_raw: float = math.nan
    mmd_calibrated: float = math.nan
    rot_orth_err: float = math.nan
    center_dist_raw: float = math.nan
    center_dist_calibrated: float = math.nan

    def csv_row(self):
        def fmt(v):
            return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))

        mmd_raw = self.mmd_raw if math.isnan(self.mmd_raw) else max(self.mmd_raw, 0.0)
        mmd_cal = self.mmd_calibrated if math.isnan(self.mmd_calibrated) else max(self.mmd_calibrated, 0.0)
        return [str(self.epoch), fmt(self.ce), fmt(self.dr), fmt(self.lam), fmt(self.total),
                fmt(self.train_acc), fmt(self.test_acc), fmt(mmd_raw), fmt(mmd_cal), fmt(self.rot_orth_err)]


@dataclass
class RunReport:
    config: TrainConfig
    epochs: list = field(default_factory=list)
    transform: CalibrationTransform = None
    wall_clock: float = 0.0

    @property
    def final_test_acc(self):
        return self.epochs[-1].test_acc

    @property
    def best_test_acc(self):
        return max(r.test_acc for r in self.epochs)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.epochs])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for r in self.epochs:
                writer.writerow(r.csv_row())


@dataclass
class FinetunedModel:
    """Downstream encoder (None for frozen feature tables) and head."""

    encoder: MlpEncoder
    head: LinearHead
    banks: PairedBanks = None

    def features(self, split):
        if isinstance(split, PairedSplit):
            return split.downstream
        return self.encoder.encode(split.inputs)


def evaluate(model, split):
    """Top-1 accuracy of ``argmax_c phi_c . f(x)`` on a split."""
    if len(split) == 0:
        raise DriftTuneError("cannot evaluate on an empty split")
    return float(np.mean(model.head.predict(model.features(split)) == split.labels))


class _EncoderSource:
    """Features from a frozen pretrained MLP and a trainable copy of it."""

    def __init__(self, pretrained, data, freeze):
        if pretrained.input_dim != data.dim:
            raise ShapeError(f"checkpoint expects inputs of dim {pretrained.input_dim}, data has {data.dim}")
        self.f_p = pretrained
        self.f_d = pretrained.copy()
        self.train = data.train
        self.test = data.test
        self.trainable = not freeze

    @property
    def dim(self):
        return self.f_p.output_dim

    def pretrained(self, idx):
        return self.f_p.forward(self.train.inputs[idx])[0]

    def downstream(self, idx):
        return self.f_d.forward(self.train.inputs[idx])

    def backward(self, cache, g_feat):
        return self.f_d.backward(cache, g_feat)

    def params(self):
        return self.f_d.params() if self.trainable else []

    def model(self, head):
        return FinetunedModel(self.f_d, head)


class _TableSource:
    """Frozen feature tables standing in for both encoders."""

    trainable = False

    def __init__(self, data):
        self.train = data.train
        self.test = data.test

    @property
    def dim(self):
        return self.train.dim

    def pretrained(self, idx):
        return self.train.pretrained[idx]

    def downstream(self, idx):
        return self.train.downstream[idx], None

    def backward(self, cache, g_feat):
        return []

    def params(self):
        return []

    def model(self, head):
        return FinetunedModel(None, head)


def _make_source(config, pretrained, data):
    if isinstance(data, PairedDataset):
        return _TableSource(data)
    if not isinstance(data, Dataset):
        raise ConfigError(f"unsupported dataset type {type(data).__name__}")
    if pretrained is None:
        raise ConfigError("a pretrained encoder is required for raw-input datasets")
    if not isinstance(pretrained, MlpEncoder):
        pretrained = load_checkpoint(pretrained)[0]
    return _EncoderSource(pretrained, data, config.freeze_encoder)


def _diag_indices(n, limit):
    if n <= limit:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, limit).round().astype(np.int64))


def bank_diagnostics(banks, head, switches, num_classes, limit=512):
    """MMD, center distances and orthogonality of the current calibration.

    Computed on an evenly spaced subsample of at most ``limit`` bank rows.
    Returns ``(transform, dict)``.
    """
    transform = build_transform(banks, head, switches, num_classes)
    idx = _diag_indices(len(banks), limit)
    P = banks.pretrained[idx]
    D = banks.downstream[idx]
    y = banks.labels[idx]
    V = transform.apply(P, y)
    out = {
        "mmd_raw": mmd(P, D) if len(idx) >= 2 else math.nan,
        "mmd_calibrated": mmd(V, D) if len(idx) >= 2 else math.nan,
        "rot_orth_err": orthogonality_error(transform.rotation),
        "center_dist_raw": float(np.nanmean(center_distances(P, D, y, num_classes))),
        "center_dist_calibrated": float(np.nanmean(center_distances(V, D, y, num_classes))),
    }
    return transform, out


def finetune(config, pretrained, data):
    """Fine-tune a downstream model; returns ``(FinetunedModel, RunReport)``.

    For ``drtune`` each iteration: extract both views of the mini-batch,
    estimate the calibration from the current banks and head, calibrate the
    pretrained bank, take one SGD step on ``CE + lambda * DR``, then enqueue
    the mini-batch features into the banks. ``ce`` skips banks entirely and
    ``l2sp`` adds a squared-distance penalty toward the pretrained weights.

    Args:
        config: :class:`TrainConfig`.
        pretrained: :class:`MlpEncoder`, checkpoint path, or None when
            ``data`` is a :class:`PairedDataset` (frozen feature tables).
        data: :class:`Dataset` or :class:`PairedDataset`.
    """
    config.validate()
    started = time.perf_counter()
    source = _make_source(config, pretrained, data)
    train = source.train
    C = train.num_classes
    N = len(train)
    B = config.B
    if N < B:
        raise ConfigError(f"batch size {B} exceeds the {N} training samples")

    init_rng, shuffle_rng, bank_rng = np.random.default_rng(config.seed).spawn(3)
    head = LinearHead.init(C, source.dim, init_rng)
    enc_params = source.params()
    enc_opt = SGD(enc_params, config.momentum, config.weight_decay)
    head_opt = SGD([head.prototypes], config.momentum, config.weight_decay)
    theta_p = [p.copy() for p in enc_params] if config.method == "l2sp" else None
    enc_wd = 0.0 if config.method == "l2sp" else config.weight_decay

    use_dr = config.method == "drtune"
    banks = None
    if use_dr:
        banks = PairedBanks(config.K, source.dim, C)
        order = bank_rng.permutation(N)
        idx = order[np.arange(config.K) % N]
        z = source.pretrained(idx)
        banks.enqueue_batch(z, z, train.labels[idx])

    lam = config.lam if use_dr else 0.0
    steps_per_epoch = N // B
    total_steps = steps_per_epoch * config.epochs
    report = RunReport(config)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(N)
        sums = np.zeros(3)
        correct = 0
        for it in range(steps_per_epoch):
            idx = order[it * B:(it + 1) * B]
            y = train.labels[idx]
            zd, cache = source.downstream(idx)
            v_hat = None
            if use_dr:
                zp = source.pretrained(idx)
                transform = build_transform(banks, head, config.switches, C)
                v_hat = transform.apply(banks.pretrained, banks.labels)
            ce, dr, g_head, g_feat, logits = objective_gradients(
                head, zd, y, v_hat, banks.labels if use_dr else None, lam)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            lr = lr_at(step, total_steps, config.lr_encoder, config.lr_schedule)
            head_lr = lr_at(step, total_steps, config.lr_head, config.lr_schedule)
            if source.trainable:
                g_enc = source.backward(cache, g_feat)
                if theta_p is not None:
                    _, g_pen, _ = l2sp_penalty(enc_params, theta_p, config.l2sp_beta)
                    g_enc = [a + b for a, b in zip(g_enc, g_pen)]
                enc_opt.step(g_enc, lr, weight_decay=enc_wd)
            head_opt.step([g_head], head_lr)
            if use_dr:
                banks.enqueue_batch(zp, zd, y)
                if config.check_invariants:
                    assert len(banks.pretrained) == len(banks.downstream) == len(banks.labels) <= config.K
            sums += (ce, dr, 1.0)
            step += 1

        n_it = sums[2]
        ce_mean, dr_mean = sums[0] / n_it, sums[1] / n_it
        if theta_p is not None:
            penalty = l2sp_penalty(enc_params, theta_p, config.l2sp_beta)[0]
            rep = combined_objective(ce_mean + penalty, 0.0, 1, 1, lam=0.0)
        else:
            rep = combined_objective(ce_mean, dr_mean, config.K, B, lam=lam)
        model = source.model(head)
        record = EpochRecord(
            epoch=epoch, ce=rep.ce, dr=rep.dr, lam=rep.lam, total=rep.total,
            train_acc=correct / (steps_per_epoch * B),
            test_acc=evaluate(model, source.test),
        )
        if use_dr:
            report.transform, diag = bank_diagnostics(banks, head, config.switches, C, config.diag_points)
            for key, value in diag.items():
                setattr(record, key, value)
            log.debug("epoch %d raw mmd values: %r / %r", epoch, diag["mmd_raw"], diag["mmd_calibrated"])
        report.epochs.append(record)
        log.info("epoch %d ce=%.4f dr=%.4f test_acc=%.4f", epoch, record.ce, record.dr, record.test_acc)

    report.wall_clock = time.perf_counter() - started
    model = source.model(head)
    model.banks = banks
    return model, report


def k_sweep(config, K_values, pretrained, data):
    """Fine-tune once per bank size at a fixed head learning rate.

    Returns a list of ``(K, lambda, final_test_acc, best_test_acc)`` rows.
    """
    rows = []
    configs = [replace(config, K=int(K), fixed_head_lr=True) for K in K_values]
    for cfg, report in zip(configs, run_many(configs, pretrained, data)):
        rows.append((cfg.K, cfg.lam, report.final_test_acc, report.best_test_acc))
    return rows


ABLATION_ROWS = ("none", "gr", "clt", "clt+cga", "full")


def ablation_grid(config, pretrained, data, modes=ABLATION_ROWS):
    """One drtune run per calibration mode; returns ``{mode: RunReport}``."""
    configs = [replace(config, method="drtune", switches=CalibrationSwitches.from_mode(m)) for m in modes]
    return dict(zip(modes, run_many(configs, pretrained, data)))


def max_workers():
    """Worker cap from ``DRIFT_TUNE_THREADS`` (default 1)."""
    raw = os.environ.get("DRIFT_TUNE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"DRIFT_TUNE_THREADS must be an integer, got {raw!r}") from None


def _run_one(args):
    config, pretrained, data = args
    return finetune(config, pretrained, data)[1]


def run_many(configs, pretrained, data):
    """Run independent fine-tunings, in worker processes when allowed."""
    jobs = [(c, pretrained, data) for c in configs]
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))
