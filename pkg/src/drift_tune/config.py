"""Experiment manifests: a sectioned INI file resolved into typed settings.

Sections and keys are fixed; anything unknown is rejected with its
``section.key`` path. Command-line flags are merged on top of the file and
the resolved manifest is echoed back out as INI for provenance.
"""

import configparser
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

from drift_tune.calibration import SC_MODES, CalibrationSwitches
from drift_tune.data import PretrainConfig
from drift_tune.errors import ConfigError
from drift_tune.trainer import METHODS, TrainConfig

DATA_KINDS = ("transfer", "drift", "csv")


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def _opt_path(text):
    return text.strip() or None


# section -> key -> parser
SCHEMA = {
    "run": {"seed": int, "out": str},
    "data": {
        "kind": str,
        "seed": int,
        # transfer task
        "input_dim": int,
        "latent_dim": int,
        "source_classes": int,
        "target_classes": int,
        "source_per_class": int,
        "target_train_per_class": int,
        "target_test_per_class": int,
        "latent_spread": float,
        "nuisance_sigma": float,
        "label_noise": float,
        # drift benchmark
        "num_classes": int,
        "dim": int,
        "n_train_per_class": int,
        "n_test_per_class": int,
        "separation": float,
        "expansion": float,
        "noise_sigma": float,
        # csv
        "source_train": _opt_path,
        "source_test": _opt_path,
        "train": _opt_path,
        "test": _opt_path,
        "source_num_classes": int,
        "has_header": _bool,
    },
    "pretrain": {
        "hidden": _int_tuple,
        "feature_dim": int,
        "activation": str,
        "epochs": int,
        "batch_size": int,
        "lr": float,
        "momentum": float,
        "weight_decay": float,
    },
    "finetune": {
        "method": str,
        "checkpoint": _opt_path,
        "k": int,
        "batch": int,
        "epochs": int,
        "lr": float,
        "schedule": str,
        "weight_decay": float,
        "momentum": float,
        "ablate_sc": str,
        "l2sp_beta": float,
        "freeze_encoder": _bool,
        "k_sweep": _int_tuple,
        "diag_points": int,
    },
}

TRANSFER_KEYS = ("input_dim", "latent_dim", "source_classes", "target_classes", "source_per_class",
                 "target_train_per_class", "target_test_per_class", "latent_spread", "nuisance_sigma",
                 "label_noise")
DRIFT_KEYS = ("num_classes", "dim", "n_train_per_class", "n_test_per_class", "separation", "expansion",
              "noise_sigma")
CSV_KEYS = ("source_train", "source_test", "train", "test", "source_num_classes", "num_classes", "has_header")


@dataclass
class ExperimentManifest:
    """Everything one command needs, fully resolved.

    ``data`` holds only the keys given for the chosen ``data_kind``; generator
    defaults fill the rest at build time.
    """

    out: str = "runs/default"
    seed: int = 0
    data_kind: str = "transfer"
    data_seed: int = None
    data: dict = field(default_factory=dict)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint: str = None
    k_sweep: tuple = ()
    base_dir: str = "."

    @property
    def effective_data_seed(self):
        return self.seed if self.data_seed is None else self.data_seed

    def resolve_path(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_dir(self):
        return self.resolve_path(self.out)

    def checkpoint_path(self):
        """Pretrained checkpoint for fine-tuning; defaults to the pretrain output."""
        if self.checkpoint:
            return self.resolve_path(self.checkpoint)
        return self.out_dir / "pretrain" / "encoder.ckpt"

    def validate(self, command=None):
        """Check values and referenced paths; raises :class:`ConfigError`."""
        if self.data_kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {self.data_kind!r}")
        allowed = {"transfer": TRANSFER_KEYS, "drift": DRIFT_KEYS, "csv": CSV_KEYS}[self.data_kind]
        for key in self.data:
            if key not in allowed:
                raise ConfigError(f"data.{key} does not apply to data.kind = {self.data_kind}")
        if self.data_kind == "csv":
            for key in ("train", "test"):
                if not self.data.get(key):
                    raise ConfigError(f"data.{key} is required for data.kind = csv")
            keys = ("train", "test") if command == "finetune" else ("source_train", "source_test", "train", "test")
            if command == "pretrain" and not self.data.get("source_train"):
                raise ConfigError("data.source_train is required to pretrain from csv data")
            for key in keys:
                if self.data.get(key) and not self.resolve_path(self.data[key]).is_file():
                    raise ConfigError(f"data.{key}: file not found: {self.data[key]}")
        if self.pretrain.activation not in ("relu", "tanh", "identity"):
            raise ConfigError(f"pretrain.activation: unknown activation {self.pretrain.activation!r}")
        if self.pretrain.epochs < 1 or self.pretrain.batch_size < 1 or self.pretrain.feature_dim < 1:
            raise ConfigError("pretrain.epochs, pretrain.batch_size and pretrain.feature_dim must be >= 1")
        if any(k < 1 for k in self.k_sweep):
            raise ConfigError("finetune.k_sweep entries must be >= 1")
        try:
            self.train.validate()
        except ConfigError as exc:
            raise ConfigError(f"finetune: {exc}") from None
        if command == "finetune" and self.data_kind != "drift":
            ckpt = self.checkpoint_path()
            if not ckpt.is_file():
                raise ConfigError(f"finetune.checkpoint: file not found: {ckpt}")
        return self

    def to_ini(self):
        """Resolved manifest as INI text (stable key order)."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed), "out": self.out}
        data = {"kind": self.data_kind}
        if self.data_seed is not None:
            data["seed"] = str(self.data_seed)
        data.update({k: _fmt(v) for k, v in sorted(self.data.items())})
        cp["data"] = data
        p = self.pretrain
        cp["pretrain"] = {
            "hidden": ",".join(str(h) for h in p.hidden), "feature_dim": str(p.feature_dim),
            "activation": p.activation, "epochs": str(p.epochs), "batch_size": str(p.batch_size),
            "lr": repr(p.lr), "momentum": repr(p.momentum), "weight_decay": repr(p.weight_decay),
        }
        t = self.train
        ft = {
            "method": t.method, "k": str(t.K), "batch": str(t.B), "epochs": str(t.epochs),
            "lr": repr(t.lr_encoder), "schedule": t.lr_schedule, "weight_decay": repr(t.weight_decay),
            "momentum": repr(t.momentum), "ablate_sc": t.switches.mode, "l2sp_beta": repr(t.l2sp_beta),
            "freeze_encoder": str(t.freeze_encoder).lower(), "diag_points": str(t.diag_points),
        }
        if self.checkpoint:
            ft["checkpoint"] = self.checkpoint
        if self.k_sweep:
            ft["k_sweep"] = ",".join(str(k) for k in self.k_sweep)
        cp["finetune"] = ft
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_ini(text, source="<string>"):
    """Parse manifest text into ``{section: {key: value}}`` with typed values."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        out[section] = {}
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            try:
                out[section][key] = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {exc}") from None
    return out


def build_manifest(values, base_dir="."):
    """Build a manifest from parsed (and flag-merged) section values."""
    run = values.get("run", {})
    data = dict(values.get("data", {}))
    pre = values.get("pretrain", {})
    ft = dict(values.get("finetune", {}))
    seed = run.get("seed", 0)

    kind = data.pop("kind", "transfer")
    data_seed = data.pop("seed", None)
    pretrain = replace(PretrainConfig(seed=seed), **pre)

    mode = ft.pop("ablate_sc", "full")
    if mode not in SC_MODES:
        raise ConfigError(f"finetune.ablate_sc must be one of {tuple(SC_MODES)}, got {mode!r}")
    method = ft.pop("method", "drtune")
    if method not in METHODS:
        raise ConfigError(f"finetune.method must be one of {METHODS}, got {method!r}")
    renames = {"k": "K", "batch": "B", "lr": "lr_encoder", "schedule": "lr_schedule"}
    checkpoint = ft.pop("checkpoint", None)
    k_sweep = ft.pop("k_sweep", ())
    kwargs = {renames.get(k, k): v for k, v in ft.items()}
    train = TrainConfig(method=method, seed=seed, switches=CalibrationSwitches.from_mode(mode), **kwargs)
    return ExperimentManifest(
        out=run.get("out", "runs/default"), seed=seed, data_kind=kind, data_seed=data_seed, data=data,
        pretrain=pretrain, train=train, checkpoint=checkpoint, k_sweep=tuple(k_sweep), base_dir=str(base_dir),
    )


def load_manifest(path=None, overrides=None):
    """Read an INI manifest (optional) and apply ``{section: {key: value}}`` overrides.

    Relative paths inside the file resolve against the file's directory.
    """
    values = {}
    base_dir = "."
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = parse_ini(p.read_text(), source=str(p))
        base_dir = str(p.parent)
    for section, items in (overrides or {}).items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section {section!r}")
        for key in items:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
        values.setdefault(section, {}).update(items)
    return build_manifest(values, base_dir)
