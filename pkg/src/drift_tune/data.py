"""Synthetic benchmarks, drift generation, source pretraining, and CSV ingestion."""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from drift_tune.errors import DataError, LabelError, ShapeError
from drift_tune.linalg import as_matrix, orthogonality_error


@dataclass
class DatasetSplit:
    """N input vectors with class labels in [0, num_classes)."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ShapeError(f"a split needs a non-empty (N, dim) input array, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(f"{self.inputs.shape[0]} inputs but labels shaped {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise DataError("inputs contain NaN or Inf")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, idx):
        return DatasetSplit(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass
class Dataset:
    train: DatasetSplit
    test: DatasetSplit

    @property
    def num_classes(self):
        return self.train.num_classes

    @property
    def dim(self):
        return self.train.dim


@dataclass
class PairedSplit:
    """Precomputed pretrained and downstream features of the same samples."""

    pretrained: np.ndarray
    downstream: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.pretrained = as_matrix(self.pretrained, "pretrained")
        self.downstream = as_matrix(self.downstream, "downstream")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pretrained.shape != self.downstream.shape:
            raise ShapeError(f"feature sets differ: {self.pretrained.shape} vs {self.downstream.shape}")
        if self.labels.shape != (self.pretrained.shape[0],):
            raise ShapeError("one label per feature pair required")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.pretrained.shape[1]


@dataclass
class PairedDataset:
    """Frozen-feature benchmark: the encoders are replaced by fixed feature tables."""

    train: PairedSplit
    test: PairedSplit
    drift: "DriftSpec" = None

    @property
    def num_classes(self):
        return self.train.num_classes

    @property
    def dim(self):
        return self.train.dim


@dataclass
class DriftSpec:
    """Ground-truth drift ``downstream = Q @ pretrained + t[y] + noise``."""

    Q: np.ndarray
    translations: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.Q = as_matrix(self.Q, "Q")
        self.translations = as_matrix(self.translations, "translations")
        if self.Q.shape[0] != self.Q.shape[1] or self.translations.shape[1] != self.Q.shape[0]:
            raise ShapeError(f"Q {self.Q.shape} and translations {self.translations.shape} do not match")
        if orthogonality_error(self.Q) >= 1e-8:
            raise ShapeError("Q is not orthogonal to 1e-8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def random_orthogonal(d, rng):
    """Haar-distributed orthogonal matrix via sign-corrected QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _sphere_points(n, d, radius, rng):
    v = rng.standard_normal((n, d))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def make_gaussian_mixture(num_classes, dim, n_per_class, separation, seed):
    """Isotropic unit-variance classes with means on a sphere of radius ``separation``.

    Samples are grouped by class (class 0 first); shuffle before batching.
    """
    if num_classes < 2 or dim < 2 or n_per_class < 1 or separation < 0:
        raise ValueError("need num_classes >= 2, dim >= 2, n_per_class >= 1, separation >= 0")
    rng = np.random.default_rng(seed)
    means = _sphere_points(num_classes, dim, separation, rng)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    inputs = means[labels] + rng.standard_normal((labels.size, dim))
    return DatasetSplit(inputs, labels, num_classes)


def split_dataset(split, test_fraction, seed):
    """Stratified train/test partition."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(split.num_classes):
        idx = rng.permutation(np.flatnonzero(split.labels == c))
        n_test = int(round(test_fraction * idx.size))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return Dataset(split.subset(np.sort(np.concatenate(train_idx))), split.subset(np.sort(np.concatenate(test_idx))))


def make_drifted_pair(base, spec, seed):
    """Return ``(pretrained, downstream)`` with downstream = Q p + t[y] + noise.

    ``base`` is a :class:`DatasetSplit` whose inputs serve as pretrained features.
    """
    P = base.inputs
    if P.shape[1] != spec.Q.shape[0]:
        raise ShapeError(f"features have dim {P.shape[1]}, drift is {spec.Q.shape[0]}-dimensional")
    if base.num_classes > spec.translations.shape[0]:
        raise ShapeError(f"drift defines {spec.translations.shape[0]} translations for {base.num_classes} classes")
    rng = np.random.default_rng(seed)
    D = P @ spec.Q.T + spec.translations[base.labels]
    if spec.noise_sigma:
        D = D + spec.noise_sigma * rng.standard_normal(D.shape)
    return P.copy(), D


def procrustes_consistent_drift(features, labels, num_classes, seed, expansion=1.0, noise_sigma=0.0):
    """Drift whose rotation is exactly recoverable from the uncentered cross-covariance.

    Translations are ``t_c = expansion * Q @ m_c`` with m_c the class means
    of ``features``: every class moves radially away from the origin before
    the rotation, which makes classes more separable downstream. Because
    ``sum_k t_{y_k} p_k^T = expansion * Q * sum_c N_c m_c m_c^T`` is Q times a
    symmetric PSD matrix, Q stays the Procrustes solution on these features.
    """
    rng = np.random.default_rng(seed)
    d = features.shape[1]
    Q = random_orthogonal(d, rng)
    means = np.zeros((num_classes, d))
    for c in range(num_classes):
        sel = labels == c
        if np.any(sel):
            means[c] = features[sel].mean(axis=0)
    return DriftSpec(Q, expansion * means @ Q.T, noise_sigma)


def make_drift_benchmark(num_classes=8, dim=16, n_train_per_class=64, n_test_per_class=125,
                         separation=2.5, expansion=4.0, noise_sigma=0.0, seed=0):
    """Frozen-feature benchmark with known (Q, t).

    Pretrained features are a Gaussian mixture; downstream features are the
    drifted copies. The drift is built from the training-set class means, so
    a bank holding exactly the training set recovers (Q, t) exactly when
    noiseless.
    """
    base = make_gaussian_mixture(num_classes, dim, n_train_per_class + n_test_per_class, separation, seed)
    rng = np.random.default_rng(seed + 1)
    train_idx, test_idx = [], []
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(base.labels == c))
        train_idx.append(idx[:n_train_per_class])
        test_idx.append(idx[n_train_per_class:])
    train = base.subset(np.sort(np.concatenate(train_idx)))
    test = base.subset(np.sort(np.concatenate(test_idx)))
    spec = procrustes_consistent_drift(train.inputs, train.labels, num_classes, seed + 2, expansion, noise_sigma)
    p_tr, d_tr = make_drifted_pair(train, spec, seed + 3)
    p_te, d_te = make_drifted_pair(test, spec, seed + 4)
    return PairedDataset(
        PairedSplit(p_tr, d_tr, train.labels, num_classes),
        PairedSplit(p_te, d_te, test.labels, num_classes),
        spec,
    )


@dataclass
class TransferTask:
    """Source (pretraining) and target (fine-tuning) tasks over one input space."""

    source: Dataset
    target: Dataset
    params: dict = field(default_factory=dict)


def make_transfer_task(seed=0, input_dim=64, latent_dim=8, source_classes=12, target_classes=6,
                       source_per_class=200, target_train_per_class=10, target_test_per_class=300,
                       latent_spread=0.4, nuisance_sigma=1.0, label_noise=0.0, test_per_source_class=50):
    """Two classification tasks that share a low-dimensional latent structure.

    Class centers for both tasks live in the same latent space, which is
    embedded nonlinearly into ``input_dim`` dimensions and buried in isotropic
    nuisance noise. Pretraining on the data-rich source task teaches an
    encoder the latent subspace; the target task has few, optionally
    label-noisy, training samples.
    """
    rng = np.random.default_rng(seed)
    embed = np.linalg.qr(rng.standard_normal((input_dim, latent_dim)))[0] * 3.0
    mix = rng.standard_normal((latent_dim, latent_dim)) / math.sqrt(latent_dim)

    def render(h):
        z = np.tanh(h @ mix) + 0.5 * h
        return z @ embed.T + nuisance_sigma * rng.standard_normal((h.shape[0], input_dim))

    def sample(centers, per_class):
        labels = np.repeat(np.arange(centers.shape[0]), per_class)
        h = centers[labels] + latent_spread * rng.standard_normal((labels.size, latent_dim))
        return render(h), labels

    src_centers = _sphere_points(source_classes, latent_dim, 2.0, rng)
    tgt_centers = _sphere_points(target_classes, latent_dim, 2.0, rng)
    xs, ys = sample(src_centers, source_per_class)
    xs_te, ys_te = sample(src_centers, test_per_source_class)
    xt, yt = sample(tgt_centers, target_train_per_class)
    xt_te, yt_te = sample(tgt_centers, target_test_per_class)
    if label_noise > 0:
        flip = rng.random(yt.size) < label_noise
        yt = yt.copy()
        yt[flip] = rng.integers(0, target_classes, size=int(flip.sum()))
    params = dict(seed=seed, input_dim=input_dim, latent_dim=latent_dim, source_classes=source_classes,
                  target_classes=target_classes, target_train_per_class=target_train_per_class,
                  label_noise=label_noise)
    return TransferTask(
        Dataset(DatasetSplit(xs, ys, source_classes), DatasetSplit(xs_te, ys_te, source_classes)),
        Dataset(DatasetSplit(xt, yt, target_classes), DatasetSplit(xt_te, yt_te, target_classes)),
        params,
    )


@dataclass
class PretrainConfig:
    hidden: tuple = (64,)
    feature_dim: int = 16
    activation: str = "tanh"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0


def pretrain_source(config, source):
    """Supervised pretraining of an encoder on the source task.

    Returns ``(encoder, source_head, history)``. Only the encoder is meant
    to be carried into fine-tuning; the source head is returned for
    inspection and then discarded.
    """
    from drift_tune.losses import softmax_cross_entropy
    from drift_tune.model import SGD, LinearHead, MlpEncoder, backward, lr_at

    train = source.train if isinstance(source, Dataset) else source
    rng = np.random.default_rng(config.seed)
    init_rng, shuffle_rng = rng.spawn(2)
    sizes = (train.dim, *config.hidden, config.feature_dim)
    encoder = MlpEncoder.init(sizes, init_rng, config.activation)
    head = LinearHead.init(train.num_classes, config.feature_dim, init_rng)
    opt = SGD(encoder.params() + [head.prototypes], config.momentum, config.weight_decay)
    B = config.batch_size
    steps_per_epoch = max(len(train) // B, 1)
    total = steps_per_epoch * config.epochs
    history = []
    step = 0
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(len(train))
        losses = []
        for it in range(steps_per_epoch):
            idx = order[it * B:(it + 1) * B]
            z, cache = encoder.forward(train.inputs[idx])
            loss, g_logits = softmax_cross_entropy(head.logits(z), train.labels[idx])
            grads = backward(encoder, head, cache, z, g_logits)
            opt.step(grads.encoder + [grads.head], lr_at(step, total, config.lr, "cosine"))
            losses.append(loss)
            step += 1
        history.append(float(np.mean(losses)))
    return encoder, head, history


def _is_int(text):
    try:
        int(text)
    except ValueError:
        return False
    return True


def parse_labelled_rows(path, num_classes=None, has_header=None, allow_empty=False):
    """Parse ``label,f0,f1,...`` rows into a :class:`DatasetSplit`.

    Errors name the 1-based line and column of the offending cell. With
    ``has_header=None`` a first row whose label cell is not an integer is
    treated as a header.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read file: {exc.strerror}", path=path) from exc
    rows, labels = [], []
    width = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        if lineno == 1 and has_header is not False:
            if has_header or not _is_int(cells[0]):
                continue
        try:
            label = int(cells[0])
        except ValueError:
            raise DataError(f"label {cells[0]!r} is not an integer", row=lineno, column=1, path=path) from None
        values = []
        for col, cell in enumerate(cells[1:], start=2):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"value {cell!r} is not numeric", row=lineno, column=col, path=path) from None
            if not math.isfinite(v):
                raise DataError(f"value {cell!r} is not finite", row=lineno, column=col, path=path)
            values.append(v)
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise DataError(f"expected {width} features, found {len(values)}", row=lineno, path=path)
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise DataError(f"label {label} outside [0, {num_classes})", row=lineno, column=1, path=path)
        rows.append(values)
        labels.append(label)
    if not rows:
        if allow_empty:
            return np.empty((0, 0)), np.empty(0, dtype=np.int64)
        raise DataError("no data rows", path=path)
    C = num_classes if num_classes is not None else max(labels) + 1
    return DatasetSplit(np.array(rows), np.array(labels), C)


def load_csv_dataset(path, num_classes=None, has_header=None):
    """Load a ``label,f0,...,f{d-1}`` CSV file as a :class:`DatasetSplit`."""
    return parse_labelled_rows(path, num_classes=num_classes, has_header=has_header)


def write_csv_dataset(path, split, header=True):
    """Write a split in the ``label,f0,...`` layout with exact float repr."""
    lines = []
    if header:
        lines.append(",".join(["label"] + [f"f{j}" for j in range(split.dim)]))
    for y, row in zip(split.labels, split.inputs):
        lines.append(",".join([str(int(y))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")
