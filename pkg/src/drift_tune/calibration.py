"""Semantic calibration of pretrained bank features toward the downstream ones.

The transform is a global orthogonal map R plus one translation per class:
``v_hat = R @ v + delta[y]``. R solves the orthogonal Procrustes problem
between the paired banks; the translations move each class center of the
rotated pretrained features onto the matching downstream center.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from drift_tune import _backend
from drift_tune.errors import DataError, DriftTuneError, LabelError, ShapeError
from drift_tune.linalg import as_matrix, orthogonality_error, svd

SC_MODES = {
    "none": (False, False, False),
    "gr": (True, False, False),
    "clt": (False, True, False),
    "clt+cga": (False, True, True),
    "gr+clt": (True, True, False),
    "full": (True, True, True),
}


@dataclass(frozen=True)
class CalibrationSwitches:
    use_global_rotation: bool = True
    use_class_translation: bool = True
    use_confidence_average: bool = True

    def __post_init__(self):
        if self.use_confidence_average and not self.use_class_translation:
            raise ValueError("confidence-guided averaging requires class-level translation")

    @classmethod
    def from_mode(cls, mode):
        """Build from a mode name: none, gr, clt, clt+cga, gr+clt, full."""
        try:
            return cls(*SC_MODES[mode])
        except KeyError:
            raise ValueError(f"unknown calibration mode {mode!r}; expected one of {sorted(SC_MODES)}") from None

    @property
    def mode(self):
        flags = (self.use_global_rotation, self.use_class_translation, self.use_confidence_average)
        return next(name for name, f in SC_MODES.items() if f == flags)


@dataclass
class CalibrationTransform:
    rotation: np.ndarray
    translations: np.ndarray
    class_present: np.ndarray

    @classmethod
    def identity(cls, dim, num_classes):
        return cls(np.eye(dim), np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=bool))

    @property
    def dim(self):
        return self.rotation.shape[0]

    @property
    def num_classes(self):
        return self.translations.shape[0]

    def apply(self, features, labels):
        """Calibrate a batch: rows ``R @ v + delta[y]``."""
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise ShapeError(f"expected (n, {self.dim}) features, got {features.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelError(f"labels must lie in [0, {self.num_classes})")
        return features @ self.rotation.T + self.translations[labels]

    def save_csv(self, directory):
        """Write ``rotation.csv`` (d rows) and ``translations.csv`` (class,present,t0..)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        d = self.dim
        rot = [",".join(f"r{j}" for j in range(d))]
        rot += [",".join(repr(float(v)) for v in row) for row in self.rotation]
        (directory / "rotation.csv").write_text("\n".join(rot) + "\n")
        tr = [",".join(["class", "present"] + [f"t{j}" for j in range(d)])]
        for c, (row, present) in enumerate(zip(self.translations, self.class_present)):
            tr.append(",".join([str(c), str(int(present))] + [repr(float(v)) for v in row]))
        (directory / "translations.csv").write_text("\n".join(tr) + "\n")

    @classmethod
    def load_csv(cls, directory):
        directory = Path(directory)
        try:
            rot = np.loadtxt(directory / "rotation.csv", delimiter=",", skiprows=1, ndmin=2)
            tr = np.loadtxt(directory / "translations.csv", delimiter=",", skiprows=1, ndmin=2)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read calibration snapshot: {exc}", path=directory) from exc
        return cls(rot, tr[:, 2:].copy(), tr[:, 1].astype(bool))


def _bank_arrays(banks):
    if len(banks) == 0:
        raise DriftTuneError("calibration needs a non-empty bank")
    return banks.pretrained, banks.downstream, banks.labels


def estimate_rotation(banks):
    """Orthogonal R minimizing ``sum_k ||R v_p[k] - v_d[k]||^2`` over the paired banks.

    R = U @ Vt from the SVD of the uncentered cross-covariance
    ``H = sum_k v_d[k] v_p[k]^T``. No determinant correction: reflections
    satisfy the orthogonality constraint and are returned as-is.
    """
    P, D, _ = _bank_arrays(banks)
    return procrustes_rotation(P, D)


def procrustes_rotation(source, target):
    """Orthogonal map taking rows of ``source`` onto rows of ``target`` in least squares."""
    source = as_matrix(source, "source")
    target = as_matrix(target, "target")
    if source.shape != target.shape:
        raise ShapeError(f"paired sets differ in shape: {source.shape} vs {target.shape}")
    U, _, Vt = svd(target.T @ source)
    return U @ Vt


def pretrained_class_centers(banks, rotation, num_classes):
    """Per-class means of the rotated pretrained features.

    Returns:
        (centers, present): centers is (C, d) with zero rows for absent
        classes; present[c] is True where the bank holds class c.
    """
    P, _, y = _bank_arrays(banks)
    rotation = as_matrix(rotation, "rotation")
    if rotation.shape != (P.shape[1], P.shape[1]):
        raise ShapeError(f"rotation must be {P.shape[1]}x{P.shape[1]}, got {rotation.shape}")
    return _class_means(P @ rotation.T, y, num_classes)


def _class_means(features, labels, num_classes, weights=None):
    d = features.shape[1]
    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    present = counts > 0
    w = np.ones(len(labels)) if weights is None else weights
    sums = np.zeros((num_classes, d))
    np.add.at(sums, labels, features * w[:, None])
    centers = np.zeros((num_classes, d))
    if weights is None:
        centers[present] = sums[present] / counts[present, None]
    else:
        centers[present] = sums[present]
    return centers, present


def confidence_weights(banks, head):
    """Per-entry weights: a softmax of the true-class logit within each class.

    ``alpha_k = exp(phi_{y_k} . v_d[k]) / sum_{j: y_j = y_k} exp(phi_{y_j} . v_d[j])``.
    Logits are shifted by the per-class maximum before exponentiation.
    """
    _, D, y = _bank_arrays(banks)
    if head.dim != D.shape[1]:
        raise ShapeError(f"head dim {head.dim} does not match bank dim {D.shape[1]}")
    C = max(head.num_classes, int(y.max()) + 1)
    scores = np.einsum("kd,kd->k", D, head.prototypes[y])
    cmax = np.full(C, -np.inf)
    np.maximum.at(cmax, y, scores)
    e = np.exp(scores - cmax[y])
    denom = np.zeros(C)
    np.add.at(denom, y, e)
    return e / denom[y]


def downstream_class_centers(banks, head, num_classes, use_cga=True):
    """Per-class downstream centers, confidence-weighted when ``use_cga``."""
    _, D, y = _bank_arrays(banks)
    if not use_cga:
        return _class_means(D, y, num_classes)
    return _class_means(D, y, num_classes, weights=confidence_weights(banks, head))


def class_translations(mu_p, mu_d, present):
    """``delta_c = mu_d[c] - mu_p[c]`` for present classes, zero otherwise."""
    mu_p = np.asarray(mu_p, dtype=np.float64)
    mu_d = np.asarray(mu_d, dtype=np.float64)
    if mu_p.shape != mu_d.shape:
        raise ShapeError(f"center arrays differ: {mu_p.shape} vs {mu_d.shape}")
    present = np.asarray(present, dtype=bool)
    out = np.zeros_like(mu_p)
    out[present] = mu_d[present] - mu_p[present]
    return out


def build_transform(banks, head, switches, num_classes=None):
    """Estimate the full calibration transform from a bank snapshot.

    Translations are computed against the chosen rotation (identity when
    global rotation is off) and are all zero when class translation is off.
    """
    P, _, y = _bank_arrays(banks)
    d = P.shape[1]
    C = num_classes or (head.num_classes if head is not None else int(y.max()) + 1)
    R = estimate_rotation(banks) if switches.use_global_rotation else np.eye(d)
    if not switches.use_class_translation:
        return CalibrationTransform(R, np.zeros((C, d)), np.zeros(C, dtype=bool))
    mu_p, present = pretrained_class_centers(banks, R, C)
    mu_d, _ = downstream_class_centers(banks, head, C, use_cga=switches.use_confidence_average)
    return CalibrationTransform(R, class_translations(mu_p, mu_d, present), present)


def apply_calibration(transform, vp, y):
    """Calibrate a single pretrained feature vector with label ``y``."""
    vp = np.asarray(vp, dtype=np.float64)
    if not 0 <= int(y) < transform.num_classes:
        raise LabelError(f"label {y} outside [0, {transform.num_classes})")
    return transform.apply(vp[None, :], [int(y)])[0]


def pairwise_distances(Z):
    """Condensed Euclidean distances over all pairs i < j."""
    sq = np.einsum("ij,ij->i", Z, Z)
    G = sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T)
    iu = np.triu_indices(Z.shape[0], k=1)
    return np.sqrt(np.maximum(G[iu], 0.0))


def median_bandwidth(A, B):
    """Median pairwise distance over the pooled sets; 1.0 if that median is zero."""
    pooled = np.concatenate([A, B])
    if pooled.shape[0] < 2:
        return 1.0
    med = float(np.median(pairwise_distances(pooled)))
    return med if med > 0.0 else 1.0


def mmd(A, B, bandwidth=None):
    """Unbiased squared MMD with a Gaussian RBF kernel.

    ``k(x, y) = exp(-|x - y|^2 / (2 sigma^2))`` with sigma from the pooled
    median heuristic unless ``bandwidth`` is given. Equal-sized sets are
    treated as paired samples and use the U-statistic that skips the
    i == j cross terms, so index-identical sets score exactly 0. Unequal
    sizes use the three-term unbiased estimator. The raw value may be
    slightly negative; clamp when reporting.
    """
    A = as_matrix(A, "setA")
    B = as_matrix(B, "setB")
    m, n = A.shape[0], B.shape[0]
    if m < 2 or n < 2:
        raise DriftTuneError(f"mmd needs at least two samples per set, got {m} and {n}")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"sets differ in dimension: {A.shape[1]} vs {B.shape[1]}")
    A = np.ascontiguousarray(A)
    B = np.ascontiguousarray(B)
    sigma = median_bandwidth(A, B) if bandwidth is None else float(bandwidth)
    gamma = 1.0 / (2.0 * sigma * sigma)
    kxx = _backend.rbf_kernel_sum(A, A, gamma, True)
    kyy = _backend.rbf_kernel_sum(B, B, gamma, True)
    if m == n:
        # the i != j cross sum is symmetric in its arguments, so count it twice
        kxy = _backend.rbf_kernel_sum(A, B, gamma, True)
        return (kxx + kyy - 2.0 * kxy) / (m * (m - 1))
    kxy = _backend.rbf_kernel_sum(A, B, gamma, False)
    return kxx / (m * (m - 1)) + kyy / (n * (n - 1)) - 2.0 * kxy / (m * n)


def center_distances(features_a, features_b, labels, num_classes):
    """Per-class distance between uniform class means of two paired sets (NaN if absent)."""
    ca, present = _class_means(np.asarray(features_a, dtype=np.float64), labels, num_classes)
    cb, _ = _class_means(np.asarray(features_b, dtype=np.float64), labels, num_classes)
    out = np.full(num_classes, np.nan)
    out[present] = np.linalg.norm(ca[present] - cb[present], axis=1)
    return out


def transform_orthogonality(transform):
    return orthogonality_error(transform.rotation)
