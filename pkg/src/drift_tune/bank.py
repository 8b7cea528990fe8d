"""Paired FIFO feature banks for pretrained and downstream representations."""

from pathlib import Path

import numpy as np

from drift_tune.errors import DataError, DriftTuneError, LabelError, ShapeError


class PairedBanks:
    """Two index-aligned FIFO queues of features sharing one label column.

    Row ``k`` of :attr:`pretrained` and row ``k`` of :attr:`downstream` are
    two views of the same sample and carry the same label, so the pairing
    invariant holds by construction. Rows are ordered oldest first. Stored
    values are copies; callers never alias bank memory.

    Args:
        capacity: maximum number of pairs K.
        dim: feature dimension d; inferred from the first enqueue if None.
        num_classes: optional label bound C, checked on enqueue.
    """

    def __init__(self, capacity, dim=None, num_classes=None):
        if capacity < 1:
            raise ValueError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.num_classes = num_classes
        self.dim = dim
        width = 0 if dim is None else dim
        self._p = np.empty((0, width))
        self._d = np.empty((0, width))
        self._y = np.empty(0, dtype=np.int64)

    def __len__(self):
        return self._y.shape[0]

    @property
    def pretrained(self):
        return self._p

    @property
    def downstream(self):
        return self._d

    @property
    def labels(self):
        return self._y

    @property
    def is_full(self):
        return len(self) == self.capacity

    def _check(self, zp, zd, y):
        if zp.shape != zd.shape:
            raise ShapeError(f"pretrained batch {zp.shape} and downstream batch {zd.shape} differ")
        if y.shape[0] != zp.shape[0]:
            raise ShapeError(f"{zp.shape[0]} features but {y.shape[0]} labels")
        if self.dim is None:
            self.dim = zp.shape[1]
            self._p = np.empty((0, self.dim))
            self._d = np.empty((0, self.dim))
        elif zp.shape[1] != self.dim:
            raise ShapeError(f"feature dim {zp.shape[1]} does not match bank dim {self.dim}")
        if not (np.all(np.isfinite(zp)) and np.all(np.isfinite(zd))):
            raise DriftTuneError("refusing to enqueue non-finite features")
        if y.size and (y.min() < 0 or (self.num_classes is not None and y.max() >= self.num_classes)):
            raise LabelError(f"labels must lie in [0, {self.num_classes})")

    def enqueue_batch(self, zp, zd, y):
        """Append a batch of pairs, evicting the oldest pairs beyond capacity."""
        zp = np.atleast_2d(np.asarray(zp, dtype=np.float64))
        zd = np.atleast_2d(np.asarray(zd, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        self._check(zp, zd, y)
        K = self.capacity
        self._p = np.concatenate([self._p, zp])[-K:]
        self._d = np.concatenate([self._d, zd])[-K:]
        self._y = np.concatenate([self._y, y])[-K:]
        return self

    def enqueue_pair(self, zp, zd, y):
        """Append a single (pretrained, downstream, label) triple."""
        return self.enqueue_batch(np.asarray(zp)[None, :], np.asarray(zd)[None, :], [y])

    def warmup_fill(self, encoder, inputs, labels):
        """Fill both banks to capacity with pretrained features.

        Samples are taken in the given order and reused cyclically when the
        dataset holds fewer than K samples. Both sides receive the same
        pretrained feature, since the downstream encoder starts as a copy of
        the pretrained one.

        Args:
            encoder: callable mapping an (n, input_dim) array to (n, d)
                features, or an object with an ``encode`` method.
            inputs: (N, input_dim) samples.
            labels: N class indices.
        """
        if len(self):
            raise DriftTuneError("warmup_fill expects empty banks")
        inputs = np.asarray(inputs)
        labels = np.asarray(labels, dtype=np.int64)
        if inputs.shape[0] == 0:
            raise DriftTuneError("warmup_fill needs at least one sample")
        idx = np.arange(self.capacity) % inputs.shape[0]
        encode = encoder.encode if hasattr(encoder, "encode") else encoder
        z = encode(inputs[idx])
        return self.enqueue_batch(z, z, labels[idx])

    def class_counts(self, num_classes=None):
        """Per-class entry counts N_c (length ``num_classes``)."""
        C = num_classes if num_classes is not None else self.num_classes
        if C is None:
            C = int(self._y.max()) + 1 if len(self) else 0
        return np.bincount(self._y, minlength=C)[:C] if C else np.zeros(0, dtype=np.int64)

    def snapshot(self):
        """Independent copy of the current contents."""
        out = PairedBanks(self.capacity, self.dim, self.num_classes)
        out._p, out._d, out._y = self._p.copy(), self._d.copy(), self._y.copy()
        return out

    def save_csv(self, directory):
        """Write ``pretrained.csv`` and ``downstream.csv`` under ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_feature_csv(directory / "pretrained.csv", self._p, self._y)
        write_feature_csv(directory / "downstream.csv", self._d, self._y)

    @classmethod
    def load_csv(cls, directory, capacity=None, num_classes=None):
        """Rebuild banks from a directory written by :meth:`save_csv`."""
        directory = Path(directory)
        p, yp = read_feature_csv(directory / "pretrained.csv")
        d, yd = read_feature_csv(directory / "downstream.csv")
        if p.shape != d.shape or not np.array_equal(yp, yd):
            raise DataError("pretrained and downstream snapshots are not index-paired", path=directory)
        banks = cls(capacity or max(len(yp), 1), p.shape[1] if p.size else None, num_classes)
        if len(yp):
            banks.enqueue_batch(p, d, yp)
        return banks


def write_feature_csv(path, features, labels):
    """Write rows ``label,f0,...,f{d-1}`` with a header; floats use repr for exact round-trip."""
    features = np.asarray(features, dtype=np.float64)
    d = features.shape[1] if features.ndim == 2 else 0
    header = ",".join(["label"] + [f"f{j}" for j in range(d)])
    lines = [header]
    for y, row in zip(labels, features):
        lines.append(",".join([str(int(y))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_feature_csv(path, num_classes=None, has_header=None):
    """Parse a ``label,f0,...`` file; returns (features, labels).

    The header row is auto-detected when ``has_header`` is None.
    """
    from drift_tune.data import parse_labelled_rows

    parsed = parse_labelled_rows(Path(path), num_classes=num_classes, has_header=has_header, allow_empty=True)
    if isinstance(parsed, tuple):
        return parsed
    return parsed.inputs, parsed.labels
