"""MLP encoder, prototype head, SGD with momentum, and checkpoint I/O."""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from drift_tune.errors import DataError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")
CHECKPOINT_MAGIC = b"DRTUNECK"
CHECKPOINT_VERSION = 1


def _activate(kind, pre):
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "tanh":
        return np.tanh(pre)
    return pre


def _activation_grad(kind, pre, post, upstream):
    if kind == "relu":
        return upstream * (pre > 0.0)
    if kind == "tanh":
        return upstream * (1.0 - post * post)
    return upstream


@dataclass
class ForwardCache:
    """Activations saved by :meth:`MlpEncoder.forward` for the backward pass."""

    inputs: np.ndarray
    pre: list
    post: list
    encoder_id: int


class MlpEncoder:
    """Stack of ``act(x @ W + b)`` layers; samples are rows.

    Args:
        layers: list of ``(W, b)`` with W shaped (in, out) and b shaped (out,).
        activation: one of ``relu`` (default), ``tanh``, ``identity``.
    """

    def __init__(self, layers, activation="relu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not layers:
            raise ShapeError("an encoder needs at least one layer")
        self.activation = activation
        self.layers = []
        for i, (W, b) in enumerate(layers):
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ShapeError(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if self.layers and self.layers[-1][0].shape[1] != W.shape[0]:
                raise ShapeError(f"layer {i} expects {W.shape[0]} inputs, previous layer emits {self.layers[-1][0].shape[1]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {i} has non-finite parameters")
            self.layers.append((W, b))

    @classmethod
    def init(cls, sizes, rng, activation="relu"):
        """He-style random initialization for layer widths ``sizes``."""
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = math.sqrt(2.0 / fan_in) if activation == "relu" else math.sqrt(1.0 / fan_in)
            layers.append((rng.standard_normal((fan_in, fan_out)) * scale, np.zeros(fan_out)))
        return cls(layers, activation)

    @property
    def input_dim(self):
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self):
        return self.layers[-1][0].shape[1]

    def params(self):
        """Flat list of parameter arrays (W0, b0, W1, b1, ...), shared not copied."""
        return [p for layer in self.layers for p in layer]

    def copy(self):
        return MlpEncoder([(W.copy(), b.copy()) for W, b in self.layers], self.activation)

    def forward(self, x):
        """Return ``(features, cache)`` for a batch ``x`` of shape (n, input_dim)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"encoder expects (n, {self.input_dim}) inputs, got {x.shape}")
        pre, post = [], []
        h = x
        for W, b in self.layers:
            a = h @ W + b
            h = _activate(self.activation, a)
            pre.append(a)
            post.append(h)
        return h, ForwardCache(x, pre, post, id(self))

    def encode(self, x):
        """Features for a batch (n, input_dim) or a single vector (input_dim,)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.forward(x[None, :])[0][0]
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Gradients ``[dW0, db0, dW1, db1, ...]`` given dLoss/dFeatures."""
        if cache.encoder_id != id(self) or len(cache.pre) != len(self.layers):
            raise ShapeError("forward cache was produced by a different encoder")
        grad = np.asarray(grad_out, dtype=np.float64)
        if grad.shape != cache.post[-1].shape:
            raise ShapeError(f"upstream gradient {grad.shape} does not match features {cache.post[-1].shape}")
        grads = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[i]
            delta = _activation_grad(self.activation, cache.pre[i], cache.post[i], grad)
            below = cache.inputs if i == 0 else cache.post[i - 1]
            grads[2 * i] = below.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i:
                grad = delta @ W.T
        return grads


class LinearHead:
    """Bias-free classifier whose logits are dot products with C prototype rows."""

    def __init__(self, prototypes):
        P = np.array(prototypes, dtype=np.float64)
        if P.ndim != 2:
            raise ShapeError(f"prototypes must be (C, d), got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise ShapeError("prototypes contain non-finite values")
        self.prototypes = P

    @classmethod
    def init(cls, num_classes, dim, rng):
        """Zero-mean uniform init scaled by 1/sqrt(d)."""
        bound = 1.0 / math.sqrt(dim)
        return cls(rng.uniform(-bound, bound, size=(num_classes, dim)))

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    @property
    def dim(self):
        return self.prototypes.shape[1]

    def logits(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise ShapeError(f"head expects features of dim {self.dim}, got {z.shape}")
        return z @ self.prototypes.T

    def predict(self, z):
        return np.argmax(self.logits(np.atleast_2d(z)), axis=1)

    def copy(self):
        return LinearHead(self.prototypes.copy())


@dataclass
class GradientSet:
    """Gradients mirroring an encoder's parameter list and a head's prototypes."""

    encoder: list = field(default_factory=list)
    head: np.ndarray = None

    @classmethod
    def zeros_like(cls, encoder=None, head=None):
        return cls(
            [np.zeros_like(p) for p in encoder.params()] if encoder is not None else [],
            np.zeros_like(head.prototypes) if head is not None else None,
        )

    def is_zero(self):
        arrays = list(self.encoder) + ([self.head] if self.head is not None else [])
        return all(not np.any(a) for a in arrays)


def backward(encoder, head, cache, features, grad_logits, grad_features=None):
    """Analytic gradients for a loss expressed through the head's logits.

    Args:
        encoder: the encoder that produced ``cache``, or None if frozen.
        head: the head that produced the logits.
        cache: forward cache for ``features``.
        features: (n, d) encoder outputs fed to the head.
        grad_logits: dLoss/dLogits, shape (n, C).
        grad_features: optional extra dLoss/dFeatures added before the
            encoder backward pass.
    """
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != (features.shape[0], head.num_classes):
        raise ShapeError(f"logit gradient {grad_logits.shape} does not match batch/head")
    g_head = grad_logits.T @ features
    g_feat = grad_logits @ head.prototypes
    if grad_features is not None:
        g_feat = g_feat + grad_features
    g_enc = encoder.backward(cache, g_feat) if encoder is not None else []
    return GradientSet(g_enc, g_head)


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient.

    ``buf = momentum * buf + (grad + weight_decay * param)``;
    ``param -= lr * buf``. Parameters are updated in place.
    """

    def __init__(self, params, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [None] * len(self.params)

    def step(self, grads, lr, weight_decay=None):
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        wd = self.weight_decay if weight_decay is None else weight_decay
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise ShapeError(f"gradient {i} has shape {g.shape}, parameter {p.shape}")
            d = g + wd * p if wd else g.copy()
            buf = self.buffers[i]
            if buf is None or not self.momentum:
                buf = d
            else:
                buf *= self.momentum
                buf += d
            self.buffers[i] = buf
            p -= lr * buf


def sgd_step(param, grad, lr, weight_decay=0.0, momentum=0.0, buf=None):
    """Functional single-array form of :class:`SGD`; returns ``(param, buf)``."""
    param = np.asarray(param, dtype=np.float64)
    d = np.asarray(grad, dtype=np.float64) + weight_decay * param
    buf = d if buf is None or not momentum else momentum * buf + d
    return param - lr * buf, buf


def lr_at(step, total_steps, base_lr, schedule="cosine"):
    """Learning rate after ``step`` of ``total_steps`` updates."""
    if total_steps <= 0:
        return base_lr
    frac = min(step, total_steps) / total_steps
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    if schedule == "linear":
        return base_lr * (1.0 - frac)
    if schedule == "constant":
        return base_lr
    raise ValueError(f"unknown lr schedule {schedule!r}")


def save_checkpoint(path, encoder, head=None, extra=None):
    """Write a versioned binary checkpoint.

    Layout: 8-byte magic, uint32 header length, UTF-8 JSON header, then the
    parameter blocks as little-endian float64 in row-major order (W0, b0,
    W1, b1, ..., prototypes).
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "activation": encoder.activation,
        "input_dim": encoder.input_dim,
        "output_dim": encoder.output_dim,
        "layers": [list(W.shape) for W, _ in encoder.layers],
        "num_classes": head.num_classes if head is not None else None,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = encoder.params() + ([head.prototypes] if head is not None else [])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(encoder, head_or_None, header)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError("not a drift-tune checkpoint", path=path)
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('format_version')}", path=path)
    offset = 12 + n

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(raw):
            raise DataError("checkpoint is truncated", path=path)
        arr = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
        return arr

    layers = [(take(tuple(s)), take((s[1],))) for s in header["layers"]]
    encoder = MlpEncoder(layers, header["activation"])
    head = None
    if header.get("num_classes") is not None:
        head = LinearHead(take((header["num_classes"], header["output_dim"])))
    if offset != len(raw):
        raise DataError("trailing bytes after checkpoint payload", path=path)
    return encoder, head, header
