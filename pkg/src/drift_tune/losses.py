"""Cross-entropy task loss, distribution regularizer, and the L2SP baseline penalty."""

from dataclasses import dataclass

import numpy as np

from drift_tune.errors import LabelError, ShapeError


@dataclass(frozen=True)
class LossReport:
    ce: float
    dr: float
    lam: float
    total: float
    batch_accuracy: float = float("nan")


def _check_labels(labels, num_classes, n):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return labels


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    Uses a max-shifted log-sum-exp, so very large logits do not overflow.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError(f"logits must be a non-empty (n, C) array, got {logits.shape}")
    n, C = logits.shape
    labels = _check_labels(labels, C, n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - lse[:, None]
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


def ce_loss(head, features, labels):
    """Task loss on a mini-batch of downstream features.

    Returns:
        (loss, grad_head, grad_features): grad_head is (C, d) and
        grad_features is (B, d), to be pushed through the encoder.
    """
    features = np.asarray(features, dtype=np.float64)
    loss, g_logits = softmax_cross_entropy(head.logits(features), labels)
    return loss, g_logits.T @ features, g_logits @ head.prototypes


def dr_loss(head, bank_features, labels):
    """Distribution regularizer: cross-entropy of the head on (calibrated) bank features.

    Bank features are constants, so only the head receives a gradient.

    Returns:
        (loss, grad_head)
    """
    bank_features = np.asarray(bank_features, dtype=np.float64)
    loss, g_logits = softmax_cross_entropy(head.logits(bank_features), labels)
    return loss, g_logits.T @ bank_features


def regularization_weight(K, B):
    """lambda = K / B."""
    if K < 1 or B < 1:
        raise ValueError(f"K and B must be >= 1, got K={K}, B={B}")
    return K / B


def combined_objective(ce, dr, K, B, batch_accuracy=float("nan"), lam=None):
    """Total objective ``ce + lambda * dr`` with lambda = K/B unless overridden."""
    lam = regularization_weight(K, B) if lam is None else float(lam)
    return LossReport(float(ce), float(dr), lam, float(ce) + lam * float(dr), batch_accuracy)


def head_learning_rate(lr_encoder, K, B):
    """Head learning rate ``(1 + K/B) * lr_encoder``."""
    return (1.0 + regularization_weight(K, B)) * lr_encoder


def l2sp_penalty(theta_d, theta_p, beta, head=None, head_decay=0.0):
    """``beta * sum ||theta_d - theta_p||^2`` plus optional plain decay on the head.

    Args:
        theta_d: list of downstream encoder parameter arrays.
        theta_p: matching list of pretrained (starting point) arrays.
        beta: penalty strength.
        head: optional head prototype array, decayed toward zero.
        head_decay: strength of ``head_decay * ||head||^2``.

    Returns:
        (value, grads_encoder, grad_head_or_None)
    """
    if len(theta_d) != len(theta_p):
        raise ShapeError(f"{len(theta_d)} downstream vs {len(theta_p)} pretrained parameters")
    value = 0.0
    grads = []
    for a, b in zip(theta_d, theta_p):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(f"parameter shapes differ: {a.shape} vs {b.shape}")
        diff = a - b
        value += beta * float(np.sum(diff * diff))
        grads.append(2.0 * beta * diff)
    g_head = None
    if head is not None:
        head = np.asarray(head, dtype=np.float64)
        value += head_decay * float(np.sum(head * head))
        g_head = 2.0 * head_decay * head
    return value, grads, g_head


def objective_gradients(head, features, labels, bank_features=None, bank_labels=None, lam=0.0):
    """Value and gradients of ``CE(batch) + lam * DR(bank)`` for one step.

    The bank term only reaches the head; the feature gradient comes from the
    task loss alone and is what gets pushed through the downstream encoder.

    Returns:
        (ce, dr, grad_head, grad_features, batch_logits)
    """
    features = np.asarray(features, dtype=np.float64)
    logits = head.logits(features)
    ce, g_logits = softmax_cross_entropy(logits, labels)
    g_head = g_logits.T @ features
    g_feat = g_logits @ head.prototypes
    dr = 0.0
    if bank_features is not None:
        dr, g_dr = dr_loss(head, bank_features, bank_labels)
        if lam:
            g_head = g_head + lam * g_dr
    return ce, dr, g_head, g_feat, logits
