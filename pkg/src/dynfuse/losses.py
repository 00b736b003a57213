"""Task losses. Each returns the batch mean as a scalar Tensor."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor

__all__ = ["TASK_LOSSES", "cross_entropy", "binary_cross_entropy", "mse", "mae", "task_loss"]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (n, k) logits and (n,) labels, got {logits.shape}, {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = Tensor._result(np.array(-logp[np.arange(n), labels].mean()), (logits,), "cross_entropy")

    def _backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        yield logits, grad * (g.item() / n)

    out._backward = _backward
    return out


def binary_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Sigmoid cross-entropy on a single logit column."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if logits.shape != y.shape:
        raise DimensionError(f"binary_cross_entropy expects (n, 1) logits, got {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor._result(np.array(loss.mean()), (logits,), "binary_cross_entropy")

    def _backward(g):
        e = np.exp(-np.abs(z))
        s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        yield logits, (s - y) * (g.item() / z.size)

    out._backward = _backward
    return out


def _regression_operands(pred: Tensor, target) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64).reshape(pred.shape[0], -1)
    if t.shape != pred.shape:
        raise DimensionError(f"target shape {t.shape} does not match prediction {pred.shape}")
    return t


def mse(pred: Tensor, target) -> Tensor:
    t = _regression_operands(pred, target)
    diff = pred.data - t
    out = Tensor._result(np.array((diff * diff).mean()), (pred,), "mse")

    def _backward(g):
        yield pred, 2.0 * diff * (g.item() / diff.size)

    out._backward = _backward
    return out


def mae(pred: Tensor, target) -> Tensor:
    t = _regression_operands(pred, target)
    diff = pred.data - t
    out = Tensor._result(np.array(np.abs(diff).mean()), (pred,), "mae")

    def _backward(g):
        yield pred, np.sign(diff) * (g.item() / diff.size)

    out._backward = _backward
    return out


TASK_LOSSES = {
    "cross_entropy": cross_entropy,
    "binary_cross_entropy": binary_cross_entropy,
    "mse": mse,
    "mae": mae,
}


def task_loss(kind: str, pred: Tensor, target) -> Tensor:
    try:
        fn = TASK_LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown task loss {kind!r}") from None
    return fn(pred, target)
