"""Orthogonality penalty on partitioned features and the combined loss.

The flatten output of the network (length m) is split into k contiguous
blocks of length d = m/k, stacked as the columns of Z in R^{d x k}. The
penalty ||Z^T Z - I||_F^2 pushes the blocks toward mutual orthonormality
and is mixed with weighted cross-entropy as lam*CE + (1-lam)*OS.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class OsConfig:
    k: int = 3
    lam: float = 0.8
    class_weights: tuple = (4.0, 1.0, 1.0)  # COVID-19 class weighted 4x

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if any(w <= 0 for w in self.class_weights):
            raise ConfigError(f"class weights must be positive, got {self.class_weights}")


def partition(features: Tensor, k: int) -> Tensor:
    """Split an m-vector (or [N, m] batch) into k contiguous blocks of
    length d = m/k, returned as columns of Z ([d, k] or [N, d, k])."""
    m = features.shape[-1]
    if m % k != 0:
        raise ConfigError(f"partition: k={k} does not divide feature length m={m}")
    d = m // k
    if features.ndim == 1:
        return features.reshape((k, d)).transpose()
    if features.ndim == 2:
        n = features.shape[0]
        return features.reshape((n, k, d)).transpose((0, 2, 1))
    raise ContractError(f"partition: expected 1-d or 2-d features, got shape {features.shape}")


def os_penalty(z: Tensor) -> Tensor:
    """||Z^T Z - I||_F^2; for a batched Z the mean over samples."""
    if z.ndim == 2:
        k = z.shape[1]
        gram = z.transpose().matmul(z)
        eye = Tensor(np.eye(k, dtype=z.dtype))
        return (gram - eye).frobenius_sq()
    if z.ndim == 3:
        n, _, k = z.shape
        gram = z.transpose((0, 2, 1)).matmul(z)
        eye = Tensor(np.eye(k, dtype=z.dtype))
        return (gram - eye).frobenius_sq() * (1.0 / n)
    raise ContractError(f"os_penalty: expected [d,k] or [N,d,k], got shape {z.shape}")


def os_penalty_value(features: np.ndarray, k: int) -> float:
    """Graph-free penalty of a feature batch, for logging only."""
    n, m = features.shape
    d = m // k
    z = features.reshape(n, k, d).transpose(0, 2, 1).astype(np.float64)
    gram = np.matmul(z.transpose(0, 2, 1), z) - np.eye(k)
    return float((gram ** 2).sum() / n)


def weighted_cross_entropy(logits: Tensor, labels: Union[Sequence[int], np.ndarray],
                           class_weights: Sequence[float]) -> Tensor:
    """Mean over the batch of w_y * (-log softmax(logits)_y), stabilized by
    max-subtraction. Gradient: w_y * (softmax - onehot) / N."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"label out of range [0,{k}): {labels.min()}..{labels.max()}")
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ContractError(f"need {k} class weights, got {weights.shape}")

    x = logits.data.astype(np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    wy = weights[labels]
    loss = float((-wy * logp[np.arange(n), labels]).mean())
    if not np.isfinite(loss):
        raise ContractError("weighted_cross_entropy: non-finite loss value")

    def bw(g):
        if not logits.requires_grad:
            return
        probs = np.exp(logp)
        dl = probs
        dl[np.arange(n), labels] -= 1.0
        dl *= (wy / n)[:, None]
        logits._accumulate(float(g) * dl)

    out_data = np.asarray(loss, dtype=logits.dtype)
    return Tensor._from_op(out_data, (logits,), "weighted_ce", bw)


def total_loss(ce: Tensor, os_term: Tensor, lam: float) -> Tensor:
    """lam * cross-entropy + (1 - lam) * orthogonality penalty."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    return ce * lam + os_term * (1.0 - lam)
