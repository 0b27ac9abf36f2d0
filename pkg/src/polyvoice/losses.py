"""Disentanglement objectives on accent/speaker embedding tables.

Tables store one embedding per column: accent ``(D_a, N_a)``, speaker
``(D_s, N_s)``. Every loss accepts numpy arrays (returns a float) or graph
tensors (returns a tensor, so it composes into the training objective).
Closed-form gradients are provided separately as ``*_grad`` functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import LossWeights  # noqa: F401  (re-exported)


class LossInputError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    accent: np.ndarray
    speaker: np.ndarray

    def __post_init__(self):
        for name in ("accent", "speaker"):
            table = getattr(self, name)
            if table.ndim != 2 or table.shape[1] < 1 or not np.all(np.isfinite(table)):
                raise LossInputError(f"{name} table must be a finite (D, N>=1) matrix")


def _wrap(result: Tensor, as_array: bool):
    return float(result.data) if as_array else result


def _stats(E: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    n = E.shape[1]
    if n < 2:
        raise LossInputError(f"need at least 2 embeddings, got {n}")
    mean = E.mean(axis=1, keepdims=True)
    centered = E - mean
    cov = (centered @ centered.T) * (1.0 / (n - 1))
    return mean, centered, cov


def table_stats(E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column mean and (N-1)-normalized covariance of a ``(D, N)`` table."""
    mean, _, cov = _stats(ag.as_tensor(E))
    return mean.data[:, 0], cov.data


def variance_loss(E, gamma: float = 1.0, epsilon: float = 1e-4):
    """Mean hinge ``max(0, gamma - sqrt(var + epsilon))`` over dimensions."""
    as_array = not isinstance(E, Tensor)
    E = ag.as_tensor(E)
    _, centered, _ = _stats(E)
    var = (centered * centered).sum(axis=1) * (1.0 / (E.shape[1] - 1))
    std = ag.sqrt(var + epsilon)
    return _wrap(ag.relu(gamma - std).mean(), as_array)


def covariance_loss(E):
    """Sum of squared off-diagonal covariance entries, both triangles counted."""
    as_array = not isinstance(E, Tensor)
    E = ag.as_tensor(E)
    _, _, cov = _stats(E)
    off = 1.0 - np.eye(E.shape[0])
    return _wrap((cov * cov * off).sum(), as_array)


def cross_correlation_matrix(batch_accent, batch_speaker, accent_mean, speaker_mean):
    a = ag.as_tensor(batch_accent)
    s = ag.as_tensor(batch_speaker)
    b = a.shape[1]
    if b < 2 or s.shape[1] != b:
        raise LossInputError(f"need matching batches of size >= 2, got {a.shape[1]} and {s.shape[1]}")
    mu_a = ag.as_tensor(accent_mean).reshape(-1, 1)
    mu_s = ag.as_tensor(speaker_mean).reshape(-1, 1)
    return ((a - mu_a) @ (s - mu_s).T) * (1.0 / (b - 1))


def cross_correlation_loss(batch_accent, batch_speaker, table_means):
    """Mean squared entry of the batch accent/speaker cross-correlation.

    ``table_means`` are the full-table means ``(mu_accent, mu_speaker)``, not
    batch means. Repeated embeddings within a batch are allowed.
    """
    as_array = not isinstance(batch_accent, Tensor) and not isinstance(batch_speaker, Tensor)
    r = cross_correlation_matrix(batch_accent, batch_speaker, *table_means)
    d_a, d_s = r.shape
    return _wrap((r * r).sum() * (1.0 / (d_a * d_s)), as_array)


def variance_loss_grad(E: np.ndarray, gamma: float = 1.0, epsilon: float = 1e-4) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    d, n = E.shape
    centered = E - E.mean(axis=1, keepdims=True)
    var = (centered**2).sum(axis=1) / (n - 1)
    std = np.sqrt(var + epsilon)
    active = (gamma - std) > 0
    d_var = np.where(active, -0.5 / std, 0.0) / d
    # the centering term drops out because centered rows sum to zero
    return d_var[:, None] * 2.0 * centered / (n - 1)


def covariance_loss_grad(E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    d, n = E.shape
    centered = E - E.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / (n - 1)
    g_cov = 2.0 * cov * (1.0 - np.eye(d))
    return 2.0 * g_cov @ centered / (n - 1)


def cross_correlation_loss_grad(batch_accent, batch_speaker, table_means) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the two batches (table means held fixed)."""
    a = np.asarray(batch_accent, dtype=np.float64) - np.reshape(table_means[0], (-1, 1))
    s = np.asarray(batch_speaker, dtype=np.float64) - np.reshape(table_means[1], (-1, 1))
    b = a.shape[1]
    r = a @ s.T / (b - 1)
    g_r = 2.0 * r / r.size
    return g_r @ s / (b - 1), g_r.T @ a / (b - 1)


gradient_reversal = ag.gradient_reversal


@dataclass
class SpeakerClassifier:
    """Two-layer head: pooled text encoding -> tanh hidden -> speaker logits."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, in_dim: int, n_classes: int, hidden: int, rng: np.random.Generator) -> "SpeakerClassifier":
        return cls(
            ag.parameter(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (hidden, in_dim))),
            ag.parameter(np.zeros((hidden, 1))),
            ag.parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden), (n_classes, hidden))),
            ag.parameter(np.zeros((n_classes, 1))),
        )

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def logits(self, x: Tensor) -> Tensor:
        """``x`` is ``(in_dim, B)``; returns ``(n_classes, B)``."""
        return self.w2 @ ag.tanh(self.w1 @ x + self.b1) + self.b2


def speaker_cross_entropy(logits: Tensor, speaker_ids) -> Tensor:
    ids = np.asarray(speaker_ids, dtype=np.int64)
    n_classes, batch = logits.shape
    if ids.shape != (batch,):
        raise LossInputError("one speaker id per batch column required")
    if ids.min() < 0 or ids.max() >= n_classes:
        raise LossInputError(f"speaker id outside [0, {n_classes})")
    logp = ag.log_softmax(logits, axis=0)
    return -logp[ids, np.arange(batch)].mean()


def adversarial_speaker_loss(text_encodings, speaker_ids, classifier: SpeakerClassifier, grl_lambda: float = 1.0) -> Tensor:
    """Speaker cross-entropy on gradient-reversed text encodings.

    ``text_encodings`` is ``(C_txt, B)`` (already pooled) or a list of
    ``(C_txt, T_i)`` encodings that are mean-pooled over tokens. The classifier
    is trained to identify the speaker while the encoder receives the negated
    gradient.
    """
    if isinstance(text_encodings, (list, tuple)):
        pooled = ag.concat([ag.as_tensor(e).mean(axis=1, keepdims=True) for e in text_encodings], axis=1)
    else:
        pooled = ag.as_tensor(text_encodings)
    reversed_ = ag.gradient_reversal(pooled, grl_lambda)
    return speaker_cross_entropy(classifier.logits(reversed_), speaker_ids)
