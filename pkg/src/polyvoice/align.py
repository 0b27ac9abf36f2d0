"""Monotonic text-to-frame alignment.

Paths start on token 0 at frame 0, end on token T-1 at frame F-1, and per
frame either stay on the current token or advance by exactly one, so every
token gets at least one frame and ``F >= T`` is required.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import betabinom

from . import autograd as ag


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class SoftAlignment:
    probs: np.ndarray  # (T, F), columns are distributions over tokens


@dataclass(frozen=True)
class HardAlignment:
    assignment: np.ndarray  # length F token index per frame

    def as_matrix(self, n_tokens: int) -> np.ndarray:
        out = np.zeros((n_tokens, len(self.assignment)))
        out[self.assignment, np.arange(len(self.assignment))] = 1.0
        return out


@dataclass(frozen=True)
class DurationSequence:
    durations: np.ndarray  # length T, positive ints summing to F

    @property
    def n_frames(self) -> int:
        return int(self.durations.sum())


def alignment_log_probs(text_keys, mel_queries, log_prior=None) -> ag.Tensor:
    """Log-softmax over tokens of negative squared key/query distance.

    Works on arrays or graph tensors; ``text_keys`` is (d, T), ``mel_queries``
    is (d, F).
    """
    k = ag.as_tensor(text_keys)
    q = ag.as_tensor(mel_queries)
    k_sq = (k * k).sum(axis=0).reshape(-1, 1)
    q_sq = (q * q).sum(axis=0).reshape(1, -1)
    logits = (k.T @ q) * 2.0 - k_sq - q_sq
    if log_prior is not None:
        logits = logits + log_prior
    return ag.log_softmax(logits, axis=0)


def soft_alignment(text_keys: np.ndarray, mel_queries: np.ndarray, prior: np.ndarray | None = None) -> SoftAlignment:
    log_prior = None if prior is None else np.log(np.maximum(prior, 1e-300))
    return SoftAlignment(np.exp(alignment_log_probs(text_keys, mel_queries, log_prior).data))


def beta_binomial_prior(n_tokens: int, n_frames: int, scaling: float = 1.0) -> np.ndarray:
    """Column f is Beta-Binomial(T-1, scaling*(f+1), scaling*(F-f)) over tokens."""
    if n_tokens < 1 or n_frames < 1:
        raise AlignmentError("need at least one token and one frame")
    k = np.arange(n_tokens)[:, None]
    f = np.arange(n_frames)[None, :]
    return betabinom.pmf(k, n_tokens - 1, scaling * (f + 1), scaling * (n_frames - f))


def _check_shape(log_probs: np.ndarray) -> tuple[int, int]:
    if log_probs.ndim != 2:
        raise AlignmentError("log_probs must be (T, F)")
    n_tokens, n_frames = log_probs.shape
    if n_frames < n_tokens:
        raise AlignmentError(f"no monotonic path: {n_frames} frames < {n_tokens} tokens (infinite loss)")
    return n_tokens, n_frames


def _shift_down(col: np.ndarray) -> np.ndarray:
    out = np.empty_like(col)
    out[0] = -np.inf
    out[1:] = col[:-1]
    return out


def _forward(lp: np.ndarray) -> np.ndarray:
    n_tokens, n_frames = lp.shape
    alpha = np.full((n_tokens, n_frames), -np.inf)
    alpha[0, 0] = lp[0, 0]
    for f in range(1, n_frames):
        alpha[:, f] = lp[:, f] + np.logaddexp(alpha[:, f - 1], _shift_down(alpha[:, f - 1]))
    return alpha


def _backward(lp: np.ndarray) -> np.ndarray:
    n_tokens, n_frames = lp.shape
    beta = np.full((n_tokens, n_frames), -np.inf)
    beta[-1, -1] = 0.0
    for f in range(n_frames - 2, -1, -1):
        nxt = lp[:, f + 1] + beta[:, f + 1]
        advance = np.full(n_tokens, -np.inf)
        advance[:-1] = nxt[1:]
        beta[:, f] = np.logaddexp(nxt, advance)
    return beta


def forward_sum_nll(log_probs) -> float:
    """-log of the summed probability of all monotonic stay/advance paths."""
    lp = np.asarray(getattr(log_probs, "data", log_probs), dtype=np.float64)
    _check_shape(lp)
    total = _forward(lp)[-1, -1]
    if not np.isfinite(total):
        raise AlignmentError("every monotonic path has zero probability")
    return float(-total)


def forward_sum_loss(log_probs: ag.Tensor) -> ag.Tensor:
    """Graph version of ``forward_sum_nll``; the gradient is minus the path posterior."""
    lp = log_probs.data
    _check_shape(lp)
    alpha = _forward(lp)
    log_z = alpha[-1, -1]
    if not np.isfinite(log_z):
        raise AlignmentError("every monotonic path has zero probability")
    posterior = np.exp(alpha + _backward(lp) - log_z)
    return ag.custom(np.asarray(-log_z), (log_probs,), lambda g: (-g * posterior,))


def viterbi_hard(log_probs) -> HardAlignment:
    """Best monotonic path; ties prefer staying on the current token."""
    lp = np.asarray(getattr(log_probs, "data", log_probs), dtype=np.float64)
    n_tokens, n_frames = _check_shape(lp)
    delta = np.full((n_tokens, n_frames), -np.inf)
    advanced = np.zeros((n_tokens, n_frames), dtype=bool)
    delta[0, 0] = lp[0, 0]
    for f in range(1, n_frames):
        stay = delta[:, f - 1]
        move = _shift_down(stay)
        advanced[:, f] = move > stay
        delta[:, f] = lp[:, f] + np.where(advanced[:, f], move, stay)
    path = np.empty(n_frames, dtype=np.int64)
    t = n_tokens - 1
    for f in range(n_frames - 1, -1, -1):
        path[f] = t
        if f > 0 and advanced[t, f]:
            t -= 1
    return HardAlignment(path)


def durations_from_alignment(hard: HardAlignment, n_tokens: int) -> DurationSequence:
    return DurationSequence(np.bincount(hard.assignment, minlength=n_tokens).astype(np.int64))


def frame_to_token(durations) -> np.ndarray:
    d = np.asarray(getattr(durations, "durations", durations), dtype=np.int64)
    return np.repeat(np.arange(len(d)), d)
