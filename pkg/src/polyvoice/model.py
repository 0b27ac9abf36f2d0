"""Toy-scale accent/speaker factorized acoustic model.

Components:

* accent-conditioned text encoder producing ``phi`` of shape ``(C_txt, T)``;
* distance-softmax alignment between encoder keys and mel queries;
* an affine-coupling flow over mel channels with per-frame conditioning;
* deterministic predictors for log-duration, standardized F0, energy and voicing.

Training composes every objective on top of the in-tree autograd engine.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .align import (
    DurationSequence,
    alignment_log_probs,
    beta_binomial_prior,
    durations_from_alignment,
    forward_sum_loss,
    frame_to_token,
    viterbi_hard,
)
from .autograd import Tensor
from .config import ToolkitConfig
from .features import MelSpectrogram, PitchTrack, SpeakerPitchStats, destandardize_f0, standardize_f0
from .losses import (
    SpeakerClassifier,
    adversarial_speaker_loss,
    covariance_loss,
    cross_correlation_matrix,
    variance_loss,
)
from .text import PhonemeInventory, TokenSequence

LOG_2PI = math.log(2.0 * math.pi)
LOG_SCALE_BOUND = 3.0


class ModelError(ValueError):
    pass


class FlowError(ArithmeticError):
    pass


class NonFiniteLossError(ArithmeticError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term '{term}' ({value})")
        self.term = term


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- data types


@dataclass(frozen=True)
class TextEncoding:
    values: Tensor  # (C_txt, T)
    token_ids: TokenSequence


@dataclass(frozen=True)
class ConditioningContext:
    values: Tensor  # (C_ctx, F)

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class AttributePrediction:
    log_durations: np.ndarray  # (T,)
    durations: np.ndarray  # positive reals
    f0_norm: np.ndarray | None = None  # (F,)
    energy: np.ndarray | None = None  # (F,), normalized units
    voiced_prob: np.ndarray | None = None


@dataclass
class TrainingItem:
    mel: np.ndarray  # (n_mels, F), raw log-mel
    f0_hz: np.ndarray
    voiced: np.ndarray
    energy: np.ndarray
    token_ids: np.ndarray
    speaker_id: int
    accent_id: int
    durations: np.ndarray | None = None  # fixed alignment, bypasses Viterbi

    @property
    def n_frames(self) -> int:
        return self.mel.shape[1]


# ---------------------------------------------------------------- flow


@dataclass
class CouplingStep:
    """Transforms channels of parity ``1 - parity`` conditioned on the others and the context."""

    parity: int
    w1: Tensor
    b1: Tensor
    ws: Tensor
    bs: Tensor
    wt: Tensor
    bt: Tensor

    @classmethod
    def create(cls, n_channels: int, ctx_dim: int, hidden: int, parity: int, rng: np.random.Generator, out_scale: float = 0.0):
        n_a = len(range(parity, n_channels, 2))
        n_b = n_channels - n_a
        fan_in = n_a + ctx_dim
        return cls(
            parity,
            ag.parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (hidden, fan_in))),
            ag.parameter(np.zeros((hidden, 1))),
            ag.parameter(rng.normal(0.0, out_scale, (n_b, hidden))),
            ag.parameter(np.zeros((n_b, 1))),
            ag.parameter(rng.normal(0.0, out_scale, (n_b, hidden))),
            ag.parameter(np.zeros((n_b, 1))),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "ws": self.ws, "bs": self.bs, "wt": self.wt, "bt": self.bt}

    def split_index(self, n_channels: int) -> tuple[np.ndarray, np.ndarray]:
        a = np.arange(self.parity, n_channels, 2)
        b = np.setdiff1d(np.arange(n_channels), a)
        return a, b

    def scale_shift(self, x_a: Tensor, ctx: Tensor) -> tuple[Tensor, Tensor]:
        h = ag.tanh(self.w1 @ ag.concat([x_a, ctx], axis=0) + self.b1)
        # bounded log-scale keeps early training from blowing up
        log_s = ag.tanh((self.ws @ h + self.bs) * (1.0 / LOG_SCALE_BOUND)) * LOG_SCALE_BOUND
        return log_s, self.wt @ h + self.bt


@dataclass
class FlowParameters:
    steps: list[CouplingStep]
    n_channels: int

    @classmethod
    def create(cls, n_channels: int, ctx_dim: int, hidden: int, n_steps: int, rng: np.random.Generator, out_scale: float = 0.0):
        if n_channels < 2 and n_steps > 0:
            raise ModelError("coupling needs at least 2 channels")
        steps = [CouplingStep.create(n_channels, ctx_dim, hidden, k % 2, rng, out_scale) for k in range(n_steps)]
        return cls(steps, n_channels)

    def parameters(self) -> dict[str, Tensor]:
        return {f"flow.{k}.{name}": p for k, step in enumerate(self.steps) for name, p in step.parameters().items()}


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FlowError(f"non-finite values in {where}")


def flow_forward(x, ctx, flow: FlowParameters) -> tuple[Tensor, Tensor]:
    """Map ``x`` (D, F) to latent ``z``; returns ``(z, total log|det J|)``."""
    z = ag.as_tensor(x)
    c = ctx.values if isinstance(ctx, ConditioningContext) else ag.as_tensor(ctx)
    if z.shape[0] != flow.n_channels or c.shape[1] != z.shape[1]:
        raise ModelError(f"flow input {z.shape} / context {c.shape} mismatch")
    logdet = ag.as_tensor(0.0)
    for k, step in enumerate(flow.steps):
        a, b = step.split_index(flow.n_channels)
        x_a = z[a, :]
        log_s, shift = step.scale_shift(x_a, c)
        y_b = z[b, :] * ag.exp(log_s) + shift
        z = ag.concat([x_a, y_b], axis=0)[np.argsort(np.concatenate([a, b])), :]
        logdet = logdet + log_s.sum()
        _check_finite(z, f"flow step {k}")
    return z, logdet


def flow_forward_nll(mel, ctx, flow: FlowParameters) -> tuple[Tensor, Tensor]:
    """Exact change-of-variables NLL per frame-channel, plus the latent."""
    z, logdet = flow_forward(mel, ctx, flow)
    d, f = z.shape
    nll = ((z * z).sum() * 0.5 + 0.5 * d * f * LOG_2PI - logdet) * (1.0 / (d * f))
    return nll, z


def flow_inverse(z, ctx, flow: FlowParameters) -> np.ndarray:
    x = np.array(getattr(z, "data", z), dtype=np.float64)
    c = ctx.values if isinstance(ctx, ConditioningContext) else ag.as_tensor(ctx)
    for step in reversed(flow.steps):
        a, b = step.split_index(flow.n_channels)
        log_s, shift = step.scale_shift(ag.as_tensor(x[a]), c)
        x[b] = (x[b] - shift.data) * np.exp(-log_s.data)
    return x


# ---------------------------------------------------------------- helpers


def _conv3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded kernel-3 convolution over the time axis of ``(C, T)``."""
    c, t = x.shape
    zero = ag.as_tensor(np.zeros((c, 1)))
    if t > 1:
        prev = ag.concat([zero, x[:, :-1]], axis=1)
        nxt = ag.concat([x[:, 1:], zero], axis=1)
    else:
        prev = nxt = zero
    return w @ ag.concat([prev, x, nxt], axis=0) + b


def _broadcast_col(col: Tensor, n: int) -> Tensor:
    return col @ ag.as_tensor(np.ones((1, n)))


def _softplus(x: Tensor) -> Tensor:
    return ag.logsumexp(ag.concat([ag.as_tensor(np.zeros((1,) + x.shape)), x.reshape((1,) + x.shape)], axis=0), axis=0)


def expand_by_durations(phi, durations) -> Tensor:
    """Repeat column ``t`` of ``phi`` ``durations[t]`` times."""
    values = phi.values if isinstance(phi, TextEncoding) else ag.as_tensor(phi)
    d = np.asarray(getattr(durations, "durations", durations), dtype=np.int64)
    if d.shape != (values.shape[1],):
        raise ModelError(f"{len(d)} durations for {values.shape[1]} tokens")
    if np.any(d < 1):
        raise ModelError("durations must be >= 1")
    return values[:, frame_to_token(d)]


def position_in_token(durations) -> np.ndarray:
    """Relative position of each frame within its token, in [0, 1)."""
    d = np.asarray(durations, dtype=np.int64)
    starts = np.repeat(np.cumsum(d) - d, d)
    return (np.arange(d.sum()) - starts) / np.repeat(d, d)


def _init(rng, shape, fan_in):
    return ag.parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape))


# ---------------------------------------------------------------- model


@dataclass
class Normalizer:
    mel_mean: np.ndarray  # (n_mels, 1)
    mel_std: np.ndarray
    energy_mean: float
    energy_std: float
    f0_mean: float  # pooled over voiced frames, used when F0 is not standardized
    f0_std: float

    @classmethod
    def fit(cls, items: Sequence[TrainingItem]) -> "Normalizer":
        mel = np.concatenate([it.mel for it in items], axis=1).astype(np.float64)
        energy = np.concatenate([it.energy for it in items]).astype(np.float64)
        f0 = np.concatenate([it.f0_hz[it.voiced.astype(bool)] for it in items]).astype(np.float64)
        f0 = f0 if f0.size else np.array([0.0])
        return cls(
            mel.mean(axis=1, keepdims=True),
            np.maximum(mel.std(axis=1, keepdims=True), 1e-3),
            float(energy.mean()),
            max(float(energy.std()), 1e-3),
            float(f0.mean()),
            max(float(f0.std()), 1.0),
        )

    def to_dict(self) -> dict:
        return {
            "mel_mean": self.mel_mean[:, 0].tolist(),
            "mel_std": self.mel_std[:, 0].tolist(),
            "energy_mean": self.energy_mean,
            "energy_std": self.energy_std,
            "f0_mean": self.f0_mean,
            "f0_std": self.f0_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            np.asarray(d["mel_mean"], dtype=np.float64)[:, None],
            np.asarray(d["mel_std"], dtype=np.float64)[:, None],
            float(d["energy_mean"]),
            float(d["energy_std"]),
            float(d["f0_mean"]),
            float(d["f0_std"]),
        )


@dataclass
class AccentModel:
    config: ToolkitConfig
    inventory: PhonemeInventory
    speakers: tuple[str, ...]
    accents: tuple[str, ...]
    params: dict[str, Tensor]
    flow: FlowParameters
    classifier: SpeakerClassifier
    normalizer: Normalizer
    speaker_stats: dict[int, SpeakerPitchStats] = field(default_factory=dict)
    steps_trained: int = 0

    # ----- construction

    @classmethod
    def create(
        cls,
        config: ToolkitConfig,
        inventory: PhonemeInventory,
        speakers: Sequence[str],
        accents: Sequence[str],
        normalizer: Normalizer,
        speaker_stats: dict[int, SpeakerPitchStats] | None = None,
        rng: np.random.Generator | None = None,
    ) -> "AccentModel":
        rng = rng if rng is not None else np.random.default_rng(config.training.seed)
        m = config.model
        n_mels = config.features.n_mels
        c, h = m.c_txt, m.hidden
        cp = c + m.d_accent + m.d_speaker
        p = {
            "token_emb": ag.parameter(rng.normal(0.0, 1.0, (c, len(inventory)))),
            "accent_table": ag.parameter(rng.normal(0.0, 1.0, (m.d_accent, len(accents)))),
            "speaker_table": ag.parameter(rng.normal(0.0, 1.0, (m.d_speaker, len(speakers)))),
            "enc_in.w": _init(rng, (c, c + m.d_accent), c + m.d_accent),
            "enc_in.b": ag.parameter(np.zeros((c, 1))),
            "enc_conv.w": _init(rng, (c, 3 * c), 3 * c),
            "enc_conv.b": ag.parameter(np.zeros((c, 1))),
            "att_key": _init(rng, (m.d_att, c), c),
            "att_query": _init(rng, (m.d_att, n_mels), n_mels),
            "dur.w1": _init(rng, (h, 3 * cp), 3 * cp),
            "dur.b1": ag.parameter(np.zeros((h, 1))),
            "dur.w2": _init(rng, (1, h), h),
            "dur.b2": ag.parameter(np.full((1, 1), 1.5)),
            "frame.w1": _init(rng, (h, 3 * (cp + 1)), 3 * (cp + 1)),
            "frame.b1": ag.parameter(np.zeros((h, 1))),
            "frame.w2": _init(rng, (3, h), h),
            "frame.b2": ag.parameter(np.zeros((3, 1))),
        }
        ctx_dim = c + m.d_accent + m.d_speaker + (3 if config.mode == "rm" else 0)
        flow = FlowParameters.create(n_mels, ctx_dim, h, m.n_flow_steps, rng, out_scale=0.01)
        classifier = SpeakerClassifier.create(c, len(speakers), h, rng)
        return cls(config, inventory, tuple(speakers), tuple(accents), p, flow, classifier, normalizer, dict(speaker_stats or {}))

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out.update(self.flow.parameters())
        out.update({f"adv.{k}": v for k, v in self.classifier.parameters().items()})
        return out

    @property
    def mode(self) -> str:
        return self.config.mode

    # ----- lookups

    def _check_ids(self, accent_id: int, speaker_id: int | None = None) -> None:
        if not 0 <= accent_id < len(self.accents):
            raise ModelError(f"accent id {accent_id} outside [0, {len(self.accents)})")
        if speaker_id is not None and not 0 <= speaker_id < len(self.speakers):
            raise ModelError(f"speaker id {speaker_id} outside [0, {len(self.speakers)})")

    def accent_vec(self, accent_id: int) -> Tensor:
        return self.params["accent_table"][:, [accent_id]]

    def speaker_vec(self, speaker_id: int) -> Tensor:
        return self.params["speaker_table"][:, [speaker_id]]

    def speaker_id(self, name: str) -> int:
        try:
            return self.speakers.index(name)
        except ValueError:
            raise ModelError(f"unknown speaker '{name}'") from None

    def accent_id(self, name: str) -> int:
        try:
            return self.accents.index(name)
        except ValueError:
            raise ModelError(f"unknown accent '{name}'") from None

    # ----- encoder and alignment

    def encode_text(self, tokens, accent_id: int) -> TextEncoding:
        seq = tokens if isinstance(tokens, TokenSequence) else TokenSequence(tuple(int(i) for i in tokens), "")
        ids = np.asarray(seq.ids, dtype=np.int64)
        if ids.size == 0:
            raise ModelError("empty token sequence")
        if ids.min() < 0 or ids.max() >= len(self.inventory):
            raise ModelError(f"token id outside [0, {len(self.inventory)})")
        self._check_ids(accent_id)
        p = self.params
        emb = p["token_emb"][:, ids]
        x = ag.concat([emb, _broadcast_col(self.accent_vec(accent_id), len(ids))], axis=0)
        h = ag.tanh(p["enc_in.w"] @ x + p["enc_in.b"])
        phi = h + ag.tanh(_conv3(h, p["enc_conv.w"], p["enc_conv.b"]))
        return TextEncoding(phi, seq)

    def normalize_mel(self, mel: np.ndarray) -> np.ndarray:
        return (np.asarray(mel, dtype=np.float64) - self.normalizer.mel_mean) / self.normalizer.mel_std

    def alignment_log_probs(self, phi: TextEncoding, mel_norm: np.ndarray, use_prior: bool) -> Tensor:
        keys = self.params["att_key"] @ phi.values
        queries = self.params["att_query"] @ ag.as_tensor(mel_norm)
        log_prior = None
        if use_prior:
            prior = beta_binomial_prior(phi.values.shape[1], mel_norm.shape[1], self.config.model.prior_scaling)
            log_prior = np.log(np.maximum(prior, 1e-300))
        return alignment_log_probs(keys, queries, log_prior)

    # ----- predictors

    def _predictor_input(self, phi: TextEncoding, accent_id: int, speaker_id: int) -> Tensor:
        t = phi.values.shape[1]
        return ag.concat(
            [phi.values, _broadcast_col(self.accent_vec(accent_id), t), _broadcast_col(self.speaker_vec(speaker_id), t)], axis=0
        )

    def _log_durations(self, pin: Tensor) -> Tensor:
        p = self.params
        h = ag.tanh(_conv3(pin, p["dur.w1"], p["dur.b1"]))
        return (p["dur.w2"] @ h + p["dur.b2"]).reshape(-1)

    def _frame_outputs(self, pin: Tensor, durations: np.ndarray) -> Tensor:
        """Rows: standardized F0, normalized energy, voicing logit."""
        p = self.params
        q = ag.concat([expand_by_durations(pin, durations), ag.as_tensor(position_in_token(durations)[None, :])], axis=0)
        h = ag.tanh(_conv3(q, p["frame.w1"], p["frame.b1"]))
        return p["frame.w2"] @ h + p["frame.b2"]

    def predict_attributes(self, phi: TextEncoding, accent_id: int, speaker_id: int, durations=None) -> AttributePrediction:
        """Deterministic attribute predictions; frame tracks use ``durations`` or the rounded prediction."""
        self._check_ids(accent_id, speaker_id)
        pin = self._predictor_input(phi, accent_id, speaker_id)
        log_d = self._log_durations(pin).data.copy()
        dur = np.exp(log_d)
        if self.mode == "rt":
            return AttributePrediction(log_d, dur)
        frames = np.maximum(np.rint(dur), 1).astype(np.int64) if durations is None else np.asarray(durations, dtype=np.int64)
        out = self._frame_outputs(pin, frames).data
        return AttributePrediction(log_d, dur, out[0].copy(), out[1].copy(), 1.0 / (1.0 + np.exp(-out[2])))

    # ----- conditioning

    def context(self, phi: TextEncoding, durations, accent_id: int, speaker_id: int, f0_hz=None, voiced=None, energy_norm=None) -> ConditioningContext:
        """Per-frame context from expanded ``phi``, A, S and (RM) F0, voicing, energy."""
        phi_exp = expand_by_durations(phi, durations)
        n = phi_exp.shape[1]
        parts = [phi_exp, _broadcast_col(self.accent_vec(accent_id), n), _broadcast_col(self.speaker_vec(speaker_id), n)]
        if self.mode == "rm":
            if f0_hz is None or voiced is None or energy_norm is None:
                raise ModelError("RM context needs F0, voicing and energy")
            v = np.asarray(voiced, dtype=np.float64)
            f0 = np.where(v > 0, np.asarray(f0_hz, dtype=np.float64), 0.0) / self.config.features.f0_max
            extra = np.stack([f0, v, np.asarray(energy_norm, dtype=np.float64)])
            if extra.shape[1] != n:
                raise ModelError(f"attribute tracks have {extra.shape[1]} frames, durations give {n}")
            parts.append(ag.as_tensor(extra))
        return ConditioningContext(ag.concat(parts, axis=0))

    # ----- F0 target conversion

    def f0_target(self, item: TrainingItem) -> np.ndarray:
        track = PitchTrack(item.f0_hz.astype(np.float64), item.voiced.astype(bool))
        if self.config.model.standardize_f0:
            return standardize_f0(track, self._stats_for(item.speaker_id))
        nrm = self.normalizer
        return np.where(track.voiced_mask, (track.f0_hz - nrm.f0_mean) / nrm.f0_std, 0.0)

    def f0_from_prediction(self, f0_norm: np.ndarray, voiced: np.ndarray, stats: SpeakerPitchStats | None) -> PitchTrack:
        if self.config.model.standardize_f0:
            if stats is None:
                raise ModelError("standardized F0 needs target speaker statistics")
            return destandardize_f0(f0_norm, voiced, stats)
        nrm = self.normalizer
        return PitchTrack(np.where(voiced, f0_norm * nrm.f0_std + nrm.f0_mean, 0.0), np.asarray(voiced, dtype=bool))

    def _stats_for(self, speaker_id: int) -> SpeakerPitchStats:
        try:
            return self.speaker_stats[speaker_id]
        except KeyError:
            raise ModelError(f"no F0 statistics for speaker {speaker_id}") from None

    # ----- losses

    def item_losses(self, item: TrainingItem, use_prior: bool = False) -> tuple[dict[str, Tensor], TextEncoding]:
        """Per-utterance loss terms (un-weighted) and the text encoding."""
        phi = self.encode_text(item.token_ids, item.accent_id)
        mel_norm = self.normalize_mel(item.mel)
        n_frames = mel_norm.shape[1]
        terms: dict[str, Tensor] = {}
        lp = self.alignment_log_probs(phi, mel_norm, use_prior)
        terms["align"] = forward_sum_loss(lp) * (1.0 / n_frames)
        if item.durations is not None:
            durations = np.asarray(item.durations, dtype=np.int64)
            if durations.sum() != n_frames:
                raise ModelError("fixed durations do not sum to the frame count")
        else:
            durations = durations_from_alignment(viterbi_hard(lp), len(item.token_ids)).durations
        energy_norm = (np.asarray(item.energy, dtype=np.float64) - self.normalizer.energy_mean) / self.normalizer.energy_std
        ctx = self.context(phi, durations, item.accent_id, item.speaker_id, item.f0_hz, item.voiced, energy_norm)
        terms["mel"], _ = flow_forward_nll(mel_norm, ctx, self.flow)

        pin = self._predictor_input(phi, item.accent_id, item.speaker_id)
        terms["duration"] = ag.absolute(self._log_durations(pin) - np.log(durations.astype(np.float64))).mean()
        if self.mode == "rm":
            out = self._frame_outputs(pin, durations)
            voiced = np.asarray(item.voiced, dtype=bool)
            if voiced.any():
                err = out[0, :] - self.f0_target(item)
                terms["f0"] = (err * err * voiced.astype(np.float64)).sum() * (1.0 / voiced.sum())
            else:
                terms["f0"] = ag.as_tensor(0.0)
            e_err = out[1, :] - energy_norm
            terms["energy"] = (e_err * e_err).mean()
            sign = np.where(voiced, 1.0, -1.0)
            terms["voicing"] = _softplus(out[2, :] * (-sign)).mean()
        return terms, phi

    def table_losses(self) -> dict[str, Tensor]:
        w = self.config.losses
        terms = {}
        for key, table in (("accent", self.params["accent_table"]), ("speaker", self.params["speaker_table"])):
            if table.shape[1] < 2:  # statistics undefined for a single embedding
                continue
            terms[f"var_{key}"] = variance_loss(table, w.gamma, w.epsilon)
            terms[f"covar_{key}"] = covariance_loss(table)
        return terms

    def cross_correlation(self, accent_ids, speaker_ids) -> Tensor:
        a_tab, s_tab = self.params["accent_table"], self.params["speaker_table"]
        return cross_correlation_matrix(
            a_tab[:, list(accent_ids)], s_tab[:, list(speaker_ids)], a_tab.mean(axis=1), s_tab.mean(axis=1)
        )

    def batch_loss(self, items: Sequence[TrainingItem], use_prior: bool = False) -> tuple[Tensor, dict[str, float], np.ndarray | None]:
        """Weighted total over a batch; returns (total, per-term values, R^{AS} or None)."""
        w = self.config.losses
        b = len(items)
        sums: dict[str, Tensor] = {}
        phis = []
        for item in items:
            terms, phi = self.item_losses(item, use_prior)
            phis.append(phi.values)
            for k, v in terms.items():
                sums[k] = v if k not in sums else sums[k] + v
        weighted = {k: v * (1.0 / b) for k, v in sums.items()}
        for k, v in self.table_losses().items():
            weighted[k] = v * (w.w_var if k.startswith("var") else w.w_covar)
        r_as = None
        if b >= 2:
            r = self.cross_correlation([it.accent_id for it in items], [it.speaker_id for it in items])
            r_as = r.data.copy()
            if w.w_xcorr > 0:
                d_a, d_s = r.shape
                weighted["xcorr"] = (r * r).sum() * (w.w_xcorr / (d_a * d_s))
        if w.w_adv > 0:
            if self.config.model.adv_pooling == "mean":
                enc = phis
                ids = [it.speaker_id for it in items]
            else:
                enc = ag.concat(phis, axis=1)
                ids = np.concatenate([[it.speaker_id] * p.shape[1] for it, p in zip(items, phis)])
            weighted["adv"] = adversarial_speaker_loss(enc, ids, self.classifier, w.grl_lambda) * w.w_adv
        values = {}
        total = None
        for k, v in weighted.items():
            value = float(v.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(k, value)
            values[k] = value
            total = v if total is None else total + v
        values["total"] = float(total.data)
        return total, values, r_as

    # ----- synthesis

    def synthesize(
        self,
        tokens,
        accent_id: int,
        speaker_id: int,
        sigma: float = 0.0,
        target_stats: SpeakerPitchStats | None = None,
        rng: np.random.Generator | None = None,
    ) -> "Synthesis":
        """Predict attributes, sample ``z ~ N(0, sigma^2)`` and invert the flow."""
        self._check_ids(accent_id, speaker_id)
        if self.mode == "rm" and target_stats is None:
            raise ModelError("RM synthesis needs target speaker F0 statistics")
        phi = self.encode_text(tokens, accent_id)
        attrs = self.predict_attributes(phi, accent_id, speaker_id)
        durations = np.maximum(np.rint(attrs.durations), 1).astype(np.int64)
        n = int(durations.sum())
        pitch = None
        if self.mode == "rm":
            voiced = attrs.voiced_prob > 0.5
            pitch = self.f0_from_prediction(attrs.f0_norm, voiced, target_stats)
            ctx = self.context(phi, durations, accent_id, speaker_id, pitch.f0_hz, voiced, attrs.energy)
        else:
            ctx = self.context(phi, durations, accent_id, speaker_id)
        rng = rng if rng is not None else np.random.default_rng(0)
        z = sigma * rng.standard_normal((self.flow.n_channels, n)) if sigma > 0 else np.zeros((self.flow.n_channels, n))
        x = flow_inverse(z, ctx, self.flow)
        values = x * self.normalizer.mel_std + self.normalizer.mel_mean
        fc = self.config.features
        mel = MelSpectrogram(values, fc.hop, fc.sample_rate)
        energy = None if attrs.energy is None else attrs.energy * self.normalizer.energy_std + self.normalizer.energy_mean
        return Synthesis(mel, DurationSequence(durations), attrs, pitch, energy)


@dataclass(frozen=True)
class Synthesis:
    mel: MelSpectrogram
    durations: DurationSequence
    attributes: AttributePrediction
    pitch: PitchTrack | None
    energy: np.ndarray | None


# ---------------------------------------------------------------- optimisation


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float = 5.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = min(1.0, self.clip_norm / norm) if norm > 0 else 1.0
        self.t += 1
        for k, p in self.params.items():
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            m_hat = self.m[k] / (1 - self.b1**self.t)
            v_hat = self.v[k] / (1 - self.b2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm


@dataclass
class TrainingResult:
    trace: list[dict[str, float]]
    initial_loss: float
    final_loss: float
    final_epoch_abs_r: np.ndarray | None  # mean |R^{AS}| over the last epoch's steps

    @property
    def final_epoch_r_norm(self) -> float:
        return float(np.linalg.norm(self.final_epoch_abs_r)) if self.final_epoch_abs_r is not None else float("nan")


def make_batches(n_items: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n_items)
    return [order[i : i + batch_size] for i in range(0, n_items, batch_size)]


def train_epoch(model: AccentModel, batches: Iterable[Sequence[TrainingItem]], optimizer: Adam, use_prior: bool = False) -> list[tuple[dict[str, float], np.ndarray | None]]:
    """One stochastic-gradient pass; returns per-step loss values and R^{AS}."""
    out = []
    for batch in batches:
        optimizer.zero_grad()
        total, values, r_as = model.batch_loss(batch, use_prior)
        total.backward()
        optimizer.step()
        model.steps_trained += 1
        out.append((values, r_as))
    return out


def evaluate_loss(model: AccentModel, items: Sequence[TrainingItem], batch_size: int) -> float:
    """Mean total loss over fixed consecutive batches, without the alignment prior."""
    totals = []
    for i in range(0, len(items), batch_size):
        _, values, _ = model.batch_loss(items[i : i + batch_size], use_prior=False)
        totals.append(values["total"])
    return float(np.mean(totals))


def train(model: AccentModel, items: Sequence[TrainingItem], steps: int | None = None, on_checkpoint=None) -> TrainingResult:
    """Run ``steps`` optimizer updates over shuffled mini-batches.

    The alignment prior is active for the first ``prior_fraction`` of steps.
    ``on_checkpoint(model, step)`` is called every ``checkpoint_every`` steps.
    """
    cfg = model.config
    steps = cfg.training.steps if steps is None else steps
    if len(items) < 1:
        raise ModelError("no training items")
    bs = min(cfg.training.batch_size, len(items))
    if cfg.losses.w_xcorr > 0 and bs < 2:
        raise ModelError("cross-correlation needs batches of at least 2 items")
    optimizer = Adam(model.parameters(), cfg.training.lr)
    initial = evaluate_loss(model, items, bs)
    prior_steps = int(round(cfg.model.prior_fraction * steps))
    trace: list[dict[str, float]] = []
    r_hist: list[np.ndarray | None] = []
    epoch = 0
    done = 0
    steps_per_epoch = math.ceil(len(items) / bs)
    while done < steps:
        batches = make_batches(len(items), bs, cfg.training.seed, epoch)
        for idx in batches:
            if done >= steps:
                break
            if len(idx) < 2 and cfg.losses.w_xcorr > 0:
                continue  # trailing singleton batch cannot form R^{AS}
            (values, r_as), = train_epoch(model, [[items[i] for i in idx]], optimizer, use_prior=done < prior_steps)
            values["step"] = done
            trace.append(values)
            r_hist.append(r_as)
            done += 1
            every = cfg.training.checkpoint_every
            if on_checkpoint is not None and every > 0 and done % every == 0:
                on_checkpoint(model, done)
        epoch += 1
    last = [r for r in r_hist[-steps_per_epoch:] if r is not None]
    abs_r = np.mean([np.abs(r) for r in last], axis=0) if last else None
    final = evaluate_loss(model, items, bs)
    return TrainingResult(trace, initial, final, abs_r)


# ---------------------------------------------------------------- data plumbing


def items_from_entries(entries, speaker_ids: Sequence[int], accent_ids: Sequence[int]) -> list[TrainingItem]:
    out = []
    for entry, s, a in zip(entries, speaker_ids, accent_ids):
        out.append(
            TrainingItem(
                entry.mel.values.astype(np.float64),
                entry.pitch.f0_hz.astype(np.float64),
                entry.pitch.voiced_mask.astype(bool),
                entry.energy.values.astype(np.float64),
                np.asarray(entry.token_ids, dtype=np.int64),
                int(s),
                int(a),
            )
        )
    return out


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"PVCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHII")  # magic, version, header length, crc32 of payload


def save_checkpoint(model: AccentModel, path: str | Path) -> Path:
    arrays = {k: np.ascontiguousarray(v.data, dtype="<f8") for k, v in model.parameters().items()}
    layout, offset = [], 0
    for name, arr in arrays.items():
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "inventory": list(model.inventory.symbols),
        "inventory_hash": model.inventory.digest(),
        "feature_hash": model.config.features.digest(),
        "speakers": list(model.speakers),
        "accents": list(model.accents),
        "normalizer": model.normalizer.to_dict(),
        "speaker_stats": [
            {"speaker_id": s.speaker_id, "mean_hz": s.mean_hz, "std_hz": s.std_hz, "n_voiced_frames": s.n_voiced_frames}
            for s in model.speaker_stats.values()
        ],
        "steps_trained": model.steps_trained,
        "arrays": layout,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = head + b"".join(a.tobytes() for a in arrays.values())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head), zlib.crc32(payload)) + payload)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, inventory_hash: str | None = None, feature_hash: str | None = None) -> AccentModel:
    """Load a checkpoint, refusing it if stored or expected hashes disagree."""
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, head_len, crc = _CKPT_HEAD.unpack_from(blob)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    payload = blob[_CKPT_HEAD.size :]
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    header = json.loads(payload[:head_len].decode("utf-8"))
    config = ToolkitConfig.from_dict(header["config"])
    inventory = PhonemeInventory(tuple(header["inventory"]))
    if inventory.digest() != header["inventory_hash"]:
        raise CheckpointError("stored inventory does not match its hash")
    if config.features.digest() != header["feature_hash"]:
        raise CheckpointError("stored feature config does not match its hash")
    if inventory_hash is not None and inventory_hash != header["inventory_hash"]:
        raise CheckpointError(f"inventory hash mismatch: checkpoint {header['inventory_hash']}, expected {inventory_hash}")
    if feature_hash is not None and feature_hash != header["feature_hash"]:
        raise CheckpointError(f"feature-config hash mismatch: checkpoint {header['feature_hash']}, expected {feature_hash}")
    stats = {d["speaker_id"]: SpeakerPitchStats(**d) for d in header["speaker_stats"]}
    model = AccentModel.create(
        config, inventory, header["speakers"], header["accents"], Normalizer.from_dict(header["normalizer"]), stats,
        rng=np.random.default_rng(0),
    )
    params = model.parameters()
    body = payload[head_len:]
    for spec in header["arrays"]:
        if spec["name"] not in params:
            raise CheckpointError(f"unexpected tensor {spec['name']}")
        target = params[spec["name"]]
        count = int(np.prod(spec["shape"]))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=spec["offset"]).reshape(spec["shape"])
        if arr.shape != target.shape:
            raise CheckpointError(f"tensor {spec['name']} has shape {arr.shape}, model expects {target.shape}")
        target.data = arr.astype(np.float64)
    if len(header["arrays"]) != len(params):
        raise CheckpointError("checkpoint is missing tensors")
    model.steps_trained = int(header["steps_trained"])
    return model
