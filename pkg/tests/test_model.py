import dataclasses
import math

import numpy as np
import pytest

from polyvoice.config import FeatureConfig, LossWeights, ModelConfig, ToolkitConfig, TrainingConfig
from polyvoice.features import PitchTrack, SpeakerPitchStats, speaker_f0_stats, standardize_f0
from polyvoice.model import (
    LOG_SCALE_BOUND,
    AccentModel,
    CheckpointError,
    FlowParameters,
    ModelError,
    NonFiniteLossError,
    Normalizer,
    TrainingItem,
    expand_by_durations,
    flow_forward,
    flow_forward_nll,
    flow_inverse,
    load_checkpoint,
    position_in_token,
    save_checkpoint,
    train,
)
from polyvoice.text import build_inventory, tokenize_ipa
from oracles import numerical_jacobian

N_MELS = 8


def small_config(mode="rm", **losses):
    return ToolkitConfig(
        features=FeatureConfig(n_mels=N_MELS),
        losses=dataclasses.replace(LossWeights(), **losses),
        model=ModelConfig(c_txt=6, d_accent=3, d_speaker=3, n_flow_steps=3, hidden=8, d_att=4),
        training=TrainingConfig(seed=0, lr=1e-2, batch_size=3, steps=40),
        mode=mode,
    )


def random_items(rng, n, n_speakers=3, n_accents=2, vocab=10, durations=None):
    items = []
    for i in range(n):
        t = int(rng.integers(2, 5))
        d = np.full(t, durations) if durations else rng.integers(1, 5, t)
        f = int(d.sum())
        voiced = rng.random(f) < 0.7
        s = i % n_speakers
        items.append(
            TrainingItem(
                rng.normal(-3.0, 1.0, (N_MELS, f)),
                np.where(voiced, rng.uniform(100, 250, f) + 30 * s, 0.0),
                voiced,
                rng.normal(-3.0, 0.5, f),
                rng.integers(1, vocab, t),
                s,
                s % n_accents,
                d if durations else None,
            )
        )
    return items


def make_model(rng, config=None, n_items=6, items=None):
    config = config or small_config()
    items = items if items is not None else random_items(rng, n_items)
    inventory = build_inventory(["abcdefghij"])
    stats = speaker_f0_stats([(it.speaker_id, PitchTrack(it.f0_hz, it.voiced)) for it in items])
    model = AccentModel.create(config, inventory, ["s0", "s1", "s2"], ["a0", "a1"], Normalizer.fit(items), stats, np.random.default_rng(7))
    return model, items


# ---------------------------------------------------------------- encoder


def test_encoder_shape_determinism_and_accent_effect(rng):
    model, _ = make_model(rng)
    for t in (1, 2, 7):
        ids = rng.integers(1, 10, t)
        assert model.encode_text(ids, 0).values.shape == (6, t)
    ids = [3, 4, 5]
    a0 = model.encode_text(ids, 0).values.data
    assert np.array_equal(a0, model.encode_text(ids, 0).values.data)
    assert np.linalg.norm(a0 - model.encode_text(ids, 1).values.data) > 0


def test_encoder_rejects_bad_ids(rng):
    model, _ = make_model(rng)
    with pytest.raises(ModelError):
        model.encode_text([99], 0)
    with pytest.raises(ModelError):
        model.encode_text([1], 5)
    with pytest.raises(ModelError):
        model.encode_text([], 0)


def test_expand_by_durations():
    phi = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(expand_by_durations(phi, [2, 1]).data, [[1, 1, 2], [3, 3, 4]])
    assert np.array_equal(expand_by_durations(phi, [1, 1]).data, phi)
    with pytest.raises(ModelError):
        expand_by_durations(phi, [1, 1, 1])


def test_expansion_recovers_frame_to_token(rng):
    d = rng.integers(1, 5, 6)
    phi = np.arange(6, dtype=float)[None, :]
    assert np.array_equal(expand_by_durations(phi, d).data[0], np.repeat(np.arange(6), d))
    pos = position_in_token(d)
    assert pos.min() == 0 and pos.max() < 1 and np.sum(pos == 0) == 6


# ---------------------------------------------------------------- flow


def test_identity_flow_nll(rng):
    x = rng.normal(size=(4, 5))
    flow = FlowParameters.create(4, 2, 3, 0, rng)
    nll, z = flow_forward_nll(x, rng.normal(size=(2, 5)), flow)
    assert np.array_equal(z.data, x)
    assert float(nll.data) == pytest.approx((0.5 * (x**2).sum() + 0.5 * 20 * math.log(2 * math.pi)) / 20)
    assert np.array_equal(flow_inverse(np.zeros((4, 5)), rng.normal(size=(2, 5)), flow), np.zeros((4, 5)))


def test_single_step_known_scale(rng):
    s = 1.7
    flow = FlowParameters.create(4, 2, 3, 1, rng)
    step = flow.steps[0]
    step.bs.data[:] = LOG_SCALE_BOUND * np.arctanh(math.log(s) / LOG_SCALE_BOUND)
    x = rng.normal(size=(4, 6))
    z, logdet = flow_forward(x, rng.normal(size=(2, 6)), flow)
    assert float(logdet.data) == pytest.approx(2 * 6 * math.log(s), abs=1e-12)
    assert np.allclose(z.data[1::2], s * x[1::2]) and np.array_equal(z.data[0::2], x[0::2])


@pytest.mark.parametrize("d", [2, 3, 4])
def test_logdet_matches_numerical_jacobian(rng, d):
    flow = FlowParameters.create(d, 2, 5, 4, rng, out_scale=0.8)
    ctx = rng.normal(size=(2, 1))
    x = rng.normal(size=(d, 1))
    _, logdet = flow_forward(x, ctx, flow)
    jac = numerical_jacobian(lambda v: flow_forward(v.reshape(d, 1), ctx, flow)[0].data, x)
    assert abs(float(logdet.data) - np.linalg.slogdet(jac)[1]) < 1e-5


def test_inverse_reconstructs_and_context_matters(rng):
    flow = FlowParameters.create(N_MELS, 5, 8, 6, rng, out_scale=0.5)
    x = rng.normal(size=(N_MELS, 9))
    ctx = rng.normal(size=(5, 9))
    z, _ = flow_forward(x, ctx, flow)
    assert np.max(np.abs(flow_inverse(z, ctx, flow) - x)) < 1e-10
    other = flow_inverse(z, rng.normal(size=(5, 9)), flow)
    assert np.max(np.abs(other - x)) > 1e-3


def test_flow_shape_mismatch(rng):
    flow = FlowParameters.create(4, 2, 3, 2, rng)
    with pytest.raises(ModelError):
        flow_forward(np.zeros((4, 3)), np.zeros((2, 4)), flow)


# ---------------------------------------------------------------- predictors and synthesis


def test_predictions_deterministic_positive(rng):
    model, _ = make_model(rng)
    phi = model.encode_text([1, 2, 3], 1)
    a = model.predict_attributes(phi, 1, 2)
    b = model.predict_attributes(phi, 1, 2)
    assert np.array_equal(a.durations, b.durations) and np.array_equal(a.f0_norm, b.f0_norm)
    assert np.all(a.durations > 0)
    with pytest.raises(ModelError):
        model.predict_attributes(phi, 1, 3)


def test_synthesis_contracts(rng):
    model, _ = make_model(rng)
    stats = model.speaker_stats[0]
    one = model.synthesize([1, 2, 3], 1, 0, sigma=0.0, target_stats=stats)
    two = model.synthesize([1, 2, 3], 1, 0, sigma=0.0, target_stats=stats)
    assert one.mel.values.tobytes() == two.mel.values.tobytes()
    assert one.mel.n_frames == one.durations.durations.sum()
    other_accent = model.synthesize([1, 2, 3], 0, 0, sigma=0.0, target_stats=stats)
    assert not np.array_equal(one.attributes.log_durations, other_accent.attributes.log_durations)
    assert not np.array_equal(one.attributes.f0_norm[:2], other_accent.attributes.f0_norm[:2])
    noisy = model.synthesize([1, 2, 3], 1, 0, sigma=0.5, target_stats=stats, rng=np.random.default_rng(1))
    assert not np.array_equal(noisy.mel.values, one.mel.values)
    with pytest.raises(ModelError):
        model.synthesize([1, 2, 3], 1, 0)


def test_synthesis_uses_target_stats(rng):
    model, _ = make_model(rng)
    low = SpeakerPitchStats(0, 100.0, 10.0, 1)
    high = SpeakerPitchStats(0, 300.0, 10.0, 1)
    a = model.synthesize([1, 2, 3], 0, 0, target_stats=low).pitch
    b = model.synthesize([1, 2, 3], 0, 0, target_stats=high).pitch
    v = a.voiced_mask
    assert np.allclose(b.f0_hz[v] - a.f0_hz[v], 200.0)


def test_rt_mode_has_no_pitch(rng):
    model, _ = make_model(rng, small_config("rt"))
    out = model.synthesize([1, 2], 0, 1)
    assert out.pitch is None and out.attributes.f0_norm is None


def test_conditioning_completeness(rng):
    """X, phi, Lambda, A, S, F0, energy each reach exactly one model input."""
    model, items = make_model(rng)
    item = items[0]
    phi = model.encode_text(item.token_ids, item.accent_id)
    d = item.durations if item.durations is not None else np.ones(len(item.token_ids), int)
    e_norm = (item.energy[: d.sum()] - model.normalizer.energy_mean) / model.normalizer.energy_std
    f0, v = np.full(d.sum(), 150.0), np.ones(d.sum())
    ctx = model.context(phi, d, item.accent_id, item.speaker_id, f0, v, e_norm).values.data
    c, da, ds = 6, 3, 3
    assert ctx.shape == (c + da + ds + 3, d.sum())
    assert np.array_equal(ctx[:c], expand_by_durations(phi, d).data)
    assert np.array_equal(ctx[c : c + da, 0], model.params["accent_table"].data[:, item.accent_id])
    assert np.array_equal(ctx[c + da : c + da + ds, 0], model.params["speaker_table"].data[:, item.speaker_id])
    assert np.allclose(ctx[-3], 150.0 / model.config.features.f0_max) and np.array_equal(ctx[-1], e_norm)


def test_f0_target_is_standardized(rng):
    model, items = make_model(rng)
    it = items[1]
    expected = standardize_f0(PitchTrack(it.f0_hz, it.voiced), model.speaker_stats[it.speaker_id])
    assert np.array_equal(model.f0_target(it), expected)
    raw = AccentModel.create(
        dataclasses.replace(model.config, model=dataclasses.replace(model.config.model, standardize_f0=False)),
        model.inventory, model.speakers, model.accents, model.normalizer, model.speaker_stats,
    )
    assert not np.allclose(raw.f0_target(it), expected)


# ---------------------------------------------------------------- training


def test_training_reduces_loss_and_is_reproducible(rng):
    items = random_items(np.random.default_rng(3), 9)
    a, _ = make_model(rng, items=items)
    b, _ = make_model(rng, items=items)
    ra, rb = train(a, items, 30), train(b, items, 30)
    assert ra.final_loss < ra.initial_loss
    assert ra.trace == rb.trace
    assert ra.final_epoch_abs_r is not None and ra.final_epoch_abs_r.shape == (3, 3)


def test_durations_converge_to_constant_target(rng):
    items = random_items(np.random.default_rng(4), 6, durations=9)
    model, _ = make_model(rng, items=items)
    train(model, items, 150)
    for it in items:
        pred = model.predict_attributes(model.encode_text(it.token_ids, it.accent_id), it.accent_id, it.speaker_id)
        assert np.all(np.abs(pred.durations / 9.0 - 1.0) < 0.10)


def test_non_finite_loss_names_term(rng):
    model, items = make_model(rng)
    model.params["dur.b2"].data[:] = np.inf
    with pytest.raises(NonFiniteLossError, match="'duration'") as exc:
        model.batch_loss(items[:3])
    assert exc.value.term == "duration"


def test_batch_of_one_rejected_with_xcorr(rng):
    model, items = make_model(rng, small_config())
    with pytest.raises(ModelError):
        train(model, items[:1], 1)


def test_single_speaker_table_skips_statistics(rng):
    config = small_config()
    items = random_items(rng, 3, n_speakers=1, n_accents=1)
    stats = speaker_f0_stats([(0, PitchTrack(it.f0_hz, it.voiced)) for it in items])
    model = AccentModel.create(config, build_inventory(["abcdefghij"]), ["s0"], ["a0"], Normalizer.fit(items), stats)
    assert model.table_losses() == {}
    assert math.isfinite(model.batch_loss(items)[1]["total"])


def test_adversarial_term_included(rng):
    model, items = make_model(rng, small_config(w_adv=1.0))
    _, values, _ = model.batch_loss(items[:3])
    assert "adv" in values and values["adv"] > 0
    token_level = dataclasses.replace(model.config, model=dataclasses.replace(model.config.model, adv_pooling="token"))
    model.config = token_level
    assert "adv" in model.batch_loss(items[:3])[1]


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    model, items = make_model(rng)
    train(model, items, 3)
    path = save_checkpoint(model, tmp_path / "m.pvck")
    loaded = load_checkpoint(path, model.inventory.digest(), model.config.features.digest())
    for k, v in model.parameters().items():
        assert np.array_equal(loaded.parameters()[k].data, v.data)
    assert loaded.speakers == model.speakers and loaded.steps_trained == 3
    assert loaded.speaker_stats == model.speaker_stats
    stats = model.speaker_stats[0]
    assert loaded.synthesize([1, 2], 0, 0, target_stats=stats).mel.values.tobytes() == model.synthesize([1, 2], 0, 0, target_stats=stats).mel.values.tobytes()


def test_checkpoint_refusals(tmp_path, rng):
    model, _ = make_model(rng)
    path = save_checkpoint(model, tmp_path / "m.pvck")
    with pytest.raises(CheckpointError, match="inventory"):
        load_checkpoint(path, inventory_hash="0" * 16)
    with pytest.raises(CheckpointError, match="feature"):
        load_checkpoint(path, feature_hash="0" * 16)
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 1
    (tmp_path / "bad.pvck").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "bad.pvck")
    (tmp_path / "junk.pvck").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pvck")


def test_tokenized_text_synthesis(rng):
    model, _ = make_model(rng)
    seq = tokenize_ipa("abc", model.inventory)
    out = model.synthesize(seq, 0, 2, target_stats=model.speaker_stats[2])
    assert out.mel.values.shape[0] == N_MELS
