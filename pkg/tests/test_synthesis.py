import warnings

import numpy as np
import pytest

from molvc import dsp
from molvc.errors import DegenerateStats, InvalidInput
from molvc.nn import Tensor
from molvc.synthesis import (SpeakerRef, SynthesisConfig, SynthesisModel, SynthExample, batch_forward, collate,
                             convert_logf0, load_synthesis, pitch_for_encoder, save_synthesis, synthesis_loss)

TINY = dict(n_mels=6, bnf_dim=4, prenet_hidden=3, pitch_hidden=4, speaker_dim=3, speakers=("a", "b"),
            dec_prenet_dims=(5, 4), att_rnn_hidden=6, dec_rnn_hidden=5, mlp_hidden=6, n_mixtures=2, lsa_dim=4,
            lsa_filters=2, lsa_kernel=3, postnet_channels=4, postnet_kernel=3)


def tiny(**kw):
    return SynthesisModel(SynthesisConfig(**{**TINY, **kw}), np.float64)


def inputs(n_frames, rng):
    t4 = -(-n_frames // 4)
    pitch = np.stack([5 + 0.2 * rng.standard_normal(n_frames), (rng.random(n_frames) > 0.3).astype(float)], 1)
    return rng.standard_normal((t4, 4)), pitch_for_encoder(pitch)


def encode(model, bnf, pitch, speaker=0):
    return model.encode(Tensor(bnf[None]), np.ones((1, len(bnf)), bool), Tensor(pitch[None]),
                        np.ones((1, len(pitch)), bool), np.array([speaker]))


def test_pitch_branch_matches_bottleneck_frames():
    m = tiny()
    rng = np.random.default_rng(0)
    for n in range(4, 65):
        bnf, pitch = inputs(n, rng)
        enc = encode(m, bnf, pitch)
        assert enc.states.shape[1] == len(bnf) == -(-n // 4)


def test_speaker_swap_changes_only_speaker_dims():
    m = tiny()
    bnf, pitch = inputs(40, np.random.default_rng(1))
    a = encode(m, bnf, pitch, 0).states.data
    b = encode(m, bnf, pitch, 1).states.data
    s = m.cfg.speaker_dim
    np.testing.assert_array_equal(a[..., :-s], b[..., :-s])
    assert np.all(a[..., -s:] != b[..., -s:])
    assert np.all(a[0, :, -s:] == a[0, :1, -s:])


def test_no_pitch_ignores_pitch():
    m = tiny(use_pitch=False)
    rng = np.random.default_rng(2)
    bnf, pitch = inputs(36, rng)
    a = encode(m, bnf, pitch).states.data
    b = encode(m, bnf, pitch + rng.standard_normal(pitch.shape)).states.data
    np.testing.assert_array_equal(a, b)
    assert not hasattr(m.encoder, "pitch")


def test_instance_norm_flag_controls_bias():
    # a bias in front of instance norm cancels out, so it only exists without IN
    assert getattr(tiny().encoder.pitch.conv1, "bias", None) is None
    assert getattr(tiny(instance_norm=False).encoder.pitch.conv1, "bias", None) is not None


def test_convert_logf0_examples():
    tr = dsp.PitchTrack(np.array([5.0, np.nan]), np.array([1, 0], np.uint8))
    src, tgt = dsp.SpeakerPitchStats(4.8, 0.2, 10), dsp.SpeakerPitchStats(5.0, 0.1, 10)
    out = convert_logf0(tr, src, tgt)
    assert out.log_f0[0] == pytest.approx(5.1, abs=1e-12)
    np.testing.assert_array_equal(out.uv, tr.uv)
    np.testing.assert_array_equal(convert_logf0(tr, src, src).log_f0[:1], tr.log_f0[:1])
    shifted = convert_logf0(tr, src, dsp.SpeakerPitchStats(5.1, 0.2, 3))
    assert shifted.log_f0[0] == pytest.approx(5.3, abs=1e-12)
    with pytest.raises(DegenerateStats):
        convert_logf0(tr, dsp.SpeakerPitchStats(4.8, 0.0, 1), tgt)


def test_convert_logf0_invertible():
    rng = np.random.default_rng(3)
    for _ in range(50):
        lf = rng.uniform(4, 6, 30)
        tr = dsp.PitchTrack(lf, np.ones(30, np.uint8))
        src = dsp.SpeakerPitchStats(rng.uniform(4, 6), rng.uniform(0.01, 0.5), 5)
        tgt = dsp.SpeakerPitchStats(rng.uniform(4, 6), rng.uniform(0.01, 0.5), 5)
        back = convert_logf0(convert_logf0(tr, src, tgt), tgt, src)
        np.testing.assert_allclose(back.log_f0, lf, rtol=0, atol=1e-10)


def never_stops(**kw):
    m = tiny(**kw)
    m.decoder.stop_out.bias.data[:] = -50.0
    return m


def test_generate_truncates_and_is_deterministic():
    m = never_stops()
    bnf, pitch = inputs(24, np.random.default_rng(4))
    enc = encode(m, bnf, pitch)
    with pytest.warns(RuntimeWarning):
        g = m.generate(enc, max_steps=1)
    assert g.mel.shape == (1, 6) and g.truncated
    m3 = never_stops(frames_per_step=3)
    with pytest.warns(RuntimeWarning):
        g3 = m3.generate(encode(m3, bnf, pitch), max_steps=1)
    assert g3.mel.shape == (3, 6) and g3.truncated
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a, b = m.generate(enc, 20), m.generate(enc, 20)
    np.testing.assert_array_equal(a.mel, b.mel)
    np.testing.assert_array_equal(a.alignment, b.alignment)
    assert a.alignment.shape[1] == len(bnf)


def test_loss_examples():
    rng = np.random.default_rng(5)
    target = rng.standard_normal((2, 8, 6))
    target = (target - target.mean(axis=(0, 1))) / target.std(axis=(0, 1))
    mask = np.ones((2, 8), bool)
    stop = np.zeros((2, 8))
    stop[:, -1] = 1
    logits = Tensor(np.where(stop > 0, 40.0, -40.0))
    _, mse = synthesis_loss(Tensor(target), Tensor(target), logits, target, stop, mask, mask)
    assert mse.item() == 0.0
    _, mse = synthesis_loss(Tensor(np.zeros_like(target)), Tensor(np.zeros_like(target)), logits, target, stop,
                            mask, mask)
    assert mse.item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(InvalidInput):
        synthesis_loss(Tensor(target[:, :4]), Tensor(target), logits, target, stop, mask, mask)


def test_padding_content_does_not_change_loss():
    m = tiny()
    rng = np.random.default_rng(6)
    exs = []
    for i, n in enumerate((20, 13)):
        bnf, pitch = inputs(n, rng)
        exs.append(SynthExample(bnf, pitch, rng.standard_normal((n, 6)), i % 2, n))
    b = collate(exs, m.cfg, np.float64)
    base = batch_forward(m, b)[0].item()
    b["mel"][1, 13:] = 100.0
    b["bnf"][1, 4:] = 7.0
    b["pitch"][1, 16:] = -3.0
    assert batch_forward(m, b)[0].item() == pytest.approx(base, abs=1e-12)


def test_speaker_refs_and_external_vectors():
    with pytest.raises(InvalidInput):
        SpeakerRef()
    with pytest.raises(InvalidInput):
        SpeakerRef(table_index=0, external_vector=np.ones(3))
    ref = SpeakerRef(external_vector=np.array([3.0, 0.0, 4.0]))
    np.testing.assert_allclose(ref.external_vector, [0.6, 0.0, 0.8])
    m = tiny(speakers=(), external_speaker=True)
    bnf, pitch = inputs(16, np.random.default_rng(7))
    enc = m.encode(Tensor(bnf[None]), np.ones((1, 4), bool), Tensor(pitch[None]), np.ones((1, 16), bool),
                   ref.external_vector[None])
    np.testing.assert_allclose(enc.states.data[0, :, -3:], np.tile([0.6, 0.0, 0.8], (4, 1)))
    with pytest.raises(InvalidInput):
        encode(m, bnf, pitch, 0)
    with pytest.raises(InvalidInput):
        tiny().speaker_index("zz")


def test_checkpoint_round_trip(tmp_path):
    m = SynthesisModel(SynthesisConfig(**TINY))
    m.speaker_stats["a"] = dsp.SpeakerPitchStats(4.9, 0.05, 100)
    m.mel_mean = np.arange(6.0)
    save_synthesis(tmp_path / "s.ckp", m)
    back = load_synthesis(tmp_path / "s.ckp")
    assert back.cfg == m.cfg and back.speaker_stats == m.speaker_stats
    save_synthesis(tmp_path / "t.ckp", back)
    assert (tmp_path / "t.ckp").read_bytes() == (tmp_path / "s.ckp").read_bytes()


def test_lsa_variant_runs():
    m = tiny(attention="lsa")
    bnf, pitch = inputs(20, np.random.default_rng(8))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        g = m.generate(encode(m, bnf, pitch), 5)
    np.testing.assert_allclose(g.alignment.sum(axis=1), 1.0, atol=1e-6)
    with pytest.raises(InvalidInput):
        SynthesisConfig(attention="gmm")
