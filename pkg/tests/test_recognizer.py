import numpy as np
import pytest

from molvc.batching import padded_length
from molvc.errors import InvalidCheckpoint, InvalidInput
from molvc.nn import Adam, ParameterStore, Tape, Tensor
from molvc.recognizer import (PhonemeVocab, Recognizer, RecognizerConfig, encode, encoder_batch, export_bne,
                              extract_bnf, fold_bounds, folded_extract, hybrid_loss, load_bne, load_recognizer,
                              prepare_mel, save_bne, save_recognizer)

SMALL = dict(n_mels=8, vgg_channels=(4, 8), n_lstm_layers=1, lstm_hidden=8, bottleneck_dim=8, n_phonemes=4,
             att_rnn_hidden=16, att_dim=8, att_filters=2, att_kernel=5, embed_dim=8)


def small(dtype=np.float64, **kw):
    return Recognizer(RecognizerConfig(**{**SMALL, **kw}), dtype)


def test_vocab_layout():
    v = PhonemeVocab(10)
    assert (v.blank, v.sos, v.eos, v.size) == (10, 11, 12, 13)
    with pytest.raises(InvalidInput):
        v.check([3, 10])


def test_config_validation():
    with pytest.raises(InvalidInput):
        RecognizerConfig(ctc_weight=1.5)
    with pytest.raises(InvalidInput):
        RecognizerConfig(vgg_channels=(4, 8, 16))
    cfg = RecognizerConfig(**SMALL)
    assert RecognizerConfig.from_json(cfg.to_json()) == cfg


def test_hybrid_loss_examples():
    assert hybrid_loss(-2.0, -4.0, 0.5) == pytest.approx(3.0)
    assert hybrid_loss(-2.0, -4.0, 1.0) == pytest.approx(2.0)
    assert hybrid_loss(-2.0, -4.0, 0.0) == pytest.approx(4.0)
    with pytest.raises(InvalidInput):
        hybrid_loss(-2.0, -4.0, -0.1)


def test_time_reduction_and_padding():
    bne = small().encoder
    _, bnf = encode(bne, np.random.default_rng(0).standard_normal((100, 8)))
    assert bnf.features.shape == (25, 8) and bnf.source_frames == 100
    assert prepare_mel(np.random.default_rng(1).standard_normal((10, 8))).shape == (12, 8)
    _, bnf = encode(bne, np.random.default_rng(1).standard_normal((10, 8)))
    assert bnf.features.shape == (3, 8) and bnf.source_frames == 10
    assert padded_length(10) == 12
    with pytest.raises(InvalidInput):
        bne(Tensor(np.zeros((1, 10, 8))), np.ones((1, 10), bool))


def test_batch_permutation_equivariance():
    m = small()
    rng = np.random.default_rng(2)
    mels = [prepare_mel(rng.standard_normal((n, 8))) for n in (30, 45, 21)]
    targets = [[0, 1], [2, 3, 1], [1]]
    x, mask = encoder_batch(mels, np.float64)
    c, a = m.losses(Tensor(x), mask, targets)
    perm = [2, 0, 1]
    xp, maskp = encoder_batch([mels[i] for i in perm], np.float64)
    cp, ap = m.losses(Tensor(xp), maskp, [targets[i] for i in perm])
    np.testing.assert_allclose(cp.data, c.data[perm], atol=1e-10)
    np.testing.assert_allclose(ap.data, a.data[perm], atol=1e-10)


def test_untrained_attention_likelihood_near_uniform():
    m = small(np.float32, n_phonemes=10)
    target = [3, 1, 4, 1, 5]
    x, mask = encoder_batch([prepare_mel(np.random.default_rng(3).standard_normal((60, 8)))])
    _, a = m.losses(Tensor(x), mask, [target])
    expected = (len(target) + 1) * np.log(1.0 / 12)
    assert expected * 2 <= a.data[0] <= expected / 2


def test_overfit_single_utterance():
    m = small()
    x, mask = encoder_batch([prepare_mel(np.random.default_rng(0).standard_normal((40, 8)))], np.float64)
    target = [[0, 2, 1, 3]]
    store = ParameterStore(m)
    opt = Adam(store, lr=1e-2, clip_norm=1.0)
    for _ in range(150):
        store.zero_grad()
        with Tape() as tape:
            loss = m.batch_loss(Tensor(x), mask, target)
        tape.backward(loss)
        opt.step()
    _, a = m.losses(Tensor(x), mask, target)
    assert a.data[0] >= len(target[0]) * np.log(0.99)


def test_bne_matches_encoder_and_round_trips(tmp_path):
    m = small(np.float32)
    mel = np.random.default_rng(4).standard_normal((37, 8))
    bne = export_bne(m)
    np.testing.assert_array_equal(extract_bnf(bne, mel).features, extract_bnf(m.encoder, mel).features)
    assert bne.num_parameters() < m.num_parameters()

    save_bne(tmp_path / "bne.ckp", bne)
    back = load_bne(tmp_path / "bne.ckp")
    np.testing.assert_array_equal(extract_bnf(back, mel).features, extract_bnf(bne, mel).features)
    save_bne(tmp_path / "again.ckp", back)
    assert (tmp_path / "again.ckp").read_bytes() == (tmp_path / "bne.ckp").read_bytes()

    save_recognizer(tmp_path / "rec.ckp", m)
    rec = load_recognizer(tmp_path / "rec.ckp")
    np.testing.assert_array_equal(extract_bnf(load_bne(tmp_path / "rec.ckp"), mel).features,
                                  extract_bnf(rec.encoder, mel).features)
    with pytest.raises(InvalidCheckpoint):
        load_recognizer(tmp_path / "bne.ckp")


def test_fold_bounds():
    assert fold_bounds(100, 1) == [(0, 100)]
    assert fold_bounds(100, 2) == [(0, 48), (48, 100)]
    with pytest.raises(InvalidInput):
        fold_bounds(100, 3)
    with pytest.raises(InvalidInput):
        fold_bounds(10, 4)


def test_folding_preserves_frames():
    bne = small(np.float32).encoder
    mel = np.random.default_rng(5).standard_normal((203, 8))
    whole = extract_bnf(bne, mel)
    assert folded_extract(bne, mel, 1).features.tobytes() == whole.features.tobytes()
    for n in (2, 4, 8, 16):
        folded = folded_extract(bne, mel, n)
        assert folded.features.shape == whole.features.shape
        assert folded.source_frames == 203
