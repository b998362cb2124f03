"""Hybrid CTC-attention phoneme recognizer and its bottleneck-feature extractor.

Topology: VGG-style prenet (two conv-conv-pool blocks, 4x time reduction),
a BiLSTM stack, then a linear bottleneck layer. Both the CTC head and the
attention decoder read the bottleneck, so it has to carry the phonetic
content that conversion later relies on. Dropping both heads leaves the
bottleneck extractor (BNE).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import dsp
from .attention import LocationSensitiveAttention, context, initial_alignment
from .batching import TIME_REDUCTION, lengths_mask, pad_batch, pad_repeat
from .ctc import ctc_log_likelihood, greedy_ctc_decode
from .errors import InvalidCheckpoint, InvalidInput
from .formats import bytes_entry, load_checkpoint, save_checkpoint
from .nn import ops
from .nn.layers import LSTM, Bidirectional, Conv1d, Embedding, Linear, LSTMCell, Module, ParameterStore
from .nn.tensor import Tensor


@dataclass(frozen=True)
class PhonemeVocab:
    """Phonemes take ids ``0..n-1``; blank, sos and eos follow."""

    n_phonemes: int

    @property
    def blank(self) -> int:
        return self.n_phonemes

    @property
    def sos(self) -> int:
        return self.n_phonemes + 1

    @property
    def eos(self) -> int:
        return self.n_phonemes + 2

    @property
    def size(self) -> int:
        return self.n_phonemes + 3

    def check(self, seq) -> list[int]:
        seq = [int(s) for s in seq]
        bad = [s for s in seq if not 0 <= s < self.n_phonemes]
        if bad:
            raise InvalidInput(f"phoneme ids outside 0..{self.n_phonemes - 1}: {bad[:5]}")
        return seq

    # attention decoder outputs cover phonemes, sos and eos (no blank)
    def att_class(self, ids):
        ids = np.asarray(ids)
        return np.where(ids < self.blank, ids, ids - 1)


@dataclass
class RecognizerConfig:
    n_mels: int = 80
    vgg_channels: tuple = (16, 32)
    n_lstm_layers: int = 2
    lstm_hidden: int = 64
    bottleneck_dim: int = 32
    n_phonemes: int = 10
    ctc_weight: float = 0.5
    att_rnn_hidden: int = 128
    att_dim: int = 64
    att_filters: int = 8
    att_kernel: int = 15
    embed_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        self.vgg_channels = tuple(int(c) for c in self.vgg_channels)
        if len(self.vgg_channels) != 2:
            raise InvalidInput("the VGG prenet has exactly two blocks (4x time reduction)")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise InvalidInput(f"ctc_weight must lie in [0, 1], got {self.ctc_weight}")

    @property
    def vocab(self) -> PhonemeVocab:
        return PhonemeVocab(self.n_phonemes)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RecognizerConfig":
        return cls(**json.loads(text))


@dataclass
class BottleneckFeatures:
    features: np.ndarray  # T~ x D
    source_frames: int

    def __len__(self):
        return self.features.shape[0]


# ---------------------------------------------------------------------------
# modules


class VGGPrenet(Module):
    """Two blocks of conv-relu-conv-relu-maxpool(2) over time; mel bins are channels."""

    def __init__(self, n_in, channels, rng, dtype):
        super().__init__()
        c1, c2 = channels
        self.conv1a = Conv1d(n_in, c1, 3, rng, dtype)
        self.conv1b = Conv1d(c1, c1, 3, rng, dtype)
        self.conv2a = Conv1d(c1, c2, 3, rng, dtype)
        self.conv2b = Conv1d(c2, c2, 3, rng, dtype)

    def __call__(self, x, mask):
        m = mask[:, :, None].astype(x.dtype)
        h = ops.mul(ops.relu(self.conv1a(x)), m)
        h = ops.mul(ops.relu(self.conv1b(h)), m)
        h = ops.max_pool1d(h, 2)
        mask = mask[:, ::2]
        m = mask[:, :, None].astype(x.dtype)
        h = ops.mul(ops.relu(self.conv2a(h)), m)
        h = ops.mul(ops.relu(self.conv2b(h)), m)
        return ops.max_pool1d(h, 2), mask[:, ::2]


class BottleneckEncoder(Module):
    """Prenet + BiLSTM stack + bottleneck layer; the exported BNE."""

    def __init__(self, cfg: RecognizerConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.prenet = VGGPrenet(cfg.n_mels, cfg.vgg_channels, rng, dtype)
        n_in = cfg.vgg_channels[1]
        self.lstms = []
        for i in range(cfg.n_lstm_layers):
            layer = Bidirectional(LSTM, n_in, cfg.lstm_hidden, rng, dtype)
            setattr(self, f"lstm{i}", layer)
            self.lstms.append(layer)
            n_in = 2 * cfg.lstm_hidden
        self.bottleneck = Linear(n_in, cfg.bottleneck_dim, rng, dtype)

    def __call__(self, x, mask):
        """``x``: B x T x n_mels (T a multiple of 4), ``mask``: B x T.

        Returns ``(bilstm_states, bottleneck, reduced_mask)``.
        """
        if x.shape[1] % TIME_REDUCTION:
            raise InvalidInput(f"encoder input length {x.shape[1]} is not a multiple of {TIME_REDUCTION}")
        h, mask = self.prenet(x, mask)
        for layer in self.lstms:
            h = layer(h, mask)
        bn = ops.mul(self.bottleneck(h), mask[:, :, None].astype(x.dtype))
        return h, bn, mask


class AttentionDecoder(Module):
    """One-layer LSTM decoder with location-sensitive attention (teacher forced)."""

    def __init__(self, cfg: RecognizerConfig, rng, dtype):
        super().__init__()
        vocab = cfg.vocab
        d = cfg.bottleneck_dim
        self.embed = Embedding(vocab.size, cfg.embed_dim, rng, dtype)
        self.rnn = LSTMCell(cfg.embed_dim + d, cfg.att_rnn_hidden, rng, dtype)
        self.attention = LocationSensitiveAttention(cfg.att_rnn_hidden, d, cfg.att_dim,
                                                    cfg.att_filters, cfg.att_kernel, rng, dtype)
        self.out = Linear(cfg.att_rnn_hidden + d, vocab.size - 1, rng, dtype)
        self.vocab = vocab

    def log_likelihood(self, memory, mask, targets):
        """Sum over steps of log p(y_l | y_<l, X), with eos appended; Tensor of shape B."""
        vocab = self.vocab
        bsz = len(targets)
        dtype = memory.dtype
        lens = np.array([len(t) + 1 for t in targets])
        n_steps = int(lens.max())
        inp = np.full((bsz, n_steps), vocab.eos, dtype=np.int64)
        out = np.full((bsz, n_steps), vocab.eos, dtype=np.int64)
        for b, t in enumerate(targets):
            inp[b, 0] = vocab.sos
            inp[b, 1:len(t) + 1] = t
            out[b, :len(t)] = t
        out_cls = vocab.att_class(out)
        step_mask = lengths_mask(lens, n_steps).astype(dtype)
        keys = self.attention.keys(memory)
        state = self.rnn.zero_state(bsz, dtype)
        ctx = Tensor(np.zeros((bsz, memory.shape[-1]), dtype=dtype))
        alpha = Tensor(initial_alignment(mask, dtype))
        rows = np.arange(bsz)
        total = None
        for step in range(n_steps):
            e = self.embed(inp[:, step])
            state = self.rnn(ops.concat([e, ctx], axis=-1), state)
            alpha = self.attention(state[0], alpha, keys, mask)
            ctx = context(alpha, memory)
            logp = ops.log_softmax(self.out(ops.concat([state[0], ctx], axis=-1)), axis=-1)
            picked = ops.mul(ops.getitem(logp, (rows, out_cls[:, step])), step_mask[:, step])
            total = picked if total is None else ops.add(total, picked)
        return total


class Recognizer(Module):
    def __init__(self, cfg: RecognizerConfig, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = BottleneckEncoder(cfg, rng, dtype)
        self.ctc_head = Linear(cfg.bottleneck_dim, cfg.n_phonemes + 1, rng, dtype)
        self.decoder = AttentionDecoder(cfg, rng, dtype)

    def ctc_log_posteriors(self, bn) -> Tensor:
        return ops.log_softmax(self.ctc_head(bn), axis=-1)

    def losses(self, x, mask, targets):
        """Per-utterance ``(log p_ctc, log p_att)`` Tensors, each of shape B."""
        _, bn, red_mask = self.encoder(x, mask)
        lp = self.ctc_log_posteriors(bn)
        enc_len = red_mask.sum(axis=1)
        ll_ctc = ctc_log_likelihood(lp, targets, enc_len, blank=self.cfg.vocab.blank)
        ll_att = self.decoder.log_likelihood(bn, red_mask, targets)
        return ll_ctc, ll_att

    def batch_loss(self, x, mask, targets, ctc_weight: float | None = None) -> Tensor:
        """Hybrid loss summed over utterances, divided by total target tokens (L + eos)."""
        lam = self.cfg.ctc_weight if ctc_weight is None else ctc_weight
        ll_ctc, ll_att = self.losses(x, mask, targets)
        per_utt = hybrid_loss(ll_ctc, ll_att, lam)
        n_tokens = sum(len(t) + 1 for t in targets)
        return ops.scale(ops.sum(per_utt), 1.0 / n_tokens)


def hybrid_loss(log_p_ctc, log_p_att, ctc_weight: float):
    """``-(lambda log p_ctc + (1 - lambda) log p_att)``; works on floats or Tensors."""
    if not 0.0 <= ctc_weight <= 1.0:
        raise InvalidInput(f"ctc_weight must lie in [0, 1], got {ctc_weight}")
    if isinstance(log_p_ctc, Tensor) or isinstance(log_p_att, Tensor):
        return ops.scale(ops.add(ops.scale(log_p_ctc, ctc_weight), ops.scale(log_p_att, 1.0 - ctc_weight)),
                         -1.0)
    return -(ctc_weight * log_p_ctc + (1.0 - ctc_weight) * log_p_att)


# ---------------------------------------------------------------------------
# feature preparation and extraction


def prepare_mel(mel: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Utterance MVN followed by repeat-padding to a multiple of 4 frames."""
    mel = np.asarray(mel)
    if mel.shape[0] == 0:
        raise InvalidInput("empty mel spectrogram")
    if normalize:
        mel = dsp.utterance_mvn(mel)
    return pad_repeat(mel)


def encoder_batch(mels, dtype=np.float32):
    """Pad already-prepared mels (multiples of 4) into a batch and mask."""
    x, lengths = pad_batch([np.asarray(m, dtype=dtype) for m in mels], dtype)
    return x, lengths_mask(lengths, x.shape[1])


def encode(encoder: BottleneckEncoder, mel: np.ndarray, normalize: bool = True):
    """Run one utterance through the encoder; returns (bilstm_states, BottleneckFeatures)."""
    n = np.asarray(mel).shape[0]
    prepared = prepare_mel(mel, normalize)
    dtype = encoder.bottleneck.weight.dtype
    x, mask = encoder_batch([prepared], dtype)
    states, bn, _ = encoder(Tensor(x), mask)
    return states.data[0], BottleneckFeatures(bn.data[0], n)


def extract_bnf(encoder: BottleneckEncoder, mel: np.ndarray) -> BottleneckFeatures:
    return encode(encoder, mel)[1]


FOLD_CHOICES = (1, 2, 4, 8, 16)


def fold_bounds(n_frames: int, n_segments: int) -> list[tuple[int, int]]:
    """Segment boundaries; all but the last segment are a multiple of 4 frames long."""
    if n_segments not in FOLD_CHOICES:
        raise InvalidInput(f"fold count must be one of {FOLD_CHOICES}, got {n_segments}")
    if n_frames < TIME_REDUCTION * n_segments:
        raise InvalidInput(f"{n_frames} frames too short for {n_segments} segments")
    seg = TIME_REDUCTION * (n_frames // (TIME_REDUCTION * n_segments))
    starts = [i * seg for i in range(n_segments)]
    ends = starts[1:] + [n_frames]
    return list(zip(starts, ends))


def folded_extract(encoder: BottleneckEncoder, mel: np.ndarray, n_segments: int) -> BottleneckFeatures:
    """Split the utterance into ``n_segments`` time segments and encode them as one batch.

    Normalization uses the statistics of the whole utterance, so with one
    segment the result is bit-identical to :func:`extract_bnf`.
    """
    mel = np.asarray(mel)
    n = mel.shape[0]
    bounds = fold_bounds(n, n_segments)
    normed = dsp.utterance_mvn(mel)
    dtype = encoder.bottleneck.weight.dtype
    segs = [pad_repeat(normed[a:b]) for a, b in bounds]
    x, mask = encoder_batch(segs, dtype)
    _, bn, red_mask = encoder(Tensor(x), mask)
    pieces = [bn.data[i, :int(red_mask[i].sum())] for i in range(len(segs))]
    return BottleneckFeatures(np.concatenate(pieces, axis=0), n)


def greedy_decode(model: Recognizer, mel: np.ndarray) -> list[int]:
    prepared = prepare_mel(mel)
    dtype = model.ctc_head.weight.dtype
    x, mask = encoder_batch([prepared], dtype)
    _, bn, red_mask = model.encoder(Tensor(x), mask)
    lp = model.ctc_log_posteriors(bn).data[0]
    return greedy_ctc_decode(lp, blank=model.cfg.vocab.blank, length=int(red_mask[0].sum()))


# ---------------------------------------------------------------------------
# checkpoints


def _save(path, module, cfg, kind: str, extra: dict | None = None) -> None:
    entries = dict(ParameterStore(module).state_dict())
    entries["meta/kind"] = bytes_entry(kind.encode())
    entries["meta/config"] = bytes_entry(cfg.to_json().encode())
    for k, v in (extra or {}).items():
        entries[k] = v
    save_checkpoint(path, entries)


def _meta(entries, key) -> str:
    if key not in entries:
        raise InvalidCheckpoint(f"checkpoint has no {key!r} entry")
    return entries[key].tobytes().decode()


def save_recognizer(path, model: Recognizer) -> None:
    _save(path, model, model.cfg, "recognizer")


def load_recognizer(path) -> Recognizer:
    entries = load_checkpoint(path)
    kind = _meta(entries, "meta/kind")
    if kind != "recognizer":
        raise InvalidCheckpoint(f"expected a recognizer checkpoint, found {kind!r}")
    cfg = RecognizerConfig.from_json(_meta(entries, "meta/config"))
    model = Recognizer(cfg)
    ParameterStore(model).load_state_dict(entries)
    return model


def export_bne(model: Recognizer) -> BottleneckEncoder:
    """Copy of the encoder without the CTC head and attention decoder."""
    bne = BottleneckEncoder(model.cfg, np.random.default_rng(0), model.ctc_head.weight.dtype)
    ParameterStore(bne).load_state_dict(ParameterStore(model.encoder).state_dict())
    return bne


def save_bne(path, bne: BottleneckEncoder) -> None:
    _save(path, bne, bne.cfg, "bne")


def load_bne(path) -> BottleneckEncoder:
    entries = load_checkpoint(path)
    kind = _meta(entries, "meta/kind")
    cfg = RecognizerConfig.from_json(_meta(entries, "meta/config"))
    if kind == "recognizer":
        model = Recognizer(cfg)
        ParameterStore(model).load_state_dict(entries)
        return export_bne(model)
    if kind != "bne":
        raise InvalidCheckpoint(f"expected a BNE checkpoint, found {kind!r}")
    bne = BottleneckEncoder(cfg, np.random.default_rng(0))
    ParameterStore(bne).load_state_dict(entries)
    return bne
