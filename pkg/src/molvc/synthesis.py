"""Multi-speaker sequence-to-sequence synthesis from bottleneck features.

Encoder side: a BiGRU prenet over the bottleneck features, a pitch encoder
(two stride-2 convolutions with instance normalization) whose output is
added to the prenet output, and a speaker vector concatenated to every
frame. Decoder side: Tacotron-style attention RNN, MoL (or location
sensitive) attention, decoder RNN, frame and stop-token heads, and a
residual convolutional postnet.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import dsp
from .attention import (SCALE_FLOOR, LocationSensitiveAttention, MoLParams, context, initial_alignment,
                        mol_attention)
from .batching import TIME_REDUCTION, lengths_mask, pad_batch, pad_repeat
from .errors import DegenerateStats, InvalidCheckpoint, InvalidInput, PoisonedDecode
from .formats import bytes_entry, load_checkpoint, save_checkpoint
from .nn import ops
from .nn.layers import GRU, Bidirectional, Conv1d, Embedding, Linear, LSTMCell, Module, ParameterStore
from .nn.tensor import Tensor

STOP_THRESHOLD = 0.5


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class SynthesisConfig:
    n_mels: int = 80
    bnf_dim: int = 32
    prenet_hidden: int = 64
    n_prenet_layers: int = 2
    pitch_hidden: int = 64
    speaker_dim: int = 16
    speakers: tuple = ()
    external_speaker: bool = False
    dec_prenet_dims: tuple = (64, 64)
    att_rnn_hidden: int = 128
    dec_rnn_hidden: int = 128
    mlp_hidden: int = 128
    n_mixtures: int = 5
    scale_floor: float = SCALE_FLOOR
    lsa_dim: int = 64
    lsa_filters: int = 8
    lsa_kernel: int = 15
    postnet_channels: int = 64
    postnet_kernel: int = 5
    postnet_layers: int = 3
    frames_per_step: int = 1
    stop_pos_weight: float = 5.0
    attention: str = "mol"
    use_pitch: bool = True
    instance_norm: bool = True
    prenet_dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.speakers = tuple(str(s) for s in self.speakers)
        self.dec_prenet_dims = tuple(int(d) for d in self.dec_prenet_dims)
        if self.attention not in ("mol", "lsa"):
            raise InvalidInput(f"attention must be 'mol' or 'lsa', got {self.attention!r}")
        if self.frames_per_step < 1:
            raise InvalidInput("frames_per_step must be >= 1")
        if self.postnet_layers < 1:
            raise InvalidInput("postnet_layers must be >= 1")

    @property
    def content_dim(self) -> int:
        return 2 * self.prenet_hidden

    @property
    def memory_dim(self) -> int:
        return self.content_dim + self.speaker_dim

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SynthesisConfig":
        return cls(**json.loads(text))


@dataclass
class SpeakerRef:
    """A learned-table index (any-to-many) or an external unit vector (any-to-any)."""

    table_index: int | None = None
    external_vector: np.ndarray | None = None

    def __post_init__(self):
        if (self.table_index is None) == (self.external_vector is None):
            raise InvalidInput("exactly one of table_index / external_vector must be set")
        if self.external_vector is not None:
            v = np.asarray(self.external_vector, dtype=np.float64).reshape(-1)
            norm = np.linalg.norm(v)
            if not np.isfinite(norm) or norm == 0:
                raise InvalidInput("external speaker vector must be finite and non-zero")
            self.external_vector = v / norm


@dataclass
class EncoderOutputs:
    states: Tensor       # B x T~ x (E + S)
    mask: np.ndarray     # B x T~
    content_dim: int

    @property
    def valid_len(self) -> np.ndarray:
        return self.mask.sum(axis=1)


@dataclass
class DecoderState:
    att: tuple
    dec: tuple
    ctx: Tensor
    x_prev: Tensor
    mu: Tensor | None = None
    alpha: Tensor | None = None
    params: MoLParams | None = None


@dataclass
class Generation:
    mel: np.ndarray         # T x n_mels, denormalized log-mel
    alignment: np.ndarray   # I x T~
    stop_probs: np.ndarray
    truncated: bool


# ---------------------------------------------------------------------------
# encoder


class PitchEncoder(Module):
    """Log-F0 + UV at frame rate -> content-dim features at a quarter of the rate."""

    def __init__(self, cfg: SynthesisConfig, rng, dtype):
        super().__init__()
        bias = not cfg.instance_norm  # a bias in front of IN cancels out exactly
        self.conv1 = Conv1d(2, cfg.pitch_hidden, 3, rng, dtype, stride=2, padding=1, bias=bias)
        self.conv2 = Conv1d(cfg.pitch_hidden, cfg.content_dim, 3, rng, dtype, stride=2, padding=1, bias=bias)
        self.use_in = cfg.instance_norm

    def __call__(self, pitch, mask):
        m1 = mask[:, ::2]
        h = self.conv1(pitch)
        h = ops.instance_norm(h, m1) if self.use_in else ops.mul(h, m1[:, :, None].astype(h.dtype))
        h = ops.relu(h)
        m2 = m1[:, ::2]
        h = self.conv2(h)
        h = ops.instance_norm(h, m2) if self.use_in else ops.mul(h, m2[:, :, None].astype(h.dtype))
        return h, m2


class ContentEncoder(Module):
    def __init__(self, cfg: SynthesisConfig, rng, dtype):
        super().__init__()
        self.cfg = cfg
        n_in = cfg.bnf_dim
        self.grus = []
        for i in range(cfg.n_prenet_layers):
            layer = Bidirectional(GRU, n_in, cfg.prenet_hidden, rng, dtype)
            setattr(self, f"gru{i}", layer)
            self.grus.append(layer)
            n_in = 2 * cfg.prenet_hidden
        if cfg.use_pitch:
            self.pitch = PitchEncoder(cfg, rng, dtype)
        if not cfg.external_speaker:
            self.speaker = Embedding(len(cfg.speakers), cfg.speaker_dim, rng, dtype)

    def speaker_vectors(self, speakers, dtype) -> Tensor:
        """``speakers``: int ids (B) or external vectors (B x S)."""
        arr = np.asarray(speakers)
        if arr.ndim == 2:
            if arr.shape[1] != self.cfg.speaker_dim:
                raise InvalidInput(f"speaker vectors have dim {arr.shape[1]}, expected {self.cfg.speaker_dim}")
            return Tensor(arr.astype(dtype))
        if self.cfg.external_speaker:
            raise InvalidInput("this model expects external speaker vectors")
        if arr.min() < 0 or arr.max() >= len(self.cfg.speakers):
            raise InvalidInput(f"speaker index outside 0..{len(self.cfg.speakers) - 1}")
        return self.speaker(arr.astype(np.int64))

    def __call__(self, bnf, mask, pitch, pitch_mask, speakers) -> EncoderOutputs:
        h = bnf
        for layer in self.grus:
            h = layer(h, mask)
        if self.cfg.use_pitch:
            p, p_mask = self.pitch(pitch, pitch_mask)
            if p.shape[1] != h.shape[1] or not np.array_equal(p_mask, mask):
                raise AssertionError(f"pitch branch gave {p.shape[1]} frames for {h.shape[1]} bottleneck frames")
            h = ops.add(h, p)
        spk = ops.expand_time(self.speaker_vectors(speakers, h.dtype), h.shape[1])
        return EncoderOutputs(ops.concat([h, spk], axis=-1), mask, self.cfg.content_dim)


# ---------------------------------------------------------------------------
# decoder


class Decoder(Module):
    def __init__(self, cfg: SynthesisConfig, rng, dtype):
        super().__init__()
        self.cfg = cfg
        m_dim = cfg.memory_dim
        p1, p2 = cfg.dec_prenet_dims
        self.prenet1 = Linear(cfg.n_mels, p1, rng, dtype)
        self.prenet2 = Linear(p1, p2, rng, dtype)
        self.att_rnn = LSTMCell(p2 + m_dim, cfg.att_rnn_hidden, rng, dtype)
        if cfg.attention == "mol":
            k = cfg.n_mixtures
            self.mol1 = Linear(cfg.att_rnn_hidden, cfg.mlp_hidden, rng, dtype)
            self.mol2 = Linear(cfg.mlp_hidden, 3 * k, rng, dtype)
            # start near one encoder frame per 4/r decoder steps with unit scale
            b = np.zeros(3 * k, dtype=dtype)
            b[k:2 * k] = _softplus_inv(cfg.frames_per_step / TIME_REDUCTION)
            b[2 * k:] = _softplus_inv(1.0)
            self.mol2.bias.data = b
        else:
            self.lsa = LocationSensitiveAttention(cfg.att_rnn_hidden, m_dim, cfg.lsa_dim,
                                                  cfg.lsa_filters, cfg.lsa_kernel, rng, dtype)
        self.dec_rnn = LSTMCell(m_dim + cfg.att_rnn_hidden, cfg.dec_rnn_hidden, rng, dtype)
        self.frame_out = Linear(cfg.dec_rnn_hidden + m_dim, cfg.n_mels * cfg.frames_per_step, rng, dtype)
        self.stop_out = Linear(cfg.dec_rnn_hidden + m_dim, 1, rng, dtype)

    def prenet(self, x, rng=None):
        p = self.cfg.prenet_dropout
        h = ops.dropout(ops.relu(self.prenet1(x)), p, rng)
        return ops.dropout(ops.relu(self.prenet2(h)), p, rng)

    def initial_state(self, enc: EncoderOutputs) -> DecoderState:
        bsz = enc.mask.shape[0]
        dtype = enc.states.dtype
        st = DecoderState(self.att_rnn.zero_state(bsz, dtype), self.dec_rnn.zero_state(bsz, dtype),
                          Tensor(np.zeros((bsz, self.cfg.memory_dim), dtype=dtype)),
                          Tensor(np.zeros((bsz, self.cfg.n_mels), dtype=dtype)))
        if self.cfg.attention == "mol":
            st.mu = Tensor(np.zeros((bsz, self.cfg.n_mixtures), dtype=dtype))
        else:
            st.alpha = Tensor(initial_alignment(enc.mask, dtype))
        return st

    def attend(self, s, state: DecoderState, enc: EncoderOutputs, keys):
        if self.cfg.attention == "mol":
            raw = self.mol2(ops.tanh(self.mol1(s)))
            alpha, mu, params = mol_attention(raw, state.mu, enc.mask, self.cfg.scale_floor)
            return alpha, mu, params
        return self.lsa(s, state.alpha, keys, enc.mask), None, None

    def step(self, state: DecoderState, enc: EncoderOutputs, keys=None, prenet_out=None):
        """One decoder step; returns ``(frames B x r*n_mels, stop_logit B, new_state, alpha)``."""
        if prenet_out is None:
            prenet_out = self.prenet(state.x_prev)
        att = self.att_rnn(ops.concat([prenet_out, state.ctx], axis=-1), state.att)
        alpha, mu, params = self.attend(att[0], state, enc, keys)
        ctx = context(alpha, enc.states)
        dec = self.dec_rnn(ops.concat([ctx, att[0]], axis=-1), state.dec)
        dc = ops.concat([dec[0], ctx], axis=-1)
        frames = self.frame_out(dc)
        stop = ops.reshape(self.stop_out(dc), (dc.shape[0],))
        new = DecoderState(att, dec, ctx, state.x_prev, mu=mu, alpha=alpha, params=params)
        return frames, stop, new, alpha

    def keys(self, enc: EncoderOutputs):
        return self.lsa.keys(enc.states) if self.cfg.attention == "lsa" else None


class Postnet(Module):
    def __init__(self, cfg: SynthesisConfig, rng, dtype):
        super().__init__()
        dims = [cfg.n_mels] + [cfg.postnet_channels] * (cfg.postnet_layers - 1) + [cfg.n_mels]
        self.convs = []
        for i in range(cfg.postnet_layers):
            conv = Conv1d(dims[i], dims[i + 1], cfg.postnet_kernel, rng, dtype)
            setattr(self, f"conv{i}", conv)
            self.convs.append(conv)

    def __call__(self, x, mask):
        m = mask[:, :, None].astype(x.dtype)
        h = ops.mul(x, m)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = ops.tanh(h)
            h = ops.mul(h, m)
        return ops.add(x, h)


class SynthesisModel(Module):
    def __init__(self, cfg: SynthesisConfig, dtype=np.float32):
        super().__init__()
        if not cfg.external_speaker and not cfg.speakers:
            raise InvalidInput("a speaker table needs at least one speaker id")
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.encoder = ContentEncoder(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        self.postnet = Postnet(cfg, rng, dtype)
        # normalization statistics and per-speaker pitch stats (not trained)
        self.mel_mean = np.zeros(cfg.n_mels)
        self.mel_std = np.ones(cfg.n_mels)
        self.speaker_stats: dict[str, dsp.SpeakerPitchStats] = {}

    @property
    def dtype(self):
        return self.decoder.frame_out.weight.dtype

    def normalize(self, mel):
        return ((np.asarray(mel) - self.mel_mean) / self.mel_std).astype(self.dtype)

    def denormalize(self, mel):
        return np.asarray(mel, dtype=np.float64) * self.mel_std + self.mel_mean

    def speaker_index(self, speaker_id: str) -> int:
        try:
            return self.cfg.speakers.index(str(speaker_id))
        except ValueError:
            raise InvalidInput(f"unknown target speaker {speaker_id!r}; trained: {list(self.cfg.speakers)}") from None

    def encode(self, bnf, bnf_mask, pitch, pitch_mask, speakers) -> EncoderOutputs:
        return self.encoder(bnf, bnf_mask, pitch, pitch_mask, speakers)

    def teacher_forced(self, enc: EncoderOutputs, target, frame_mask, rng=None):
        """Decoder outputs under teacher forcing.

        ``target`` is B x I*r x n_mels (normalized). Returns ``(pre, post,
        stop_logits B x I, alphas list)``.
        """
        r = self.cfg.frames_per_step
        bsz, n_frames, n_mels = target.shape
        if n_frames % r:
            raise InvalidInput(f"target length {n_frames} is not a multiple of frames_per_step={r}")
        n_steps = n_frames // r
        prev = np.zeros((bsz, n_steps, n_mels), dtype=target.dtype)
        prev[:, 1:] = target[:, r - 1:n_frames - 1:r]
        pre_in = self.decoder.prenet(Tensor(prev), rng)
        keys = self.decoder.keys(enc)
        state = self.decoder.initial_state(enc)
        frames, stops, alphas = [], [], []
        for i in range(n_steps):
            fr, stop, state, alpha = self.decoder.step(state, enc, keys, ops.getitem(pre_in, (slice(None), i)))
            frames.append(ops.reshape(fr, (bsz, r, n_mels)))
            stops.append(stop)
            alphas.append(alpha)
        pre = ops.reshape(ops.stack(frames, axis=1), (bsz, n_frames, n_mels))
        post = self.postnet(pre, frame_mask)
        return pre, post, ops.stack(stops, axis=1), alphas

    def generate(self, enc: EncoderOutputs, max_steps: int | None = None) -> Generation:
        """Free-running decoding of a single utterance (batch of one)."""
        if enc.mask.shape[0] != 1:
            raise InvalidInput("generate decodes one utterance at a time")
        r = self.cfg.frames_per_step
        n_mels = self.cfg.n_mels
        t_enc = int(enc.valid_len[0])
        if max_steps is None:
            max_steps = max(1, 10 * t_enc * TIME_REDUCTION // r)
        keys = self.decoder.keys(enc)
        state = self.decoder.initial_state(enc)
        frames, alphas, probs = [], [], []
        truncated = True
        for i in range(max_steps):
            fr, stop, state, alpha = self.decoder.step(state, enc, keys)
            fd = fr.data.reshape(r, n_mels)
            if not (np.all(np.isfinite(fd)) and np.isfinite(stop.data).all()):
                raise PoisonedDecode(i + 1)
            p = float(1.0 / (1.0 + np.exp(-float(stop.data[0]))))
            frames.append(fd)
            alphas.append(alpha.data[0])
            probs.append(p)
            if p >= STOP_THRESHOLD:
                truncated = False
                break
            state.x_prev = Tensor(fd[-1:].copy())
        if truncated:
            warnings.warn(f"decoding hit max_steps={max_steps} without a stop token", RuntimeWarning)
        pre = np.concatenate(frames, axis=0)[None]
        post = self.postnet(Tensor(pre.astype(self.dtype)), np.ones(pre.shape[:2], dtype=bool)).data[0]
        return Generation(self.denormalize(post), np.stack(alphas), np.array(probs), truncated)


# ---------------------------------------------------------------------------
# loss, batching


def synthesis_loss(pre, post, stop_logits, target, stop_target, frame_mask, step_mask,
                   pos_weight: float = 5.0):
    """Masked MSE on both decoder outputs plus weighted stop-token BCE.

    Returns ``(total, mse_post)``.
    """
    if pre.shape != target.shape or post.shape != target.shape:
        raise InvalidInput(f"prediction {pre.shape}/{post.shape} vs target {target.shape}")
    mse_pre = ops.masked_mse(pre, target, frame_mask)
    mse_post = ops.masked_mse(post, target, frame_mask)
    bce = ops.masked_bce_with_logits(stop_logits, stop_target, step_mask, pos_weight)
    return ops.add(ops.add(mse_pre, mse_post), bce), mse_post


@dataclass
class SynthExample:
    """Model-ready arrays for one training utterance."""

    bnf: np.ndarray        # T~ x D
    pitch: np.ndarray      # 4T~ x 2
    mel: np.ndarray        # T x n_mels, normalized
    speaker: object        # table index or unit vector
    n_frames: int


def pitch_for_encoder(log_f0_uv: np.ndarray) -> np.ndarray:
    return pad_repeat(np.asarray(log_f0_uv))


def collate(examples, cfg: SynthesisConfig, dtype=np.float32) -> dict:
    r = cfg.frames_per_step
    bnf, bnf_len = pad_batch([e.bnf for e in examples], dtype)
    pitch, pitch_len = pad_batch([e.pitch for e in examples], dtype)
    frames = np.array([e.n_frames for e in examples])
    steps = -(-frames // r)
    n_steps = int(steps.max())
    mel = np.zeros((len(examples), n_steps * r, cfg.n_mels), dtype=dtype)
    for b, e in enumerate(examples):
        mel[b, :e.n_frames] = e.mel
    stop = np.zeros((len(examples), n_steps), dtype=dtype)
    stop[np.arange(len(examples)), steps - 1] = 1.0
    return dict(bnf=bnf, bnf_mask=lengths_mask(bnf_len, bnf.shape[1]), pitch=pitch,
                pitch_mask=lengths_mask(pitch_len, pitch.shape[1]),
                speakers=np.array([e.speaker for e in examples]), mel=mel,
                frame_mask=lengths_mask(frames, n_steps * r), stop=stop,
                step_mask=lengths_mask(steps, n_steps), n_frames=int(frames.sum()))


def batch_forward(model: SynthesisModel, batch: dict, rng=None):
    enc = model.encode(Tensor(batch["bnf"]), batch["bnf_mask"], Tensor(batch["pitch"]),
                       batch["pitch_mask"], batch["speakers"])
    pre, post, stops, alphas = model.teacher_forced(enc, batch["mel"], batch["frame_mask"], rng)
    total, mse = synthesis_loss(pre, post, stops, batch["mel"], batch["stop"], batch["frame_mask"],
                                batch["step_mask"], model.cfg.stop_pos_weight)
    return total, mse, alphas


# ---------------------------------------------------------------------------
# pitch conversion


def convert_logf0(track: dsp.PitchTrack, src: dsp.SpeakerPitchStats, tgt: dsp.SpeakerPitchStats) -> dsp.PitchTrack:
    """Linear log-F0 mapping from source to target statistics; UV flags unchanged."""
    if not src.std_log_f0 > 0 or not tgt.std_log_f0 > 0:
        raise DegenerateStats("pitch statistics need a positive standard deviation")
    ratio = tgt.std_log_f0 / src.std_log_f0
    return dsp.PitchTrack((track.log_f0 - src.mean_log_f0) * ratio + tgt.mean_log_f0, track.uv.copy())


# ---------------------------------------------------------------------------
# checkpoints


def save_synthesis(path, model: SynthesisModel) -> None:
    entries = dict(ParameterStore(model).state_dict())
    entries["meta/kind"] = bytes_entry(b"synthesis")
    entries["meta/config"] = bytes_entry(model.cfg.to_json().encode())
    entries["meta/mel_mean"] = np.asarray(model.mel_mean, dtype=np.float64)
    entries["meta/mel_std"] = np.asarray(model.mel_std, dtype=np.float64)
    names = list(model.speaker_stats)
    entries["meta/speaker_stats"] = np.array(
        [[model.speaker_stats[n].mean_log_f0, model.speaker_stats[n].std_log_f0,
          model.speaker_stats[n].n_voiced_frames] for n in names], dtype=np.float64).reshape(-1, 3)
    entries["meta/speaker_stats_names"] = bytes_entry("\n".join(names).encode())
    save_checkpoint(path, entries)


def load_synthesis(path) -> SynthesisModel:
    entries = load_checkpoint(path)
    kind = entries.get("meta/kind")
    if kind is None or kind.tobytes() != b"synthesis":
        raise InvalidCheckpoint(f"{path} is not a synthesis checkpoint")
    cfg = SynthesisConfig.from_json(entries["meta/config"].tobytes().decode())
    model = SynthesisModel(cfg)
    ParameterStore(model).load_state_dict(entries)
    model.mel_mean = entries["meta/mel_mean"]
    model.mel_std = entries["meta/mel_std"]
    names = [n for n in entries["meta/speaker_stats_names"].tobytes().decode().split("\n") if n]
    for n, row in zip(names, entries["meta/speaker_stats"]):
        model.speaker_stats[n] = dsp.SpeakerPitchStats(float(row[0]), float(row[1]), int(row[2]))
    return model
