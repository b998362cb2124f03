"""End-to-end glue: training both stages, conversion and objective evaluation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .attention import alignment_diagonality
from .batching import lengths_mask
from .ctc import edit_distance
from .errors import InvalidInput, NoPitch, UndefinedMetric
from .features import Utterance, analyze, load_records, map_ordered, pitch_input
from .nn.layers import ParameterStore
from .nn.tensor import Tensor
from .recognizer import (BottleneckEncoder, Recognizer, RecognizerConfig, encoder_batch, extract_bnf,
                         folded_extract, greedy_decode, prepare_mel, save_recognizer)
from .synthesis import (Generation, SpeakerRef, SynthesisConfig, SynthesisModel, SynthExample,
                        batch_forward, collate, convert_logf0, pitch_for_encoder, save_synthesis)
from .trainer import Item, TrainConfig, TrainReport, split_validation, train, write_report


class _BestKeeper:
    """Keeps the best parameters in memory and optionally on disk."""

    def __init__(self, model, save_fn=None):
        self.model = model
        self.save_fn = save_fn
        self.state = None

    def __call__(self):
        self.state = ParameterStore(self.model).state_dict()
        if self.save_fn is not None:
            self.save_fn()

    def restore(self):
        if self.state is not None:
            ParameterStore(self.model).load_state_dict(self.state)


# ---------------------------------------------------------------------------
# recognizer


def recognizer_items(utts) -> list[Item]:
    return [Item(u.utt_id, -(-u.n_frames // 4), (prepare_mel(u.mel), list(u.phonemes))) for u in utts]


def recognizer_batch_loss(model: Recognizer, batch):
    x, mask = encoder_batch([it.data[0] for it in batch.items], model.ctc_head.weight.dtype)
    targets = [it.data[1] for it in batch.items]
    return model.batch_loss(Tensor(x), mask, targets), float(sum(len(t) + 1 for t in targets))


def train_recognizer(utts: list[Utterance], rcfg: RecognizerConfig, tcfg: TrainConfig, out=None,
                     log=print) -> tuple[Recognizer, TrainReport]:
    items = recognizer_items(utts)
    tr, va = split_validation([i.key for i in items], tcfg.val_fraction, tcfg.seed)
    model = Recognizer(rcfg)
    keeper = _BestKeeper(model, (lambda: save_recognizer(out, model)) if out else None)
    report = train(model, [items[i] for i in tr], [items[i] for i in va], recognizer_batch_loss, tcfg,
                   keeper, log)
    keeper.restore()
    if out:
        write_report(out, report)
    return model, report


def phoneme_error_rate(model: Recognizer, utts) -> float:
    errors = total = 0
    for u in utts:
        errors += edit_distance(greedy_decode(model, u.mel), u.phonemes)
        total += len(u.phonemes)
    return errors / max(total, 1)


# ---------------------------------------------------------------------------
# synthesis


def mel_statistics(mels) -> tuple[np.ndarray, np.ndarray]:
    allm = np.concatenate(list(mels), axis=0)
    std = allm.std(axis=0)
    return allm.mean(axis=0), np.where(std > 1e-5, std, 1.0)


def speaker_statistics(utts) -> dict[str, dsp.SpeakerPitchStats]:
    by_spk: dict[str, list] = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(u.raw_pitch)
    return {s: dsp.speaker_pitch_stats(tracks) for s, tracks in by_spk.items()}


def bnf_for(bne: BottleneckEncoder, utts, fold: int = 1) -> list[np.ndarray]:
    if fold == 1:
        return map_ordered(lambda u: extract_bnf(bne, u.mel).features, utts)
    return map_ordered(lambda u: folded_extract(bne, u.mel, fold).features, utts)


def synthesis_examples(model: SynthesisModel, utts, bnfs, speaker_vectors: dict | None = None) -> list[Item]:
    """Training items; ``speaker_vectors`` (name -> vector) is required for external-speaker models."""
    if model.cfg.external_speaker:
        missing = sorted({u.speaker_id for u in utts} - set(speaker_vectors or {}))
        if missing:
            raise InvalidInput(f"no external speaker vector for {', '.join(missing)}")
    items = []
    for u, bnf in zip(utts, bnfs):
        if model.cfg.external_speaker:
            spk = SpeakerRef(external_vector=speaker_vectors[u.speaker_id]).external_vector
        else:
            spk = model.speaker_index(u.speaker_id)
        ex = SynthExample(bnf, pitch_for_encoder(pitch_input(u.pitch)), model.normalize(u.mel), spk, u.n_frames)
        items.append(Item(u.utt_id, u.n_frames, ex))
    return items


def synthesis_batch_loss(model: SynthesisModel, batch):
    b = collate([it.data for it in batch.items], model.cfg, model.dtype)
    total, _, _ = batch_forward(model, b)
    return total, float(b["n_frames"])


def synthesis_mse(model: SynthesisModel, items, batch_size: int = 16) -> float:
    """Frame-weighted teacher-forced post-postnet MSE in normalized units."""
    total = frames = 0.0
    for k in range(0, len(items), batch_size):
        b = collate([it.data for it in items[k:k + batch_size]], model.cfg, model.dtype)
        _, mse, _ = batch_forward(model, b)
        total += float(mse.data) * b["n_frames"]
        frames += b["n_frames"]
    return total / frames


def new_synthesis_model(utts, scfg: SynthesisConfig) -> SynthesisModel:
    speakers = tuple(dict.fromkeys(u.speaker_id for u in utts))
    if scfg.speakers and tuple(scfg.speakers) != speakers:
        raise InvalidInput(f"config speakers {scfg.speakers} differ from manifest speakers {speakers}")
    cfg = SynthesisConfig(**{**scfg.__dict__, "speakers": speakers})
    model = SynthesisModel(cfg)
    model.mel_mean, model.mel_std = mel_statistics(u.mel for u in utts)
    model.speaker_stats = speaker_statistics(utts)
    return model


def train_synthesis(utts: list[Utterance], bne: BottleneckEncoder, scfg: SynthesisConfig, tcfg: TrainConfig,
                    out=None, log=print, bnfs=None, speaker_vectors: dict | None = None):
    if scfg.bnf_dim != bne.cfg.bottleneck_dim:
        raise InvalidInput(f"bnf_dim={scfg.bnf_dim} but the BNE emits {bne.cfg.bottleneck_dim}-dim features")
    model = new_synthesis_model(utts, scfg)
    if bnfs is None:
        bnfs = bnf_for(bne, utts)
    items = synthesis_examples(model, utts, bnfs, speaker_vectors)
    tr, va = split_validation([i.key for i in items], tcfg.val_fraction, tcfg.seed)
    keeper = _BestKeeper(model, (lambda: save_synthesis(out, model)) if out else None)
    report = train(model, [items[i] for i in tr], [items[i] for i in va], synthesis_batch_loss, tcfg,
                   keeper, log)
    keeper.restore()
    if out:
        write_report(out, report)
    return model, report, items


def generate_example(model: SynthesisModel, ex: SynthExample) -> Generation:
    """Free-running generation for one training example."""
    dtype = model.dtype
    enc = model.encode(Tensor(ex.bnf[None].astype(dtype)), lengths_mask([ex.bnf.shape[0]]),
                       Tensor(ex.pitch[None].astype(dtype)), lengths_mask([ex.pitch.shape[0]]),
                       np.array([ex.speaker]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return model.generate(enc)


@dataclass
class FreeRunResult:
    key: str
    diagonality: float
    generated_frames: int
    target_frames: int

    @property
    def length_ok(self) -> bool:
        return abs(self.generated_frames - self.target_frames) <= 0.1 * self.target_frames

    def passed(self, min_diagonality: float = 0.9) -> bool:
        return self.length_ok and self.diagonality >= min_diagonality


def free_run(model: SynthesisModel, items) -> list[FreeRunResult]:
    out = []
    for it in items:
        g = generate_example(model, it.data)
        out.append(FreeRunResult(it.key, alignment_diagonality(g.alignment), g.mel.shape[0], it.data.n_frames))
    return out


# ---------------------------------------------------------------------------
# conversion


@dataclass
class Conversion:
    mel: np.ndarray
    alignment: np.ndarray
    truncated: bool
    log_f0: dsp.PitchTrack
    waveform: dsp.Waveform | None = None


def encode_for_synthesis(model: SynthesisModel, bnf: np.ndarray, pitch: dsp.PitchTrack, speaker):
    """Encoder outputs for one utterance; ``speaker`` is an int index or a unit vector."""
    dtype = model.dtype
    p = pitch_for_encoder(pitch_input(pitch))[None].astype(dtype)
    if p.shape[1] != 4 * bnf.shape[0]:
        raise InvalidInput(f"pitch track ({len(pitch)} frames) does not match {bnf.shape[0]} bottleneck frames")
    spk = np.asarray(speaker)
    spk = spk[None] if spk.ndim == 1 else np.array([int(spk)])
    return model.encode(Tensor(bnf[None].astype(dtype)), lengths_mask([bnf.shape[0]]),
                        Tensor(p), lengths_mask([p.shape[1]]), spk)


def resolve_target(model: SynthesisModel, target: SpeakerRef | str | int):
    if isinstance(target, SpeakerRef):
        if target.external_vector is not None:
            return target.external_vector, None
        idx = int(target.table_index)
    elif isinstance(target, (int, np.integer)):
        idx = int(target)
    else:
        idx = model.speaker_index(str(target))
    if not 0 <= idx < len(model.cfg.speakers):
        raise InvalidInput(f"speaker index {idx} out of range")
    return idx, model.cfg.speakers[idx]


def convert(wav: dsp.Waveform, bne: BottleneckEncoder, model: SynthesisModel, target,
            tgt_stats: dsp.SpeakerPitchStats | None = None, src_stats: dsp.SpeakerPitchStats | None = None,
            griffin_lim_iters: int | None = None, seed: int = 0, fold: int = 1,
            max_steps: int | None = None) -> Conversion:
    """mel -> BNE -> log-F0 conversion -> encoder -> autoregressive decoding (-> Griffin-Lim)."""
    wav.validate()
    utt = analyze(wav)
    spk, spk_name = resolve_target(model, target)
    if tgt_stats is None:
        if spk_name is None or spk_name not in model.speaker_stats:
            raise InvalidInput("target pitch statistics are required for an external speaker vector")
        tgt_stats = model.speaker_stats[spk_name]
    if src_stats is None:
        src_stats = dsp.speaker_pitch_stats([utt.raw_pitch])
    bnf = extract_bnf(bne, utt.mel).features if fold == 1 else folded_extract(bne, utt.mel, fold).features
    track = convert_logf0(utt.pitch, src_stats, tgt_stats)
    enc = encode_for_synthesis(model, bnf, track, spk)
    gen: Generation = model.generate(enc, max_steps)
    out = Conversion(gen.mel, gen.alignment, gen.truncated, track)
    if griffin_lim_iters is not None:
        out.waveform = dsp.griffin_lim(gen.mel, griffin_lim_iters, seed=seed)
    return out


def voiced_stats_of_mel(mel: np.ndarray, iters: int = 60, seed: int = 0) -> dsp.SpeakerPitchStats:
    """Pitch statistics measured on a Griffin-Lim rendering of a mel spectrogram."""
    wav = dsp.griffin_lim(mel, iters, seed=seed)
    return dsp.speaker_pitch_stats([dsp.extract_f0(wav)])


# ---------------------------------------------------------------------------
# evaluation


def pair_metrics(conv_wav: dsp.Waveform, ref_wav: dsp.Waveform, standard_rmse: bool = False):
    """DTW-aligned MCD (dB) and F0-RMSE (Hz) between a converted and a reference waveform."""
    mc = dsp.compute_mcc(dsp.compute_mel(conv_wav))
    mr = dsp.compute_mcc(dsp.compute_mel(ref_wav))
    path_a, path_b = dsp.dtw_path(mc, mr)
    mcd = float(dsp.mcd_per_frame(mc[path_a], mr[path_b]).mean())
    fa, fb = dsp.extract_f0(conv_wav), dsp.extract_f0(ref_wav)
    sub_a = dsp.PitchTrack(fa.log_f0[path_a], fa.uv[path_a])
    sub_b = dsp.PitchTrack(fb.log_f0[path_b], fb.uv[path_b])
    try:
        rmse = dsp.f0_rmse(sub_a, sub_b, standard=standard_rmse)
    except (UndefinedMetric, NoPitch):
        rmse = float("nan")
    return mcd, rmse


def direction(src_sex, tgt_sex) -> str | None:
    if src_sex in ("M", "F") and tgt_sex in ("M", "F"):
        return f"{src_sex}-{tgt_sex}"
    return None


def metrics_table(rows) -> str:
    """Rows of (pair_id, direction or None, mcd, f0_rmse) -> TSV with per-direction and overall averages."""
    lines = ["pair\tdirection\tMCD_dB\tF0_RMSE_Hz"]
    for pair, dirn, m, f in rows:
        lines.append(f"{pair}\t{dirn or '-'}\t{m:.4f}\t{f:.4f}")
    groups: dict[str, list] = {}
    for _, dirn, m, f in rows:
        if dirn:
            groups.setdefault(dirn, []).append((m, f))
    for dirn in ("F-M", "F-F", "M-M", "M-F"):
        if dirn in groups:
            arr = np.array(groups[dirn])
            lines.append(f"Average\t{dirn}\t{arr[:, 0].mean():.4f}\t{np.nanmean(arr[:, 1]) if np.isfinite(arr[:, 1]).any() else float('nan'):.4f}")
    if rows:
        arr = np.array([(m, f) for _, _, m, f in rows], dtype=float)
        f_avg = np.nanmean(arr[:, 1]) if np.isfinite(arr[:, 1]).any() else float("nan")
        lines.append(f"Average\tall\t{arr[:, 0].mean():.4f}\t{f_avg:.4f}")
    return "\n".join(lines) + "\n"


def load_utterances(records):
    return load_records(records)


def fresh_path(p) -> Path:
    p = Path(p)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
