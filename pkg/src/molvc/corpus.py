"""Deterministic pseudo-speech corpus with known phonemes, pitch and speakers.

Voiced pseudo-phonemes are harmonic stacks shaped by two formant-like
resonances; unvoiced ones are band-passed noise. Speakers differ in base F0
and in a formant scale applied to every resonance/band.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .dsp import SAMPLE_RATE, Waveform, frame_samples, num_frames
from .errors import InvalidInput
from .formats import ManifestRecord, write_manifest, write_wav

N_PHONEMES = 10
SEGMENT_MS = (80, 200)
CROSSFADE_MS = 10
F0_JITTER = 0.05
DITHER = 3e-4
MALE_F0_CUTOFF = 165.0


@dataclass(frozen=True)
class ToyPhonemeSpec:
    phoneme_id: int
    bands: tuple[float, float]  # formant centres (voiced) or noise band edges (unvoiced)
    voiced: bool


@dataclass(frozen=True)
class ToySpeakerSpec:
    speaker_id: str
    base_f0: float
    f0_jitter: float
    formant_scale: float

    @property
    def sex(self) -> str:
        return "M" if self.base_f0 < MALE_F0_CUTOFF else "F"


@dataclass
class ToyUtterance:
    utt_id: str
    speaker: ToySpeakerSpec
    wav: Waveform
    phonemes: list[int]
    frame_phonemes: np.ndarray  # one phoneme id per 10 ms frame
    frame_f0: np.ndarray  # Hz, 0 on unvoiced frames


# 2 x 4 grid of (F1, F2); neighbours differ by >= 300 Hz in at least one formant.
PHONEMES = [
    ToyPhonemeSpec(i, (f1, f2), True)
    for i, (f1, f2) in enumerate((f1, f2) for f1 in (300.0, 700.0) for f2 in (1000.0, 1400.0, 1800.0, 2200.0))
] + [
    ToyPhonemeSpec(8, (2000.0, 4000.0), False),
    ToyPhonemeSpec(9, (4500.0, 7000.0), False),
]


def make_speakers(n_speakers: int, seed: int = 0) -> list[ToySpeakerSpec]:
    rng = np.random.default_rng([seed, 7919])
    speakers = []
    for s in range(n_speakers):
        if s % 2 == 0:
            f0, scale = rng.uniform(95.0, 135.0), rng.uniform(0.85, 0.97)
        else:
            f0, scale = rng.uniform(190.0, 250.0), rng.uniform(1.05, 1.2)
        speakers.append(ToySpeakerSpec(f"spk{s + 1}", round(float(f0), 2), F0_JITTER, round(float(scale), 4)))
    return speakers


def sentence(index: int, seed: int, length_range=(5, 12)) -> list[int]:
    """Phoneme sequence for sentence ``index``; shared by all speakers."""
    rng = np.random.default_rng([seed, 104729, index])
    n = int(rng.integers(length_range[0], length_range[1] + 1))
    seq = [int(rng.integers(N_PHONEMES))]
    while len(seq) < n:
        p = int(rng.integers(N_PHONEMES - 1))
        seq.append(p if p < seq[-1] else p + 1)  # no immediate repeats
    return seq


def _envelope(freqs: np.ndarray, formants, scale: float) -> np.ndarray:
    f1, f2 = formants[0] * scale, formants[1] * scale
    b1, b2 = 90.0 * scale, 130.0 * scale
    res1 = 1.0 / (1.0 + ((freqs - f1) / b1) ** 2)
    res2 = 1.0 / (1.0 + ((freqs - f2) / b2) ** 2)
    tilt = 1.0 / (1.0 + freqs / 500.0)
    return tilt * (0.15 + res1 + 0.7 * res2)


def _render_segment(ph: ToyPhonemeSpec, speaker: ToySpeakerSpec, n: int, f0: float,
                    rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    if ph.voiced:
        k = np.arange(1, int(7500.0 / f0) + 1)
        amps = _envelope(k * f0, ph.bands, speaker.formant_scale)
        phases = rng.uniform(0, 2 * np.pi, k.size)
        seg = (amps[:, None] * np.sin(2 * np.pi * f0 * k[:, None] * t[None, :] + phases[:, None])).sum(0)
        gain = 0.1
    else:
        lo = min(ph.bands[0] * speaker.formant_scale, 7000.0)
        hi = min(ph.bands[1] * speaker.formant_scale, 7800.0)
        sos = butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
        seg = sosfilt(sos, rng.standard_normal(n + 256))[256:]
        gain = 0.04
    rms = np.sqrt(np.mean(seg ** 2)) + 1e-12
    return seg * (gain / rms)


def synthesize(utt_id: str, speaker: ToySpeakerSpec, phonemes: list[int],
               rng: np.random.Generator) -> ToyUtterance:
    fade = frame_samples(CROSSFADE_MS)
    half = fade // 2
    durs = [frame_samples(10 * int(rng.integers(SEGMENT_MS[0] // 10, SEGMENT_MS[1] // 10 + 1)))
            for _ in phonemes]
    bounds = np.concatenate([[0], np.cumsum(durs)])
    total = int(bounds[-1])
    out = np.zeros(total)
    seg_f0 = []
    for i, p in enumerate(phonemes):
        ph = PHONEMES[p]
        jitter = float(np.clip(rng.standard_normal() * speaker.f0_jitter, -3 * speaker.f0_jitter,
                               3 * speaker.f0_jitter))
        f0 = speaker.base_f0 * (1.0 + jitter) if ph.voiced else 0.0
        seg_f0.append(f0)
        start = int(bounds[i]) - half
        stop = int(bounds[i + 1]) + half
        seg = _render_segment(ph, speaker, stop - start, max(f0, 1.0), rng)
        ramp = np.linspace(0.0, 1.0, fade)
        seg[:fade] *= ramp
        seg[-fade:] *= ramp[::-1]
        lo, hi = max(start, 0), min(stop, total)
        out[lo:hi] += seg[lo - start:hi - start]
    out += DITHER * rng.standard_normal(total)
    n_frames = num_frames(total)
    centres = np.arange(n_frames) * frame_samples(10)
    seg_idx = np.clip(np.searchsorted(bounds, centres, side="right") - 1, 0, len(phonemes) - 1)
    frame_ph = np.asarray(phonemes)[seg_idx]
    frame_f0 = np.asarray(seg_f0)[seg_idx]
    return ToyUtterance(utt_id, speaker, Waveform(out, SAMPLE_RATE), list(phonemes), frame_ph, frame_f0)


def utterance(speakers: list[ToySpeakerSpec], s: int, u: int, seed: int,
              length_range=(5, 12)) -> ToyUtterance:
    rng = np.random.default_rng([seed, s, u])
    return synthesize(f"{speakers[s].speaker_id}_{u + 1:03d}", speakers[s],
                      sentence(u, seed, length_range), rng)


def write_truth(path, utt: ToyUtterance) -> None:
    lines = ["frame_index\tphoneme_id\tf0_hz"]
    lines += [f"{i}\t{p}\t{f:.2f}" for i, (p, f) in enumerate(zip(utt.frame_phonemes, utt.frame_f0))]
    Path(path).write_text("\n".join(lines) + "\n")


def read_truth(path) -> tuple[np.ndarray, np.ndarray]:
    rows = np.loadtxt(path, delimiter="\t", skiprows=1, ndmin=2)
    return rows[:, 1].astype(int), rows[:, 2]


def generate_corpus(out_dir, n_speakers: int = 6, n_utts_per_speaker: int = 40,
                    utt_len_phonemes=(5, 12), seed: int = 0) -> list[ManifestRecord]:
    """Write WAVs, truth sidecars, ``manifest.tsv`` and ``speakers.tsv`` under ``out_dir``."""
    if n_speakers < 2:
        raise InvalidInput("need at least two speakers")
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    speakers = make_speakers(n_speakers, seed)
    records = []
    for s, spk in enumerate(speakers):
        for u in range(n_utts_per_speaker):
            utt = utterance(speakers, s, u, seed, utt_len_phonemes)
            wav_path = out / "wavs" / f"{utt.utt_id}.wav"
            write_wav(wav_path, utt.wav)
            write_truth(out / "wavs" / f"{utt.utt_id}.truth.tsv", utt)
            records.append(ManifestRecord(utt.utt_id, str(wav_path), spk.speaker_id, utt.phonemes, spk.sex))
    write_manifest(out / "manifest.tsv", records, relative_to=out)
    lines = ["speaker_id\tbase_f0\tformant_scale\tsex"]
    lines += [f"{s.speaker_id}\t{s.base_f0}\t{s.formant_scale}\t{s.sex}" for s in speakers]
    (out / "speakers.tsv").write_text("\n".join(lines) + "\n")
    return records


def held_out_split(records: list[ManifestRecord], n_held_out: int, seed: int | None = None):
    """Split by speaker. ``seed=None`` holds out the last speakers in manifest order."""
    speakers = list(dict.fromkeys(r.speaker_id for r in records))
    if not 0 < n_held_out < len(speakers):
        raise InvalidInput(f"cannot hold out {n_held_out} of {len(speakers)} speakers")
    if seed is None:
        held = set(speakers[-n_held_out:])
    else:
        rng = np.random.default_rng(seed)
        held = set(rng.choice(speakers, size=n_held_out, replace=False).tolist())
    train = [r for r in records if r.speaker_id not in held]
    unseen = [r for r in records if r.speaker_id in held]
    return train, unseen
