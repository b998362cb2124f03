"""Per-utterance feature loading shared by training, extraction and conversion."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import dsp
from .errors import NoPitch
from .formats import ManifestRecord, read_wav


def num_workers() -> int:
    """Worker cap from ``MOLVC_NUM_WORKERS`` (default: available cores)."""
    env = os.environ.get("MOLVC_NUM_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def map_ordered(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]``, possibly threaded; result order always matches input."""
    items = list(items)
    workers = num_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def pitch_track(wav: dsp.Waveform) -> tuple[dsp.PitchTrack, dsp.PitchTrack]:
    """Raw and interpolated pitch. Fully unvoiced input is held at ``F0_MIN``."""
    raw = dsp.extract_f0(wav)
    try:
        interp = dsp.interpolate_f0(raw)
    except NoPitch:
        interp = dsp.PitchTrack(np.full(len(raw), np.log(dsp.F0_MIN)), raw.uv.copy())
    return raw, interp


def pitch_input(track: dsp.PitchTrack) -> np.ndarray:
    """T x 2 pitch-encoder input: interpolated log-F0 and the UV flag."""
    return np.stack([track.log_f0, track.uv.astype(np.float64)], axis=1)


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    phonemes: list
    mel: np.ndarray          # T x 80 log-mel
    raw_pitch: dsp.PitchTrack
    pitch: dsp.PitchTrack    # interpolated

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


def analyze(wav: dsp.Waveform, utt_id: str = "", speaker_id: str = "", phonemes=()) -> Utterance:
    mel = dsp.compute_mel(wav)
    raw, interp = pitch_track(wav)
    return Utterance(utt_id, speaker_id, list(phonemes), mel, raw, interp)


def load_record(rec: ManifestRecord) -> Utterance:
    try:
        wav = read_wav(rec.wav_path)
    except FileNotFoundError:
        raise FileNotFoundError(f"utterance {rec.utt_id}: missing file {rec.wav_path}") from None
    return analyze(wav, rec.utt_id, rec.speaker_id, rec.phonemes)


def load_records(records) -> list[Utterance]:
    return map_ordered(load_record, records)
