"""Signal-level features and objective metrics.

Framing is shared by every per-frame feature: frame ``t`` is centred on
sample ``t * hop`` of the (reflect-padded) waveform, so a waveform of ``n``
samples always yields ``n // hop + 1`` frames for mels, F0 and MCCs alike.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct
from scipy.signal import resample_poly

from .errors import DegenerateStats, InvalidInput, NoPitch, UndefinedMetric

SAMPLE_RATE = 16000
MEL_FLOOR = 1e-10
MVN_EPS = 1e-5
F0_MIN = 50.0
F0_MAX = 500.0
F0_WINDOW_MS = 25.0
VOICING_THRESHOLD = 0.3
OCTAVE_CANDIDATE_RATIO = 0.5   # NCCF peaks this close to the best one may be re-picked
OCTAVE_MEDIAN_HALF = 15        # voiced frames on each side of the reference median
OCTAVE_REJECT = 0.3            # log-F0 distance from that median past which a frame is dropped
N_MCC = 24
MCD_CONST = 10.0 / np.log(10.0) * np.sqrt(2.0)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    def validate(self, rate: int = SAMPLE_RATE) -> None:
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidInput("waveform must be a non-empty 1-D signal")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInput("waveform contains non-finite samples")
        if self.sample_rate != rate:
            raise InvalidInput(
                f"expected {rate} Hz audio, got {self.sample_rate} Hz (run `molvc resample` first)")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class PitchTrack:
    """Per-frame natural-log F0 plus voicing flags (1 = voiced).

    Raw tracks from :func:`extract_f0` hold NaN where ``uv == 0``.
    """

    log_f0: np.ndarray
    uv: np.ndarray

    def __post_init__(self):
        lf = np.asarray(self.log_f0, dtype=np.float64)
        uv = np.asarray(self.uv).astype(np.uint8)
        if lf.shape != uv.shape or lf.ndim != 1:
            raise InvalidInput(f"log_f0 {lf.shape} and uv {uv.shape} must be equal-length 1-D")
        object.__setattr__(self, "log_f0", lf)
        object.__setattr__(self, "uv", uv)

    def __len__(self):
        return self.log_f0.size

    @property
    def voiced(self) -> np.ndarray:
        return self.uv.astype(bool)

    def hz(self) -> np.ndarray:
        return np.exp(self.log_f0)


@dataclass(frozen=True)
class SpeakerPitchStats:
    mean_log_f0: float
    std_log_f0: float
    n_voiced_frames: int


def frame_samples(ms: float, sample_rate: int = SAMPLE_RATE) -> int:
    return int(round(sample_rate * ms / 1000.0))


def num_frames(n_samples: int, shift_ms: float = 10.0, sample_rate: int = SAMPLE_RATE) -> int:
    return n_samples // frame_samples(shift_ms, sample_rate) + 1


# ---------------------------------------------------------------------------
# STFT / mel


def _pad_centered(x: np.ndarray, pad: int) -> np.ndarray:
    mode = "reflect" if x.size > pad else "constant"
    return np.pad(x, pad, mode=mode)


def _padded_window(win_length: int, n_fft: int) -> np.ndarray:
    win = np.hanning(win_length + 1)[:-1]  # periodic Hann
    lpad = (n_fft - win_length) // 2
    return np.pad(win, (lpad, n_fft - win_length - lpad))


def _n_fft_for(win_length: int) -> int:
    return 1 << int(np.ceil(np.log2(win_length)))


def stft(x: np.ndarray, win_length: int, hop: int, n_fft: int | None = None) -> np.ndarray:
    """Complex STFT, frames x bins, centred frames."""
    n_fft = n_fft or _n_fft_for(win_length)
    window = _padded_window(win_length, n_fft)
    padded = _pad_centered(np.asarray(x, dtype=np.float64), n_fft // 2)
    n = x.size // hop + 1
    idx = np.arange(n)[:, None] * hop + np.arange(n_fft)[None, :]
    return np.fft.rfft(padded[idx] * window, axis=1)


def istft(spec: np.ndarray, win_length: int, hop: int, length: int) -> np.ndarray:
    n_fft = 2 * (spec.shape[1] - 1)
    window = _padded_window(win_length, n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    total = n_fft + hop * (spec.shape[0] - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t, frame in enumerate(frames):
        out[t * hop:t * hop + n_fft] += frame
        norm[t * hop:t * hop + n_fft] += window ** 2
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-8)
    start = n_fft // 2
    out = out[start:start + length]
    return np.pad(out, (0, length - out.size))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters with unit peak on the HTK mel scale, n_mels x bins."""
    fmax = sample_rate / 2 if fmax is None else fmax
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    return np.maximum(0.0, np.minimum(up, down))


def compute_mel(wav: Waveform, n_mels: int = 80, window_ms: float = 50.0,
                shift_ms: float = 10.0) -> np.ndarray:
    """Log-mel energies, T x n_mels, floored at ``MEL_FLOOR`` before the log."""
    wav.validate()
    if n_mels not in (40, 80):
        raise InvalidInput(f"n_mels must be 40 or 80, got {n_mels}")
    win = frame_samples(window_ms)
    hop = frame_samples(shift_ms)
    spec = stft(wav.samples, win, hop)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(n_mels, 2 * (spec.shape[1] - 1))
    return np.log(np.maximum(power @ fb.T, MEL_FLOOR))


def utterance_mvn(mel: np.ndarray) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] < 2:
        raise InvalidInput(f"utterance MVN needs at least 2 frames, got shape {mel.shape}")
    return (mel - mel.mean(axis=0)) / (mel.std(axis=0) + MVN_EPS)


def griffin_lim(mel: np.ndarray, iters: int = 60, n_samples: int | None = None,
                window_ms: float = 50.0, shift_ms: float = 10.0, seed: int = 0) -> Waveform:
    """Waveform from a log-mel spectrogram by phase reconstruction.

    The mel energies are mapped back to linear magnitudes with the clipped
    pseudo-inverse of the filterbank. ``iters == 0`` returns the zero-phase
    inverse; otherwise phases start from a seeded random draw.
    """
    mel = np.asarray(mel, dtype=np.float64)
    win = frame_samples(window_ms)
    hop = frame_samples(shift_ms)
    n_fft = _n_fft_for(win)
    n_mels = mel.shape[1]
    fb = mel_filterbank(n_mels, n_fft)
    energy = np.exp(mel)
    energy[mel <= np.log(MEL_FLOOR) + 1e-6] = 0.0
    mag = np.sqrt(np.maximum(energy @ np.linalg.pinv(fb).T, 0.0))
    length = n_samples if n_samples is not None else (mel.shape[0] - 1) * hop
    if iters <= 0:
        phase = np.ones_like(mag, dtype=np.complex128)
    else:
        rng = np.random.default_rng(seed)
        phase = np.exp(2j * np.pi * rng.random(mag.shape))
    y = istft(mag * phase, win, hop, length)
    for _ in range(iters):
        rebuilt = stft(y, win, hop, n_fft)[:mag.shape[0]]
        phase = np.exp(1j * np.angle(rebuilt))
        y = istft(mag * phase, win, hop, length)
    peak = np.max(np.abs(y)) if y.size else 0.0
    if peak > 1.0:
        y = y / peak
    return Waveform(y, SAMPLE_RATE)


def resample(wav: Waveform, rate: int = SAMPLE_RATE) -> Waveform:
    if wav.sample_rate == rate:
        return wav
    g = np.gcd(int(wav.sample_rate), int(rate))
    y = resample_poly(wav.samples, rate // g, wav.sample_rate // g)
    return Waveform(y, rate)


# ---------------------------------------------------------------------------
# F0


def _nccf(frames: np.ndarray, min_lag: int, max_lag: int, win: int) -> np.ndarray:
    """Normalized cross-correlation per frame, lags min_lag..max_lag.

    ``frames`` holds ``win + max_lag`` samples per row: the analysis window is
    the first ``win`` samples, correlated against the same-length span at
    each lag.
    """
    n = frames.shape[1]
    nfft = 1 << int(np.ceil(np.log2(n + win)))
    head = frames[:, :win]
    spec_a = np.fft.rfft(head, nfft, axis=1)
    spec_b = np.fft.rfft(frames, nfft, axis=1)
    corr = np.fft.irfft(np.conj(spec_a) * spec_b, nfft, axis=1)[:, min_lag:max_lag + 1]
    csum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(min_lag, max_lag + 1)
    e0 = csum[:, win:win + 1]
    el = csum[:, lags + win] - csum[:, lags]
    denom = np.sqrt(np.maximum(e0 * el, 0.0))
    return np.divide(corr, denom, out=np.zeros_like(corr), where=denom > 1e-12)


def extract_f0(wav: Waveform, shift_ms: float = 10.0) -> PitchTrack:
    """Autocorrelation pitch tracker over 25 ms windows, 50-500 Hz.

    Returns a raw track: ``log_f0`` is NaN on unvoiced frames.
    """
    wav.validate()
    hop = frame_samples(shift_ms)
    win = frame_samples(F0_WINDOW_MS)
    min_lag = int(np.floor(SAMPLE_RATE / F0_MAX))
    max_lag = int(np.ceil(SAMPLE_RATE / F0_MIN))
    x = wav.samples
    n = x.size // hop + 1
    left = win // 2
    padded = np.pad(x, (left, win + max_lag))
    idx = np.arange(n)[:, None] * hop + np.arange(win + max_lag)[None, :]
    frames = padded[idx]
    energy = np.sum(frames[:, :win] ** 2, axis=1)
    r = _nccf(frames, min_lag, max_lag, win)
    lags = np.full(n, np.nan)
    cand_lists = [None] * n
    for t in range(n):
        row = r[t]
        peak = row.max()
        if peak < VOICING_THRESHOLD or energy[t] < 1e-10:
            continue
        interior = (row[1:-1] >= row[:-2]) & (row[1:-1] >= row[2:])
        cands = np.flatnonzero(interior) + 1
        cands = cands[row[cands] >= OCTAVE_CANDIDATE_RATIO * peak]
        if not cands.size:
            cands = np.array([int(np.argmax(row))])
        cand_lists[t] = cands
        # first local maximum close to the global one: avoids picking 2*T0
        strong = cands[row[cands] >= 0.9 * peak]
        lags[t] = strong[0] if strong.size else cands[np.argmax(row[cands])]
    # second pass: snap each frame to the candidate nearest a local median,
    # which removes isolated octave and third-harmonic jumps; frames with no
    # candidate near the median are marked unvoiced
    voiced_idx = np.flatnonzero(~np.isnan(lags))
    log_f0 = np.full(n, np.nan)
    uv = np.zeros(n, dtype=np.uint8)
    if voiced_idx.size:
        first = -np.log(lags[voiced_idx] + min_lag)
        for pos, t in enumerate(voiced_idx):
            lo, hi = max(0, pos - OCTAVE_MEDIAN_HALF), pos + OCTAVE_MEDIAN_HALF + 1
            ref = np.median(first[lo:hi])
            cands = cand_lists[t]
            k = int(cands[np.argmin(np.abs(-np.log(cands + min_lag) - ref))])
            row = r[t]
            shift = 0.0
            if 0 < k < row.size - 1:
                a, b, c = row[k - 1], row[k], row[k + 1]
                d = a - 2 * b + c
                if d < 0:
                    shift = 0.5 * (a - c) / d
            f0 = SAMPLE_RATE / (k + min_lag + shift)
            # no candidate near the median: an octave error, not a pitch
            if F0_MIN <= f0 <= F0_MAX and abs(-np.log(k + min_lag + shift) - ref) <= OCTAVE_REJECT:
                log_f0[t] = np.log(f0)
                uv[t] = 1
    return PitchTrack(log_f0, uv)


def interpolate_f0(raw: PitchTrack) -> PitchTrack:
    """Fill unvoiced frames by linear interpolation in Hz, then take the log."""
    voiced = raw.voiced
    if not voiced.any():
        raise NoPitch("cannot interpolate a pitch track with no voiced frames")
    idx = np.flatnonzero(voiced)
    hz = np.exp(raw.log_f0[idx])
    filled = np.interp(np.arange(len(raw)), idx, hz)  # holds edge values
    out = np.log(filled)
    out[idx] = raw.log_f0[idx]
    return PitchTrack(out, raw.uv.copy())


def speaker_pitch_stats(tracks) -> SpeakerPitchStats:
    values = [t.log_f0[t.voiced] for t in tracks]
    allv = np.concatenate(values) if values else np.zeros(0)
    if allv.size == 0:
        raise NoPitch("no voiced frames to compute pitch statistics from")
    std = float(allv.std())
    if not std > 0:
        raise DegenerateStats("log-F0 standard deviation is zero; need at least two distinct voiced values")
    return SpeakerPitchStats(float(allv.mean()), std, int(allv.size))


# ---------------------------------------------------------------------------
# mel-cepstra and metrics


def compute_mcc(mel_or_wav, n_coeffs: int = N_MCC) -> np.ndarray:
    """Mel-cepstral coefficients 1..n_coeffs from the 80-band log mel.

    Cosine expansion of the log *amplitude* mel spectrum,
    ``log|S| = c0 + 2 * sum_k c_k cos(...)``, i.e. DCT-II / (2 * n_mels).
    """
    if isinstance(mel_or_wav, Waveform):
        mel = compute_mel(mel_or_wav, 80)
    else:
        mel = np.asarray(mel_or_wav, dtype=np.float64)
        if mel.ndim != 2:
            raise InvalidInput(f"expected a T x n_mels log-mel matrix, got shape {mel.shape}")
    cep = dct(0.5 * mel, type=2, axis=1) / (2.0 * mel.shape[1])
    return cep[:, 1:n_coeffs + 1]


def mcd_per_frame(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInput(f"MCC shapes differ: {a.shape} vs {b.shape}")
    return MCD_CONST * np.sqrt(np.sum((a - b) ** 2, axis=1))


def mcd(a: np.ndarray, b: np.ndarray) -> float:
    """Mel-cepstral distortion in dB, averaged over frames."""
    return float(np.mean(mcd_per_frame(a, b)))


def f0_rmse(a: PitchTrack, b: PitchTrack, standard: bool = False) -> float:
    """F0 error in Hz over frames voiced in both tracks.

    The default is ``sqrt(sum(d**2)) / N``; ``standard=True`` gives the usual
    ``sqrt(mean(d**2))``.
    """
    if len(a) != len(b):
        raise InvalidInput(f"pitch tracks differ in length: {len(a)} vs {len(b)}")
    both = a.voiced & b.voiced
    n = int(both.sum())
    if n == 0:
        raise UndefinedMetric("no frames are voiced in both tracks")
    d = np.exp(a.log_f0[both]) - np.exp(b.log_f0[both])
    if standard:
        return float(np.sqrt(np.mean(d ** 2)))
    return float(np.sqrt(np.sum(d ** 2)) / n)


def dtw_path(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost monotone alignment under Euclidean frame distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = cost[i - 1]
        prev = acc[i - 1]
        # diagonal / vertical moves vectorized; horizontal resolved by a scan
        best = np.minimum(prev[:-1], prev[1:]) + row
        cur = acc[i]
        for j in range(1, m + 1):
            v = best[j - 1]
            h = cur[j - 1] + row[j - 1]
            cur[j] = v if v <= h else h
    i, j = n, m
    pa, pb = [i - 1], [j - 1]
    while i > 1 or j > 1:
        moves = (acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
        k = int(np.argmin(moves))
        if k == 0:
            i, j = i - 1, j - 1
        elif k == 1:
            i -= 1
        else:
            j -= 1
        pa.append(i - 1)
        pb.append(j - 1)
    return np.array(pa[::-1]), np.array(pb[::-1])


def dtw_mcd(a: np.ndarray, b: np.ndarray) -> float:
    ia, ib = dtw_path(a, b)
    return mcd(a[ia], b[ib])
