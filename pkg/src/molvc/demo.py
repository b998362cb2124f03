"""End-to-end run on a freshly generated corpus, with a pass/fail checklist."""
from __future__ import annotations

import shutil
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, pipeline
from .corpus import generate_corpus, held_out_split
from .features import load_records
from .formats import save_ftr, write_manifest, write_wav, read_wav
from .recognizer import RecognizerConfig, export_bne, save_bne
from .synthesis import SynthesisConfig
from .trainer import TrainConfig, split_validation


@dataclass
class DemoOptions:
    seed: int = 0
    n_speakers: int = 6
    n_utts: int = 40
    n_held_out: int = 2
    length_range: tuple = (5, 12)
    recognizer_epochs: int = 100
    synthesis_epochs: int = 100
    n_convert: int = 5          # held-out utterances per held-out speaker
    n_free_run: int = 20
    griffin_lim_iters: int = 60
    enforce: bool = True

    @classmethod
    def quick(cls, seed: int = 0) -> "DemoOptions":
        """Seconds-scale plumbing run; models are far from converged, so checks are not enforced."""
        return cls(seed=seed, n_speakers=3, n_utts=6, n_held_out=1, length_range=(3, 5), recognizer_epochs=2,
                   synthesis_epochs=2, n_convert=2, n_free_run=2, griffin_lim_iters=8, enforce=False)


@dataclass
class Check:
    name: str
    value: float
    threshold: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}\t{self.name}\t{self.value:.6g}\t{self.threshold}"


@dataclass
class ConversionSummary:
    rows: list = field(default_factory=list)      # (pair, source, target, mean, std, n_voiced)
    pooled: dict = field(default_factory=dict)    # target -> SpeakerPitchStats


def pitch_agreement(measured: dsp.SpeakerPitchStats, target: dsp.SpeakerPitchStats) -> tuple[float, float]:
    """(mean difference in log units, std ratio) of measured vs target statistics."""
    return measured.mean_log_f0 - target.mean_log_f0, measured.std_log_f0 / target.std_log_f0


def convert_held_out(out: Path, held, by_id, bne, model, opts: DemoOptions, log) -> ConversionSummary:
    conv_dir, ref_dir = out / "converted", out / "reference"
    conv_dir.mkdir(parents=True, exist_ok=True)
    ref_dir.mkdir(parents=True, exist_ok=True)
    summary = ConversionSummary()
    tracks: dict[str, list] = {}
    pair_lines = ["pair\tsource_speaker\ttarget_speaker"]
    speakers = list(dict.fromkeys(r.speaker_id for r in held))
    for spk in speakers:
        for rec in [r for r in held if r.speaker_id == spk][:opts.n_convert]:
            index = rec.utt_id.rsplit("_", 1)[1]
            for tgt in model.cfg.speakers:
                pair = f"{rec.utt_id}__{tgt}"
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    conv = pipeline.convert(read_wav(rec.wav_path), bne, model, tgt,
                                            griffin_lim_iters=opts.griffin_lim_iters, seed=opts.seed)
                write_wav(conv_dir / f"{pair}.wav", conv.waveform)
                save_ftr(conv_dir / f"{pair}.ftr", conv.mel)
                ref = by_id.get(f"{tgt}_{index}")
                if ref is not None:
                    shutil.copyfile(ref.wav_path, ref_dir / f"{pair}.wav")
                pair_lines.append(f"{pair}\t{spk}\t{tgt}")
                track = dsp.extract_f0(conv.waveform)
                tracks.setdefault(tgt, []).append(track)
                if track.voiced.any():
                    st = dsp.speaker_pitch_stats([track])
                    summary.rows.append((pair, spk, tgt, st.mean_log_f0, st.std_log_f0, st.n_voiced_frames))
                else:
                    summary.rows.append((pair, spk, tgt, float("nan"), float("nan"), 0))
            log(f"converted {rec.utt_id}")
    (conv_dir / "pairs.tsv").write_text("\n".join(pair_lines) + "\n")
    for tgt, ts in tracks.items():
        if any(t.voiced.any() for t in ts):
            summary.pooled[tgt] = dsp.speaker_pitch_stats(ts)
    return summary


def run_demo(out: Path, opts: DemoOptions, log=print) -> list[Check]:
    out.mkdir(parents=True, exist_ok=True)
    seed = opts.seed
    log("== gen-corpus")
    records = generate_corpus(out / "corpus", opts.n_speakers, opts.n_utts, opts.length_range, seed)
    train_recs, held = held_out_split(records, opts.n_held_out)
    write_manifest(out / "train.tsv", train_recs)
    write_manifest(out / "heldout.tsv", held)

    log("== extract")
    utts = load_records(train_recs)
    (out / "features").mkdir(exist_ok=True)
    for u in utts:
        save_ftr(out / "features" / f"{u.utt_id}.ftr", u.mel)

    log("== train-recognizer")
    rcfg = RecognizerConfig(seed=seed)
    tcfg = TrainConfig(max_epochs=opts.recognizer_epochs, seed=seed)
    recognizer, _ = pipeline.train_recognizer(utts, rcfg, tcfg, out / "recognizer.ckp", log=log)
    per = pipeline.phoneme_error_rate(recognizer, utts)

    log("== export-bne")
    bne = export_bne(recognizer)
    save_bne(out / "bne.ckp", bne)

    log("== train-synthesis")
    scfg = SynthesisConfig(seed=seed)
    tcfg = TrainConfig(max_epochs=opts.synthesis_epochs, seed=seed)
    model, _, items = pipeline.train_synthesis(utts, bne, scfg, tcfg, out / "synthesis.ckp", log=log)
    train_idx, _ = split_validation([i.key for i in items], tcfg.val_fraction, tcfg.seed)
    trained = [items[i] for i in train_idx]
    mse = pipeline.synthesis_mse(model, trained)
    runs = pipeline.free_run(model, trained[:opts.n_free_run])
    free_ok = float(np.mean([r.passed() for r in runs]))

    log("== convert")
    by_id = {r.utt_id: r for r in records}
    conv = convert_held_out(out, held, by_id, bne, model, opts, log)
    conv_lines = ["pair\tsource\ttarget\tmean_log_f0\tstd_log_f0\tn_voiced"]
    conv_lines += [f"{p}\t{s}\t{t}\t{m:.6f}\t{sd:.6f}\t{n}" for p, s, t, m, sd, n in conv.rows]
    mean_diffs, std_ratios = [], []
    for tgt in model.cfg.speakers:
        ref = model.speaker_stats[tgt]
        got = conv.pooled.get(tgt)
        if got is None:
            mean_diffs.append(np.inf)
            std_ratios.append(np.inf)
            continue
        d, r = pitch_agreement(got, ref)
        mean_diffs.append(d)
        std_ratios.append(r)
        conv_lines.append(f"# pooled\t-\t{tgt}\t{got.mean_log_f0:.6f}\t{got.std_log_f0:.6f}\t{got.n_voiced_frames}"
                          f"\ttarget {ref.mean_log_f0:.6f} {ref.std_log_f0:.6f}")
    (out / "conversions.tsv").write_text("\n".join(conv_lines) + "\n")

    log("== evaluate")
    from .cli import evaluate_dirs, read_pairs, read_sexes

    table = evaluate_dirs(out / "converted", out / "reference", read_pairs(out / "converted" / "pairs.tsv"),
                          read_sexes(out / "corpus" / "manifest.tsv"))
    (out / "metrics.tsv").write_text(table)
    avg = [ln.split("\t") for ln in table.splitlines() if ln.startswith("Average\tall")][0]

    checks = [
        Check("recognizer_train_per", per, "<= 0.05", per <= 0.05),
        Check("synthesis_teacher_forced_mse", mse, "<= 0.05", mse <= 0.05),
        Check("free_run_fraction", free_ok, ">= 0.9", free_ok >= 0.9),
        Check("conversion_f0_mean_abs_diff", float(np.max(np.abs(mean_diffs))), "<= 0.05",
              bool(np.max(np.abs(mean_diffs)) <= 0.05)),
        Check("conversion_f0_std_rel_diff", float(np.max(np.abs(np.array(std_ratios) - 1))), "<= 0.2",
              bool(np.max(np.abs(np.array(std_ratios) - 1)) <= 0.2)),
        Check("metrics_finite_mcd", float(avg[2]), "finite", bool(np.isfinite(float(avg[2])))),
    ]
    (out / "checklist.tsv").write_text("status\tcheck\tvalue\tthreshold\n" + "\n".join(c.line() for c in checks) + "\n")
    return checks
