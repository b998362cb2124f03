"""Command-line entry point: ``molvc <command> [options]``.

Training commands take a flat ``key = value`` config file (``#`` starts a
comment); every key can also be given as a flag, and flags win. Exit codes:
0 success, 2 invalid input, 3 poisoned training or decoding, 4 a failed
acceptance check.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import warnings
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import dsp
from .attention import alignment_diagonality
from .errors import AcceptanceFailed, InvalidInput, MolVCError
from .features import analyze, load_records, map_ordered
from .formats import (ManifestRecord, alignment_to_pgm, read_alignment_csv, read_manifest, save_ftr, load_ftr,
                      write_alignment_csv, write_manifest, read_wav, write_wav)
from .recognizer import (FOLD_CHOICES, RecognizerConfig, export_bne, extract_bnf, folded_extract, load_bne,
                         load_recognizer, save_bne)
from .synthesis import SpeakerRef, SynthesisConfig, load_synthesis
from .trainer import TrainConfig, write_report
from . import pipeline

KEY_HELP = {
    # recognizer
    "n_mels": "mel channels",
    "vgg_channels": "channels of the two VGG prenet blocks",
    "n_lstm_layers": "BiLSTM layers in the encoder",
    "lstm_hidden": "BiLSTM units per direction",
    "bottleneck_dim": "bottleneck feature dimension",
    "n_phonemes": "phoneme inventory size",
    "ctc_weight": "CTC weight in the hybrid loss",
    "att_rnn_hidden": "attention RNN units",
    "att_dim": "attention projection size",
    "att_filters": "location filters of the attention",
    "att_kernel": "location kernel width",
    "embed_dim": "decoder token embedding size",
    # synthesis
    "bnf_dim": "input bottleneck feature dimension",
    "prenet_hidden": "BiGRU units per direction in the feature prenet",
    "n_prenet_layers": "BiGRU layers in the feature prenet",
    "pitch_hidden": "pitch encoder channels",
    "speaker_dim": "speaker vector size",
    "external_speaker": "condition on external speaker vectors instead of a table",
    "dec_prenet_dims": "decoder prenet layer sizes",
    "dec_rnn_hidden": "decoder RNN units",
    "mlp_hidden": "MoL parameter MLP units",
    "n_mixtures": "MoL components",
    "scale_floor": "lower bound on MoL component scales",
    "lsa_dim": "LSA projection size",
    "lsa_filters": "LSA location filters",
    "lsa_kernel": "LSA location kernel width",
    "postnet_channels": "postnet channels",
    "postnet_kernel": "postnet kernel width",
    "postnet_layers": "postnet convolution layers",
    "frames_per_step": "mel frames emitted per decoder step",
    "stop_pos_weight": "positive-class weight of the stop loss",
    "attention": "mol or lsa",
    "use_pitch": "feed log-F0 and UV to the encoder",
    "instance_norm": "instance norm in the pitch encoder",
    "prenet_dropout": "decoder prenet dropout during training",
    # training
    "lr": "Adam learning rate",
    "beta1": "Adam beta1",
    "beta2": "Adam beta2",
    "eps": "Adam epsilon",
    "batch_size": "utterances per batch",
    "max_epochs": "epoch limit",
    "patience": "epochs without improvement before stopping",
    "seed": "seed for initialization and batch order",
    "grad_clip": "global gradient-norm clip",
    "teacher_forcing": "teacher-forcing ratio (only 1.0)",
    "val_fraction": "fraction of utterances held out for validation",
}

RECOGNIZER_KEYS = (RecognizerConfig, TrainConfig)
SYNTHESIS_KEYS = (SynthesisConfig, TrainConfig)
# speakers come from the manifest, bnf_dim from the BNE checkpoint
EXCLUDED = {"RecognizerConfig": set(), "SynthesisConfig": {"speakers", "bnf_dim", "external_speaker"}}


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# flat key=value configs


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise InvalidInput(f"config key {key}: cannot parse {text!r}") from None
    return text


def config_defaults(classes) -> dict:
    out = {}
    skip = set().union(*(EXCLUDED.get(c.__name__, set()) for c in classes))
    if RecognizerConfig not in classes:
        skip.add("ctc_weight")
    for cls in classes:
        for f in dataclasses.fields(cls):
            if f.name not in skip:
                out.setdefault(f.name, f.default)
    return out


def read_config(path, defaults: dict) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInput(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in defaults:
            raise InvalidInput(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = parse_value(key, value, defaults[key])
    return values


def add_config_flags(parser: argparse.ArgumentParser, classes) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    group = parser.add_argument_group("config keys (flags override the config file)")
    for key, default in config_defaults(classes).items():
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=None, metavar="V",
                           help=f"{KEY_HELP.get(key, key)} (default: {format_value(default)})")


def resolve_config(args, classes) -> dict:
    defaults = config_defaults(classes)
    values = dict(defaults)
    if args.config:
        values.update(read_config(args.config, defaults))
    for key, default in defaults.items():
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            values[key] = raw if not isinstance(raw, str) else parse_value(key, raw, default)
    log("# effective config")
    for key in sorted(values):
        log(f"{key} = {format_value(values[key])}")
    return values


def build(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in values.items() if k in names})


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    records = corpus_mod.generate_corpus(args.out, args.speakers, args.utts,
                                         (args.min_phonemes, args.max_phonemes), args.seed)
    log(f"wrote {len(records)} utterances to {args.out}")
    return 0


def cmd_resample(args) -> int:
    wav = read_wav(args.wav)
    out = dsp.resample(wav, args.rate)
    write_wav(pipeline.fresh_path(args.out), out)
    log(f"{args.wav}: {wav.sample_rate} Hz -> {args.rate} Hz")
    return 0


def _wav_inputs(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.wav"))
        if not files:
            raise InvalidInput(f"no .wav files in {p}")
        return files
    if not p.exists():
        raise InvalidInput(f"missing input {p}")
    return [p]


def cmd_extract_bnf(args) -> int:
    bne = load_bne(args.bne)
    files = _wav_inputs(args.wav)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(path):
        wav = read_wav(path)
        wav.validate()
        mel = dsp.compute_mel(wav)
        feats = extract_bnf(bne, mel) if args.fold == 1 else folded_extract(bne, mel, args.fold)
        save_ftr(out / f"{path.stem}.bnf", feats.features)
        return feats.features.shape

    for path, shape in zip(files, map_ordered(run, files)):
        log(f"{path.stem}\t{shape[0]}x{shape[1]}")
    return 0


def _training_records(manifest) -> list[ManifestRecord]:
    records = read_manifest(manifest)
    if not records:
        raise InvalidInput(f"{manifest} lists no utterances")
    return records


def cmd_train_recognizer(args) -> int:
    values = resolve_config(args, RECOGNIZER_KEYS)
    rcfg, tcfg = build(RecognizerConfig, values), build(TrainConfig, values)
    utts = load_records(_training_records(args.manifest))
    model, report = pipeline.train_recognizer(utts, rcfg, tcfg, pipeline.fresh_path(args.out), log=log)
    write_report(args.out, report, values)
    log(f"training-set PER {pipeline.phoneme_error_rate(model, utts):.4f}")
    return 0


def cmd_export_bne(args) -> int:
    save_bne(pipeline.fresh_path(args.out), export_bne(load_recognizer(args.ckpt)))
    log(f"wrote {args.out}")
    return 0


def read_vectors(path) -> dict[str, np.ndarray]:
    """Speaker vectors as ``speaker_id v1 v2 ...`` lines."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            out[parts[0]] = np.array([float(v) for v in parts[1:]])
        except ValueError:
            raise InvalidInput(f"{path}:{lineno}: non-numeric speaker vector") from None
    return out


def cmd_train_synthesis(args) -> int:
    values = resolve_config(args, SYNTHESIS_KEYS)
    vectors = None
    if args.speaker_vectors:
        vectors = read_vectors(args.speaker_vectors)
        values["external_speaker"] = True
    bne = load_bne(args.bne)
    values["bnf_dim"] = bne.cfg.bottleneck_dim
    scfg, tcfg = build(SynthesisConfig, values), build(TrainConfig, values)
    utts = load_records(_training_records(args.manifest))
    model, report, items = pipeline.train_synthesis(utts, bne, scfg, tcfg, pipeline.fresh_path(args.out), log=log,
                                                    speaker_vectors=vectors)
    write_report(args.out, report, values)
    log(f"teacher-forced MSE {pipeline.synthesis_mse(model, items):.5f}")
    return 0


def _load_vector(path: Path) -> np.ndarray:
    """Rank-1 FTR1 speaker vector; normalized to unit length by ``SpeakerRef``."""
    vec = load_ftr(path)
    if vec.ndim != 1:
        raise InvalidInput(f"{path}: speaker vector must be rank 1, got shape {vec.shape}")
    return vec.astype(np.float64)


def target_arg(model, text: str, f0_mean=None, f0_std=None):
    """``--target-speaker``: a speaker id, a table index, or a vector file."""
    tgt_stats = None
    if f0_mean is not None or f0_std is not None:
        if f0_mean is None or f0_std is None:
            raise InvalidInput("--target-f0-mean and --target-f0-std go together")
        tgt_stats = dsp.SpeakerPitchStats(float(np.log(f0_mean)), float(f0_std), 0)
    if text in model.cfg.speakers:
        return text, tgt_stats
    if Path(text).is_file():
        if not model.cfg.external_speaker:
            raise InvalidInput("this synthesis model has a speaker table; pass a speaker id")
        if tgt_stats is None:
            raise InvalidInput("a speaker vector needs --target-f0-mean (Hz) and --target-f0-std (log units)")
        return SpeakerRef(external_vector=_load_vector(Path(text))), tgt_stats
    if text.isdigit():
        return int(text), tgt_stats
    raise InvalidInput(f"unknown target speaker {text!r}; known: {', '.join(model.cfg.speakers)}")


def dump_alignment(path, alpha) -> None:
    path = pipeline.fresh_path(path)
    if path.suffix.lower() == ".pgm":
        path.write_bytes(alignment_to_pgm(alpha))
    else:
        write_alignment_csv(path, alpha)


def cmd_convert(args) -> int:
    bne = load_bne(args.bne)
    model = load_synthesis(args.synth)
    target, tgt_stats = target_arg(model, args.target_speaker, args.target_f0_mean, args.target_f0_std)
    wav = read_wav(args.wav)
    iters = args.griffin_lim_iters if args.out_wav else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        conv = pipeline.convert(wav, bne, model, target, tgt_stats=tgt_stats, griffin_lim_iters=iters,
                                seed=args.seed, fold=args.fold)
    for w in caught:
        log(f"warning: {w.message}")
    save_ftr(pipeline.fresh_path(args.out_mel), conv.mel)
    if args.out_wav:
        write_wav(pipeline.fresh_path(args.out_wav), conv.waveform)
    if args.dump_alignment:
        dump_alignment(args.dump_alignment, conv.alignment)
    log(f"{conv.mel.shape[0]} frames, diagonality {alignment_diagonality(conv.alignment):.3f}"
        + (" (truncated)" if conv.truncated else ""))
    return 0


def read_pairs(path) -> dict[str, tuple[str, str]]:
    """``pair_id  source_speaker  target_speaker`` rows (header optional)."""
    out = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split("\t")
        if len(parts) >= 3 and parts[0] != "pair":
            out[parts[0]] = (parts[1], parts[2])
    return out


def read_sexes(manifest) -> dict[str, str]:
    """Speaker sex from the optional fifth manifest column."""
    return {r.speaker_id: r.sex for r in read_manifest(manifest) if r.sex}


def evaluate_dirs(converted, reference, pairs=None, sexes=None, standard_rmse=False) -> str:
    conv = {p.stem: p for p in Path(converted).glob("*.wav")}
    ref = {p.stem: p for p in Path(reference).glob("*.wav")}
    ids = sorted(conv.keys() & ref.keys())
    for missing in sorted(conv.keys() ^ ref.keys()):
        log(f"warning: {missing} has no partner; skipped")
    if not ids:
        raise InvalidInput("no paired utterance ids between the two directories")
    pairs = pairs or {}
    sexes = sexes or {}

    def run(uid):
        return pipeline.pair_metrics(read_wav(conv[uid]), read_wav(ref[uid]), standard_rmse)

    rows = []
    for uid, (m, f) in zip(ids, map_ordered(run, ids)):
        src, tgt = pairs.get(uid, (None, None))
        rows.append((uid, pipeline.direction(sexes.get(src), sexes.get(tgt)), m, f))
    return pipeline.metrics_table(rows)


def cmd_evaluate(args) -> int:
    pairs_path = Path(args.pairs) if args.pairs else Path(args.converted) / "pairs.tsv"
    pairs = read_pairs(pairs_path) if pairs_path.exists() else None
    sexes = read_sexes(args.manifest) if args.manifest else None
    table = evaluate_dirs(args.converted, args.reference, pairs, sexes, args.standard_rmse)
    if args.out:
        pipeline.fresh_path(args.out).write_text(table)
    else:
        sys.stdout.write(table)
    return 0


def cmd_align_viz(args) -> int:
    alpha = read_alignment_csv(args.csv)
    out = Path(args.out) if args.out else Path(args.csv).with_suffix(".pgm")
    pipeline.fresh_path(out).write_bytes(alignment_to_pgm(alpha))
    print(f"diagonality\t{alignment_diagonality(alpha):.6f}")
    return 0


def cmd_demo(args) -> int:
    from .demo import DemoOptions, run_demo

    opts = DemoOptions.quick(args.seed) if args.quick else DemoOptions(seed=args.seed)
    if args.max_epochs is not None:
        opts.recognizer_epochs = opts.synthesis_epochs = args.max_epochs
    checks = run_demo(Path(args.out), opts, log=log)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        print(c.line())
    if failed and opts.enforce:
        raise AcceptanceFailed(f"{len(failed)} demo check(s) failed: {', '.join(c.name for c in failed)}")
    return 0


# ---------------------------------------------------------------------------
# parser


class _HelpFormatter(argparse.HelpFormatter):
    """Shows defaults, except for unset optional flags."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.option_strings and action.default not in (None, False, argparse.SUPPRESS) \
                and "default:" not in text:
            text += " (default: %(default)s)"
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molvc", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = _HelpFormatter

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(fn=fn)
        return p

    def seed(p):
        p.add_argument("--seed", type=int, default=0, help="random seed")

    p = command("gen-corpus", cmd_gen_corpus, "write the synthetic multi-speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=6)
    p.add_argument("--utts", type=int, default=40, help="utterances per speaker")
    p.add_argument("--min-phonemes", type=int, default=5)
    p.add_argument("--max-phonemes", type=int, default=12)
    seed(p)

    p = command("resample", cmd_resample, "resample a WAV file to 16 kHz")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=int, default=dsp.SAMPLE_RATE)
    seed(p)

    p = command("extract-bnf", cmd_extract_bnf, "write bottleneck features (FTR1) for a file or directory")
    p.add_argument("--bne", required=True)
    p.add_argument("--wav", required=True, help="WAV file or directory of WAV files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fold", type=int, default=1, choices=FOLD_CHOICES, help="number of equal input segments")
    seed(p)

    p = command("train-recognizer", cmd_train_recognizer, "train the hybrid CTC-attention recognizer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    add_config_flags(p, RECOGNIZER_KEYS)

    p = command("export-bne", cmd_export_bne, "keep only the bottleneck encoder of a recognizer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    seed(p)

    p = command("train-synthesis", cmd_train_synthesis, "train the seq2seq synthesis model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bne", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-pitch", dest="cfg_use_pitch", action="store_const", const=False,
                   help="drop the log-F0/UV branch (sets use_pitch = false)")
    p.add_argument("--no-instance-norm", dest="cfg_instance_norm", action="store_const", const=False,
                   help="drop instance norm in the pitch encoder (sets instance_norm = false)")
    p.add_argument("--speaker-vectors", help="speaker_id v1 v2 ... lines; trains on external vectors")
    add_config_flags(p, SYNTHESIS_KEYS)

    p = command("convert", cmd_convert, "convert one utterance to a target speaker")
    p.add_argument("--wav", required=True)
    p.add_argument("--bne", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--target-speaker", required=True, help="speaker id, table index or FTR1 vector file")
    p.add_argument("--target-f0-mean", type=float, help="target mean F0 in Hz (vector targets)")
    p.add_argument("--target-f0-std", type=float, help="target log-F0 std (vector targets)")
    p.add_argument("--out-mel", required=True)
    p.add_argument("--out-wav")
    p.add_argument("--dump-alignment", help="alignment output, .csv or .pgm")
    p.add_argument("--fold", type=int, default=1, choices=FOLD_CHOICES)
    p.add_argument("--griffin-lim-iters", type=int, default=60)
    seed(p)

    p = command("evaluate", cmd_evaluate, "DTW-aligned MCD and F0-RMSE between paired directories")
    p.add_argument("--converted", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--pairs", help="pair_id, source and target speaker TSV (default: <converted>/pairs.tsv)")
    p.add_argument("--manifest", help="manifest with a sex column, for per-direction averages")
    p.add_argument("--standard-rmse", action="store_true", help="sqrt(mean) F0-RMSE instead of the literal form")
    p.add_argument("--out", help="TSV output (default: stdout)")
    seed(p)

    p = command("align-viz", cmd_align_viz, "render an alignment CSV as PGM and print its diagonality")
    p.add_argument("--csv", required=True)
    p.add_argument("--out")
    seed(p)

    p = command("demo", cmd_demo, "run the whole pipeline on a fresh corpus and check the results")
    p.add_argument("--out", required=True)
    p.add_argument("--quick", action="store_true", help="tiny corpus and few epochs; checks are reported only")
    p.add_argument("--max-epochs", type=int, help="override both training epoch limits")
    seed(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MolVCError as exc:
        log(f"error: {exc}")
        return exc.exit_code
    except FileNotFoundError as exc:
        log(f"error: {exc}")
        return InvalidInput.exit_code


if __name__ == "__main__":
    sys.exit(main())
