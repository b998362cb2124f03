import shutil

import numpy as np
import pytest

from molvc import errors
from molvc.cli import RECOGNIZER_KEYS, SYNTHESIS_KEYS, build_parser, config_defaults, format_value, main
from molvc.formats import load_ftr, read_alignment_csv, read_manifest, write_alignment_csv, write_manifest

COMMANDS = ["gen-corpus", "resample", "extract-bnf", "train-recognizer", "export-bne", "train-synthesis",
            "convert", "evaluate", "align-viz", "demo"]

TINY_REC = ["--vgg-channels", "4,4", "--n-lstm-layers", "1", "--lstm-hidden", "4", "--bottleneck-dim", "4",
            "--att-rnn-hidden", "8", "--att-dim", "4", "--embed-dim", "4", "--max-epochs", "1"]
TINY_SYN = ["--prenet-hidden", "4", "--pitch-hidden", "4", "--speaker-dim", "3", "--dec-prenet-dims", "8,8",
            "--att-rnn-hidden", "8", "--dec-rnn-hidden", "8", "--mlp-hidden", "8", "--postnet-channels", "8",
            "--max-epochs", "1"]


def help_text(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    return capsys.readouterr().out.replace("\n", " ")


@pytest.mark.parametrize("command,classes", [("train-recognizer", RECOGNIZER_KEYS),
                                             ("train-synthesis", SYNTHESIS_KEYS)])
def test_help_lists_every_key_with_default(command, classes, capsys):
    text = " ".join(help_text(command, capsys).split())
    for key, default in config_defaults(classes).items():
        assert f"--{key.replace('_', '-')}" in text
        assert f"(default: {format_value(default)})" in text


def test_every_command_takes_seed(capsys):
    for command in COMMANDS:
        assert "--seed" in help_text(command, capsys)


def test_exit_codes_are_distinct():
    assert errors.InvalidInput.exit_code == 2
    assert errors.PoisonedTraining.exit_code == 3
    assert errors.AcceptanceFailed.exit_code == 4


def test_unknown_config_key_is_rejected(tmp_path, corpus_dir, capsys):
    cfg = tmp_path / "r.cfg"
    cfg.write_text("# comment\nlr = 0.01\nlearning_rate = 3\n")
    code = main(["train-recognizer", "--manifest", str(corpus_dir / "manifest.tsv"), "--out",
                 str(tmp_path / "r.ckp"), "--config", str(cfg)])
    assert code == 2
    assert "r.cfg:3" in capsys.readouterr().err


def test_missing_input_exits_2(tmp_path):
    assert main(["align-viz", "--csv", str(tmp_path / "nope.csv")]) == 2


def test_align_viz(tmp_path, capsys):
    write_alignment_csv(tmp_path / "a.csv", np.eye(12))
    assert main(["align-viz", "--csv", str(tmp_path / "a.csv")]) == 0
    assert "diagonality\t1.000000" in capsys.readouterr().out
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5")


def test_evaluate_against_itself(tmp_path, corpus_dir):
    conv = tmp_path / "conv"
    conv.mkdir()
    lines = ["pair\tsource_speaker\ttarget_speaker"]
    for rec in read_manifest(corpus_dir / "manifest.tsv")[:4]:
        shutil.copyfile(rec.wav_path, conv / f"{rec.utt_id}.wav")
        lines.append(f"{rec.utt_id}\tspk1\t{rec.speaker_id}")
    (conv / "pairs.tsv").write_text("\n".join(lines) + "\n")
    args = ["evaluate", "--converted", str(conv), "--reference", str(conv), "--manifest",
            str(corpus_dir / "manifest.tsv")]
    assert main(args + ["--out", str(tmp_path / "m1.tsv")]) == 0
    assert main(args + ["--out", str(tmp_path / "m2.tsv")]) == 0
    text = (tmp_path / "m1.tsv").read_text()
    assert text == (tmp_path / "m2.tsv").read_text()
    avg = [ln.split("\t") for ln in text.splitlines() if ln.startswith("Average\tall")][0]
    assert float(avg[2]) == 0.0 and float(avg[3]) == 0.0


def test_train_convert_round_trip(tmp_path, corpus_dir, capsys):
    recs = read_manifest(corpus_dir / "manifest.tsv")
    train = [r for r in recs if r.speaker_id != "spk3"]
    write_manifest(tmp_path / "train.tsv", train)
    rec_ckp, bne, syn = tmp_path / "rec.ckp", tmp_path / "bne.ckp", tmp_path / "syn.ckp"
    assert main(["train-recognizer", "--manifest", str(tmp_path / "train.tsv"), "--out", str(rec_ckp)]
                + TINY_REC) == 0
    assert "# effective config" in capsys.readouterr().err
    assert (tmp_path / "rec.ckp.report.tsv").exists()
    assert main(["export-bne", "--ckpt", str(rec_ckp), "--out", str(bne)]) == 0
    assert main(["extract-bnf", "--bne", str(bne), "--wav", str(corpus_dir / "wavs"), "--out",
                 str(tmp_path / "bnf"), "--fold", "2"]) == 0
    assert len(list((tmp_path / "bnf").glob("*.bnf"))) == len(recs)
    assert main(["train-synthesis", "--manifest", str(tmp_path / "train.tsv"), "--bne", str(bne), "--out",
                 str(syn), "--attention", "lsa"] + TINY_SYN) == 0
    src = [r for r in recs if r.speaker_id == "spk3"][0].wav_path
    out = ["convert", "--wav", src, "--bne", str(bne), "--synth", str(syn), "--target-speaker", "spk1",
           "--griffin-lim-iters", "2", "--dump-alignment", str(tmp_path / "al.csv")]
    assert main(out + ["--out-mel", str(tmp_path / "a.ftr"), "--out-wav", str(tmp_path / "a.wav")]) == 0
    assert main(out + ["--out-mel", str(tmp_path / "b.ftr")]) == 0
    assert (tmp_path / "a.ftr").read_bytes() == (tmp_path / "b.ftr").read_bytes()
    assert load_ftr(tmp_path / "a.ftr").shape[1] == 80
    assert read_alignment_csv(tmp_path / "al.csv").ndim == 2
    assert main(out + ["--out-mel", str(tmp_path / "c.ftr"), "--target-speaker", "nobody"]) == 2


def test_parser_builds():
    assert set(COMMANDS) <= set(build_parser()._subparsers._group_actions[0].choices)
