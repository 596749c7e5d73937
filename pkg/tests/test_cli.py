import json

import numpy as np
import pytest

from ondevice_stt.cli import build_parser, main
from ondevice_stt.model import ModelConfig, init_model
from ondevice_stt.checkpoint import save_checkpoint

FLAGS = {
    "synth": ["--voices", "--utterances"],
    "featurize": ["wavs"],
    "pretrain": ["--manifest", "--speakers", "--exclude-speakers", "--epochs"],
    "personalize": ["--baseline", "--cache", "--ingest", "--speakers", "--lr", "--batch-size",
                    "--max-epochs", "--freeze"],
    "eval": ["--checkpoint", "--manifest", "--speakers"],
    "sweep": ["--baseline", "--manifest", "--speakers", "--grid"],
}
GLOBAL = ["--config", "--seed", "--out", "--log-level"]


@pytest.mark.parametrize("command", sorted(FLAGS))
def test_help_documents_every_flag(command, capsys):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag in FLAGS[command] + GLOBAL:
        assert flag in text, flag


def test_top_level_help(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for command in FLAGS:
        assert command in text


def test_global_flags_before_or_after_subcommand(tmp_path):
    parser = build_parser()
    a = parser.parse_args(["--seed", "4", "synth", "--voices", "1"])
    b = parser.parse_args(["synth", "--voices", "1", "--seed", "4"])
    assert a.seed == b.seed == 4


def test_bad_config_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"training": {"batch_size": 5, "mystery": 1}}))
    assert main(["--config", str(cfg), "--out", str(tmp_path), "synth", "--voices", "1"]) == 2
    assert "mystery" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "absent.json"), "synth"]) == 2


def test_bad_argument_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["personalize", "--baseline", "x", "--freeze", "Everything"])
    assert info.value.code == 2


def test_personalize_not_ready_exit_3(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "s"), "synth", "--voices", "1", "--utterances", "4"]) == 0
    ckpt = tmp_path / "b.epck"
    save_checkpoint(init_model(ModelConfig(), 0), ckpt)
    code = main(["--out", str(tmp_path / "p"), "personalize", "--baseline", str(ckpt),
                 "--cache", str(tmp_path / "cache"), "--ingest", str(tmp_path / "s" / "manifest.jsonl")])
    assert code == 3
    err = capsys.readouterr().err
    assert "4 utterances" in err and "N=60" in err


def test_featurize_and_stamp(tmp_path):
    assert main(["--out", str(tmp_path), "--seed", "3", "synth", "--voices", "1", "--utterances", "2"]) == 0
    wav = tmp_path / "audio" / "v01_0000.wav"
    assert main(["--out", str(tmp_path / "f"), "featurize", str(wav)]) == 0
    feats = np.load(tmp_path / "f" / "v01_0000.npy")
    assert feats.shape[1] == 80
    stamp = json.loads((tmp_path / "stamp_synth.json").read_text())
    assert stamp["seed"] == 3 and stamp["command"] == "synth"
    assert stamp["config"]["training"]["batch_size"] == 5


def test_runtime_failure_exit_4(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps({"audio": "nope.wav", "text": "hi"}) + "\n")
    ckpt = tmp_path / "b.epck"
    save_checkpoint(init_model(ModelConfig(), 0), ckpt)
    assert main(["--out", str(tmp_path), "eval", "--checkpoint", str(ckpt), "--manifest",
                 str(tmp_path / "m.jsonl")]) == 4


@pytest.mark.slow
def test_full_pipeline_smoke(tmp_path, capsys):
    """synth, pretrain 5 epochs, personalize one voice, eval before and after."""
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "synth": {"min_words": 5, "max_words": 8},
        "pretrain": {"epochs": 5, "augment_fraction": 0.0, "batch_size": 2},
        "training": {"learning_rate": 1e-3, "max_epochs": 10, "freeze": "FrozenConv"},
    }))
    common = ["--config", str(cfg), "--seed", "0"]

    def run(out, *argv):
        assert main(common + ["--out", str(tmp_path / out), *argv]) == 0

    run("data", "synth", "--voices", "7", "--utterances", "70")
    manifest = tmp_path / "data" / "manifest.jsonl"
    run("base", "pretrain", "--manifest", str(manifest), "--exclude-speakers", "v07")
    baseline = tmp_path / "base" / "baseline.epck"
    assert (tmp_path / "base" / "pretrain_loss.png").stat().st_size > 0
    run("pers", "personalize", "--baseline", str(baseline), "--cache", str(tmp_path / "cache"),
        "--ingest", str(manifest), "--speakers", "v07")
    pers = tmp_path / "pers"
    for name in ("personalized.epck", "history.png", "wer.png", "summary.json", "metrics.jsonl",
                 "validation.jsonl", "stamp_personalize.json"):
        assert (pers / name).exists(), name
    val = pers / "validation.jsonl"
    run("eval_before", "eval", "--checkpoint", str(baseline), "--manifest", str(val))
    run("eval_after", "eval", "--checkpoint", str(pers / "personalized.epck"), "--manifest", str(val))
    before = json.loads((tmp_path / "eval_before" / "report.json").read_text())["mean_wer"]
    after = json.loads((tmp_path / "eval_after" / "report.json").read_text())["mean_wer"]
    print(f"voice v07 validation WER {before:.2f}% -> {after:.2f}%")
    assert len(json.loads(val.read_text().splitlines()[0])) == 3
    assert after < before
    # the session emptied the cache
    assert (tmp_path / "cache" / "manifest.jsonl").read_text().strip() == ""
