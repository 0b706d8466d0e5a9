import json

import numpy as np
import pytest

from stemmark.cli import run_command, subseed
from stemmark.synth import SyntheticStemSet, synth_item
from stemmark.wavio import read_wav, write_wav

KEY = "ab" * 32
BITS = "10110011100011110000111110000011"


@pytest.fixture
def carrier(tmp_path, music):
    pad = np.concatenate([np.zeros(1000), music.samples, np.zeros(500)])
    path = tmp_path / "in.wav"
    write_wav(music.with_samples(pad), path)
    return path


def test_embed_then_decode(tmp_path, carrier, capsys):
    out = tmp_path / "marked.wav"
    assert run_command(["embed", "--in", str(carrier), "--key", KEY, "--bits", BITS, "--out", str(out),
                        "--start", "1000"]) == 0
    assert len(read_wav(out)) == len(read_wav(carrier))
    capsys.readouterr()
    assert run_command(["decode", "--in", str(out), "--key", KEY, "--start", "1000", "--bits", BITS]) == 0
    text = capsys.readouterr().out
    assert f"payload: {BITS}" in text and "ber: 0.0000" in text


def test_key_and_payload_files(tmp_path, carrier, capsys):
    (tmp_path / "key.txt").write_text(KEY + "\n")
    (tmp_path / "bits.txt").write_text(BITS + "\n")
    out = tmp_path / "m.wav"
    assert run_command(["embed", "--in", str(carrier), "--key", str(tmp_path / "key.txt"),
                        "--bits", str(tmp_path / "bits.txt"), "--out", str(out), "--start", "1000"]) == 0
    capsys.readouterr()
    run_command(["decode", "--in", str(out), "--key", KEY, "--start", "1000"])
    assert BITS in capsys.readouterr().out


def test_attack_is_deterministic_per_seed(tmp_path, carrier):
    outs = []
    for i, seed in enumerate((3, 3, 4)):
        path = tmp_path / f"a{i}.wav"
        assert run_command(["attack", "--in", str(carrier), "--out", str(path), "--kind", "N",
                            "--seed", str(seed)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1] and outs[0] != outs[2]


def test_seed_from_environment(tmp_path, carrier, capsys, monkeypatch):
    monkeypatch.setenv("STEMMARK_SEED", "11")
    run_command(["attack", "--in", str(carrier), "--out", str(tmp_path / "x.wav"), "--kind", "N", "--dry-run"])
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["seed"] == 11 and resolved["seed_source"] == "STEMMARK_SEED"
    assert resolved["attack"][0]["seed"] == subseed(11, "attack")
    monkeypatch.setenv("STEMMARK_SEED", "eleven")
    assert run_command(["attack", "--in", str(carrier), "--out", str(tmp_path / "x.wav"), "--kind", "N",
                        "--dry-run"]) == 1


def test_dry_run_writes_nothing(tmp_path, carrier, capsys):
    out = tmp_path / "never.wav"
    assert run_command(["embed", "--in", str(carrier), "--key", KEY, "--bits", BITS, "--out", str(out),
                        "--strength", "0.3", "--dry-run"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["codec_config"]["gamma"] == 0.3 and not out.exists()


def test_separate_with_oracle(tmp_path, capsys):
    it = synth_item(SyntheticStemSet(carrier_seconds=2.5), 0)
    write_wav(it.stem_a, tmp_path / "a.wav")
    write_wav(it.stem_b, tmp_path / "b.wav")
    write_wav(it.stem_a.with_samples(it.stem_a.samples + it.stem_b.samples), tmp_path / "mix.wav")
    prefix = str(tmp_path / "sep")
    assert run_command(["separate", "--in", str(tmp_path / "mix.wav"), "--separator", "oracle",
                        "--ref", str(tmp_path / "a.wav"), "--ref", str(tmp_path / "b.wav"),
                        "--out-prefix", prefix]) == 0
    assert len(read_wav(prefix + ".stem1.wav")) == len(it.stem_a)
    assert run_command(["separate", "--in", str(tmp_path / "mix.wav"), "--separator", "oracle",
                        "--out-prefix", prefix]) == 1


def test_evaluate_prints_table_and_writes_reports(tmp_path, capsys):
    out = tmp_path / "rep"
    assert run_command(["evaluate", "--items", "1", "--categories", "Origin", "Filter", "--out", str(out),
                        "--seed", "2"]) == 0
    text = capsys.readouterr().out
    assert "Stem" in text and "stem1" in text and "Filter" in text
    report = json.loads((out / "report.json").read_text())
    assert report["schema_version"] == 1
    assert run_command(["report", "--in", str(out / "report.json"), "--format", "csv",
                        "--out", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text().startswith("row,")


def test_config_file_and_errors(tmp_path, carrier, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "train": {"steps": 3}}))
    assert run_command(["train-toy", "--config", str(cfg), "--dry-run"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["train"]["steps"] == 3 and resolved["train"]["attack_start_step"] == 3
    assert resolved["train"]["seed"] == subseed(5, "train")
    cfg.write_text(json.dumps({"sede": 5}))
    assert run_command(["train-toy", "--config", str(cfg), "--dry-run"]) == 1
    assert "unknown" in capsys.readouterr().err
    cfg.write_text(json.dumps({"train": {"stpes": 5}}))
    assert run_command(["train-toy", "--config", str(cfg), "--dry-run"]) == 1
    cfg.write_text("{not json")
    assert run_command(["train-toy", "--config", str(cfg)]) == 1
    assert run_command(["decode", "--in", str(tmp_path / "missing.wav"), "--key", KEY]) == 1
    assert run_command(["decode", "--in", str(carrier), "--key", KEY, "--start", "10000000"]) == 1
    assert run_command(["bogus"]) == 2
