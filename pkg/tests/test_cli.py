import json
import subprocess
import sys
import time
from dataclasses import fields

import numpy as np
import pytest
from PIL import Image

from patientmae.cli import build_parser, main
from patientmae.masking import MaskSchedule
from patientmae.probe import ProbeConfig
from patientmae.synth import SynthSpec


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_schedule_rows(capsys):
    assert run_cli("schedule", "--r0", 0.985, "--rT", 0.85, "--T", 300) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "epoch\tmask_ratio"
    rows = [ln.split("\t") for ln in lines[1:]]
    assert len(rows) == 301
    assert float(rows[0][1]) == 0.985
    assert float(rows[300][1]) == 0.85


def test_schedule_to_file(tmp_path, monkeypatch):
    monkeypatch.setenv("PATIENTMAE_OUTPUT_ROOT", str(tmp_path))
    assert run_cli("schedule", "--T", 10, "--out", "sched/s.tsv") == 0
    assert len((tmp_path / "sched" / "s.tsv").read_text().splitlines()) == 12


def write_manifest(tmp_path, rows):
    lines = ["patient_id,image_path,eye,scanner_id,age_years,gender"]
    for i, (pid, eye, scanner) in enumerate(rows):
        name = f"{pid}_{i}.png"
        Image.fromarray(np.full((224, 224, 3), 128, dtype=np.uint8)).save(tmp_path / name)
        lines.append(f"{pid},{name},{eye},{scanner},55,F")
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_pairs_stats_three_image_patient(tmp_path, capsys):
    manifest = write_manifest(tmp_path, [("P1", "L", "A"), ("P1", "R", "A"), ("P1", "L", "B"), ("P2", "L", "A")])
    assert run_cli("pairs-stats", "--manifest", manifest) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["pairs"] == 3
    assert stats["patients"] == 2
    assert stats["single_image_patients"] == 1
    assert stats["cross_laterality_pairs"] == 2


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as info:
        run_cli("schedule", "--bogus", 1)
    assert info.value.code == 2
    assert "unrecognized arguments" in capsys.readouterr().err


def subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.dest == "command")
    return action.choices


def test_help_lists_every_flag_with_default():
    for name, sub in subparsers().items():
        text = " ".join(sub.format_help().split())  # undo line wrapping
        for action in sub._actions:
            if not action.option_strings or action.dest == "help":
                continue
            assert action.option_strings[-1] in text, (name, action.dest)
            if action.default is not None and not action.required:
                assert f"(default: {action.default})" in text, (name, action.dest)


def test_help_defaults_match_config_schema():
    subs = subparsers()
    probe = {a.dest: a.default for a in subs["probe"]._actions}
    defaults = ProbeConfig()
    for f in fields(ProbeConfig):
        if f.name == "mode":
            assert probe["mode"] == defaults.mode.value
        else:
            assert probe[f.name] == getattr(defaults, f.name), f.name
    sched = {a.dest: a.default for a in subs["schedule"]._actions}
    assert (sched["r0"], sched["rT"], sched["T"]) == (MaskSchedule().r0, MaskSchedule().rT, MaskSchedule().T)
    synth = {a.dest: a.default for a in subs["synth-gen"]._actions}
    assert (synth["n"], synth["seed"]) == (SynthSpec().n_patients, SynthSpec().seed)


def test_validation_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("wrong,header\n")
    assert run_cli("pairs-stats", "--manifest", bad) == 3
    assert "error [validation]" in capsys.readouterr().err


def test_checkpoint_exit_code(tmp_path, capsys):
    img = tmp_path / "x.png"
    Image.fromarray(np.zeros((224, 224, 3), dtype=np.uint8)).save(img)
    (tmp_path / "ck.pt").write_bytes(b"garbage")
    assert run_cli("attn", "--checkpoint", tmp_path / "ck.pt", "--image", img, "--out", tmp_path / "a") == 4
    manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert manifest["status"].startswith("failed")


def test_training_exit_code(tmp_path):
    manifest = write_manifest(tmp_path, [("P1", "L", "A"), ("P2", "L", "A")])
    assert run_cli("pretrain", "--manifest", manifest, "--out", tmp_path / "run") == 5


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "patientmae.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip()


def test_end_to_end_smoke(tmp_path, capsys):
    start = time.time()
    data = tmp_path / "data"
    # generator seed 2 puts both genders in every split at n = 20
    assert run_cli("synth-gen", "--n", 20, "--out", data, "--seed", 2) == 0
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"epochs": 2, "warmup_epochs": 1, "model": {"encoder": "TINY"}}))
    run = tmp_path / "run"
    assert run_cli("pretrain", "--manifest", data / "manifest.csv", "--config", config, "--out", run,
                   "--labels", data / "labels.csv") == 0
    final = run / "checkpoint_final.pt"
    assert final.is_file()
    record = json.loads((run / "run_manifest.json").read_text())
    assert record["status"] == "ok" and record["end"] is not None
    assert record["config"]["train"]["epochs"] == 2
    assert run_cli("probe", "--checkpoint", final, "--manifest", data / "manifest.csv", "--labels",
                   data / "labels.csv", "--task", "gender", "--out", tmp_path / "probe") == 0
    metrics = json.loads((tmp_path / "probe" / "metrics.json").read_text())
    assert set(metrics["splits"]) == {"train", "val", "test"}
    assert 0.0 <= metrics["splits"]["test"]["auroc"] <= 1.0
    assert run_cli("attn", "--checkpoint", final, "--image", data / "images" / "P0000_L_A_0.png",
                   "--out", tmp_path / "attn") == 0
    assert (tmp_path / "attn" / "attn_gender_layer-1.npy").is_file()
    assert time.time() - start < 300
