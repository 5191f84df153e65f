import hashlib
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from s2i import dsp
from s2i.cli import main
from s2i.config import KEYS, ConfigError, RunConfig


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["describe", "--no-such-flag", "1"])
    assert exc.value.code == 2


def test_module_entry_point_usage():
    proc = subprocess.run([sys.executable, "-m", "s2i"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_gradcheck_table(tmp_path, capsys):
    assert main(["gradcheck", "--profile", "tiny", "--run-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "FAIL" not in out


def test_synth_data_is_deterministic(tmp_path):
    args = ["synth-data", "--classes", "2", "--scenes", "10", "--segments", "3", "--seed", "7"]
    assert main(args + ["--run-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--run-dir", str(tmp_path / "b")]) == 0
    assert _tree_digest(tmp_path / "a/corpus") == _tree_digest(tmp_path / "b/corpus")
    assert len(list((tmp_path / "a/corpus/audio").glob("*.wav"))) == 60


def test_run_directory_provenance(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("seed = 4\nclasses = 3  # comment\n")
    assert main(["synth-data", "--config", str(cfg_file), "--seed", "5", "--scenes", "3", "--segments", "1",
                 "--run-dir", str(tmp_path / "r")]) == 0
    effective = (tmp_path / "r/config.txt").read_text()
    assert "seed = 5\n" in effective and "classes = 3\n" in effective
    assert (tmp_path / "r/version.txt").read_text().strip()
    assert "synth-data" in (tmp_path / "r/commands.log").read_text()


def test_runtime_and_config_errors_are_one_line(tmp_path, capsys):
    code = main(["train-ae", "--run-dir", str(tmp_path)])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 1 and err[-1].startswith("error=") and "command=train-ae" in err[-1]
    assert main(["describe", "--run-dir", str(tmp_path), "--profile", "huge"]) == 2
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error=config")


def test_config_rejects_unknown_and_bad_values(tmp_path):
    (tmp_path / "c.cfg").write_text("bogus = 1\n")
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.load(tmp_path / "c.cfg")
    with pytest.raises(ConfigError, match="parse"):
        RunConfig.load(None, {"batch_size": "many"})
    cfg = RunConfig.load(None, {"test-dropout": "off"})
    assert cfg.test_dropout is False
    assert all(k in RunConfig().dump() for k in KEYS)


def test_describe_lists_networks(tmp_path, capsys):
    assert main(["describe", "--run-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    for name in ("encoder", "decoder", "generator", "discriminator", "classifier"):
        assert f"{name}:" in out


def test_pipeline_to_translation(tmp_path, capsys):
    run = ["--run-dir", str(tmp_path), "--scenes", "4", "--segments", "2", "--batch-size", "4",
           "--ae-epochs", "1", "--gan-epochs", "1", "--f", "8"]
    for cmd in ("synth-data", "featurize", "train-ae", "train-gan"):
        assert main([cmd] + run) == 0, cmd
    assert (tmp_path / "gan/final.s2ic").exists() and (tmp_path / "gan/ledger.csv").exists()
    wav = tmp_path / "s.wav"
    dsp.write_wav(wav, dsp.AudioSegment(np.sin(np.arange(8000) / 5.0) * 0.3, 8000))
    assert main(["translate", "--sound", str(wav), "--samples", "4"] + run) == 0
    pngs = sorted((tmp_path / "translate").glob("s_*.png"))
    assert len(pngs) == 4
    assert len({p.read_bytes() for p in pngs}) > 1
    emb = (tmp_path / "translate/s_embedding.txt").read_text().split()
    assert len(emb) == 8 and all(abs(float(v)) <= 1 for v in emb)


def test_evaluation_subcommands(tmp_path):
    run = ["--run-dir", str(tmp_path), "--scenes", "4", "--segments", "2", "--batch-size", "4", "--ae-epochs", "1",
           "--gan-epochs", "2", "--f", "8", "--checkpoint-every", "2", "--clf-per-label", "4", "--clf-epochs", "1",
           "--permutations", "20", "--dims", "8,16", "--eval-every", "1", "--log-level", "WARNING"]
    for cmd in ("synth-data", "featurize", "train-ae", "train-gan", "train-clf", "eval", "sweep", "metrics"):
        assert main([cmd] + run) == 0, cmd
    for rel in ("clf/accuracy.csv", "eval/rates.csv", "eval/crossmodal.txt", "sweep/f8/gan/loss.csv", "sweep/f16/rates.csv",
                "report/summary.csv", "report/pixel_loss.svg"):
        assert (tmp_path / rel).exists(), rel
    stats = dict(line.split("=") for line in (tmp_path / "eval/crossmodal.txt").read_text().split())
    assert 0 < float(stats["p"]) <= 1
    summary = (tmp_path / "report/summary.csv").read_text().splitlines()
    assert summary[0] == "f,class,general_avg,max_ma50" and len(summary) == 5
