import hashlib
import json
import os

import pytest

from layerdrop.cli import apply_set, load_config, run
from layerdrop.config import ConfigError
from layerdrop.model import load_checkpoint

TINY = {
    "model": {"n_layers": 4, "d_model": 8, "n_heads": 2, "d_ffn": 16, "vocab_size": 256,
              "max_seq_len": 16},
    "train": {"steps": 6, "batch": 2, "block_len": 16, "eval_every": 3},
    "data": {"synthetic": "zipf_bigram", "synthetic_size": 3000},
    "output": {"timing": False},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def only_run(out_dir, prefix):
    runs = [d for d in os.listdir(out_dir) if d.startswith(prefix)]
    assert len(runs) == 1
    return os.path.join(out_dir, runs[0])


def train_once(tmp_path, cfg_path, *extra):
    out = tmp_path / "runs"
    code = run(["train", "--config", cfg_path, "--out-dir", str(out), *extra])
    assert code == 0
    return only_run(out, "train-")


def test_train_writes_artifacts_and_manifest(tmp_path, cfg_path):
    rd = train_once(tmp_path, cfg_path, "--set", "model.layerdrop_p=0.5", "--seed", "3")
    assert {"manifest.json", "metrics.csv", "model.ckpt"} <= set(os.listdir(rd))
    assert not os.path.exists(os.path.join(rd, ".lock"))
    m = json.load(open(os.path.join(rd, "manifest.json")))
    assert m["command"] == "train" and m["seed"] == 3 and m["status"] == "done"
    assert m["config"]["model"]["layerdrop_p"] == 0.5
    assert m["start"] and m["end"] and m["version"]
    for name, digest in m["artifacts"].items():
        assert hashlib.sha256(open(os.path.join(rd, name), "rb").read()).hexdigest() == digest
    assert rd.endswith("-s3")


def test_manifest_replay_bit_identical(tmp_path, cfg_path):
    rd = train_once(tmp_path, cfg_path, "--set", "model.layerdrop_p=0.5")
    first = json.load(open(os.path.join(rd, "manifest.json")))
    out2 = tmp_path / "replay"
    assert run(["train", "--config", os.path.join(rd, "manifest.json"),
                "--out-dir", str(out2)]) == 0
    second = json.load(open(os.path.join(only_run(out2, "train-"), "manifest.json")))
    assert first["artifacts"] == second["artifacts"]
    assert first["config"] == second["config"]


def test_prune_every_other_halves_depth(tmp_path, cfg_path):
    rd = train_once(tmp_path, cfg_path)
    small = tmp_path / "small.ckpt"
    code = run(["prune", "--checkpoint", os.path.join(rd, "model.ckpt"), "--strategy",
                "every_other", "--p", "0.5", "--out", str(small), "--out-dir",
                str(tmp_path / "runs")])
    assert code == 0
    assert load_checkpoint(small).config.n_layers == 2
    prd = only_run(tmp_path / "runs", "prune-")
    keep = json.load(open(os.path.join(prd, "keep.json")))
    assert keep["keep"] == [1, 3]
    m = json.load(open(os.path.join(prd, "manifest.json")))
    assert str(small) in m["artifacts"]


def test_eval_reports_ppl(tmp_path, cfg_path, capsys):
    rd = train_once(tmp_path, cfg_path)
    code = run(["eval", "--config", cfg_path, "--checkpoint", os.path.join(rd, "model.ckpt"),
                "--keep", "1,3", "--out-dir", str(tmp_path / "runs")])
    assert code == 0
    erd = only_run(tmp_path / "runs", "eval-")
    res = json.load(open(os.path.join(erd, "eval.json")))
    assert res["keep"] == [1, 3] and res["ppl"] > 1
    assert "ppl:" in capsys.readouterr().out


def test_gradcheck_passes(tmp_path, capsys):
    assert run(["gradcheck", "--out-dir", str(tmp_path)]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_verbose_accepted_either_side_of_command(tmp_path):
    assert run(["--verbose", "gradcheck", "--out-dir", str(tmp_path / "a")]) == 0
    assert run(["gradcheck", "--verbose", "--out-dir", str(tmp_path / "b")]) == 0


def test_gradcheck_fails_above_threshold(tmp_path):
    code = run(["gradcheck", "--set", "gradcheck.threshold=1e-30", "--out-dir", str(tmp_path)])
    assert code == 1


@pytest.mark.parametrize("assignment,key", [
    ("model.bogus=1", "model.bogus"),
    ("nosection.x=1", "nosection.x"),
    ("train.steps=-1", "train.steps"),
    ("model.n_heads=3", "model.d_model"),
])
def test_config_errors_exit_2(tmp_path, cfg_path, capsys, assignment, key):
    code = run(["train", "--config", cfg_path, "--set", assignment, "--out-dir", str(tmp_path)])
    assert code == 2
    assert key in capsys.readouterr().err


def test_unknown_key_in_config_file(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"stpes": 3}}))
    assert run(["train", "--config", str(p), "--out-dir", str(tmp_path)]) == 2
    assert "train.stpes" in capsys.readouterr().err


def test_runtime_failure_exit_1(tmp_path, cfg_path):
    code = run(["eval", "--config", cfg_path, "--checkpoint", str(tmp_path / "nope.ckpt"),
                "--out-dir", str(tmp_path)])
    assert code == 1
    m = json.load(open(os.path.join(only_run(tmp_path, "eval-"), "manifest.json")))
    assert m["status"] == "failed"


def test_nan_abort_exit_1(tmp_path, cfg_path):
    code = run(["train", "--config", cfg_path, "--set", "train.lr_peak=NaN",
                "--out-dir", str(tmp_path)])
    assert code == 1


def test_set_parsing():
    cfg = load_config(None, ["train.lr_peak=0.5", "sweep.schemes=[\"layer\"]",
                             "prune.which=last_half"], "train")
    assert cfg["train"]["lr_peak"] == 0.5
    assert cfg["sweep"]["schemes"] == ["layer"]
    assert cfg["prune"]["which"] == "last_half"
    with pytest.raises(ConfigError):
        apply_set(cfg, "novalue")


def test_manifest_for_other_command_rejected(tmp_path, cfg_path):
    rd = train_once(tmp_path, cfg_path)
    assert run(["eval", "--config", os.path.join(rd, "manifest.json"),
                "--out-dir", str(tmp_path)]) == 2


def test_bench_writes_throughput(tmp_path, cfg_path):
    code = run(["bench", "--config", cfg_path, "--set", "bench.steps=10",
                "--set", "bench.p_values=[0.0, 0.5]", "--out-dir", str(tmp_path)])
    assert code == 0
    rows = open(os.path.join(only_run(tmp_path, "bench-"), "throughput.csv")).read().splitlines()
    assert rows[0] == "p,tokens_per_sec,speedup" and len(rows) == 3


def test_sweep_drop_vs_prune(tmp_path, cfg_path):
    code = run(["sweep", "--config", cfg_path, "--experiment", "drop_vs_prune",
                "--set", "sweep.train_ps=[0.0, 0.5]", "--out-dir", str(tmp_path)])
    assert code == 0
    rd = only_run(tmp_path, "sweep-")
    lines = open(os.path.join(rd, "drop_vs_prune.csv")).read().splitlines()
    assert len(lines) == 1 + 2 * 3
    assert os.path.exists(os.path.join(rd, "drop_vs_prune_cells.json"))


def test_sweep_prune_curve_needs_checkpoints(tmp_path, cfg_path, capsys):
    code = run(["sweep", "--config", cfg_path, "--experiment", "prune_curve",
                "--out-dir", str(tmp_path)])
    assert code == 2
    assert "sweep.checkpoints" in capsys.readouterr().err


def test_sweep_importance(tmp_path, cfg_path):
    rd = train_once(tmp_path, cfg_path)
    code = run(["sweep", "--config", cfg_path, "--experiment", "importance",
                "--set", f"sweep.checkpoints={{\"model\": \"{rd}/model.ckpt\"}}",
                "--set", "sweep.importance_trials=2", "--out-dir", str(tmp_path / "s")])
    assert code == 0
    lines = open(os.path.join(only_run(tmp_path / "s", "sweep-"), "importance.csv")).readlines()
    assert len(lines) == 5


def test_lockfile_created_during_run(tmp_path, cfg_path, monkeypatch):
    from layerdrop import cli

    seen = {}

    def fake(cfg, rd):
        seen["lock"] = os.path.exists(rd.lock)
        seen["manifest"] = json.load(open(rd.file("manifest.json")))["status"]
        return 0

    monkeypatch.setitem(cli.HANDLERS, "train", fake)
    assert run(["train", "--config", cfg_path, "--out-dir", str(tmp_path)]) == 0
    assert seen == {"lock": True, "manifest": "running"}
