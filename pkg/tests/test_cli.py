import json
import subprocess
import sys
from pathlib import Path

import pytest

from cumo.cli import main
from tiny import tiny_doc

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_doc(steps=(2, 2, 3))))
    return path


@pytest.fixture(autouse=True)
def no_env_dir(monkeypatch):
    monkeypatch.delenv("CUMO_OUTPUT_DIR", raising=False)


def test_unknown_flag_exits_1(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "unrecognized arguments" in capsys.readouterr().err


def test_missing_subcommand_exits_1():
    assert main([]) == 1


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0


def test_unknown_arm_exits_1(tiny_cfg, tmp_path, capsys):
    assert main(["ablate", "--config", str(tiny_cfg), "--arms", "moe-magic", "--output-dir", str(tmp_path)]) == 1
    assert "unknown arms" in capsys.readouterr().err


def test_bad_config_key_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(tiny_doc(learning_rate=3)))
    assert main(["train", "--config", str(path), "--output-dir", str(tmp_path)]) == 1
    assert "unknown keys" in capsys.readouterr().err


def test_missing_checkpoint_exits_2(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == 2


def test_count_params_vitl_within_two_percent(capsys):
    assert main(["count-params", "--config", str(ROOT / "configs" / "vitl.json"), "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    enc, conn = doc["encoder"], doc["connector"]
    for got, want in [(enc["total"], 0.91e9), (enc["activated"], 0.50e9),
                      (conn["total"], 0.10e9), (conn["activated"], 0.05e9)]:
        assert abs(got - want) / want <= 0.02


def test_count_params_live_model(tiny_cfg, capsys):
    assert main(["count-params", "--config", str(tiny_cfg)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split()[:3] == ["section", "total", "activated"]


def test_train_twice_identical(tiny_cfg, tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["train", "--config", str(tiny_cfg), "--seed", "5", "--output-dir", str(tmp_path / name)]) == 0
    for f in ("metrics.csv", "visual_instruction_tuning.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert "caption token accuracy" in capsys.readouterr().out


def test_seed_flag_changes_run(tiny_cfg, tmp_path):
    main(["train", "--config", str(tiny_cfg), "--seed", "1", "--output-dir", str(tmp_path / "a")])
    main(["train", "--config", str(tiny_cfg), "--seed", "2", "--output-dir", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_gen_data_eval_route_stats(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["gen-data", "--config", str(tiny_cfg), "--output-dir", str(out)]) == 0
    assert main(["train", "--config", str(tiny_cfg), "--output-dir", str(out)]) == 0
    ckpt, data = out / "visual_instruction_tuning.ckpt", out / "eval.bin"
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data)]) == 0
    from_file = json.loads(capsys.readouterr().out)
    assert main(["eval", "--config", str(tiny_cfg), "--checkpoint", str(ckpt)]) == 0
    assert json.loads(capsys.readouterr().out) == from_file
    assert 0.0 <= from_file["accuracy"] <= 1.0

    stats = tmp_path / "stats"
    assert main(["route-stats", "--checkpoint", str(ckpt), "--data", str(data), "--output-dir", str(stats),
                 "--chart"]) == 0
    assert "aggregate balance score" in capsys.readouterr().out
    blocks = sorted(stats.glob("route_*.csv"))
    assert len(blocks) == 3  # one encoder layer, connector, summary
    for p in blocks:
        if p.name == "route_summary.csv":
            continue
        rows = [line.split(",") for line in p.read_text().splitlines()[1:]]
        assert abs(sum(float(r[1]) for r in rows) - 2) <= 1e-6
        assert abs(sum(float(r[2]) for r in rows) - 1) <= 1e-6


def test_route_stats_dense_checkpoint_exits_2(tmp_path, capsys):
    doc = tiny_doc(steps=(1, 1, 0))
    doc["model"]["encoder"]["moe"] = doc["model"]["connector"]["moe"] = None
    cfg = tmp_path / "dense.json"
    cfg.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg), "--output-dir", str(tmp_path)]) == 0
    assert main(["route-stats", "--config", str(cfg), "--checkpoint", str(tmp_path / "prefinetune.ckpt"),
                 "--output-dir", str(tmp_path)]) == 2
    assert "no MoE blocks" in capsys.readouterr().err


def test_output_dir_precedence(tiny_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("CUMO_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["gen-data", "--config", str(tiny_cfg)]) == 0
    assert (tmp_path / "env" / "train.bin").exists()
    assert main(["gen-data", "--config", str(tiny_cfg), "--output-dir", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "train.bin").exists()


def test_ablate_single_arm(tiny_cfg, tmp_path, capsys):
    assert main(["ablate", "--config", str(tiny_cfg), "--arms", "moe-upcycle", "--seeds", "0", "1",
                 "--output-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[2].startswith("moe-upcycle")
    assert (tmp_path / "ablation.csv").read_text().count("\n") == 3


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "cumo.cli", "train", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage:" in proc.stderr
