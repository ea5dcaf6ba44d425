import subprocess
import sys

import pytest

from equal_seg.cli import main

CFG = """
count: 8
eval_count: 3
height: 16
width: 16
in_channels: 3
num_classes: 3
hidden: [4]
k: 2
strategy: [random, equal]
budgets: [0.125, 0.25]
epochs_per_round: 1
final_epochs: 2
lr_decay_every: 1
save_checkpoints: true
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(CFG)
    return p


def test_unknown_subcommand_exit_2(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exit_2(cfg_path):
    assert main(["run", str(cfg_path), "--turbo"]) == 2


def test_missing_config_one_line(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.yaml")]) != 0
    err = capsys.readouterr().err.strip()
    assert err.startswith("error:") and "\n" not in err


def test_bad_config_names_key(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("budgets: [0.3, 0.1]\n")
    assert main(["run", str(p)]) == 1
    assert "budgets" in capsys.readouterr().err


def test_run_twice_identical_and_overrides(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(cfg_path), "--out", str(a), "--seed", "2", "--budget", "0.25"]) == 0
    assert main(["run", str(cfg_path), "--out", str(b), "--seed", "2", "--budget", "0.25"]) == 0
    rows = (a / "results.csv").read_text().splitlines()
    assert len(rows) == 3 and all(",0.250000,2," in r for r in rows[1:])
    # the echoed config differs only in its output path
    for name in ("results.csv", "results_acquisitions.csv", "results_losses.csv", "results_summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_eval_checkpoint(cfg_path, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", str(cfg_path), "--out", str(out), "--budget", "0.25"]) == 0
    capsys.readouterr()
    assert main(["eval", str(out / "checkpoints" / "equal_b0.25_s0.npz"), str(out / "eval_data.npz")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("miou ") and lines[-1].startswith("inconsistency ")
    miou = float(lines[0].split()[1])
    row = [r for r in (out / "results.csv").read_text().splitlines() if r.startswith("equal,")][0]
    assert abs(float(row.split(",")[4]) - miou) < 1e-6


def test_gen_data(cfg_path, tmp_path):
    assert main(["gen-data", str(cfg_path), "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "train_data.npz").exists() and (tmp_path / "d" / "eval_data.npz").exists()


def test_ablate_and_plot_data(cfg_path, tmp_path, capsys):
    assert main(["ablate", "loss_norm", str(cfg_path), "--out", str(tmp_path), "--budget", "0.25"]) == 0
    capsys.readouterr()
    assert main(["plot-data", str(tmp_path / "ablation_loss_norm.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "strategy,0.25" and [l.split(",")[0] for l in out[1:]] == ["entropy", "equal+[l2]", "equal+[l1]"]


def test_ablate_bad_kind():
    assert main(["ablate", "dropout", "x.yaml"]) == 2


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "model_pair+ce+sc" in out and "PASS" in out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "equal_seg", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
