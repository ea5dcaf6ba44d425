import json

import numpy as np
import pytest

from equal_seg.config import parse_config
from equal_seg.experiment import (
    ablation_variants,
    default_region_sizes,
    plus_label,
    run_ablation,
    run_experiment,
)
from equal_seg.results import read_results

TINY = """
count: 10
eval_count: 4
height: 16
width: 16
in_channels: 4
num_classes: 3
region_height: 8
region_width: 8
hidden: [4, 4]
k: 2
epochs_per_round: 1
final_epochs: 2
lr_decay_every: 1
"""


def tiny(**kw):
    return parse_config(TINY).replace(**kw)


def test_plus_label():
    assert plus_label("equal") == "equal+"
    assert plus_label("equal[l1]") == "equal+[l1]"


def test_single_random_run(tmp_path):
    t = run_experiment(tiny(strategy=["random"], budgets=[0.1]), tmp_path)
    assert len(t.rows) == 1 and len(t.aggregates()) == 1
    assert t.rows[0].strategy == "random" and t.rows[0].round == 2  # ceil(0.1*40)=4 regions, K=2


def test_outputs_and_sidecar(tmp_path):
    cfg = tiny(strategy=["entropy", "equal"], retrain=["ce", "ce+sc"], budgets=[0.1, 0.2], seeds=[0, 1])
    t = run_experiment(cfg, tmp_path)
    assert t.strategies() == ["entropy", "equal", "equal+"]  # consistency retraining defaults to equal only
    assert len(t.rows) == 3 * 2 * 2
    side = json.loads((tmp_path / "results.json").read_text())
    devs = " ".join(side["metadata"]["deviations"])
    assert "no pretraining" in devs and "warm selection-phase training" in devs
    assert side["config"]["seeds"] == [0, 1]
    assert read_results(tmp_path / "results.csv") == t
    acq = (tmp_path / "results_acquisitions.csv").read_text().splitlines()
    assert acq[0] == "strategy,seed,round,image,region,score" and len(acq) == 1 + 2 * 2 * 8
    assert (tmp_path / "results_losses.csv").exists()


def test_plus_filters(tmp_path):
    cfg = tiny(strategy=["entropy", "equal"], retrain=["ce", "ce+sc"], budgets=[0.1, 0.2],
               plus_strategies=["entropy", "equal"], plus_budgets=[0.2])
    t = run_experiment(cfg, tmp_path)
    assert sorted((r.strategy, r.budget) for r in t.rows if r.strategy.endswith("+")) == [
        ("entropy+", 0.2), ("equal+", 0.2)]


def test_aggregate_std_recomputes(tmp_path):
    t = run_experiment(tiny(strategy=["random"], budgets=[0.2], seeds=[0, 1, 2, 3, 4]), tmp_path)
    (agg,) = t.aggregates()
    assert abs(agg.miou_std - np.std([r.miou for r in t.rows], ddof=1)) < 1e-12


def test_rerun_bit_identical(tmp_path):
    cfg = tiny(strategy=["equal"], budgets=[0.1, 0.2], retrain=["ce", "ce+sc"])
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("results.csv", "results_acquisitions.csv", "results_losses.csv", "results_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_workers_match_sequential(tmp_path):
    cfg = tiny(strategy=["entropy"], budgets=[0.1], seeds=[0, 1])
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg.replace(workers=2), tmp_path / "b")
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_failed_seed_recorded(tmp_path, monkeypatch):
    import equal_seg.experiment as ex

    real = ex.active_loop

    def flaky(*args, **kw):
        if args[5].seed == 1:
            raise RuntimeError("boom")
        return real(*args, **kw)

    monkeypatch.setattr(ex, "active_loop", flaky)
    t = run_experiment(tiny(strategy=["random"], budgets=[0.1], seeds=[0, 1, 2]), tmp_path)
    assert [r.seed for r in t.rows] == [0, 2]
    assert t.metadata["failures"] == [{"strategy": "random", "seed": 1, "error": "RuntimeError('boom')"}]


def test_checkpoints_saved(tmp_path):
    run_experiment(tiny(strategy=["random"], budgets=[0.1], save_checkpoints=True), tmp_path)
    assert (tmp_path / "checkpoints" / "random_b0.1_s0.npz").exists()
    assert (tmp_path / "eval_data.npz").exists()


def test_transform_ablation_six_rows_per_budget(tmp_path):
    t = run_ablation("transform", tiny(budgets=[0.1, 0.2]), tmp_path)
    for b in (0.1, 0.2):
        assert len([r for r in t.rows if r.budget == b]) == 6
    assert set(t.strategies()) == {"entropy", "equal[hflip]", "equal[vflip]", "equal[rot90]", "equal[rot180]",
                                   "equal[translate:2,0]"}
    table = (tmp_path / "ablation_transform_table.csv").read_text().splitlines()
    assert table[0] == "strategy,0.1,0.2" and len(table) == 7


def test_loss_norm_ablation(tmp_path):
    t = run_ablation("loss_norm", tiny(budgets=[0.2]), tmp_path)
    assert t.strategies() == ["entropy", "equal+[l2]", "equal+[l1]"]


def test_region_size_defaults():
    assert default_region_sizes(32, 32) == [4, 8, 16, 32]
    variants, skipped = ablation_variants("region_size", parse_config("height: 32\nwidth: 32"))
    assert [v.region for v in variants] == [(4, 4), (8, 8), (16, 16), (32, 32)] and not skipped


def test_region_size_ablation_with_skip(tmp_path):
    cfg = tiny(budgets=[0.25], region_sizes=[4, 5, 8])
    t = run_ablation("region_size", cfg, tmp_path)
    assert t.strategies() == ["equal[5x5]:skipped", "equal[4x4]", "equal[8x8]", "equal[16x16]"]
    assert t.metadata["warnings"] and "5x5" in t.metadata["warnings"][0]
    whole = [r for r in t.rows if r.strategy == "equal[16x16]"][0]
    # one region per image: 25% of 10 images -> 3 whole images in two rounds of K=2
    assert whole.round == 2


def test_unknown_ablation():
    with pytest.raises(ValueError):
        ablation_variants("dropout", tiny())
