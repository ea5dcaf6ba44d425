import math

import numpy as np
import pytest

from equal_seg.acquisition import Strategy
from equal_seg.data import PoolState, RegionGrid, RegionId, Sample, build_pool, generate_dataset, oracle_label
from equal_seg.model import ModelConfig, forward_pair, init_model
from equal_seg.numerics import consistency_loss
from equal_seg.trainer import (
    LossConfig,
    TrainConfig,
    TrainingError,
    active_loop,
    budget_target,
    confusion_matrix,
    evaluate,
    final_retrain,
    inconsistency,
    iou_from_confusion,
    train,
)
from oracles import brute_iou

MCFG = ModelConfig(4, (6, 6), 4, 0)
FAST = TrainConfig(epochs_per_round=1, final_epochs=3, batch_size=2, lr_decay_every=2)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(5, 8, 16, 16, in_channels=4, num_classes=4)


def partial_pool(ds, grid, picks):
    pool = PoolState(len(ds), grid.per_image)
    for rid in picks:
        oracle_label(pool, RegionId(*rid))
    return pool


def params_equal(a, b):
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_configs_validate():
    with pytest.raises(ValueError):
        LossConfig(theta=1.5)
    with pytest.raises(ValueError):
        LossConfig(norm="l3")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_single_image_converges(ds):
    grid = RegionGrid(16, 16, 16, 16)
    pool = partial_pool(ds[:1], grid, [(0, 0)])
    model = init_model(ModelConfig(4, (16, 16), 4, 0))  # default widths and optimiser settings
    trace = train(model, ds[:1], pool, grid, LossConfig(augment_hflip=False), TrainConfig(), epochs=200)
    assert trace[-1].ce < 0.1 * trace[0].ce


def test_theta_one_gates_consistency(ds):
    grid = RegionGrid(16, 16, 8, 8)
    pool = partial_pool(ds, grid, [(0, 1), (3, 0), (3, 2), (5, 3)])
    a, b = init_model(MCFG), init_model(MCFG)
    ta = train(a, ds, pool, grid, LossConfig(use_consistency=False), FAST, epochs=2)
    tb = train(b, ds, pool, grid, LossConfig(use_consistency=True, theta=1.0), FAST, epochs=2)
    assert [(r.total, r.ce, r.sc) for r in ta] == [(r.total, r.ce, r.sc) for r in tb]
    assert params_equal(a, b)


def test_gating_ignores_theta_and_norm_when_off(ds):
    grid = RegionGrid(16, 16, 8, 8)
    pool = partial_pool(ds, grid, [(0, 1), (2, 2), (2, 3)])
    a, b = init_model(MCFG), init_model(MCFG)
    train(a, ds, pool, grid, LossConfig(theta=0.0, norm="l1"), FAST, epochs=2)
    train(b, ds, pool, grid, LossConfig(theta=0.9, norm="l2"), FAST, epochs=2)
    assert params_equal(a, b)


def test_consistency_only_descends(ds):
    grid = RegionGrid(16, 16, 8, 8)
    pool = PoolState(2, grid.per_image)  # nothing labeled: CE contributes nothing
    x = np.stack([s.x for s in ds[:2]])
    model = init_model(MCFG)

    def gap():
        i0, i1, _ = forward_pair(model, x, LossConfig().kind)
        return float(((i0 - i1) ** 2).mean())

    before = gap()
    cfg = TrainConfig(batch_size=2, lr=5e-3)
    train(model, ds[:2], pool, grid, LossConfig(use_consistency=True, theta=0.0, augment_hflip=False), cfg,
          epochs=50)
    assert gap() < before


def test_loss_additivity(ds):
    grid = RegionGrid(16, 16, 8, 8)
    pool = partial_pool(ds, grid, [(0, 0), (0, 1), (4, 3)])
    trace = train(init_model(MCFG), ds, pool, grid, LossConfig(use_consistency=True, theta=0.25), FAST, epochs=2)
    assert any(r.sc > 0 for r in trace)
    for r in trace:
        assert abs(r.total - (r.ce + r.sc)) < 1e-12


def test_no_labels_rejected(ds):
    grid = RegionGrid(16, 16, 8, 8)
    with pytest.raises(TrainingError):
        train(init_model(MCFG), ds, PoolState(len(ds), 4), grid, LossConfig(), FAST)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(ds):
    grid = RegionGrid(16, 16, 8, 8)
    pool = partial_pool(ds, grid, [(1, 1)])
    model = init_model(MCFG)
    model.params["conv0.weight"][0, 0, 1, 1] = np.inf
    with pytest.raises(TrainingError, match="images"):
        train(model, ds, pool, grid, LossConfig(), FAST)


def test_budget_target_exact():
    assert budget_target(0.12, 3200) == 384
    assert budget_target(0.08, 3200) == 256
    assert budget_target(1.0, 7) == 7
    assert budget_target(0.1, 30) == 3  # 0.1*30 is 3.0000000000000004 in floats


def test_loop_budget_exactly_k(ds):
    grid = RegionGrid(16, 16, 8, 8)
    res = active_loop(ds, grid, Strategy("entropy"), 4, 4 / 32, MCFG, LossConfig(), FAST)
    assert len(res.rounds) == 1 and res.pool.labeled_count == 4


@pytest.mark.parametrize("strategy", ["random", "equal"])
def test_loop_budget_one_labels_everything(ds, strategy):
    grid = RegionGrid(16, 16, 8, 8)
    res = active_loop(ds[:3], grid, Strategy(strategy), 5, 1.0, MCFG, LossConfig(use_consistency=True), FAST)
    assert res.pool.labeled.all()
    seen = [r for log in res.rounds for r in log.regions]
    assert len(seen) == len(set(seen)) == 12


def test_loop_accounting_200_images():
    data = [Sample(np.zeros((1, 32, 32)), np.zeros((32, 32), dtype=np.int64), i) for i in range(200)]
    grid = RegionGrid(32, 32, 8, 8)
    res = active_loop(data, grid, Strategy("random"), 4, 0.12, ModelConfig(1, (2,), 2), LossConfig(), FAST,
                      checkpoints=[0.08])
    assert res.pool.labeled_count == 384
    assert res.snapshots[0.08][0].labeled_count == 256
    seen = [r for log in res.rounds for r in log.regions]
    assert len(set(seen)) == 384


def test_warm_start_loop(ds):
    grid = RegionGrid(16, 16, 8, 8)
    res = active_loop(ds, grid, Strategy("entropy"), 2, 0.25, MCFG, LossConfig(), FAST, warm_start_regions=3)
    assert res.pool.labeled_count == 9  # 3 warm + 3 rounds of 2


def test_final_retrain_full_supervision_and_plus(ds):
    grid = RegionGrid(16, 16, 8, 8)
    pool = PoolState(len(ds), 4)
    pool.labeled[:] = True
    pool.labeled_count = pool.total
    a = final_retrain(ds, pool, grid, MCFG, LossConfig(), FAST)
    b = final_retrain(ds, pool, grid, MCFG, LossConfig(use_consistency=True), FAST)
    assert not params_equal(a, b)
    again = final_retrain(ds, pool, grid, MCFG, LossConfig(), FAST)
    assert params_equal(a, again)


def test_plus_degenerates_below_theta(ds):
    grid = RegionGrid(16, 16, 4, 4)  # 16 regions; one region = 6.25% < theta 0.1
    pool = partial_pool(ds, grid, [(0, 3), (2, 7), (6, 0)])
    a = final_retrain(ds, pool, grid, MCFG, LossConfig(theta=0.1), FAST)
    b = final_retrain(ds, pool, grid, MCFG, LossConfig(use_consistency=True, theta=0.1), FAST)
    assert params_equal(a, b)


def test_final_retrain_lr_schedule(ds):
    grid = RegionGrid(16, 16, 8, 8)
    pool = partial_pool(ds, grid, [(0, 0)])
    m = final_retrain(ds, pool, grid, MCFG, LossConfig(), FAST)
    assert math.isclose(next(iter(m.adam.values())).lr, FAST.lr * FAST.lr_decay)


def test_iou_examples():
    gt = np.array([[0, 0], [1, 1]])
    iou, miou = iou_from_confusion(confusion_matrix(gt, np.array([[0, 1], [1, 1]]), 2))
    assert iou == [0.5, 2 / 3] and abs(miou - 7 / 12) < 1e-15
    iou, miou = iou_from_confusion(confusion_matrix(gt, gt, 3))
    assert iou == [1.0, 1.0, 1.0] and miou == 1.0


def test_iou_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = int(rng.integers(2, 5))
        gt = rng.integers(0, c, size=(int(rng.integers(1, 5)), 3))
        pred = rng.integers(0, c, size=gt.shape)
        iou, miou = iou_from_confusion(confusion_matrix(gt, pred, c))
        ref_iou, ref_miou = brute_iou(gt, pred, c)
        assert np.max(np.abs(np.array(iou) - ref_iou)) < 1e-12 and abs(miou - ref_miou) < 1e-12


def test_uniform_predictor_on_balanced_two_class():
    rng = np.random.default_rng(1)
    ious = [iou_from_confusion(confusion_matrix(rng.integers(0, 2, (32, 32)), rng.integers(0, 2, (32, 32)), 2))[0]
            for _ in range(50)]
    assert np.all(np.abs(np.mean(ious, axis=0) - 1 / 3) < 0.05)


def test_evaluate_and_inconsistency_of_constant_model(ds):
    m = init_model(MCFG)
    m.params["conv2.weight"][:] = 0.0
    m.params["conv2.bias"][:] = [5.0, 0, 0, 0]
    rec = evaluate(m, ds)
    assert rec.iou[1:] == [1.0 if not any((s.y == c).any() for s in ds) else 0.0 for c in (1, 2, 3)]
    assert inconsistency(m, ds) == 0.0


def test_inconsistency_is_mean_of_per_image_loss(ds):
    m = init_model(MCFG)
    kind = LossConfig().kind
    per = [consistency_loss(*forward_pair(m, s.x, kind)[:2])[0] for s in ds]
    assert abs(inconsistency(m, ds, kind) - np.mean(per)) < 1e-12
