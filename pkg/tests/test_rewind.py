import struct

import numpy as np
import pytest

from rewindlab import models as M
from rewindlab.optim import LrSchedule, resnet_schedule
from rewindlab.prune import PruneMask, prune_unstructured
from rewindlab.rewind import (CheckpointStore, RetrainPlan, checkpoint_iteration, finetune, lr_rewind,
                              read_checkpoint, retrain, rewound_state, snapshot_iterations,
                              weight_rewind, write_checkpoint)
from rewindlab.train import TrainConfig, derive_seed, evaluate, train

N = 12


@pytest.fixture(scope="module")
def trained(tiny_data):
    cfg = TrainConfig(batch_size=32)
    sched = LrSchedule(0.1, (6,), (0.1,), N)
    model = M.build("cnn-small", seed=0)
    store = CheckpointStore("t")
    train(model, tiny_data, sched, N, seed=1, config=cfg, store=store, snapshot_at=[0, 3, 6, N])
    mask = prune_unstructured({k: model.params[k] for k in model.spec.prunable_names}, 0.7)
    return model, store, sched, mask, cfg


def test_cadence_arithmetic():
    assert snapshot_iterations(5000, 1000) == [0, 1000, 2000, 3000, 4000]
    assert snapshot_iterations(72000, 1000, (36000, 54000))[:3] == [0, 1000, 2000]
    assert snapshot_iterations(10, 4, (5,)) == [0, 4, 5, 8]
    with pytest.raises(ValueError):
        snapshot_iterations(10, 0)


def test_snapshot_restore_bit_exact_and_isolated():
    m = M.build("cnn-small")
    store = CheckpointStore()
    store.snapshot(0, m.state())
    restored = store.restore(0)
    assert all(np.array_equal(restored[k], v) for k, v in m.state().items())
    restored["conv0"][:] = 0
    assert not np.array_equal(store.restore(0)["conv0"], restored["conv0"])


def test_store_errors():
    store = CheckpointStore()
    store.snapshot(3, {"w": np.ones(2, np.float32)})
    with pytest.raises(ValueError, match="already"):
        store.snapshot(3, {"w": np.ones(2, np.float32)})
    with pytest.raises(KeyError, match=r"available: \[3\]"):
        store.restore(4)


def test_checkpoint_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    t = {"conv": rng.standard_normal((3, 3, 3, 2)).astype(np.float32), "b": np.array([-0.0, 1e-40], np.float32)}
    p = tmp_path / "r-000000007.rwlc"
    write_checkpoint(p, "run-x", 7, t)
    rid, it, back = read_checkpoint(p)
    assert (rid, it) == ("run-x", 7) and checkpoint_iteration(p) == 7
    for k in t:
        assert back[k].tobytes() == t[k].tobytes()
    raw = p.read_bytes()
    assert raw[:4] == b"RWLC" and raw[4] == 1 and struct.unpack_from("<I", raw, 5) == (5,)


def test_checkpoint_rejects_lossy_float64(tmp_path):
    with pytest.raises(ValueError, match="float32"):
        write_checkpoint(tmp_path / "x.rwlc", "r", 0, {"w": np.array([0.1])})


def test_truncated_checkpoint(tmp_path):
    p = tmp_path / "x.rwlc"
    write_checkpoint(p, "r", 0, {"w": np.ones(10, np.float32)})
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError, match="truncated at byte"):
        read_checkpoint(p)


def test_disk_store_reload(tmp_path):
    store = CheckpointStore("disk", 5, tmp_path)
    m = M.build("cnn-small")
    store.snapshot(0, m.state())
    store.snapshot(5, m.state())
    back = CheckpointStore.load(tmp_path)
    assert back.iterations == [0, 5] and back.run_id == "disk"
    assert all(np.array_equal(back.restore(5)[k], v) for k, v in m.state().items())


def test_plan_accounting():
    assert RetrainPlan.make("finetune", 100).retrain_iterations == 100
    assert RetrainPlan.make("lr_rewind", 100).retrain_iterations == 100
    wr = RetrainPlan.make("weight_rewind", 100)
    assert (wr.rewind_iteration, wr.retrain_iterations, wr.lr_schedule_offset) == (25, 75, 25)
    assert RetrainPlan.make("weight_rewind", 100, 40).retrain_iterations == 60
    with pytest.raises(ValueError):
        RetrainPlan.make("magic", 100)
    with pytest.raises(ValueError):
        RetrainPlan.make("weight_rewind", 100, 101)
    assert RetrainPlan.make("finetune", 100).schedule(resnet_schedule()).lr_at(0) == 0.001


def test_weight_rewind_from_36000_starts_at_0_01():
    assert resnet_schedule().lr_at(36000) == 0.01


def test_finetune_zero_steps_and_zero_lr(trained, tiny_data):
    model, _, _, mask, cfg = trained
    same = finetune(model, mask, 0, 0.001, tiny_data, seed=0, config=cfg)
    expected = {k: np.where(mask.masks[k], model.params[k], 0) if k in mask.masks else model.params[k]
                for k in model.params}
    assert all(np.array_equal(same.params[k], expected[k]) for k in model.params)
    frozen = finetune(model, mask, 3, 0.0, tiny_data, seed=0, config=TrainConfig(batch_size=32, l2=0.0))
    assert all(np.array_equal(frozen.params[k], expected[k]) for k in model.params)


def test_weight_rewind_k_equals_n_is_masked_final(trained, tiny_data):
    model, store, sched, mask, cfg = trained
    out = weight_rewind(store, N, mask, sched, model, tiny_data, seed=0, config=cfg)
    for k, v in model.params.items():
        want = np.where(mask.masks[k], v, 0) if k in mask.masks else v
        assert np.array_equal(out.params[k], want)


def test_weight_rewind_k0_is_lottery_reset(trained, tiny_data):
    model, store, _, mask, _ = trained
    init = M.build("cnn-small", seed=0)
    r = rewound_state(store, 0, model, mask)
    for k in mask.masks:
        assert np.array_equal(r.params[k][mask.masks[k]], init.params[k][mask.masks[k]])
        assert np.all(r.params[k][~mask.masks[k]] == 0)


def test_weight_rewind_unstored_k(trained, tiny_data):
    model, store, sched, mask, cfg = trained
    with pytest.raises(KeyError, match="stored snapshots"):
        weight_rewind(store, 4, mask, sched, model, tiny_data, seed=0, config=cfg)


def test_lr_rewind_equals_forced_weight_rewind(trained, tiny_data):
    model, store, sched, mask, cfg = trained
    a = lr_rewind(model, mask, sched, tiny_data, seed=7, config=cfg)
    b = weight_rewind(store, N, mask, sched, model, tiny_data, seed=7, config=cfg, reset_schedule=True)
    assert all(a.state()[k].tobytes() == b.state()[k].tobytes() for k in a.state())
    for k, m in mask.masks.items():
        assert np.all(a.params[k][~m] == 0)


def test_retrain_dispatch_keeps_inputs_untouched(trained, tiny_data):
    model, store, sched, mask, cfg = trained
    before = {k: v.copy() for k, v in model.state().items()}
    for strategy in ("finetune", "weight_rewind", "lr_rewind"):
        plan = RetrainPlan.make(strategy, N, 6)
        out = retrain(plan, model, mask, sched, store, tiny_data, seed=1, config=cfg)
        assert 0.0 <= evaluate(out, tiny_data) <= 1.0
    assert all(np.array_equal(before[k], v) for k, v in model.state().items())


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, "lr_rewind", 1) == derive_seed(0, "lr_rewind", 1)
    assert len({derive_seed(t, s, r) for t in range(3) for s in "ab" for r in range(3)}) == 18
    assert 0 <= derive_seed("x") < 2 ** 63


def test_train_rejects_overrun(tiny_data):
    with pytest.raises(ValueError, match="exceed"):
        train(M.build("cnn-small"), tiny_data, LrSchedule.constant(0.1, 5), 3, start=4, seed=0)


def test_dense_mask_training_matches_unmasked(tiny_data):
    cfg = TrainConfig(batch_size=32)
    sched = LrSchedule.constant(0.05, 4)
    a, b = M.build("cnn-small"), M.build("cnn-small")
    train(a, tiny_data, sched, 4, seed=3, config=cfg)
    dense = PruneMask.dense({k: b.params[k] for k in b.spec.prunable_names})
    train(b, tiny_data, sched, 4, seed=3, config=cfg, mask=dense)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
