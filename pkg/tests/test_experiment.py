import csv

import numpy as np
import pytest

from rewindlab.config import from_dict
from rewindlab.experiment import (CURVE_HEADER, CurvePoint, ExperimentResult, TrialRecord, aggregate,
                                  aggregate_values, emit_curve, load_data, read_curve, read_result_json,
                                  run_iterative, run_one_shot, train_baseline, write_outputs,
                                  write_result_json)


def micro(**kw):
    raw = {"model": "mlp-small", "dataset": {"name": "synthetic", "train_size": 200, "val_size": 60},
           "strategy": ["finetune"], "compressions": [2.0], "trials": 2,
           "optim": {"total_iterations": 16, "boundaries": [8, 12], "batch_size": 32, "base_lr": 0.05},
           "checkpoint_cadence": 4}
    raw.update(kw)
    return from_dict(raw)


@pytest.fixture(scope="module")
def prepared():
    cfg = micro(strategy=["finetune", "weight_rewind", "lr_rewind"])
    data = load_data(cfg)
    return cfg, data, train_baseline(cfg, data)


def rec(acc, strategy="finetune", c=2.0, trial=0):
    return TrialRecord(strategy, trial, 0, 1 - 1 / c, 1 - 1 / c, c, acc, 10, 10, 0, "d")


def test_aggregate_examples():
    assert aggregate_values([0.91, 0.93, 0.92])[0] == pytest.approx(0.92)
    med, lo, hi = aggregate_values([0.90, 0.94])
    assert (med, lo, hi) == pytest.approx((0.92, 0.904, 0.936))
    assert aggregate_values([0.5, 0.5, 0.5]) == (0.5, 0.5, 0.5)
    assert aggregate_values([0.7]) == (0.7, 0.7, 0.7)


def test_aggregate_groups_and_sorts():
    pts = aggregate([rec(0.8, c=4.0), rec(0.9, c=2.0), rec(0.7, c=4.0, trial=1)])
    assert [p.compression for p in pts] == [2.0, 4.0] and pts[1].trials == 2
    for p in pts:
        assert p.ci_low <= p.median_acc <= p.ci_high


def test_empty_curve_is_header_only(tmp_path):
    emit_curve(ExperimentResult(), tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text() == ",".join(CURVE_HEADER) + "\n"


def test_curve_round_trip_and_format(tmp_path):
    res = ExperimentResult([rec(0.9, c=1 / (1 - 0.893)), rec(0.91, c=1 / (1 - 0.893), trial=1)])
    emit_curve(res, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[1][0] == "9.345794" and rows[1][1] == "0.893000"
    back = read_curve(tmp_path / "c.csv", "finetune")
    mem = res.points("finetune")
    assert len(back) == 1
    for a, b in zip(back, mem):
        assert a.compression == pytest.approx(b.compression, abs=1e-6)
        assert a.median_acc == pytest.approx(b.median_acc, abs=1e-6) and a.trials == b.trials


def test_emit_curve_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_curve([CurvePoint(1, 0, 1, 1, 1, 1)], blocker / "c.csv")


def test_two_trials_share_the_mask(prepared):
    cfg, data, baseline = prepared
    res = run_one_shot(micro(), data=data, baseline=baseline)
    assert len(res.records) == 2
    assert res.records[0].mask_digest == res.records[1].mask_digest
    assert res.records[0].seed != res.records[1].seed


def test_unachievable_point_is_recorded_and_run_continues(prepared):
    cfg, data, baseline = prepared
    res = run_one_shot(micro(compressions=[0.5, 2.0], trials=1), data=data, baseline=baseline)
    assert len(res.errors) == 1 and "0.5" in res.errors[0]
    assert len(res.records) == 1


def test_identity_pruning_stays_near_baseline(prepared):
    cfg, data, baseline = prepared
    res = run_one_shot(micro(compressions=[1.0], trials=1, strategy=["finetune", "weight_rewind"]),
                       data=data, baseline=baseline)
    ft = next(r for r in res.records if r.strategy == "finetune")
    wr = next(r for r in res.records if r.strategy == "weight_rewind")
    assert ft.sparsity == 0.0 and abs(ft.accuracy - res.baseline_accuracy) <= 0.1
    assert wr.retrain_iterations == 12 and wr.rewind_iteration == 4


def test_budget_accounting(prepared):
    cfg, data, baseline = prepared
    res = run_one_shot(cfg, data=data, baseline=baseline)
    n, k = cfg.optim.total_iterations, cfg.rewind_iteration
    want = {"finetune": n, "lr_rewind": n, "weight_rewind": n - k}
    assert all(r.retrain_iterations == want[r.strategy] for r in res.records)
    assert [r.compression for r in res.records] == sorted(r.compression for r in res.records)


def test_iterative_rounds(prepared):
    cfg, data, baseline = prepared
    res = run_iterative(micro(mode="iterative", rounds=2, trials=1,
                              strategy=["weight_rewind", "lr_rewind"]), data=data, baseline=baseline)
    for s in ("weight_rewind", "lr_rewind"):
        recs = sorted((r for r in res.records if r.strategy == s), key=lambda r: r.round)
        assert [round(r.target_sparsity, 6) for r in recs] == [0.3, 0.51]
        assert [r.sparsity for r in recs] == pytest.approx([0.3, 0.51], abs=1e-4)


def test_baseline_digest_shared(prepared):
    cfg, data, baseline = prepared
    a = run_one_shot(micro(trials=1), data=data, baseline=baseline)
    b = run_one_shot(micro(trials=1, compressions=[4.0]), data=data, baseline=baseline)
    assert a.baseline_digest == b.baseline_digest


def test_outputs_and_json_mirror(prepared, tmp_path):
    cfg, data, baseline = prepared
    res = run_one_shot(cfg, data=data, baseline=baseline)
    paths = write_outputs(res, tmp_path)
    assert {p.name for p in paths} == {"curve_finetune.csv", "curve_weight_rewind.csv",
                                       "curve_lr_rewind.csv", "result.json"}
    back = read_result_json(tmp_path / "result.json")
    assert back.records == res.records and back.baseline_accuracy == res.baseline_accuracy
    with pytest.raises(ValueError, match="strategy="):
        emit_curve(res, tmp_path / "x.csv")


def test_table_rows_schema():
    res = ExperimentResult([rec(0.9374, strategy="lr_rewind", c=1 / (1 - 0.893))], baseline_accuracy=0.9346)
    rows = res.table("ResNet-110", "CIFAR-10")
    assert rows[0] == {"network": "ResNet-110", "dataset": "CIFAR-10", "retraining": "None",
                       "sparsity": "0%", "test_accuracy": "93.46%"}
    assert rows[1]["retraining"] == "LR rewinding" and rows[1]["sparsity"] == "89.3%"
    assert rows[1]["test_accuracy"] == "93.74%"


def test_resnet110_preset_serializes_table5_row():
    from rewindlab.config import parse_config
    c = parse_config("preset:resnet110-cifar10", ["compressions=[]", "sparsities=[0.893]"])
    assert c.target_sparsities == [0.893] and c.model == "resnet110"


def test_process_workers_match_serial(prepared):
    cfg, data, baseline = prepared
    a = run_one_shot(micro(trials=2), data=data, baseline=baseline)
    b = run_one_shot(micro(trials=2, workers=2), data=data, baseline=baseline)
    assert [r.accuracy for r in a.records] == [r.accuracy for r in b.records]


def test_write_result_json_is_stable(prepared, tmp_path):
    cfg, data, baseline = prepared
    res = run_one_shot(micro(trials=1), data=data, baseline=baseline)
    write_result_json(res, tmp_path / "a.json")
    write_result_json(res, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert np.isfinite(res.baseline_accuracy)
