"""One-shot and iterative pruning experiments, trial aggregation and curve files."""
from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import data as D
from . import models as M
from .config import ExperimentConfig
from .prune import PruneMask, compression_of, iterative_sparsity, prune_structured, \
    prune_unstructured, sparsity_of
from .rewind import CheckpointStore, RetrainPlan, retrain, snapshot_iterations
from .train import TrainData, derive_seed, evaluate, train

log = logging.getLogger(__name__)

CURVE_HEADER = ("compression", "sparsity", "median_acc", "ci_low", "ci_high", "trials")
CI_PERCENTILES = (10.0, 90.0)
TABLE_NAMES = {"finetune": "finetuning", "weight_rewind": "weight rewinding",
               "lr_rewind": "LR rewinding"}


@dataclass(frozen=True)
class TrialRecord:
    strategy: str
    trial: int
    round: int
    target_sparsity: float
    sparsity: float
    compression: float
    accuracy: float
    retrain_iterations: int
    rewind_iteration: int
    seed: int
    mask_digest: str


@dataclass(frozen=True)
class CurvePoint:
    compression: float
    sparsity: float
    median_acc: float
    ci_low: float
    ci_high: float
    trials: int
    strategy: str = ""


@dataclass
class ExperimentResult:
    records: list[TrialRecord] = field(default_factory=list)
    baseline_accuracy: float | None = None
    baseline_digest: str = ""
    errors: list[str] = field(default_factory=list)
    config: dict[str, Any] | None = None

    def __post_init__(self):
        self.records.sort(key=lambda r: (r.compression, r.strategy, r.round, r.trial))

    @property
    def strategies(self) -> list[str]:
        return sorted({r.strategy for r in self.records})

    def points(self, strategy: str | None = None) -> list[CurvePoint]:
        recs = [r for r in self.records if strategy is None or r.strategy == strategy]
        return aggregate(recs)

    def table(self, network: str = "", dataset: str = "") -> list[dict[str, str]]:
        """Rows shaped like a per-network results table."""
        rows = []
        if self.baseline_accuracy is not None:
            rows.append({"network": network, "dataset": dataset, "retraining": "None",
                         "sparsity": "0%", "test_accuracy": f"{100 * self.baseline_accuracy:.2f}%"})
        for p in self.points():
            rows.append({"network": network, "dataset": dataset,
                         "retraining": TABLE_NAMES.get(p.strategy, p.strategy),
                         "sparsity": f"{100 * p.sparsity:.1f}%",
                         "test_accuracy": f"{100 * p.median_acc:.2f}%"})
        return rows


def aggregate_values(values: Sequence[float]) -> tuple[float, float, float]:
    """Median and the 10th/90th percentile band (linear interpolation)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    lo, hi = np.percentile(v, CI_PERCENTILES, method="linear")
    return float(np.median(v)), float(lo), float(hi)


def aggregate(records: Sequence[TrialRecord]) -> list[CurvePoint]:
    """One point per (strategy, round, target sparsity), sorted by compression."""
    groups: dict[tuple, list[TrialRecord]] = {}
    for r in records:
        groups.setdefault((r.strategy, r.round, round(r.target_sparsity, 12)), []).append(r)
    points = []
    for (strategy, _, _), recs in groups.items():
        med, lo, hi = aggregate_values([r.accuracy for r in recs])
        points.append(CurvePoint(float(np.median([r.compression for r in recs])),
                                 float(np.median([r.sparsity for r in recs])),
                                 med, lo, hi, len(recs), strategy))
    points.sort(key=lambda p: (p.compression, p.strategy))
    return points


def emit_curve(result: ExperimentResult | Sequence[CurvePoint], path: str | os.PathLike,
               strategy: str | None = None) -> Path:
    """Write the accuracy-vs-compression CSV (6-decimal fixed point)."""
    if isinstance(result, ExperimentResult):
        if strategy is None and len(result.strategies) > 1:
            raise ValueError(f"result holds {result.strategies}; pass strategy=")
        points = result.points(strategy)
    else:
        points = list(result)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for p in points:
            w.writerow([f"{p.compression:.6f}", f"{p.sparsity:.6f}", f"{p.median_acc:.6f}",
                        f"{p.ci_low:.6f}", f"{p.ci_high:.6f}", str(p.trials)])
    return path


def read_curve(path: str | os.PathLike, strategy: str = "") -> list[CurvePoint]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != CURVE_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [CurvePoint(*(float(v) for v in row[:5]), int(row[5]), strategy) for row in reader]


def result_to_dict(result: ExperimentResult) -> dict[str, Any]:
    return {
        "baseline_accuracy": result.baseline_accuracy,
        "baseline_digest": result.baseline_digest,
        "errors": list(result.errors),
        "config": result.config,
        "records": [asdict(r) for r in result.records],
        "points": [asdict(p) for p in result.points()],
    }


def write_result_json(result: ExperimentResult, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result_to_dict(result), indent=2, sort_keys=True) + "\n")
    return path


def read_result_json(path: str | os.PathLike) -> ExperimentResult:
    d = json.loads(Path(path).read_text())
    return ExperimentResult([TrialRecord(**r) for r in d["records"]], d["baseline_accuracy"],
                            d["baseline_digest"], d["errors"], d["config"])


# ------------------------------------------------------------------- running

def load_data(config: ExperimentConfig) -> TrainData:
    ds = config.dataset
    if ds.name == "synthetic":
        train_set, val_set = D.synthetic_cifar(ds.train_size, ds.val_size, seed=ds.seed)
    else:
        strict = ds.scale == "full"
        train_set = D.load_cifar(ds.root, ds.name, "train", strict=strict)
        val_set = D.load_cifar(ds.root, ds.name, "validation", strict=strict)
        if ds.scale == "desk":
            train_set = D.stratified_subset(train_set, ds.train_size)
            val_set = D.stratified_subset(val_set, ds.val_size)
    return TrainData.prepare(train_set, val_set, ds.pad)


def weights_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def baseline_snapshots(config: ExperimentConfig) -> list[int]:
    n = config.optim.total_iterations
    its = set(snapshot_iterations(n, config.checkpoint_cadence, config.optim.boundaries))
    its |= {config.rewind_iteration, n}
    return sorted(its)


def train_baseline(config: ExperimentConfig, data: TrainData,
                   directory: str | os.PathLike | None = None) -> tuple[M.Model, CheckpointStore]:
    """Dense training run with the snapshot history that rewinding needs."""
    shape = tuple(int(v) for v in data.train.images.shape[1:])
    model = M.build(config.model, config.num_classes, seed=derive_seed(config.seed, "init"),
                    input_shape=shape)
    store = CheckpointStore(f"baseline-{config.seed}", config.checkpoint_cadence, directory)
    n = config.optim.total_iterations
    t0 = time.perf_counter()
    train(model, data, config.schedule, n, seed=derive_seed(config.seed, "baseline"),
          config=config.train_config, store=store, snapshot_at=baseline_snapshots(config))
    log.info("baseline %s: %d iterations in %.1fs", config.model, n, time.perf_counter() - t0)
    return model, store


def make_mask(config: ExperimentConfig, model: M.Model, sparsity: float,
              existing: PruneMask | None = None) -> PruneMask:
    kernels = {k: model.params[k] for k in model.spec.prunable_names}
    if config.prune.structured:
        mask = prune_structured(kernels, sparsity, existing, config.prune.exempt)
    else:
        mask = prune_unstructured(kernels, sparsity, config.prune.scope, existing, config.prune.exempt)
    if mask.nonzero_count == 0:
        raise ValueError(f"sparsity {sparsity} leaves no weights")
    return mask


@dataclass
class _Context:
    config: ExperimentConfig
    data: TrainData
    baseline: M.Model
    store: CheckpointStore


_CTX: _Context | None = None


def _init_worker(ctx: _Context) -> None:
    global _CTX
    _CTX = ctx


def _one_shot_job(job: tuple[int, float, str, int, PruneMask]) -> TrialRecord:
    _, target, strategy, trial, mask = job
    ctx = _CTX
    assert ctx is not None
    cfg = ctx.config
    n = cfg.optim.total_iterations
    plan = RetrainPlan.make(strategy, n, cfg.rewind_iteration, cfg.optim.finetune_lr)
    seed = derive_seed(cfg.seed + trial, strategy, 0)
    out = retrain(plan, ctx.baseline, mask, cfg.schedule, ctx.store, ctx.data, seed=seed,
                  config=cfg.train_config)
    return TrialRecord(strategy, trial, 0, target, sparsity_of(mask), compression_of(mask).value,
                       evaluate(out, ctx.data, bn_decay=cfg.bn_decay), plan.retrain_iterations,
                       plan.rewind_iteration, seed, mask.digest())


def _iterative_job(job: tuple[str, int]) -> list[TrialRecord]:
    strategy, trial = job
    ctx = _CTX
    assert ctx is not None
    cfg = ctx.config
    n = cfg.optim.total_iterations
    plan = RetrainPlan.make(strategy, n, cfg.rewind_iteration, cfg.optim.finetune_lr)
    current = ctx.baseline
    mask: PruneMask | None = None
    records = []
    for k in range(1, cfg.rounds + 1):
        target = iterative_sparsity(cfg.step_fraction, k)
        new_mask = make_mask(cfg, current, target, mask)
        if mask is not None and not new_mask.issubset(mask):
            raise AssertionError("iterative mask grew")  # pragma: no cover
        mask = new_mask
        seed = derive_seed(cfg.seed + trial, strategy, k)
        current = retrain(plan, current, mask, cfg.schedule, ctx.store, ctx.data, seed=seed,
                          config=cfg.train_config)
        records.append(TrialRecord(strategy, trial, k, target, sparsity_of(mask),
                                   compression_of(mask).value,
                                   evaluate(current, ctx.data, bn_decay=cfg.bn_decay),
                                   plan.retrain_iterations, plan.rewind_iteration, seed, mask.digest()))
    return records


def _run_jobs(ctx: _Context, fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        _init_worker(ctx)
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as ex:
        return list(ex.map(fn, jobs))


@contextlib.contextmanager
def _thread_limit(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def _prepare(config: ExperimentConfig, data: TrainData | None,
             baseline: tuple[M.Model, CheckpointStore] | None) -> _Context:
    data = data if data is not None else load_data(config)
    model, store = baseline if baseline is not None else train_baseline(config, data)
    return _Context(config, data, model, store)


def run_one_shot(config: ExperimentConfig, data: TrainData | None = None,
                 baseline: tuple[M.Model, CheckpointStore] | None = None,
                 masks: Sequence[PruneMask | None] | None = None) -> ExperimentResult:
    """Prune the one cached baseline to every target, retrain per strategy and trial.

    ``masks`` optionally supplies precomputed masks, one per target (None
    entries are recomputed).
    """
    with _thread_limit(config.deterministic):
        ctx = _prepare(config, data, baseline)
        result = ExperimentResult(baseline_accuracy=evaluate(ctx.baseline, ctx.data, bn_decay=config.bn_decay),
                                  baseline_digest=weights_digest(ctx.baseline.params),
                                  config=config.to_dict())
        jobs = []
        for i, s in enumerate(config.target_sparsities):
            try:
                if not 0.0 <= s < 1.0 or math.isnan(s):
                    raise ValueError(f"target sparsity {s} outside [0, 1)")
                given = masks[i] if masks is not None and i < len(masks) else None
                mask = given if given is not None else make_mask(config, ctx.baseline, s)
            except ValueError as exc:
                label = config.compressions[i] if config.compressions else s
                result.errors.append(f"target {label}: {exc}")
                continue
            for strategy in config.strategy:
                for trial in range(config.trials):
                    jobs.append((i, s, strategy, trial, mask))
        result.records.extend(_run_jobs(ctx, _one_shot_job, jobs, config.workers))
        result.__post_init__()
        return result


def run_iterative(config: ExperimentConfig, data: TrainData | None = None,
                  baseline: tuple[M.Model, CheckpointStore] | None = None) -> ExperimentResult:
    """Rounds of prune-by-``step_fraction`` and retrain, one lineage per strategy and trial."""
    with _thread_limit(config.deterministic):
        ctx = _prepare(config, data, baseline)
        result = ExperimentResult(baseline_accuracy=evaluate(ctx.baseline, ctx.data, bn_decay=config.bn_decay),
                                  baseline_digest=weights_digest(ctx.baseline.params),
                                  config=config.to_dict())
        jobs = [(s, t) for s in config.strategy for t in range(config.trials)]
        try:
            for recs in _run_jobs(ctx, _iterative_job, jobs, config.workers):
                result.records.extend(recs)
        except ValueError as exc:
            result.errors.append(str(exc))
        result.__post_init__()
        return result


def run_experiment(config: ExperimentConfig, **kwargs) -> ExperimentResult:
    if config.mode == "iterative":
        return run_iterative(config, **kwargs)
    return run_one_shot(config, **kwargs)


def write_outputs(result: ExperimentResult, out_dir: str | os.PathLike) -> list[Path]:
    """curve_<strategy>.csv per strategy plus result.json."""
    out_dir = Path(out_dir)
    paths = [emit_curve(result, out_dir / f"curve_{s}.csv", s) for s in result.strategies]
    paths.append(write_result_json(result, out_dir / "result.json"))
    return paths
