"""Checkpoint history and the three post-pruning retraining strategies.

Optimizer velocity is never rewound: every retraining run starts from zero
velocity. Snapshots hold the trainable weights and the BN moving statistics.
"""
from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import models as M
from .optim import LrSchedule
from .prune import PruneMask, _atomic_write, apply_mask_
from .train import TrainConfig, TrainData, train

CHECKPOINT_MAGIC = b"RWLC"
CHECKPOINT_VERSION = 1
DEFAULT_CADENCE = 1000
STRATEGIES = ("finetune", "weight_rewind", "lr_rewind")
FINETUNE_LR = 0.001


def snapshot_iterations(total_iterations: int, cadence: int = DEFAULT_CADENCE,
                        boundaries: Iterable[int] = ()) -> list[int]:
    """Iterations in [0, N) to snapshot: multiples of ``cadence`` plus schedule boundaries.

    Training additionally records the final state at N.
    """
    if cadence <= 0:
        raise ValueError(f"cadence must be positive, got {cadence}")
    its = set(range(0, total_iterations, cadence)) | {0}
    its |= {b for b in boundaries if 0 <= b < total_iterations}
    return sorted(its)


class CheckpointStore:
    """Iteration-indexed, bit-exact copies of a model's full state."""

    def __init__(self, run_id: str = "run", cadence: int = DEFAULT_CADENCE,
                 directory: str | os.PathLike | None = None):
        self.run_id = run_id
        self.cadence = cadence
        self.directory = Path(directory) if directory is not None else None
        self._snaps: dict[int, dict[str, np.ndarray]] = {}

    def __contains__(self, iteration: int) -> bool:
        return iteration in self._snaps

    def __len__(self) -> int:
        return len(self._snaps)

    @property
    def iterations(self) -> list[int]:
        return sorted(self._snaps)

    def snapshot(self, iteration: int, state: Mapping[str, np.ndarray]) -> None:
        if iteration in self._snaps:
            raise ValueError(f"iteration {iteration} already stored in run {self.run_id!r}")
        snap = {k: np.array(v, copy=True) for k, v in state.items()}
        self._snaps[iteration] = snap
        if self.directory is not None:
            write_checkpoint(self.path_for(iteration), self.run_id, iteration, snap)

    def restore(self, iteration: int) -> dict[str, np.ndarray]:
        if iteration not in self._snaps:
            raise KeyError(f"no snapshot at iteration {iteration}; available: {self.iterations}")
        return {k: v.copy() for k, v in self._snaps[iteration].items()}

    def path_for(self, iteration: int) -> Path:
        assert self.directory is not None
        return self.directory / f"{self.run_id}-{iteration:09d}.rwlc"

    @classmethod
    def load(cls, directory: str | os.PathLike, run_id: str | None = None) -> "CheckpointStore":
        directory = Path(directory)
        store = None
        for f in sorted(directory.glob("*.rwlc")):
            rid, it, tensors = read_checkpoint(f)
            if run_id is not None and rid != run_id:
                continue
            if store is None:
                store = cls(rid)
            store._snaps[it] = tensors
        if store is None:
            raise FileNotFoundError(f"no checkpoints in {directory}")
        store.directory = directory
        return store


def write_checkpoint(path: str | os.PathLike, run_id: str, iteration: int,
                     tensors: Mapping[str, np.ndarray]) -> None:
    """RWLC file, little-endian.

    b"RWLC", u8 version, u32 run-id length, UTF-8 run id, u64 iteration, then
    per tensor until EOF: u32 name length, UTF-8 name, u32 rank, rank x u32
    dims, raw float32 values in C order.
    """
    rid = run_id.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(rid)), rid,
             struct.pack("<Q", iteration)]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            if not np.array_equal(arr.astype(np.float32), arr):
                raise ValueError(f"{name!r} is {arr.dtype} and not representable as float32")
            arr = arr.astype(np.float32)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    _atomic_write(Path(path), b"".join(parts))


def read_checkpoint(path: str | os.PathLike) -> tuple[str, int, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    version, n = struct.unpack_from("<BI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 9
    run_id = buf[off:off + n].decode("utf-8")
    off += n
    (iteration,) = struct.unpack_from("<Q", buf, off)
    off += 8
    tensors = {}
    while off < len(buf):
        (k,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + k].decode("utf-8")
        off += k
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = int(np.prod(shape))
        if off + 4 * count > len(buf):
            raise ValueError(f"{path}: truncated at byte {off} reading {name!r}")
        tensors[name] = np.frombuffer(buf, "<f4", count, off).astype(np.float32).reshape(shape)
        off += 4 * count
    return run_id, iteration, tensors


def checkpoint_iteration(path: str | os.PathLike) -> int:
    m = re.search(r"-(\d+)\.rwlc$", str(path))
    if not m:
        raise ValueError(f"not a checkpoint filename: {path}")
    return int(m.group(1))


@dataclass(frozen=True)
class RetrainPlan:
    strategy: str
    rewind_iteration: int
    retrain_iterations: int
    lr_schedule_offset: int
    finetune_lr: float = FINETUNE_LR

    @classmethod
    def make(cls, strategy: str, total_iterations: int, rewind_iteration: int | None = None,
             finetune_lr: float = FINETUNE_LR) -> "RetrainPlan":
        n = total_iterations
        if strategy == "finetune":
            return cls(strategy, n, n, 0, finetune_lr)
        if strategy == "lr_rewind":
            return cls(strategy, n, n, 0, finetune_lr)
        if strategy == "weight_rewind":
            k = n // 4 if rewind_iteration is None else rewind_iteration
            if not 0 <= k <= n:
                raise ValueError(f"rewind iteration {k} outside [0, {n}]")
            return cls(strategy, k, n - k, k, finetune_lr)
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")

    def schedule(self, schedule: LrSchedule) -> LrSchedule:
        """The schedule this plan consumes (constant for fine-tuning)."""
        if self.strategy == "finetune":
            return LrSchedule.constant(self.finetune_lr, self.retrain_iterations) \
                if self.retrain_iterations else LrSchedule.constant(self.finetune_lr, 1)
        return schedule


def finetune(model: M.Model, mask: PruneMask, total_iterations: int, finetune_lr: float,
             data: TrainData, *, seed: int, config: TrainConfig = TrainConfig()) -> M.Model:
    """N steps at a constant small learning rate from the pruned weights."""
    out = model.copy()
    apply_mask_(out.params, mask)
    if total_iterations == 0:
        return out
    return train(out, data, LrSchedule.constant(finetune_lr, total_iterations), total_iterations,
                 seed=seed, config=config, mask=mask)


def rewound_state(store: CheckpointStore, rewind_iteration: int, template: M.Model,
                  mask: PruneMask) -> M.Model:
    """Snapshot-K weights (and BN statistics) with the mask applied."""
    try:
        state = store.restore(rewind_iteration)
    except KeyError:
        raise KeyError(f"cannot rewind to iteration {rewind_iteration}; "
                       f"stored snapshots: {store.iterations}") from None
    out = template.copy()
    out.load_state(state)
    apply_mask_(out.params, mask)
    return out


def weight_rewind(store: CheckpointStore, rewind_iteration: int, mask: PruneMask,
                  schedule: LrSchedule, template: M.Model, data: TrainData, *, seed: int,
                  config: TrainConfig = TrainConfig(), reset_schedule: bool = False) -> M.Model:
    """Restore surviving weights to iteration K, then train N-K steps on lr(K)..lr(N-1).

    With ``reset_schedule`` the retrain instead runs all N steps on
    lr(0)..lr(N-1); at K=N this is learning-rate rewinding.
    """
    n = schedule.total_iterations
    if not 0 <= rewind_iteration <= n:
        raise ValueError(f"rewind iteration {rewind_iteration} outside [0, {n}]")
    out = rewound_state(store, rewind_iteration, template, mask)
    start = 0 if reset_schedule else rewind_iteration
    return train(out, data, schedule, n - start, start=start, seed=seed, config=config, mask=mask)


def lr_rewind(model: M.Model, mask: PruneMask, schedule: LrSchedule, data: TrainData, *,
              seed: int, config: TrainConfig = TrainConfig()) -> M.Model:
    """Keep the converged pruned weights, replay the whole schedule: N steps on lr(0)..lr(N-1)."""
    out = model.copy()
    apply_mask_(out.params, mask)
    return train(out, data, schedule, schedule.total_iterations, start=0, seed=seed,
                 config=config, mask=mask)


def retrain(plan: RetrainPlan, model: M.Model, mask: PruneMask, schedule: LrSchedule,
            store: CheckpointStore, data: TrainData, *, seed: int,
            config: TrainConfig = TrainConfig()) -> M.Model:
    if plan.strategy == "finetune":
        return finetune(model, mask, plan.retrain_iterations, plan.finetune_lr, data,
                        seed=seed, config=config)
    if plan.strategy == "weight_rewind":
        return weight_rewind(store, plan.rewind_iteration, mask, schedule, model, data,
                             seed=seed, config=config)
    return lr_rewind(model, mask, schedule, data, seed=seed, config=config)
