"""The masked SGD training loop shared by baseline training and every retraining strategy."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import numpy as np

from . import models as M
from . import optim as O
from .data import AugmentPipeline, BatchStream, Dataset, augment
from .engine import Tensor

if TYPE_CHECKING:
    from .prune import PruneMask
    from .rewind import CheckpointStore

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    l2: float = 1e-4
    l2_scope: str = "all"  # "all" trainable tensors or "kernels" only
    momentum: float = O.MOMENTUM
    batch_size: int = O.BATCH_SIZE
    bn_decay: float | None = None
    augment: bool = True


@dataclass(frozen=True)
class TrainData:
    train: Dataset
    validation: Dataset
    pipeline: AugmentPipeline

    @classmethod
    def prepare(cls, train: Dataset, validation: Dataset, pad: int = 4) -> "TrainData":
        return cls(train, validation, AugmentPipeline.from_train(train, pad))


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labels, e.g. (trial seed, strategy, round)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def train(model: M.Model, data: TrainData, schedule: O.LrSchedule, steps: int, *, seed: int,
          config: TrainConfig = TrainConfig(), start: int = 0, mask: "PruneMask | None" = None,
          store: "CheckpointStore | None" = None, snapshot_at: Iterable[int] = ()) -> M.Model:
    """Run ``steps`` Nesterov steps in place, consuming lr(start) .. lr(start+steps-1).

    Velocity starts at zero. ``store`` receives a snapshot of the full state
    at every iteration in ``snapshot_at`` (state *before* that iteration's
    step, so iteration ``start + steps`` is the final state).
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if steps and start + steps > schedule.total_iterations:
        raise ValueError(f"iterations {start}..{start + steps} exceed schedule length "
                         f"{schedule.total_iterations}")
    spec = model.spec
    masks = mask.masks if mask is not None else None
    if masks:
        from .prune import apply_mask_
        apply_mask_(model.params, mask)
    l2_names = [p.name for p in spec.params if config.l2_scope == "all" or p.prunable]
    state = O.OptimizerState.zeros_like(model.params, config.momentum, config.l2, start)
    snaps = set(snapshot_at)
    stream = BatchStream(len(data.train), config.batch_size, seed)
    batches = iter(stream)
    images, labels = data.train.images, data.train.labels
    for t in range(start, start + steps):
        if store is not None and t in snaps:
            store.snapshot(t, model.state())
        idx = next(batches)
        if config.augment:
            x = augment(images[idx], data.pipeline, stream.aug_rng)
        else:
            x = data.pipeline.standardize(images[idx])
        x = x.astype(model.params[spec.params[0].name].dtype, copy=False)
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in model.params.items()}
        logits = M.forward(spec, params, model.bn_state, Tensor(x), True, config.bn_decay)
        loss = O.loss(logits, labels[idx], [params[k] for k in l2_names], config.l2)
        O.check_finite_loss(float(loss.data), t)
        if t % 500 == 0:
            log.debug("iteration %d lr %.5g loss %.4f", t, schedule.lr_at(t), float(loss.data))
        loss.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        O.sgd_step(state, model.params, grads, schedule, masks)
    end = start + steps
    if store is not None and end in snaps:
        store.snapshot(end, model.state())
    return model


def evaluate(model: M.Model, data: TrainData, batch_size: int = 500,
             bn_decay: float | None = None) -> float:
    """Top-1 accuracy on the validation split (standardization only)."""
    ds = data.validation
    correct = 0
    for start in range(0, len(ds), batch_size):
        x = data.pipeline.standardize(ds.images[start:start + batch_size])
        out = M.logits(model, x, training=False, bn_decay=bn_decay)
        correct += int(np.count_nonzero(out.argmax(axis=1) == ds.labels[start:start + batch_size]))
    return correct / len(ds)
