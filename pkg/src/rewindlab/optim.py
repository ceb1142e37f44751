"""Piecewise-constant learning rates, the regularized loss and Nesterov SGD."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Mapping, Sequence

import numpy as np

from . import engine as E
from .engine import Tensor

MOMENTUM = 0.9
BATCH_SIZE = 128


class TrainingDiverged(FloatingPointError):
    """A gradient or loss became NaN/Inf; the run is aborted."""


@dataclass(frozen=True)
class LrSchedule:
    """lr(t) = base_lr * product of multipliers[i] over boundaries[i] <= t."""

    base_lr: float
    boundaries: tuple[int, ...]
    multipliers: tuple[float, ...]
    total_iterations: int
    _values: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))
        if not self.base_lr >= 0:  # 0 is allowed: a frozen run
            raise ValueError(f"base_lr must be non-negative, got {self.base_lr}")
        if self.total_iterations <= 0:
            raise ValueError(f"total_iterations must be positive, got {self.total_iterations}")
        if len(self.boundaries) != len(self.multipliers):
            raise ValueError("boundaries and multipliers must have equal length")
        if any(b <= a for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError(f"boundaries must be strictly ascending: {self.boundaries}")
        if self.boundaries and (self.boundaries[0] <= 0 or self.boundaries[-1] >= self.total_iterations):
            raise ValueError(f"boundaries must lie in (0, {self.total_iterations}): {self.boundaries}")
        if any(m <= 0 for m in self.multipliers):
            raise ValueError(f"multipliers must be positive: {self.multipliers}")
        # decimal products so that e.g. 0.1 * 0.1 is exactly the double nearest 0.01
        acc = Decimal(repr(float(self.base_lr)))
        values = [float(acc)]
        for m in self.multipliers:
            acc *= Decimal(repr(m))
            values.append(float(acc))
        object.__setattr__(self, "_values", tuple(values))

    @classmethod
    def constant(cls, lr: float, total_iterations: int) -> "LrSchedule":
        return cls(lr, (), (), total_iterations)

    def lr_at(self, t: int) -> float:
        if not 0 <= t < self.total_iterations:
            raise ValueError(f"iteration {t} outside [0, {self.total_iterations})")
        k = 0
        for b in self.boundaries:
            if b <= t:
                k += 1
        return self._values[k]

    def scaled(self, total_iterations: int) -> "LrSchedule":
        """Same shape compressed/stretched to a new budget."""
        f = total_iterations / self.total_iterations
        return LrSchedule(self.base_lr, tuple(max(1, round(b * f)) for b in self.boundaries),
                          self.multipliers, total_iterations)

    def to_dict(self) -> dict:
        return {"base_lr": self.base_lr, "boundaries": list(self.boundaries),
                "multipliers": list(self.multipliers), "total_iterations": self.total_iterations}


def lr_at(schedule: LrSchedule, t: int) -> float:
    return schedule.lr_at(t)


def resnet_schedule() -> LrSchedule:
    return LrSchedule(0.1, (36000, 54000), (0.1, 0.1), 72000)


def wrn_schedule() -> LrSchedule:
    return LrSchedule(0.1, (32000, 48000, 64000), (0.2, 0.2, 0.2), 80000)


def loss(logits: Tensor, labels: np.ndarray, weights: Sequence[Tensor], l2: float) -> Tensor:
    """Mean softmax cross-entropy plus ``l2 * sum(w**2)`` over ``weights``."""
    xent = E.softmax_cross_entropy(logits, labels)
    if l2 == 0 or not weights:
        return xent
    return xent + E.sum_of_squares(list(weights)) * l2


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    momentum: float = MOMENTUM
    l2: float = 0.0
    t: int = 0

    @classmethod
    def zeros_like(cls, weights: Mapping[str, np.ndarray], momentum: float = MOMENTUM,
                   l2: float = 0.0, t: int = 0) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in weights.items()}, momentum, l2, t)


def sgd_step(state: OptimizerState, weights: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             schedule: LrSchedule, masks: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """One Nesterov step at lr(state.t), in place.

    v <- mu*v - lr*g ; w <- w + mu*v - lr*g. Masked entries get zero gradient,
    zero velocity and are re-zeroed after the update.
    """
    lr = schedule.lr_at(state.t)
    mu = state.momentum
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingDiverged(f"non-finite gradient for {name!r} at iteration {state.t} "
                                   f"({bad} of {np.size(g)} entries, lr={lr})")
    for name, w in weights.items():
        g = grads.get(name)
        if g is None:
            continue
        m = masks.get(name) if masks else None
        if m is not None:
            g = g * m
        v = state.velocity[name]
        v *= mu
        v -= lr * g
        w += mu * v - lr * g
        if m is not None:
            dead = ~m
            np.copyto(w, 0.0, where=dead)
            np.copyto(v, 0.0, where=dead)
    state.t += 1
    return weights


def check_finite_loss(value: float, t: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at iteration {t}")
