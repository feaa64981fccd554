"""Adamax and step learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInput, TrainingDivergence
from .tensor import Tensor


@dataclass
class LrSchedule:
    """``initial * decay_factor**(epoch // decay_every)`` times any extra factors.

    ``extra_halvings`` holds ``(epoch, factor)`` pairs applied once the
    epoch is reached, e.g. ``[(7500, 0.25)]`` for "halved twice at 7500".
    """

    initial: float
    decay_factor: float = 1.0
    decay_every: int = 1
    extra_halvings: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.initial > 0:
            raise InvalidInput(f"initial learning rate must be > 0, got {self.initial}")
        if not 0 < self.decay_factor <= 1:
            raise InvalidInput(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise InvalidInput(f"decay_every must be >= 1, got {self.decay_every}")
        self.extra_halvings = [(int(e), float(f)) for e, f in self.extra_halvings]
        if any(f <= 0 for _, f in self.extra_halvings):
            raise InvalidInput("extra schedule factors must be positive")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise InvalidInput(f"epoch must be >= 0, got {epoch}")
    lr = schedule.initial * schedule.decay_factor ** (epoch // schedule.decay_every)
    for at, factor in schedule.extra_halvings:
        if at <= epoch:
            lr *= factor
    return lr


@dataclass
class AdamaxState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    u: list[np.ndarray] = field(default_factory=list)


def adamax_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamaxState, lr: float) -> AdamaxState:
    """One Adamax update, in place on ``params``; returns ``state``.

    m <- b1 m + (1-b1) g;  u <- max(b2 u, |g|);  p <- p - lr/(1-b1^t) * m/(u+eps)
    """
    if not lr > 0:
        raise InvalidInput(f"learning rate must be > 0, got {lr}")
    if len(grads) != len(params):
        raise InvalidInput("one gradient per parameter")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.u = [np.zeros_like(p.data) for p in params]
    offset = 0
    for j, g in enumerate(grads):
        if g is None:
            continue
        bad = ~np.isfinite(g)
        if bad.any():
            idx = offset + int(np.flatnonzero(bad.ravel())[0])
            raise TrainingDivergence(
                f"non-finite gradient in parameter {j} (flat index {idx})",
                {"parameter": j, "flat_index": idx},
            )
        offset += g.size
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    scale = lr / (1.0 - b1**state.step)
    for j, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[j] = b1 * state.m[j] + (1.0 - b1) * g
        state.u[j] = np.maximum(b2 * state.u[j], np.abs(g))
        denom = state.u[j] + eps
        with np.errstate(invalid="ignore", divide="ignore"):
            upd = np.where(denom > 0, state.m[j] / np.where(denom > 0, denom, 1.0), 0.0)
        p.data = p.data - scale * upd
    return state


def grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
