"""Mini-batch SGD under dropping masks, with the step-indexed lr schedule.

Schedule: the main phase decays the learning rate by a constant factor at
``decay_drops`` evenly spaced boundaries, reaching ``final_lr_ratio * base_lr``
where the baseline's main phase ends. The last ``fine_tune_fraction`` of any
phase runs at one tenth of that end-of-main-phase rate. Retraining phases run
the same curve ``speed`` times faster along the step axis (2 by default).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .layers import Network, backward, forward
from .masks import apply_masks, clip_after_update


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    final_lr_ratio: float = 2.0 / 3.0
    decay_drops: int = 10
    fine_tune_fraction: float = 1.0 / 7.0
    fine_tune_lr_factor: float = 0.1
    retrain_speed: float = 2.0
    steps_baseline: int = 4000
    steps_retrain: int = 2000
    batch_size: int = 32
    momentum: float = 0.9
    init_scale: float = 1.0
    seed: int = 0
    from_scratch: bool = False

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.steps_baseline < 1 or self.steps_retrain < 1:
            raise ValueError("step counts must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.fine_tune_fraction < 1.0:
            raise ValueError("fine_tune_fraction must be in [0, 1)")
        if not 0.0 < self.final_lr_ratio <= 1.0:
            raise ValueError("final_lr_ratio must be in (0, 1]")
        if self.decay_drops < 1:
            raise ValueError("decay_drops must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def fine_tune_steps(self, phase_steps: int) -> int:
        return int(round(self.fine_tune_fraction * phase_steps))

    @property
    def reference_main_steps(self) -> int:
        return self.steps_baseline - self.fine_tune_steps(self.steps_baseline)


def lr_at(step: int, phase_steps: int, cfg: TrainConfig, speed: float = 1.0) -> float:
    """Learning rate at ``step`` of a phase lasting ``phase_steps`` steps."""
    main = phase_steps - cfg.fine_tune_steps(phase_steps)
    ref = max(cfg.reference_main_steps, 1)
    gamma = cfg.final_lr_ratio ** (1.0 / cfg.decay_drops)

    def main_lr(t):
        return cfg.base_lr * gamma ** math.floor(speed * t * cfg.decay_drops / ref)

    if step < main:
        return main_lr(step)
    return main_lr(main) * cfg.fine_tune_lr_factor


class SGD:
    """Plain SGD with optional heavy-ball momentum on every weight and bias."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity = {}

    def step(self, net: Network, grads: dict, lr: float):
        for name, g in grads.items():
            for key in ("W", "b"):
                p = net.params[name][key]
                if self.momentum:
                    v = self.velocity.setdefault((name, key), np.zeros_like(p))
                    v *= self.momentum
                    v -= lr * g[key]
                    p += v
                else:
                    p -= lr * g[key]


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        tail = self.losses[-50:]
        return float(np.mean(tail)) if tail else float("nan")


class BatchSampler:
    """Fresh permutation per epoch, drawn from the supplied generator."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._perm, self._pos = self.rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._perm, self._pos = self.rng.permutation(self.n), 0
        idx = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def train_steps(
    net: Network,
    X,
    y,
    steps: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
    masks=(),
    speed: float = 1.0,
    callback=None,
    l1: dict | None = None,
) -> TrainLog:
    """Train ``net`` in place for ``steps`` mini-batches.

    Per step: forward/backward -> SGD update -> clip dropped weights. Masks are
    applied once before the first forward, so every forward sees a sparse net.
    ``l1`` maps layer names to L1 coefficients added to the weight gradient.
    ``callback(step, net, loss)`` runs after the clip of each step.
    """
    apply_masks(net, masks)
    opt = SGD(cfg.momentum)
    sampler = BatchSampler(len(X), cfg.batch_size, rng)
    log = TrainLog()
    for step in range(steps):
        idx = sampler.next()
        res = forward(net, X[idx], mode="train", rng_seed=rng)
        loss, grads = backward(net, res, y[idx])
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        if l1:
            for name, coeff in l1.items():
                grads[name]["W"] = grads[name]["W"] + coeff * np.sign(net.params[name]["W"])
        lr = lr_at(step, steps, cfg, speed)
        opt.step(net, grads, lr)
        clip_after_update(net, masks)
        log.losses.append(loss)
        log.lrs.append(lr)
        if callback is not None:
            callback(step, net, loss)
    return log
