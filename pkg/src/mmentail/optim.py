"""Adam with decoupled weight decay, plateau scheduler, and gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .nn import ShapeError


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One Adam update, in place on the arrays in ``params``.

    Weight decay is decoupled: params <- params * (1 - lr*wd) before the
    Adam delta, so the moment estimates never see the decay term.
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return params, state


@dataclass
class ReduceLROnPlateau:
    """Halve the learning rate after ``patience`` epochs without val-loss improvement."""

    state: OptimizerState
    patience: int = 3
    factor: float = 0.5
    best: float = np.inf
    stale: int = 0

    def update(self, val_loss: float) -> bool:
        if val_loss < self.best - 1e-12:
            self.best = val_loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.state.lr *= self.factor
            self.stale = 0
            return True
        return False


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches covering 0..n-1 once."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def grad_check(loss_fn: Callable[[], float], params: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], epsilon: float = 1e-5,
               n_coords: int = 120, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` recomputes the scalar loss from the (perturbed-in-place)
    arrays in ``params``; ``analytic`` holds the gradients under test. A
    random subsample of at least 100 coordinates is checked (all of them
    when there are fewer).
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    base = loss_fn()
    if not np.isfinite(base):
        raise ValueError(f"non-finite loss {base}")
    coords: list[tuple[str, int]] = []
    for name, p in params.items():
        coords.extend((name, i) for i in range(p.size))
    rng = np.random.default_rng(seed)
    n_check = max(n_coords, 100)
    if len(coords) > n_check:
        picks = rng.choice(len(coords), size=n_check, replace=False)
        coords = [coords[i] for i in picks]
    max_rel = 0.0
    for name, i in coords:
        flat = params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        loss_plus = loss_fn()
        flat[i] = orig - epsilon
        loss_minus = loss_fn()
        flat[i] = orig
        numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
        a = analytic[name].reshape(-1)[i]
        denom = max(abs(a), abs(numeric), 1e-6)
        max_rel = max(max_rel, abs(a - numeric) / denom)
    return max_rel


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_weighted_f1: float


@dataclass
class TrainingLog:
    entries: list[EpochStats]
    best_epoch: int

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_loss,val_acc,val_weighted_f1\n")
            for e in self.entries:
                fh.write(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},"
                         f"{e.val_acc!r},{e.val_weighted_f1!r}\n")
