"""Adam/AdamW, learning-rate schedules, smoothed cross entropy, accuracy.

The optimizer works on flat name -> array dicts and mutates parameters in
place; OptimizerState is single-writer, updated once per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GradientError(RuntimeError):
    """A gradient tensor contained NaN or infinity; the message names it."""


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
    decay_mode: str = "decoupled",
) -> None:
    """One bias-corrected Adam step over every parameter, in place.

    decay_mode "decoupled" (AdamW) scales each parameter by (1 - lr * wd)
    before applying the Adam delta; "coupled" adds wd * param to the gradient
    instead (plain Adam with L2), matching the pretraining recipe taken
    literally. Raises GradientError on any non-finite gradient, naming the
    offending parameter.
    """
    if decay_mode not in ("decoupled", "coupled"):
        raise ValueError(f"decay_mode must be 'decoupled' or 'coupled', got {decay_mode!r}")
    if lr < 0.0:
        raise ValueError("lr must be >= 0")
    for name in params:
        if not np.isfinite(grads[name]).all():
            raise GradientError(f"non-finite gradient for parameter {name!r}")

    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if decay_mode == "coupled" and weight_decay:
            g = g + weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if decay_mode == "decoupled" and weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm (accumulated in float64).
    """
    sq = 0.0
    for g in grads.values():
        sq += float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64)))
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate curve parameters for one training run.

    kind "warmup_cosine": linear from eta0 to eta_max over warmup_epochs, then
    cosine to 0 at total_epochs, keyed on fractional epochs.
    kind "one_cycle": linear from eta_max/div to eta_max over the first
    ramp_frac of all steps, then cosine down to eta_max/(div*final_div).
    """

    kind: str
    eta_max: float
    warmup_epochs: float
    total_epochs: int
    steps_per_epoch: int
    eta0: float = 0.0
    div: float = 25.0
    ramp_frac: float = 0.3
    final_div: float = 100.0

    def __post_init__(self):
        if self.kind not in ("warmup_cosine", "one_cycle"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.eta_max <= 0.0:
            raise ValueError("eta_max must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def warmup_cosine_schedule(
    eta_max: float, warmup_epochs: float, total_epochs: int, batch_size: int, steps_per_epoch: int
) -> LrSchedule:
    """Fine-tuning/baseline schedule; eta0 = eta_max / (batch_size * total_epochs)."""
    return LrSchedule(
        kind="warmup_cosine",
        eta_max=eta_max,
        warmup_epochs=warmup_epochs,
        total_epochs=total_epochs,
        steps_per_epoch=steps_per_epoch,
        eta0=eta_max / (batch_size * total_epochs),
    )


def one_cycle_schedule(eta_peak: float, total_epochs: int, steps_per_epoch: int) -> LrSchedule:
    return LrSchedule(
        kind="one_cycle",
        eta_max=eta_peak,
        warmup_epochs=0,
        total_epochs=total_epochs,
        steps_per_epoch=steps_per_epoch,
    )


def warmup_cosine_lr(epoch_fraction: float, sched: LrSchedule) -> float:
    """LR at a fractional epoch in [0, total_epochs]."""
    if sched.kind != "warmup_cosine":
        raise ValueError("schedule is not warmup_cosine")
    t = min(max(epoch_fraction, 0.0), float(sched.total_epochs))
    if t < sched.warmup_epochs:
        return sched.eta0 + (sched.eta_max - sched.eta0) * (t / sched.warmup_epochs)
    span = sched.total_epochs - sched.warmup_epochs
    return 0.5 * sched.eta_max * (1.0 + math.cos(math.pi * (t - sched.warmup_epochs) / span))


def one_cycle_lr(step: int, sched: LrSchedule) -> float:
    """LR at a step index in [0, total_steps]."""
    if sched.kind != "one_cycle":
        raise ValueError("schedule is not one_cycle")
    total = sched.total_steps
    ramp = sched.ramp_frac * total
    start = sched.eta_max / sched.div
    final = sched.eta_max / (sched.div * sched.final_div)
    s = min(max(float(step), 0.0), float(total))
    if s <= ramp:
        return start + (sched.eta_max - start) * (s / ramp)
    return final + 0.5 * (sched.eta_max - final) * (1.0 + math.cos(math.pi * (s - ramp) / (total - ramp)))


def schedule_lr(sched: LrSchedule, step: int) -> float:
    """Dispatch on schedule kind; warmup_cosine is keyed on fractional epochs."""
    if sched.kind == "warmup_cosine":
        return warmup_cosine_lr(step / sched.steps_per_epoch, sched)
    return one_cycle_lr(step, sched)


def smoothed_cross_entropy(logits: np.ndarray, label: int, smoothing: float) -> float:
    """Cross entropy of one logit vector against the smoothed one-hot target.

    Target mass: (1 - smoothing) on the true class plus smoothing / n_classes
    on every class (the true one included). Computed with log-sum-exp
    stability.
    """
    loss, _ = smoothed_cross_entropy_batch(np.asarray(logits)[None, :], np.array([label]), smoothing)
    return loss


def smoothed_cross_entropy_batch(
    logits: np.ndarray, labels: np.ndarray, smoothing: float, n_classes: int | None = None
) -> tuple[float, np.ndarray]:
    """Mean smoothed cross entropy over a batch and its gradient w.r.t. the logits."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    n_c = logits.shape[-1]
    if n_classes is not None and n_classes != n_c:
        raise ValueError(f"logit width {n_c} != n_classes {n_classes}")
    b = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp

    q = np.full_like(logits, smoothing / n_c)
    q[np.arange(b), labels] += 1.0 - smoothing
    loss = float(-(q * logp).sum(axis=-1).mean(dtype=np.float64))
    dlogits = (np.exp(logp) - q) / b
    return loss, dlogits.astype(logits.dtype)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the label; ties go to the lowest index."""
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("logits must be a nonempty (B, n_classes) batch")
    return float((logits.argmax(axis=-1) == np.asarray(labels)).mean())
