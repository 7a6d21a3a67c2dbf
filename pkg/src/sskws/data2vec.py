"""Masked-prediction pretraining machinery: span masks, EMA teacher, targets, loss.

The teacher holds an exponential moving average of the student's encoder
weights (delta <- tau * delta + (1 - tau) * theta) and never sees a gradient.
Targets are the average of the per-time-step standardized hidden states from
the top K teacher blocks; the student is penalized with MSE at masked steps
only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Encoder tensors mirrored into the teacher: everything except the heads and
# the mask token, which only the student owns.
STUDENT_ONLY_PREFIXES = ("cls_head.", "reg_head.", "mask_token")

COLLAPSE_VARIANCE_THRESHOLD = 0.01


@dataclass
class MaskSpec:
    """Boolean time mask plus the sampled span starts that produced it."""

    masked: np.ndarray
    start_indices: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class TauSchedule:
    """Linear ramp of the EMA decay from tau0 to tau_end over n_tau updates."""

    tau0: float = 0.999
    tau_end: float = 0.9999
    n_tau: int = 1000

    def __post_init__(self):
        if not (0.0 < self.tau0 <= self.tau_end < 1.0):
            raise ValueError("need 0 < tau0 <= tau_end < 1")
        if self.n_tau <= 0:
            raise ValueError("n_tau must be positive")


@dataclass
class TeacherState:
    """EMA copy of the student encoder weights; update_count tracks EMA steps."""

    weights: dict[str, np.ndarray]
    update_count: int = 0


@dataclass
class PretrainTargets:
    """Per-time-step targets plus per-contributing-block (mean, var) diagnostics."""

    targets: np.ndarray
    per_layer_stats: list[tuple[float, float]]


def is_encoder_param(name: str) -> bool:
    return not name.startswith(STUDENT_ONLY_PREFIXES)


def init_teacher(student: dict[str, np.ndarray]) -> TeacherState:
    """Teacher starts as an exact copy of the student's encoder weights."""
    return TeacherState(weights={k: v.copy() for k, v in student.items() if is_encoder_param(k)})


def sample_mask(seq_len: int, p_mask: float, span: int, rng: np.random.Generator) -> MaskSpec:
    """Sample a span mask over seq_len time steps.

    Each index is independently a span start with probability p_mask; spans of
    ``span`` steps are truncated at the sequence end and unioned. An empty mask
    is resampled once, and if still empty one span is forced at a uniformly
    random (untruncated) start, so at least one step is always masked.
    """
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError("p_mask must be in [0, 1]")
    if not 1 <= span <= seq_len:
        raise ValueError("span must be in [1, seq_len]")

    for _ in range(2):
        starts = np.flatnonzero(rng.random(seq_len) < p_mask)
        if starts.size:
            break
    else:
        starts = np.array([int(rng.integers(0, seq_len - span + 1))])

    masked = np.zeros(seq_len, dtype=bool)
    for s in starts:
        masked[s : s + span] = True
    return MaskSpec(masked=masked, start_indices=[int(s) for s in starts])


def apply_mask(tokens: np.ndarray, mask: MaskSpec | np.ndarray, mask_token: np.ndarray) -> np.ndarray:
    """Replace masked rows of a (..., T, d) token array with the mask token.

    The positional embedding is added downstream, after replacement. Accepts a
    MaskSpec or a boolean (..., T) array; unmasked rows pass through untouched.
    """
    masked = mask.masked if isinstance(mask, MaskSpec) else mask
    if tokens.shape[-2] != masked.shape[-1]:
        raise ValueError(f"mask length {masked.shape[-1]} != sequence length {tokens.shape[-2]}")
    return np.where(masked[..., None], mask_token.astype(tokens.dtype), tokens)


def tau_at(step: int, sched: TauSchedule) -> float:
    """EMA decay for update index ``step``: linear in step, clamped at tau_end."""
    if step < 0:
        raise ValueError("step must be >= 0")
    frac = min(step / sched.n_tau, 1.0)
    return sched.tau0 + (sched.tau_end - sched.tau0) * frac


def ema_update(teacher: TeacherState, student: dict[str, np.ndarray], tau: float) -> TeacherState:
    """In-place EMA update of every teacher tensor; increments update_count.

    Computed in the incremental form delta += (1 - tau) * (theta - delta),
    algebraically identical to tau * delta + (1 - tau) * theta but with an
    exact fixed point: equal teacher and student stay bit-identical under any
    update sequence. tau = 1 and tau = 0 short-circuit to "unchanged" and
    "copy of the student" exactly. Single-writer: called once per optimizer
    step, never concurrently with a teacher forward pass.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    for name, delta in teacher.weights.items():
        theta = student[name]
        if theta.shape != delta.shape:
            raise ValueError(f"teacher/student shape mismatch for {name}: {delta.shape} vs {theta.shape}")
        if tau == 0.0:
            delta[...] = theta
        elif tau != 1.0:
            delta += (1.0 - tau) * (theta - delta)
    teacher.update_count += 1
    return teacher


def build_targets(teacher_hiddens: list[np.ndarray], top_k: int, eps: float = 1e-6) -> PretrainTargets:
    """Average of the standardized hidden states from the top K blocks.

    Each time step's d-vector is normalized to zero mean and unit variance
    across the feature dimension (eps floors the variance), then the K
    normalized matrices are averaged. Computed on plain arrays detached from
    any gradient path.
    """
    if not 1 <= top_k <= len(teacher_hiddens):
        raise ValueError(f"top_k must be in [1, {len(teacher_hiddens)}]")
    acc = None
    stats = []
    for h in teacher_hiddens[-top_k:]:
        h = np.asarray(h)
        stats.append((float(h.mean()), float(h.var())))
        mu = h.mean(axis=-1, keepdims=True)
        var = h.var(axis=-1, keepdims=True)
        norm = (h - mu) / np.sqrt(var + eps)
        acc = norm if acc is None else acc + norm
    return PretrainTargets(targets=acc / top_k, per_layer_stats=stats)


def _as_bool_mask(mask: MaskSpec | np.ndarray) -> np.ndarray:
    return mask.masked if isinstance(mask, MaskSpec) else np.asarray(mask)


def pretrain_loss(
    predictions: np.ndarray, targets: PretrainTargets | np.ndarray, mask: MaskSpec | np.ndarray
) -> float:
    """MSE over masked time steps only, averaged over masked positions and features."""
    loss, _ = pretrain_loss_and_grad(predictions, targets, mask)
    return loss


def pretrain_loss_and_grad(
    predictions: np.ndarray, targets: PretrainTargets | np.ndarray, mask: MaskSpec | np.ndarray
) -> tuple[float, np.ndarray]:
    """Masked MSE and its gradient w.r.t. the predictions.

    Gradient entries at unmasked steps are exactly zero: perturbations there
    cannot change the loss.
    """
    tgt = targets.targets if isinstance(targets, PretrainTargets) else np.asarray(targets)
    masked = _as_bool_mask(mask)
    if predictions.shape != tgt.shape:
        raise ValueError(f"prediction shape {predictions.shape} != target shape {tgt.shape}")
    n_masked = int(masked.sum())
    if n_masked == 0:
        raise ValueError("mask selects no time steps")
    count = n_masked * predictions.shape[-1]
    diff = (predictions - tgt) * masked[..., None]
    loss = float((diff.astype(np.float64) ** 2).sum() / count)
    grad = diff * (2.0 / count)
    return loss, grad


def target_stats(targets: np.ndarray) -> dict[str, float]:
    """Collapse diagnostics over a batch of targets.

    Flattens all leading axes and reports the variance of the target vectors
    across the batch: the mean over feature dimensions and the smallest
    per-dimension variance. Near-zero values mean the targets have gone
    (nearly) constant.
    """
    flat = np.asarray(targets, dtype=np.float64).reshape(-1, targets.shape[-1])
    per_dim = flat.var(axis=0)
    return {"mean_variance": float(per_dim.mean()), "min_variance": float(per_dim.min())}


class CollapseMonitor:
    """Flags sustained low target variance (mean variance below threshold)."""

    def __init__(self, threshold: float = COLLAPSE_VARIANCE_THRESHOLD, patience: int = 3):
        self.threshold = threshold
        self.patience = patience
        self._streak = 0

    def update(self, mean_variance: float) -> bool:
        """Record one epoch's variance; True when the alarm should fire."""
        self._streak = self._streak + 1 if mean_variance < self.threshold else 0
        return self._streak >= self.patience
