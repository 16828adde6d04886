"""Learning-rate schedules and the cubic sparsity schedule.

All functions are pure in (step, spec).  Steps are 1-based and inclusive of
the total, matching the training loop's convention of computing the rate for
the step about to be taken.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class ScheduleRangeError(ValueError):
    """Step outside the domain of a schedule."""


@dataclass(frozen=True)
class CosineSpec:
    """Linear warmup to ``peak_lr`` followed by cosine decay to ``end_lr``.

    The decay phase is evaluated as
    ``end + (peak - end) * (1 + cos(pi * (t - T0) / (T - T0))) / 2`` so the
    endpoints come out exact in floating point.  ``legacy_denominator``
    divides by ``T`` instead of ``T - T0`` inside the cosine; with a nonzero
    warmup that variant never reaches ``end_lr`` and exists only for fidelity
    experiments.
    """

    total_steps: int
    warmup_steps: int
    peak_lr: float
    end_lr: float
    legacy_denominator: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 <= warmup < total, got {self.warmup_steps}, {self.total_steps}"
            )
        if not self.peak_lr >= self.end_lr >= 0.0:
            raise ValueError(f"need peak >= end >= 0, got {self.peak_lr}, {self.end_lr}")


@dataclass(frozen=True)
class NaiveScheduleSpec:
    """Three back-to-back cosine schedules, one per pipeline stage."""

    pretrain: CosineSpec
    prune: CosineSpec
    recover: CosineSpec

    @property
    def total_steps(self) -> int:
        return self.pretrain.total_steps + self.prune.total_steps + self.recover.total_steps


@dataclass(frozen=True)
class SparsitySpec:
    """Cubic ramp from 0 to ``target_sparsity`` over ``pruning_steps``.

    ``warmup_steps`` delays the ramp; it is 0 inside the integrated pipeline
    and equals the learning-rate warmup inside the naive pipeline.
    """

    target_sparsity: float
    warmup_steps: int
    pruning_steps: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError(f"target sparsity must be in [0, 1), got {self.target_sparsity}")
        if self.warmup_steps < 0 or self.pruning_steps < 1:
            raise ValueError(
                f"need warmup >= 0 and pruning steps >= 1, got "
                f"{self.warmup_steps}, {self.pruning_steps}"
            )


def cosine_lr(t: int, spec: CosineSpec) -> float:
    if not 1 <= t <= spec.total_steps:
        raise ScheduleRangeError(f"step {t} outside [1, {spec.total_steps}]")
    if spec.warmup_steps > 0 and t <= spec.warmup_steps:
        return (t / spec.warmup_steps) * spec.peak_lr
    denom = spec.total_steps if spec.legacy_denominator else spec.total_steps - spec.warmup_steps
    phase = math.pi * (t - spec.warmup_steps) / denom
    return spec.end_lr + 0.5 * (spec.peak_lr - spec.end_lr) * (1.0 + math.cos(phase))


def naive_pipeline_lr(t: int, spec: NaiveScheduleSpec) -> float:
    if not 1 <= t <= spec.total_steps:
        raise ScheduleRangeError(f"step {t} outside [1, {spec.total_steps}]")
    t_l = spec.pretrain.total_steps
    t_p = spec.prune.total_steps
    if t <= t_l:
        return cosine_lr(t, spec.pretrain)
    if t <= t_l + t_p:
        return cosine_lr(t - t_l, spec.prune)
    return cosine_lr(t - t_l - t_p, spec.recover)


def integrated_lr(
    t: int,
    pretrain_steps: int,
    pruning_steps: int,
    recovery_steps: int,
    peak_lr: float,
    end_lr: float,
    warmup_steps: int = 0,
    legacy_denominator: bool = False,
) -> float:
    """Single cosine over all three stages; no mid-run warmups."""
    spec = CosineSpec(
        total_steps=pretrain_steps + pruning_steps + recovery_steps,
        warmup_steps=warmup_steps,
        peak_lr=peak_lr,
        end_lr=end_lr,
        legacy_denominator=legacy_denominator,
    )
    return cosine_lr(t, spec)


def resumed_lr(
    t: int,
    pretrain_steps: int,
    total_steps: int,
    peak_lr: float,
    end_lr: float,
    warmup_steps: int = 0,
    legacy_denominator: bool = False,
) -> float:
    """Continue the global cosine from offset ``pretrain_steps``.

    ``t`` counts steps taken after the loaded checkpoint, so
    ``resumed_lr(t) == cosine_lr(t + pretrain_steps)`` of the full schedule.
    """
    if not 1 <= t <= total_steps - pretrain_steps:
        raise ScheduleRangeError(f"step {t} outside [1, {total_steps - pretrain_steps}]")
    spec = CosineSpec(
        total_steps=total_steps,
        warmup_steps=warmup_steps,
        peak_lr=peak_lr,
        end_lr=end_lr,
        legacy_denominator=legacy_denominator,
    )
    return cosine_lr(t + pretrain_steps, spec)


def restarted_lr(
    t: int,
    total_steps: int,
    peak_lr: float,
    end_lr: float,
    warmup_steps: int = 0,
    legacy_denominator: bool = False,
) -> float:
    """Fresh warmup + cosine of length ``total_steps`` (naive-pipeline style)."""
    spec = CosineSpec(
        total_steps=total_steps,
        warmup_steps=warmup_steps,
        peak_lr=peak_lr,
        end_lr=end_lr,
        legacy_denominator=legacy_denominator,
    )
    return cosine_lr(t, spec)


def sparsity_at(t: int, spec: SparsitySpec) -> float:
    """Scheduled sparsity fraction at pruning-clock step ``t`` (1-based)."""
    if t < 1:
        raise ScheduleRangeError(f"step {t} outside [1, inf)")
    if t <= spec.warmup_steps:
        return 0.0
    if t <= spec.warmup_steps + spec.pruning_steps:
        u = (t - spec.warmup_steps) / spec.pruning_steps
        return spec.target_sparsity * (1.0 - (1.0 - u) ** 3)
    return spec.target_sparsity


def retained_count(t: int, hidden: int, spec: SparsitySpec) -> int:
    """Neurons kept at step ``t``: ceil((1 - s(t)) * h), floored at the target."""
    s = sparsity_at(t, spec)
    # 1e-12 slack keeps ceil() from jumping a count on fp noise in (1-s)*h.
    kept = math.ceil((1.0 - s) * hidden - 1e-12)
    final = math.ceil((1.0 - spec.target_sparsity) * hidden - 1e-12)
    return max(kept, final)
