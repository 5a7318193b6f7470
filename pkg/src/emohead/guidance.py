"""Progressive guidance scheduling over the denoising trajectory.

Coarse-grained conditioning drives the early, high-noise steps and
fine-grained conditioning the later steps, with a linear alpha blend inside
each stage.  The step axis used throughout is *denoising progress*: index 0
is maximal noise and index T-1 the final, least-noisy step.  Training
timesteps are mapped onto this axis with :func:`progress_position`.

All operations are pure and schedules are immutable values, so concurrent
use is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch

RATIO_SUM_TOL = 1e-9


class GuidanceError(ValueError):
    pass


class DegenerateStageError(GuidanceError):
    pass


@dataclass(frozen=True)
class AlphaParams:
    """One blend stage: alpha falls linearly from alpha_max at t_start to
    alpha_min at t_end."""

    t_start: float
    t_end: float
    alpha_max: float = 1.0
    alpha_min: float = 0.5

    def __post_init__(self):
        if self.t_end <= self.t_start:
            raise DegenerateStageError(
                f"stage end {self.t_end} must exceed stage start {self.t_start}"
            )
        if self.alpha_max < self.alpha_min:
            raise GuidanceError(
                f"alpha_max {self.alpha_max} must be >= alpha_min {self.alpha_min}"
            )

    def alpha_at(self, t: float) -> float:
        return calculate_alpha(t, self.t_start, self.t_end, self.alpha_max, self.alpha_min)


def calculate_alpha(
    t: float,
    t_start: float,
    t_end: float,
    alpha_max: float = 1.0,
    alpha_min: float = 0.5,
) -> float:
    """Blend weight at position t within the stage [t_start, t_end].

    Normalized position p = (t - t_start) / (t_end - t_start), then
    alpha = alpha_max - p * (alpha_max - alpha_min).  Endpoints are exact:
    alpha(t_start) = alpha_max, alpha(t_end) = alpha_min.
    """
    if t_end <= t_start:
        raise DegenerateStageError(
            f"degenerate stage: t_end {t_end} must exceed t_start {t_start}"
        )
    if alpha_max < alpha_min:
        raise GuidanceError(f"alpha_max {alpha_max} < alpha_min {alpha_min}")
    if not t_start <= t <= t_end:
        raise GuidanceError(f"t={t} outside stage [{t_start}, {t_end}]")
    if t == t_start:
        return float(alpha_max)
    if t == t_end:
        return float(alpha_min)
    p = (t - t_start) / (t_end - t_start)
    return float(alpha_max - p * (alpha_max - alpha_min))


def _shapes_match(a, b) -> bool:
    return tuple(a.shape) == tuple(b.shape)


def _values_equal(a, b) -> bool:
    if a is b:
        return True
    if torch.is_tensor(a) or torch.is_tensor(b):
        return torch.is_tensor(a) and torch.is_tensor(b) and torch.equal(a, b)
    return bool(np.array_equal(a, b))


def _copy(a):
    return a.clone() if torch.is_tensor(a) else np.array(a, copy=True)


def blend(alpha: float, primary, secondary):
    """Convex combination alpha*primary + (1-alpha)*secondary.

    Degenerate cases are short-circuited so they are bit-exact: equal inputs
    return that value unchanged, and alpha of exactly 1 or 0 returns the
    corresponding input unchanged.
    """
    if not _shapes_match(primary, secondary):
        raise GuidanceError(
            f"embedding shape mismatch: {tuple(primary.shape)} vs {tuple(secondary.shape)}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise GuidanceError(f"blend weight {alpha} outside [0, 1]")
    if _values_equal(primary, secondary):
        return _copy(primary)
    if alpha == 1.0:
        return _copy(primary)
    if alpha == 0.0:
        return _copy(secondary)
    return alpha * primary + (1.0 - alpha) * secondary


def _smooth_alpha(t: float, t_start: float, t_end: float, alpha_max: float, alpha_min: float) -> float:
    # Rising schedule alpha_min -> alpha_max; used when smooth_boundary is on
    # so the second stage opens at the 50/50 mix the first stage closed on.
    if t_end <= t_start:
        raise DegenerateStageError(
            f"degenerate stage: t_end {t_end} must exceed t_start {t_start}"
        )
    if not t_start <= t <= t_end:
        raise GuidanceError(f"t={t} outside stage [{t_start}, {t_end}]")
    p = (t - t_start) / (t_end - t_start)
    return float(alpha_min + p * (alpha_max - alpha_min))


def adjust_text_embedding(
    timesteps,
    coarse,
    fine,
    t_end: float,
    total: float,
    *,
    alpha_max: float = 1.0,
    alpha_min: float = 0.5,
    smooth_boundary: bool = False,
):
    """Two-stage blend of the coarse and fine embeddings at given timesteps.

    Before t_end the output is alpha*coarse + (1-alpha)*fine with alpha
    falling from alpha_max to alpha_min over [0, t_end]; from t_end on the
    roles swap and alpha restarts at alpha_max over [t_end, total].  The
    jump at t = t_end is intentional and kept by default; smooth_boundary
    replaces the second-stage schedule with one rising from alpha_min.

    `timesteps` may be a scalar (returns one embedding) or a sequence
    (returns a stacked batch).  Positions up to and including `total` are
    accepted so that mapped training timesteps can reach the clean end of
    the axis.
    """
    if not 0 < t_end < total:
        raise GuidanceError(f"t_end {t_end} must lie strictly inside (0, {total})")
    if not _shapes_match(coarse, fine):
        raise GuidanceError(
            f"embedding shape mismatch: {tuple(coarse.shape)} vs {tuple(fine.shape)}"
        )

    scalar = np.isscalar(timesteps) or (
        torch.is_tensor(timesteps) and timesteps.ndim == 0
    )
    ts = [timesteps] if scalar else list(timesteps)

    out = []
    for t in ts:
        t = float(t)
        if not 0.0 <= t <= total:
            raise GuidanceError(f"timestep {t} outside [0, {total}]")
        if t < t_end:
            a = calculate_alpha(t, 0.0, t_end, alpha_max, alpha_min)
            out.append(blend(a, coarse, fine))
        else:
            if smooth_boundary:
                a = _smooth_alpha(t, t_end, total, alpha_max, alpha_min)
            else:
                a = calculate_alpha(t, t_end, total, alpha_max, alpha_min)
            out.append(blend(a, fine, coarse))

    if scalar:
        return out[0]
    return torch.stack(out) if torch.is_tensor(out[0]) else np.stack(out)


@dataclass(frozen=True)
class GuidanceSchedule:
    """k guidance stages partitioning [0, T) plus their embeddings."""

    allocations: tuple[int, ...]
    embeddings: tuple[Any, ...] = field(repr=False)
    alpha_max: float = 1.0
    alpha_min: float = 0.5
    smooth_boundary: bool = False

    def __post_init__(self):
        if len(self.allocations) != len(self.embeddings):
            raise GuidanceError(
                f"{len(self.embeddings)} embeddings for {len(self.allocations)} stages"
            )
        if any(s < 1 for s in self.allocations):
            raise GuidanceError(f"every stage needs at least one step: {self.allocations}")
        shapes = {tuple(e.shape) for e in self.embeddings}
        if len(shapes) > 1:
            raise GuidanceError(f"stage embeddings must share one shape, got {shapes}")

    @property
    def k(self) -> int:
        return len(self.allocations)

    @property
    def total_steps(self) -> int:
        return sum(self.allocations)

    @property
    def boundaries(self) -> tuple[int, ...]:
        """Stage start indices plus the final total, length k+1."""
        acc, out = 0, [0]
        for s in self.allocations:
            acc += s
            out.append(acc)
        return tuple(out)

    @property
    def t_end(self) -> int:
        """First-stage boundary (the Algorithm-2 switch point for k=2)."""
        return self.allocations[0]

    def stage_of(self, step: int) -> int:
        if not 0 <= step < self.total_steps:
            raise GuidanceError(f"step {step} outside [0, {self.total_steps})")
        bounds = self.boundaries
        for i in range(self.k):
            if step < bounds[i + 1]:
                return i
        raise AssertionError("unreachable")


def build_schedule(
    k: int,
    total_steps: int,
    ratios: Sequence[float],
    embeddings: Sequence[Any],
    *,
    alpha_max: float = 1.0,
    alpha_min: float = 0.5,
    smooth_boundary: bool = False,
) -> GuidanceSchedule:
    """Partition total_steps into k stages with the given step ratios.

    Stage sizes are round(ratio_i * T) with the last stage absorbing the
    rounding remainder so the sizes always sum to T exactly.
    """
    if k < 1:
        raise GuidanceError(f"stage count must be >= 1, got {k}")
    if len(ratios) != k:
        raise GuidanceError(f"{len(ratios)} ratios for k={k} stages")
    if len(embeddings) != k:
        raise GuidanceError(f"{len(embeddings)} embeddings for k={k} stages")
    if total_steps < k:
        raise GuidanceError(f"T={total_steps} cannot hold {k} stages of >= 1 step")
    if abs(sum(ratios) - 1.0) > RATIO_SUM_TOL:
        raise GuidanceError(f"ratios must sum to 1, got sum={sum(ratios)!r}")

    sizes = [int(round(r * total_steps)) for r in ratios[:-1]]
    sizes.append(total_steps - sum(sizes))
    if any(s < 1 for s in sizes):
        raise GuidanceError(
            f"ratios {tuple(ratios)} allocate an empty stage at T={total_steps}: {sizes}"
        )
    return GuidanceSchedule(
        allocations=tuple(sizes),
        embeddings=tuple(embeddings),
        alpha_max=alpha_max,
        alpha_min=alpha_min,
        smooth_boundary=smooth_boundary,
    )


def embedding_for_step(schedule: GuidanceSchedule, step: int):
    """Blended conditioning embedding for one sampling step.

    Step indices run along the denoising progress axis (0 = most noise).
    k=1 returns the single embedding; k=2 follows the two-stage blend of
    :func:`adjust_text_embedding`; for k>2 each stage blends its own
    embedding with the previous stage's, alpha falling from alpha_max at the
    stage start, so guidance never skips a level.
    """
    if not 0 <= step < schedule.total_steps:
        raise GuidanceError(f"step {step} outside [0, {schedule.total_steps})")
    if schedule.k == 1:
        return _copy(schedule.embeddings[0])
    if schedule.k == 2:
        return adjust_text_embedding(
            step,
            schedule.embeddings[0],
            schedule.embeddings[1],
            t_end=schedule.t_end,
            total=schedule.total_steps,
            alpha_max=schedule.alpha_max,
            alpha_min=schedule.alpha_min,
            smooth_boundary=schedule.smooth_boundary,
        )

    stage = schedule.stage_of(step)
    if stage == 0:
        return _copy(schedule.embeddings[0])
    bounds = schedule.boundaries
    current = schedule.embeddings[stage]
    previous = schedule.embeddings[stage - 1]
    if schedule.smooth_boundary:
        a = _smooth_alpha(step, bounds[stage], bounds[stage + 1], schedule.alpha_max, schedule.alpha_min)
    else:
        a = calculate_alpha(step, bounds[stage], bounds[stage + 1], schedule.alpha_max, schedule.alpha_min)
    return blend(a, current, previous)


def progress_position(t_train: float, train_steps: int, sample_steps: int) -> float:
    """Map a training timestep onto the sampling progress axis.

    Training timesteps grow with noise while the progress axis starts at
    maximal noise, so t_train = train_steps-1 lands near progress 0 and
    t_train = 0 lands at progress = sample_steps.
    """
    if not 0 <= t_train < train_steps:
        raise GuidanceError(f"training timestep {t_train} outside [0, {train_steps})")
    return sample_steps * (1.0 - t_train / train_steps)
