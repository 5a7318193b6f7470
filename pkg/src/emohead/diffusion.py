"""Forward noising, the noise-prediction objective, and samplers.

The deterministic sampler is the default so that generation is an exact
function of (weights, initial noise, conditioning, schedule); a stochastic
ancestral variant is available behind SamplerSpec.kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .guidance import GuidanceSchedule, embedding_for_step


class NoiseScheduleError(ValueError):
    pass


class SamplerError(ValueError):
    pass


class NoiseSchedule:
    """Linear beta schedule with cached cumulative signal retention."""

    def __init__(self, train_steps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02):
        if train_steps < 2:
            raise NoiseScheduleError(f"train_steps must be >= 2, got {train_steps}")
        if not 0.0 < beta_start < beta_end < 1.0:
            raise NoiseScheduleError(
                f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
            )
        self.train_steps = train_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.betas = np.linspace(beta_start, beta_end, train_steps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)
        if not np.all(np.diff(self.betas) > 0):
            raise NoiseScheduleError("betas must increase strictly")
        if not (np.all(np.diff(self.alpha_bar) < 0) and np.all(self.alpha_bar > 0) and np.all(self.alpha_bar <= 1)):
            raise NoiseScheduleError("cumulative alpha must decrease strictly within (0, 1]")

    def to_dict(self) -> dict:
        return {
            "train_steps": self.train_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


def _gather_coeff(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Per-sample scalar coefficients broadcast against `like`."""
    idx = t.reshape(-1).long().cpu().numpy() if torch.is_tensor(t) else np.atleast_1d(np.asarray(t, dtype=np.int64))
    coeff = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
    if coeff.numel() == 1:
        return coeff.reshape(())
    return coeff.reshape(-1, *([1] * (like.ndim - 1)))


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if z0.shape != eps.shape:
        raise SamplerError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    ab = _gather_coeff(schedule.alpha_bar, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def noise_prediction_loss(
    model,
    z0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    text: torch.Tensor,
    audio: torch.Tensor,
    reference,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Mean over the batch of the per-sample squared noise residual.

    The residual norm is summed over all latent elements of a sample, so a
    predictor stuck at zero scores roughly the element count per sample.
    """
    z_t = forward_noise(z0, t, eps, schedule)
    pred = model(z_t, t, text, audio, reference)
    per_sample = ((eps - pred) ** 2).flatten(start_dim=1).sum(dim=1)
    loss = per_sample.mean()
    if torch.isnan(loss):
        raise FloatingPointError("NaN training loss")
    return loss


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "deterministic"
    steps: int = 40

    def __post_init__(self):
        if self.kind not in ("deterministic", "stochastic"):
            raise SamplerError(f"sampler kind must be deterministic or stochastic, got {self.kind!r}")
        if self.steps < 1:
            raise SamplerError(f"steps must be >= 1, got {self.steps}")

    def timesteps(self, train_steps: int) -> np.ndarray:
        """Strictly decreasing timestep subsequence from train_steps-1 to 0."""
        if self.steps > train_steps:
            raise SamplerError(
                f"{self.steps} sampling steps cannot embed into {train_steps} training steps"
            )
        if self.steps == 1:
            return np.array([train_steps - 1], dtype=np.int64)
        ts = np.round(np.linspace(train_steps - 1, 0, self.steps)).astype(np.int64)
        if not np.all(np.diff(ts) < 0):
            raise SamplerError(f"timestep subsequence not strictly decreasing: {ts}")
        return ts

    def to_dict(self) -> dict:
        return {"kind": self.kind, "steps": self.steps}


def sample(
    predict: Callable[[torch.Tensor, int, torch.Tensor], torch.Tensor],
    noise: torch.Tensor,
    guidance: GuidanceSchedule,
    sampler: SamplerSpec,
    schedule: NoiseSchedule,
    *,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Run the denoising trajectory from pure noise to a clean latent.

    `predict(z, t, text_embedding) -> eps_hat` is queried once per step; the
    text embedding for step i comes from the guidance schedule.  The
    deterministic kind uses the noise-free update
        z_prev = sqrt(abar_prev) * z0_hat + sqrt(1 - abar_prev) * eps_hat,
    the stochastic kind adds ancestral posterior noise drawn from
    `generator`.
    """
    if guidance.total_steps != sampler.steps:
        raise SamplerError(
            f"guidance schedule covers {guidance.total_steps} steps but sampler runs {sampler.steps}"
        )
    ts = sampler.timesteps(schedule.train_steps)
    z = noise
    for i, t in enumerate(ts):
        text = embedding_for_step(guidance, i)
        eps_hat = predict(z, int(t), text)
        if eps_hat.shape != z.shape:
            raise SamplerError(
                f"predictor returned shape {tuple(eps_hat.shape)}, expected {tuple(z.shape)}"
            )
        ab_t = float(schedule.alpha_bar[t])
        ab_prev = float(schedule.alpha_bar[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        z0_hat = (z - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        if sampler.kind == "deterministic":
            z = math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
        else:
            sigma = 0.0
            if i + 1 < len(ts):
                sigma = math.sqrt(
                    (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
                )
            direction = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
            z = math.sqrt(ab_prev) * z0_hat + direction
            if sigma > 0.0:
                xi = torch.empty_like(z).normal_(generator=generator)
                z = z + sigma * xi
    return z
