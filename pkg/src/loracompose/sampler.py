"""Deterministic (eta=0) reverse-diffusion sampler step and its schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .backends.base import LatentState
from .errors import ContractViolation, ScheduleExhausted


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels along the sampled trajectory, noisiest first.

    ``alpha_bars[i]`` is the signal fraction at sampler position i;
    ``timesteps[i]`` the corresponding model time used for conditioning.
    The step after the last position targets ``final_alpha_bar`` (a clean
    sample at 1.0).
    """

    alpha_bars: tuple[float, ...]
    timesteps: tuple[int, ...]
    final_alpha_bar: float = 1.0

    def __post_init__(self):
        if len(self.alpha_bars) != len(self.timesteps) or not self.alpha_bars:
            raise ContractViolation("schedule needs matching, non-empty alpha_bars and timesteps")

    def __len__(self) -> int:
        return len(self.alpha_bars)

    @classmethod
    def linear(
        cls,
        num_steps: int = 50,
        train_steps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
    ) -> "NoiseSchedule":
        """Evenly spaced sample of a linear-beta diffusion schedule."""
        betas = torch.linspace(beta_start, beta_end, train_steps, dtype=torch.float64)
        alpha_bar = torch.cumprod(1.0 - betas, dim=0)
        timesteps = torch.linspace(train_steps - 1, 0, num_steps).round().to(torch.long)
        return cls(
            alpha_bars=tuple(float(alpha_bar[t]) for t in timesteps),
            timesteps=tuple(int(t) for t in timesteps),
        )


def ddim_step(z: LatentState, noise_prediction: torch.Tensor, schedule: NoiseSchedule) -> LatentState:
    """Advance one schedule position with the eta=0 (noise-free) update.

    Reconstructs the clean-sample estimate from the noise prediction and
    re-noises it to the next signal level; identical inputs always yield
    identical outputs.
    """
    i = z.timestep_index
    if i >= len(schedule):
        raise ScheduleExhausted(f"latent already at schedule end ({len(schedule)} steps)")
    if noise_prediction.shape != z.data.shape:
        raise ContractViolation(
            f"noise prediction shape {tuple(noise_prediction.shape)} != latent {tuple(z.data.shape)}"
        )
    abar_t = schedule.alpha_bars[i]
    abar_next = schedule.alpha_bars[i + 1] if i + 1 < len(schedule) else schedule.final_alpha_bar
    x0 = (z.data - math.sqrt(1.0 - abar_t) * noise_prediction) / math.sqrt(abar_t)
    data = math.sqrt(abar_next) * x0 + math.sqrt(1.0 - abar_next) * noise_prediction
    return z.advanced(data)
