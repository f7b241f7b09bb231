from typing import Dict, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict

from diffpretrain.errors import ScheduleError

REFERENCE_T = 1000
REFERENCE_BETAS = (1e-4, 0.02)


class NoiseSchedule(BaseModel):
    """Linear beta schedule; arrays are 0-based, step t lives at index t - 1."""

    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def check_step(self, t: Union[int, torch.Tensor]) -> None:
        lo, hi = (int(t), int(t)) if not torch.is_tensor(t) else (int(t.min()), int(t.max()))
        if lo < 1 or hi > self.T:
            raise ScheduleError(f"timestep must lie in [1, {self.T}], got {lo if lo < 1 else hi}")

    def coefficient(self, name: str, t: Union[int, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
        """Gather ``name`` at step(s) ``t`` shaped to broadcast against ``like`` (batch first)."""
        self.check_step(t)
        table = torch.from_numpy(getattr(self, name)).to(dtype=like.dtype, device=like.device)
        if torch.is_tensor(t):
            values = table[t.long().to(like.device) - 1]
            return values.view(-1, *([1] * (like.dim() - 1)))
        return table[int(t) - 1]

    def parameters(self) -> Dict[str, float]:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(
        T=T, beta_min=float(beta_min), beta_max=float(beta_max),
        beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma,
    )


def scaled_beta_range(T: int) -> Tuple[float, float]:
    scale = REFERENCE_T / T
    beta_min, beta_max = REFERENCE_BETAS[0] * scale, REFERENCE_BETAS[1] * scale
    if beta_max >= 1.0:
        raise ScheduleError(f"T={T} is too short to rescale the reference beta range")
    return beta_min, beta_max


def schedule_from_config(config) -> NoiseSchedule:
    return make_schedule(config.T, config.beta_min, config.beta_max)
