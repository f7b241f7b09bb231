from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F

from diffpretrain.diffusion.schedule import NoiseSchedule
from diffpretrain.errors import ConditioningError, ShapeMismatchError

Step = Union[int, torch.Tensor]


def predict_noise(model, x_t: torch.Tensor, t: Step, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Call an epsilon model; denoisers return (eps, pyramid), simple stubs return eps."""
    if not torch.is_tensor(t):
        t = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
    out = model(x_t, t, cond)
    return out[0] if isinstance(out, tuple) else out


def _check_conditioning(model, cond: Optional[torch.Tensor]) -> None:
    in_channels = getattr(model, "in_channels", None)
    if in_channels is None:
        return
    expected = 1 + (1 if cond is not None else 0)
    if in_channels != expected:
        raise ConditioningError(
            f"in_channels mismatch: model expects {in_channels} input channel(s), "
            f"got {expected} ({'with' if cond is not None else 'without'} a coordinate map)"
        )


def q_sample(x0: torch.Tensor, t: Step, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise ShapeMismatchError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    alpha_bar = sched.coefficient("alpha_bar", t, x0)
    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps


def predict_x0(x_t: torch.Tensor, t: Step, eps_pred: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    alpha_bar = sched.coefficient("alpha_bar", t, x_t)
    return (x_t - (1.0 - alpha_bar).sqrt() * eps_pred) / alpha_bar.sqrt()


def sample_timesteps(batch: int, sched: NoiseSchedule, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(1, sched.T + 1, (batch,), generator=generator)


def ddpm_loss(
    model,
    x0: torch.Tensor,
    t: Optional[Step],
    cond: Optional[torch.Tensor],
    sched: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Simple epsilon-prediction objective; call ``backward()`` on the result for gradients.

    ``t=None`` draws one uniform step per batch element before the noise, both from ``generator``.
    """
    _check_conditioning(model, cond)
    if t is None:
        t = sample_timesteps(x0.shape[0], sched, generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(x0.device)
    x_t = q_sample(x0, t, eps, sched)
    eps_pred = predict_noise(model, x_t, t, cond)
    return F.mse_loss(eps_pred, eps)


def p_step(
    model,
    x_t: torch.Tensor,
    t: int,
    cond: Optional[torch.Tensor],
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    stochastic: bool = True,
) -> torch.Tensor:
    sched.check_step(t)
    eps_pred = predict_noise(model, x_t, t, cond)
    alpha = sched.coefficient("alpha", t, x_t)
    beta = sched.coefficient("beta", t, x_t)
    alpha_bar = sched.coefficient("alpha_bar", t, x_t)
    mean = (x_t - beta / (1.0 - alpha_bar).sqrt() * eps_pred) / alpha.sqrt()
    if t == 1 or not stochastic:
        return mean
    z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype).to(x_t.device)
    return mean + sched.coefficient("sigma", t, x_t) * z


@torch.no_grad()
def sample(
    model,
    patch_shape: Sequence[int],
    cond: Optional[torch.Tensor],
    sched: NoiseSchedule,
    generator: torch.Generator,
    batch: int = 1,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    _check_conditioning(model, cond)
    if cond is not None:
        batch = cond.shape[0]
    x = torch.randn((batch, 1, *patch_shape), generator=generator, dtype=dtype)
    for t in range(sched.T, 0, -1):
        x = p_step(model, x, t, cond, sched, generator)
    return x
