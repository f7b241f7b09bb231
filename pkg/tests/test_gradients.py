import random

import torch
import torch.nn as nn

from diffpretrain.diffusion import ddpm_loss, make_schedule
from diffpretrain.models.schemas import DenoiserConfig
from diffpretrain.pipeline.pretrain import init_denoiser
from diffpretrain.utils.seeding import make_generator

STEP = 1e-6


def _loss(model, x0, sched):
    return ddpm_loss(model, x0, 7, None, sched, make_generator(11))


def test_ddpm_loss_gradients_match_central_differences():
    model = init_denoiser(DenoiserConfig(in_channels=1, base_width=4, levels=2, time_embed_dim=8), seed=0).double()
    with torch.no_grad():
        # the zero-initialised output conv would leave most gradients at exactly zero
        nn.init.normal_(model.out_conv.weight, std=0.1)
        nn.init.normal_(model.out_conv.bias, std=0.1)
    sched = make_schedule(10, 1e-3, 0.2)
    x0 = torch.randn(1, 1, 4, 4, 4, generator=make_generator(5), dtype=torch.float64)

    model.zero_grad()
    _loss(model, x0, sched).backward()

    params = [p for p in model.parameters()]
    picks = random.Random(0)
    checked = 0
    for _ in range(60):
        param = picks.choice(params)
        index = picks.randrange(param.numel())
        analytic = param.grad.view(-1)[index].item()
        with torch.no_grad():
            flat = param.view(-1)
            original = flat[index].item()
            flat[index] = original + STEP
            plus = _loss(model, x0, sched).item()
            flat[index] = original - STEP
            minus = _loss(model, x0, sched).item()
            flat[index] = original
        numeric = (plus - minus) / (2 * STEP)
        assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic)) + 1e-7, (
            f"parameter element {index}: numeric {numeric:.6e} vs analytic {analytic:.6e}"
        )
        checked += 1
    assert checked >= 50
