"""
U-shaped noise-prediction network.

The encoder runs two residual blocks per level and halves the resolution between levels;
the decoder mirrors it with skip connections. Attention follows the second residual block on
levels where it is enabled: linear (kernelized) attention on the shallow levels and standard
softmax attention on the deepest one, where channel counts outgrow the feature map.

The decoder activations form the feature pyramid used as frozen voxel features:
level ``l`` has spatial shape ``patch_shape / 2**l`` and ``base_width * channel_mult[l]`` channels
(the deepest level contributes the bottleneck activation).
"""

from typing import List, Mapping, NamedTuple, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from diffpretrain.errors import CheckpointError, ConditioningError, ShapeMismatchError
from diffpretrain.models.schemas import DenoiserConfig
from diffpretrain.networks.attention import AttentionBlock
from diffpretrain.networks.base import (
    Downsample, ResBlock, Upsample, group_norm, init_weights, load_named_tensors, named_tensors, time_embedding,
)


class FeaturePyramid(NamedTuple):
    levels: List[torch.Tensor]

    @property
    def channels(self) -> List[int]:
        return [int(level.shape[1]) for level in self.levels]

    @property
    def spatial_shapes(self) -> List[Tuple[int, ...]]:
        return [tuple(int(s) for s in level.shape[2:]) for level in self.levels]


class DenoiserOutput(NamedTuple):
    eps: torch.Tensor
    pyramid: FeaturePyramid


class _Level(nn.Module):
    def __init__(self, in_channels: int, channels: int, temb_dim: int, attn_kind: str, heads: int):
        super().__init__()
        self.block1 = ResBlock(in_channels, channels, temb_dim)
        self.block2 = ResBlock(channels, channels, temb_dim)
        self.attn = AttentionBlock(channels, attn_kind, heads) if attn_kind != "none" else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        return self.attn(self.block2(self.block1(x, temb), temb))


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        if config.in_channels is None:
            config = config.model_copy(update={"in_channels": 1})
        self.config = config
        widths = config.level_channels
        base = config.base_width
        temb_dim = config.time_embed_dim

        self.time_mlp = nn.Sequential(nn.Linear(base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.stem = nn.Conv3d(config.in_channels, widths[0], 3, padding=1)

        self.encoder = nn.ModuleList()
        self.downs = nn.ModuleList()
        previous = widths[0]
        for level, width in enumerate(widths):
            self.encoder.append(_Level(previous, width, temb_dim, config.attn_kinds[level], config.attn_heads))
            if level < config.levels - 1:
                self.downs.append(Downsample(width))
            previous = width

        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in range(config.levels - 2, -1, -1):
            width = widths[level]
            self.ups.append(Upsample(widths[level + 1], width))
            self.decoder.append(_Level(2 * width, width, temb_dim, config.attn_kinds[level], config.attn_heads))

        self.out_norm = group_norm(widths[0])
        self.out_conv = nn.Conv3d(widths[0], 1, 3, padding=1)

        init_weights(self)
        if config.zero_init_output:
            nn.init.zeros_(self.out_conv.weight)
            nn.init.zeros_(self.out_conv.bias)

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    def _check_inputs(self, x_t: torch.Tensor, cond: Optional[torch.Tensor]) -> None:
        if x_t.dim() != 5 or x_t.shape[1] != 1:
            raise ShapeMismatchError(f"x_t must be (batch, 1, z, y, x), got {tuple(x_t.shape)}")
        if (cond is not None) != self.config.conditioned:
            raise ConditioningError(
                f"in_channels mismatch: model has in_channels={self.config.in_channels} but a coordinate map "
                f"was {'given' if cond is not None else 'not given'}"
            )
        if cond is not None and cond.shape != x_t.shape:
            raise ConditioningError(f"coordinate map shape {tuple(cond.shape)} != x_t shape {tuple(x_t.shape)}")
        factor = 2 ** (self.config.levels - 1)
        if any(size % factor for size in x_t.shape[2:]):
            raise ShapeMismatchError(f"patch shape {tuple(x_t.shape[2:])} is not divisible by {factor}")

    def forward(
        self, x_t: torch.Tensor, t: Union[int, torch.Tensor], cond: Optional[torch.Tensor] = None
    ) -> DenoiserOutput:
        self._check_inputs(x_t, cond)
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        temb = time_embedding(t.cpu(), self.config.base_width).to(dtype=x_t.dtype, device=x_t.device)
        temb = self.time_mlp(temb)

        h = torch.cat([x_t, cond], dim=1) if cond is not None else x_t
        h = self.stem(h)
        skips = []
        for level, block in enumerate(self.encoder):
            h = block(h, temb)
            if level < self.config.levels - 1:
                skips.append(h)
                h = self.downs[level](h)

        features = [h]
        for up, block in zip(self.ups, self.decoder):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            features.append(h)

        eps = self.out_conv(F.silu(self.out_norm(h)))
        return DenoiserOutput(eps=eps, pyramid=FeaturePyramid(levels=features[::-1]))

    def parameter_tensors(self):
        return named_tensors(self)

    def load_parameter_tensors(
        self, tensors: Mapping[str, torch.Tensor], source_config: Optional[DenoiserConfig] = None
    ) -> None:
        source_in = source_config.in_channels if source_config is not None else None
        stem = tensors.get("stem.weight")
        if source_in is None and stem is not None:
            source_in = int(stem.shape[1])
        if source_in is not None and source_in != self.config.in_channels:
            raise CheckpointError(
                f"in_channels mismatch: checkpoint has {source_in}, model config has {self.config.in_channels}"
            )
        load_named_tensors(self, tensors)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
