import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from diffpretrain.errors import ShapeMismatchError
from diffpretrain.networks.base import group_norm


def _check_qkv(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> None:
    if q.shape != k.shape or v.shape[:-1] != k.shape[:-1]:
        raise ShapeMismatchError(
            f"attention inputs need matching [..., heads, tokens, dim] shapes, got "
            f"q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}"
        )


def elu_feature_map(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x) + 1


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Kernelized attention phi(q) (phi(k)^T v) / (phi(q) sum phi(k)) with phi = elu + 1.

    Inputs are [..., heads, n_tokens, head_dim]; cost is linear in n_tokens.
    """
    _check_qkv(q, k, v)
    phi_q = elu_feature_map(q)
    phi_k = elu_feature_map(k)
    kv = phi_k.transpose(-2, -1) @ v
    normalizer = phi_q @ phi_k.sum(dim=-2).unsqueeze(-1)
    return (phi_q @ kv) / normalizer


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)


def quadratic_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    _check_qkv(q, k, v)
    return attention_weights(q, k) @ v


ATTENTION_KINDS = {"linear": linear_attention, "quadratic": quadratic_attention}


class AttentionBlock(nn.Module):
    """Multi-head self-attention over the voxels of a feature map, with a residual connection."""

    def __init__(self, channels: int, kind: str, heads: int):
        super().__init__()
        if kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {kind!r}")
        self.kind = kind
        self.heads = heads
        self.norm = group_norm(channels)
        self.qkv = nn.Conv3d(channels, 3 * channels, 1)
        self.proj = nn.Conv3d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, channels = x.shape[:2]
        spatial = x.shape[2:]
        qkv = self.qkv(self.norm(x)).reshape(batch, 3, self.heads, channels // self.heads, -1)
        q, k, v = (part.transpose(-2, -1) for part in qkv.unbind(dim=1))
        out = ATTENTION_KINDS[self.kind](q, k, v)
        out = out.transpose(-2, -1).reshape(batch, channels, *spatial)
        return x + self.proj(out)
