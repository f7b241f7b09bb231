import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffpretrain.errors import ShapeMismatchError
from diffpretrain.networks.attention import (
    AttentionBlock, attention_weights, elu_feature_map, linear_attention, quadratic_attention,
)
from diffpretrain.utils.seeding import make_generator


def naive_kernel_attention(q, k, v):
    scores = elu_feature_map(q) @ elu_feature_map(k).transpose(-2, -1)
    return (scores @ v) / scores.sum(dim=-1, keepdim=True)


def _qkv(seed, heads, tokens, dim, value_dim):
    generator = make_generator(seed)
    q, k = (torch.randn(2, heads, tokens, dim, generator=generator, dtype=torch.float64) for _ in range(2))
    v = torch.randn(2, heads, tokens, value_dim, generator=generator, dtype=torch.float64)
    return q, k, v


class TestLinearAttention:
    @given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 64), st.integers(1, 8), st.integers(1, 8))
    @settings(max_examples=120, deadline=None)
    def test_matches_quadratic_evaluation_of_the_same_kernel(self, seed, heads, tokens, dim, value_dim):
        q, k, v = _qkv(seed, heads, tokens, dim, value_dim)
        torch.testing.assert_close(linear_attention(q, k, v), naive_kernel_attention(q, k, v), rtol=1e-5, atol=1e-9)

    def test_constant_values_pass_through(self):
        q, k, _ = _qkv(0, 2, 10, 4, 3)
        v = torch.full((2, 2, 10, 3), 1.5, dtype=torch.float64)
        torch.testing.assert_close(linear_attention(q, k, v), v)

    @given(st.integers(0, 2**31 - 1), st.integers(2, 32))
    @settings(max_examples=50, deadline=None)
    def test_permuting_tokens_permutes_outputs(self, seed, tokens):
        q, k, v = _qkv(seed, 2, tokens, 4, 3)
        perm = torch.randperm(tokens, generator=make_generator(seed))
        permuted = linear_attention(q[..., perm, :], k[..., perm, :], v[..., perm, :])
        torch.testing.assert_close(permuted, linear_attention(q, k, v)[..., perm, :], rtol=1e-9, atol=1e-12)

    def test_mismatched_shapes(self):
        q, k, v = _qkv(0, 1, 5, 4, 4)
        with pytest.raises(ShapeMismatchError):
            linear_attention(q, k[..., :3, :], v)


class TestQuadraticAttention:
    @given(st.integers(0, 2**31 - 1), st.integers(1, 64), st.integers(1, 8))
    @settings(max_examples=100, deadline=None)
    def test_weights_are_row_stochastic(self, seed, tokens, dim):
        q, k, _ = _qkv(seed, 2, tokens, dim, 1)
        weights = attention_weights(q, k)
        assert (weights >= 0).all()
        torch.testing.assert_close(weights.sum(dim=-1), torch.ones(weights.shape[:-1], dtype=torch.float64),
                                   rtol=0, atol=1e-6)

    def test_identical_queries_and_keys_average_the_values(self):
        _, _, v = _qkv(2, 2, 12, 4, 3)
        q = torch.ones(2, 2, 12, 4, dtype=torch.float64)
        out = quadratic_attention(q, q.clone(), v)
        torch.testing.assert_close(out, v.mean(dim=-2, keepdim=True).expand_as(v))

    def test_single_token_returns_its_value(self):
        q, k, v = _qkv(1, 1, 1, 4, 2)
        torch.testing.assert_close(quadratic_attention(q, k, v), v)


class TestAttentionBlock:
    @pytest.mark.parametrize("kind", ["linear", "quadratic"])
    def test_keeps_feature_map_shape(self, kind):
        block = AttentionBlock(8, kind, heads=2)
        x = torch.randn(2, 8, 2, 3, 4, generator=make_generator(0))
        assert block(x).shape == x.shape

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            AttentionBlock(8, "sparse", heads=2)
