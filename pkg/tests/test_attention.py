import numpy as np
import pytest

from gano import tensor as T
from gano.attention import (
    CrossBlock,
    EmptyKeyError,
    MHAConfig,
    MultiHeadAttention,
    MultiscaleBlock,
    TransformerBlock,
    pool_grid,
    positional_encoding,
)
from gano.tensor import DimensionError, Tensor


def identity_attention(d, heads=1, scale="dk"):
    attn = MultiHeadAttention(np.random.default_rng(0), MHAConfig(d, heads=heads, attn_scale=scale))
    for lin in (attn.wq, attn.wk, attn.wv, attn.wo):
        lin.weight.data = np.eye(d)
        lin.bias.data = np.zeros(d)
    return attn


def test_single_head_reference_example():
    attn = identity_attention(2)
    # K = kv rows; V = 2 * kv rows gives V = [[2, 0], [0, 2]]
    attn.wv.weight.data = 2 * np.eye(2)
    out = attn(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]))
    # scores [1/2, 0]; reference from 30-digit arithmetic
    np.testing.assert_allclose(out.data, [[1.24491866240371, 0.755081337596291]], atol=1e-4)


def test_single_head_weights_reference():
    q, k = np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])
    w = T.softmax(Tensor(q @ k.T / 2.0)).data
    np.testing.assert_allclose(w, [[0.622459331201855, 0.377540668798145]], atol=1e-5)


def test_sqrt_dk_scaling_differs():
    attn = identity_attention(2, scale="sqrt_dk")
    attn.wv.weight.data = 2 * np.eye(2)
    out = attn(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]))
    s = 1 / np.sqrt(2)
    w0 = np.exp(s) / (np.exp(s) + 1)
    np.testing.assert_allclose(out.data, [[2 * w0, 2 * (1 - w0)]], atol=1e-12)


def test_identical_keys_average_values():
    rng = np.random.default_rng(1)
    attn = identity_attention(4, heads=2)
    kv = np.tile(rng.normal(size=(1, 4)), (5, 1))
    out = attn(Tensor(rng.normal(size=(3, 4))), Tensor(kv))
    np.testing.assert_allclose(out.data, np.tile(kv.mean(0), (3, 1)), atol=1e-12)


def test_output_in_convex_hull_of_values():
    rng = np.random.default_rng(2)
    attn = identity_attention(3)
    kv = rng.normal(size=(6, 3))
    out = attn(Tensor(rng.normal(size=(4, 3))), Tensor(kv)).data
    assert np.all(out <= kv.max(0) + 1e-12) and np.all(out >= kv.min(0) - 1e-12)


def test_query_permutation_equivariance():
    rng = np.random.default_rng(3)
    attn = MultiHeadAttention(rng, MHAConfig(8, heads=2))
    q, kv = rng.normal(size=(5, 8)), rng.normal(size=(4, 8))
    perm = rng.permutation(5)
    a = attn(Tensor(q), Tensor(kv)).data
    b = attn(Tensor(q[perm]), Tensor(kv)).data
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


def test_canonical_kv_permutation_bit_exact():
    rng = np.random.default_rng(4)
    attn = MultiHeadAttention(rng, MHAConfig(8, heads=2), canonical_kv=True)
    q, kv = rng.normal(size=(2, 5, 8)), rng.normal(size=(2, 7, 8))
    base = attn(Tensor(q), Tensor(kv)).data
    for _ in range(10):
        perm = rng.permutation(7)
        assert np.array_equal(attn(Tensor(q), Tensor(kv[:, perm])).data, base)


def test_empty_keys_raise():
    attn = identity_attention(2)
    with pytest.raises(EmptyKeyError):
        attn(Tensor(np.ones((1, 2))), Tensor(np.zeros((0, 2))))


def test_width_mismatch():
    attn = identity_attention(2)
    with pytest.raises(DimensionError):
        attn(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 3))))


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        MHAConfig(10, heads=3)


@pytest.mark.parametrize("seed", range(5))
def test_mha_gradcheck(seed):
    rng = np.random.default_rng(seed)
    attn = MultiHeadAttention(rng, MHAConfig(4, heads=2))
    q, kv = Tensor(rng.normal(size=(3, 4)), True), Tensor(rng.normal(size=(5, 4)), True)
    R = Tensor(rng.normal(size=(3, 4)))
    assert T.grad_check(lambda q, kv, *_: (attn(q, kv) * R).sum(), [q, kv, *attn.parameters()]) <= 1e-4


# -- multiscale ----------------------------------------------------------------


def test_stride_one_equals_vanilla_block_exactly():
    cfg = MHAConfig(8, heads=2)
    ms = MultiscaleBlock(np.random.default_rng(5), cfg)
    vanilla = TransformerBlock(np.random.default_rng(5), cfg)
    x = Tensor(np.random.default_rng(6).normal(size=(2, 12, 8)))
    out, grid = ms(x, (1, 3, 4))
    assert grid == (1, 3, 4)
    assert np.array_equal(out.data, vanilla(x).data)


def test_kv_pool_shapes():
    cfg = MHAConfig(8, heads=2, kv_pool_stride=(1, 2, 2))
    pooled, g = pool_grid(Tensor(np.zeros((1, 32, 8))), (2, 4, 4), cfg.kv_pool_stride)
    assert pooled.shape == (1, 8, 8) and g == (2, 2, 2)
    out, grid = MultiscaleBlock(np.random.default_rng(0), cfg)(Tensor(np.ones((32, 8))), (2, 4, 4))
    assert out.shape == (32, 8) and grid == (2, 4, 4)


def test_pool_grid_is_block_mean():
    x = np.arange(2 * 2 * 4 * 3, dtype=float).reshape(1, 16, 3)
    pooled, _ = pool_grid(Tensor(x), (1, 4, 4), (1, 2, 2))
    grid = x.reshape(4, 4, 3)
    np.testing.assert_allclose(pooled.data[0, 0], grid[:2, :2].mean(axis=(0, 1)))
    np.testing.assert_allclose(pooled.data[0, 3], grid[2:, 2:].mean(axis=(0, 1)))


def test_query_pooling_downsamples():
    cfg = MHAConfig(8, heads=2, kv_pool_stride=(1, 2, 2), q_pool_stride=(2, 1, 1))
    out, grid = MultiscaleBlock(np.random.default_rng(0), cfg)(Tensor(np.ones((1, 32, 8))), (2, 4, 4))
    assert grid == (1, 4, 4) and out.shape == (1, 16, 8)


def test_grid_token_mismatch():
    block = MultiscaleBlock(np.random.default_rng(0), MHAConfig(8, heads=2))
    with pytest.raises(DimensionError):
        block(Tensor(np.ones((10, 8))), (1, 3, 4))


def test_extra_tokens_are_not_pooled():
    cfg = MHAConfig(8, heads=2, kv_pool_stride=(1, 2, 2))
    block = MultiscaleBlock(np.random.default_rng(0), cfg)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 16 + 3, 8)))
    out, _ = block(x, (1, 4, 4), n_extra=3)
    assert out.shape == (1, 19, 8)


def test_masked_extra_tokens_do_not_affect_grid_tokens():
    cfg = MHAConfig(8, heads=2, kv_pool_stride=(1, 2, 2))
    block = MultiscaleBlock(np.random.default_rng(0), cfg)
    rng = np.random.default_rng(1)
    grid_tokens = rng.normal(size=(1, 16, 8))
    a = np.concatenate([grid_tokens, rng.normal(size=(1, 2, 8))], axis=1)
    b = np.concatenate([grid_tokens, rng.normal(size=(1, 2, 8))], axis=1)
    b[:, 16] = a[:, 16]
    mask = np.array([[True, False]])
    out_a, _ = block(Tensor(a), (1, 4, 4), 2, mask)
    out_b, _ = block(Tensor(b), (1, 4, 4), 2, mask)
    np.testing.assert_allclose(out_a.data[:, :17], out_b.data[:, :17], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_multiscale_gradcheck(seed):
    rng = np.random.default_rng(seed)
    block = MultiscaleBlock(rng, MHAConfig(4, heads=2, kv_pool_stride=(1, 2, 2)))
    x = Tensor(rng.normal(size=(2, 8, 4)), True)
    R = Tensor(rng.normal(size=(2, 8, 4)))
    assert T.grad_check(lambda x, *_: (block(x, (2, 2, 2))[0] * R).sum(), [x, *block.parameters()]) <= 1e-4


def test_cross_block_shapes_and_mask():
    rng = np.random.default_rng(0)
    block = CrossBlock(rng, MHAConfig(8, heads=2))
    q, mem = Tensor(rng.normal(size=(2, 3, 8))), rng.normal(size=(2, 5, 8))
    mask = np.array([True, True, True, False, False])[None, None, :].repeat(2, 0)
    out = block(q, Tensor(mem), mask)
    assert out.shape == (2, 3, 8)
    mem2 = mem.copy()
    mem2[:, 3:] = 7.0
    np.testing.assert_allclose(block(q, Tensor(mem2), mask).data, out.data, atol=1e-12)


# -- positional encoding ----------------------------------------------------------


def test_position_zero_sin_cos():
    pe = positional_encoding((4, 8, 8), 64)
    assert pe.shape == (256, 64)
    first = pe[0]
    np.testing.assert_array_equal(first[0::2], 0.0)
    np.testing.assert_array_equal(first[1::2], 1.0)


def test_default_axis_split():
    pe = positional_encoding((3, 1, 1), 64)
    # time axis takes the first 24 columns, the spatial axes (constant here) the rest
    assert np.ptp(pe[:, :24], axis=0).max() > 0
    np.testing.assert_array_equal(np.ptp(pe[:, 24:], axis=0), 0.0)


def test_encodings_distinct_over_sweep():
    pe = positional_encoding((4, 8, 8), 64)
    assert np.unique(pe, axis=0).shape[0] == 256


def test_encodings_bounded_and_deterministic():
    a, b = positional_encoding((2, 4, 4), 32), positional_encoding((2, 4, 4), 32)
    assert a.tobytes() == b.tobytes()
    assert np.abs(a).max() <= 1.0


def test_odd_axis_width_rejected():
    with pytest.raises(ValueError):
        positional_encoding((2, 2, 2), 12, widths=(4, 5, 3))
