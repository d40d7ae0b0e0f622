"""Multi-head attention, pooled ("multi-scale") transformer blocks and
fixed sinusoidal spatio-temporal position encodings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import DimensionError, DomainError, Tensor

Grid = tuple[int, int, int]


class EmptyKeyError(DomainError):
    """Attention was asked to attend over zero keys."""


@dataclass(frozen=True)
class MHAConfig:
    d_model: int
    heads: int = 4
    attn_scale: str = "dk"
    kv_pool_stride: Grid = (1, 1, 1)
    q_pool_stride: Grid = (1, 1, 1)
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.attn_scale not in ("dk", "sqrt_dk"):
            raise ValueError(f"attn_scale must be 'dk' or 'sqrt_dk', got {self.attn_scale!r}")
        for s in (*self.kv_pool_stride, *self.q_pool_stride):
            if s < 1:
                raise ValueError("pool strides must be >= 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def score_divisor(self) -> float:
        # dk is the default here; sqrt_dk is the usual transformer choice
        return float(self.d_k) if self.attn_scale == "dk" else float(np.sqrt(self.d_k))


def _order_keys(kv: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Value-determined order of key rows per batch item.

    Primary key is the row's mask column pattern, secondary a fixed linear
    projection of the row; ties between distinct rows fall back to a full
    lexicographic sort.
    """
    B, nk, d = kv.shape
    w = np.cos(np.arange(1, d + 1) * 0.6180339887498949) + 1.5
    score = kv @ w
    if mask is None:
        code = np.zeros((B, nk))
    else:
        nq = mask.shape[1]
        code = mask.argmax(axis=1) * (nq + 1.0) + mask.sum(axis=1)
    order = np.empty((B, nk), dtype=np.intp)
    for b in range(B):
        pairs = np.stack([code[b], score[b]], axis=1)
        order[b] = np.lexsort((score[b], code[b]))
        if np.unique(pairs, axis=0).shape[0] != nk:
            rows = np.concatenate([code[b][:, None], kv[b]], axis=1)
            order[b] = np.lexsort(rows.T[::-1])
    return order


class MultiHeadAttention(Module):
    """Per head ``softmax(Q K^T / s) V`` on projected tokens, heads concatenated
    and projected by ``W_o``.

    With ``canonical_kv`` the (key, value) rows are put in a value-determined
    order first, so any permutation of them gives bit-identical output.
    """

    def __init__(self, rng, cfg: MHAConfig, canonical_kv: bool = False):
        d = cfg.d_model
        self.cfg = cfg
        self.canonical_kv = canonical_kv
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)

    def __call__(self, q: Tensor, kv: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        squeeze = q.ndim == 2
        if squeeze:
            q = q.reshape(1, *q.shape)
            kv = kv.reshape(1, *kv.shape)
            if key_mask is not None:
                key_mask = np.asarray(key_mask)[None]
        if q.ndim != 3 or kv.ndim != 3 or q.shape[0] != kv.shape[0]:
            raise DimensionError(f"attention inputs {q.shape} / {kv.shape} are not (B, N, d)")
        d = self.cfg.d_model
        if q.shape[-1] != d or kv.shape[-1] != d:
            raise DimensionError(f"token width must be {d}, got {q.shape[-1]} and {kv.shape[-1]}")
        B, nq, nk = q.shape[0], q.shape[1], kv.shape[1]
        if nq == 0:
            raise DimensionError("attention needs at least one query")
        if nk == 0:
            raise EmptyKeyError("attention over an empty key set")
        mask = None
        if key_mask is not None:
            mask = np.broadcast_to(np.asarray(key_mask, dtype=bool), (B, nq, nk))
        if self.canonical_kv and nk > 1:
            order = _order_keys(kv.data, mask)
            flat = (order + np.arange(B)[:, None] * nk).reshape(-1)
            kv = T.take(kv.reshape(B * nk, d), flat, axis=0).reshape(B, nk, d)
            if mask is not None:
                mask = np.take_along_axis(mask, np.broadcast_to(order[:, None, :], mask.shape), axis=2)
        h, dk = self.cfg.heads, self.cfg.d_k
        Q = self.wq(q).reshape(B, nq, h, dk).transpose(0, 2, 1, 3)
        K = self.wk(kv).reshape(B, nk, h, dk).transpose(0, 2, 3, 1)
        V = self.wv(kv).reshape(B, nk, h, dk).transpose(0, 2, 1, 3)
        scores = (Q @ K) * (1.0 / self.cfg.score_divisor)
        weights = T.softmax(scores, axis=-1, mask=None if mask is None else mask[:, None])
        heads = (weights @ V).transpose(0, 2, 1, 3).reshape(B, nq, d)
        out = self.wo(heads)
        return out.reshape(nq, d) if squeeze else out


def multi_head_attention(
    q_tokens: Tensor, kv_tokens: Tensor, attn: MultiHeadAttention, key_mask=None
) -> Tensor:
    return attn(q_tokens, kv_tokens, key_mask)


def positional_encoding(grid: Grid, d_model: int, widths: Grid | None = None) -> np.ndarray:
    """Fixed sin/cos encodings for a (t, y, x) token grid, shape (t*y*x, d_model).

    Each axis gets its own slice of the width with interleaved sin/cos at
    wavelengths growing geometrically (base 10000).
    """
    if widths is None:
        base = (d_model // 3) // 2 * 2
        widths = (d_model - 2 * base, base, base)
    if sum(widths) != d_model:
        raise ValueError(f"axis widths {widths} do not sum to {d_model}")
    if any(w % 2 or w <= 0 for w in widths):
        raise ValueError(f"every axis width must be even and positive, got {widths}")
    parts = []
    for extent, w in zip(grid, widths):
        pos = np.arange(extent, dtype=np.float64)[:, None]
        freq = 1.0 / 10000.0 ** (np.arange(0, w, 2, dtype=np.float64) / w)
        enc = np.empty((extent, w))
        enc[:, 0::2] = np.sin(pos * freq)
        enc[:, 1::2] = np.cos(pos * freq)
        parts.append(enc)
    t, y, x = grid
    pe = np.concatenate(
        [
            np.broadcast_to(parts[0][:, None, None, :], (t, y, x, widths[0])),
            np.broadcast_to(parts[1][None, :, None, :], (t, y, x, widths[1])),
            np.broadcast_to(parts[2][None, None, :, :], (t, y, x, widths[2])),
        ],
        axis=-1,
    )
    return np.ascontiguousarray(pe.reshape(t * y * x, d_model))


def pool_grid(tokens: Tensor, grid: Grid, stride: Grid) -> tuple[Tensor, Grid]:
    """Non-overlapping mean pooling of (B, t*y*x, d) tokens over their grid."""
    t, y, x = grid
    st, sy, sx = stride
    if (st, sy, sx) == (1, 1, 1):
        return tokens, grid
    if t % st or y % sy or x % sx:
        raise DimensionError(f"grid {grid} not divisible by pool stride {stride}")
    B, n, d = tokens.shape
    if n != t * y * x:
        raise DimensionError(f"{n} tokens do not fill grid {grid}")
    g = (t // st, y // sy, x // sx)
    pooled = tokens.reshape(B, g[0], st, g[1], sy, g[2], sx, d).mean(axis=(2, 4, 6))
    return pooled.reshape(B, g[0] * g[1] * g[2], d), g


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng, cfg: MHAConfig):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(rng, cfg)
        self.ln2 = LayerNorm(cfg.d_model)
        self.mlp = MLP(rng, cfg.d_model, cfg.mlp_ratio * cfg.d_model, cfg.d_model)

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, key_mask)
        return x + self.mlp(self.ln2(x))


class MultiscaleBlock(Module):
    """Pre-norm block whose keys/values (and optionally queries) are mean-pooled
    over the token grid.

    Tokens past the grid (``n_extra`` of them, e.g. appended object tokens)
    are never pooled; ``extra_mask`` (B, n_extra) marks which are real.
    """

    def __init__(self, rng, cfg: MHAConfig):
        self.cfg = cfg
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(rng, cfg)
        self.ln2 = LayerNorm(cfg.d_model)
        self.mlp = MLP(rng, cfg.d_model, cfg.mlp_ratio * cfg.d_model, cfg.d_model)

    def __call__(
        self, x: Tensor, grid: Grid, n_extra: int = 0, extra_mask: np.ndarray | None = None
    ) -> tuple[Tensor, Grid]:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        n_grid = grid[0] * grid[1] * grid[2]
        if x.shape[1] != n_grid + n_extra:
            raise DimensionError(
                f"{x.shape[1]} tokens but grid {grid} plus {n_extra} extra needs {n_grid + n_extra}"
            )
        h = self.ln1(x)
        if n_extra:
            hg, he = h[:, :n_grid], h[:, n_grid:]
            xg, xe = x[:, :n_grid], x[:, n_grid:]
        else:
            hg, xg = h, x
        kv, kv_grid = pool_grid(hg, grid, self.cfg.kv_pool_stride)
        q, q_grid = pool_grid(hg, grid, self.cfg.q_pool_stride)
        res, _ = pool_grid(xg, grid, self.cfg.q_pool_stride)
        mask = None
        if n_extra:
            kv = T.concat([kv, he], axis=1)
            q = T.concat([q, he], axis=1)
            res = T.concat([res, xe], axis=1)
            B = x.shape[0]
            n_kv_grid = kv_grid[0] * kv_grid[1] * kv_grid[2]
            em = np.ones((B, n_extra), bool) if extra_mask is None else np.asarray(extra_mask, bool)
            mask = np.concatenate([np.ones((B, n_kv_grid), bool), em], axis=1)[:, None, :]
        x = res + self.attn(q, kv, mask)
        x = x + self.mlp(self.ln2(x))
        if squeeze:
            x = x.reshape(x.shape[1], x.shape[2])
        return x, q_grid


class CrossBlock(Module):
    """Decoder block: query self-attention, cross-attention to memory, MLP."""

    def __init__(self, rng, cfg: MHAConfig):
        d = cfg.d_model
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, cfg)
        self.ln_cross = LayerNorm(d)
        self.ln_mem = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, cfg)
        self.ln_mlp = LayerNorm(d)
        self.mlp = MLP(rng, d, cfg.mlp_ratio * d, d)

    def __call__(self, queries: Tensor, memory: Tensor, memory_mask=None) -> Tensor:
        h = self.ln_self(queries)
        x = queries + self.self_attn(h, h)
        x = x + self.cross_attn(self.ln_cross(x), self.ln_mem(memory), memory_mask)
        return x + self.mlp(self.ln_mlp(x))
