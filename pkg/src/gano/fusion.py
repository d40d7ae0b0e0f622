"""Fusing video patch tokens with object-detection embeddings.

``object_guided_attention`` lets every patch token query the object
embeddings (patches are Q, objects are K and V) and adds the attended value
back onto the patch.  ``concat_fusion_baseline`` is the ablation arm that
simply appends projected object embeddings as extra tokens.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import MHAConfig, MultiHeadAttention
from .nn import MLP, Linear, Module
from .tensor import DimensionError, Tensor


class BoxValidationError(ValueError):
    pass


def validate_boxes(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) if len(boxes) else np.zeros((0, 4))
    cx, cy, w, h = b.T
    bad = (cx < 0) | (cx > 1) | (cy < 0) | (cy > 1) | (w <= 0) | (w > 1) | (h <= 0) | (h > 1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise BoxValidationError(f"box {i} = {tuple(b[i])} is outside the normalised range")
    return b


class ObjectEmbedder(Module):
    """(cx, cy, w, h) -> d_model through linear -> GELU -> linear."""

    def __init__(self, rng, d_model: int, hidden: int = 32):
        self.mlp = MLP(rng, 4, hidden, d_model)
        self.d_model = d_model

    def __call__(self, boxes) -> Tensor:
        if isinstance(boxes, Tensor):
            return self.mlp(boxes)
        arr = np.asarray(boxes, dtype=np.float64)
        if arr.size == 0:
            return Tensor(np.zeros(arr.shape[:-1] + (self.d_model,) if arr.ndim > 1 else (0, self.d_model)))
        validate_boxes(arr.reshape(-1, 4))
        return self.mlp(Tensor(arr))


def embed_boxes(boxes, embedder: ObjectEmbedder) -> Tensor:
    return embedder(boxes)


def object_guided_attention(
    patches: Tensor, objects: Tensor, attn: MultiHeadAttention, key_mask: np.ndarray | None = None
) -> Tensor:
    """``patches + attn(Q=patches, K=V=objects)``.

    With no objects (or, per patch, no unmasked object) the patch passes
    through unchanged.
    """
    if patches.shape[-1] != objects.shape[-1]:
        raise DimensionError(
            f"patch width {patches.shape[-1]} differs from object width {objects.shape[-1]}"
        )
    if objects.shape[-2] == 0:
        return patches
    attended = attn(patches, objects, key_mask)
    if key_mask is None:
        return patches + attended
    mask = np.broadcast_to(np.asarray(key_mask, bool), patches.shape[:-1] + (objects.shape[-2],))
    has_keys = mask.any(axis=-1)
    if has_keys.all():
        return patches + attended
    return patches + attended * has_keys[..., None].astype(np.float64)


def concat_fusion_baseline(patches: Tensor, objects: Tensor, proj: Linear) -> Tensor:
    """Append projected object embeddings after the patch tokens."""
    if patches.shape[-1] != objects.shape[-1]:
        raise DimensionError(
            f"patch width {patches.shape[-1]} differs from object width {objects.shape[-1]}"
        )
    if objects.shape[-2] == 0:
        return patches
    return T.concat([patches, proj(objects)], axis=-2)


class GuidedFusion(Module):
    def __init__(self, rng, cfg: MHAConfig, box_hidden: int = 32):
        self.embedder = ObjectEmbedder(rng, cfg.d_model, box_hidden)
        self.attn = MultiHeadAttention(rng, cfg, canonical_kv=True)

    def __call__(self, patches: Tensor, boxes, key_mask=None) -> Tensor:
        return object_guided_attention(patches, self.embedder(boxes), self.attn, key_mask)


class ConcatFusion(Module):
    def __init__(self, rng, cfg: MHAConfig, box_hidden: int = 32):
        self.embedder = ObjectEmbedder(rng, cfg.d_model, box_hidden)
        self.proj = Linear(rng, cfg.d_model, cfg.d_model)

    def __call__(self, patches: Tensor, boxes) -> Tensor:
        return concat_fusion_baseline(patches, self.embedder(boxes), self.proj)
