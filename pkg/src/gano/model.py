"""The end-to-end anticipation network.

clip frames -> Conv3D patch tokens -> object fusion -> position encoding ->
pooled-attention encoder -> ROI / learnable queries -> decoder -> heads
(noun, verb, box, time to contact).

All clips of a batch are processed together; variable detection counts are
padded and masked.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from . import tensor_io
from .attention import CrossBlock, MHAConfig, MultiscaleBlock, positional_encoding
from .config import ConfigError, ModelConfig, TrainConfig, dump_run, model_from_dict, parse, train_from_dict
from .data import Box, Clip, Detection
from .fusion import ConcatFusion, GuidedFusion
from .nn import LayerNorm, Linear, Module, stage_rng, uniform_param
from .tensor import Tensor

# confidence of padding slots in detector-box mode; fixed so the ranking never
# depends on model weights there
PADDING_CONFIDENCE = 1e-6
FULL_FRAME: Box = (0.5, 0.5, 1.0, 1.0)


@dataclass
class STAPrediction:
    box: Box
    noun: int
    noun_probs: np.ndarray
    verb: int
    verb_probs: np.ndarray
    ttc: float
    confidence: float
    query: int
    roi_backed: bool


@dataclass
class Batch:
    """Numpy side-inputs for a batch of clips."""

    frames: np.ndarray  # (B, C, T, H, W)
    obj_boxes: np.ndarray  # (B, M, 4)
    obj_frames: np.ndarray  # (B, M)
    obj_valid: np.ndarray  # (B, M)
    roi_weights: np.ndarray  # (B, K, cells of the last encoder slice)
    roi_boxes: np.ndarray  # (B, K, 4)
    roi_nouns: np.ndarray  # (B, K)
    roi_scores: np.ndarray  # (B, K)
    is_roi: np.ndarray  # (B, K)


@dataclass
class ModelOutput:
    noun_logits: Tensor  # (B, K, n_nouns + 1), last class = background
    verb_logits: Tensor  # (B, K, n_verbs)
    boxes: Tensor  # (B, K, 4)
    ttc: Tensor  # (B, K)
    batch: Batch


def canonical_detections(dets: list[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (d.frame, d.box, d.noun, -d.score))


def roi_cell_weights(box: Box, grid_yx: tuple[int, int]) -> np.ndarray:
    """Averaging weights over a (gy, gx) cell grid: cells whose centres lie in
    the box (edges inclusive), or the single nearest cell when none do."""
    gy, gx = grid_yx
    cy = (np.arange(gy) + 0.5) / gy
    cx = (np.arange(gx) + 0.5) / gx
    bx, by, bw, bh = box
    inside = (np.abs(cy[:, None] - by) <= bh / 2) & (np.abs(cx[None, :] - bx) <= bw / 2)
    w = np.zeros((gy, gx))
    if inside.any():
        w[inside] = 1.0 / inside.sum()
    else:
        d2 = (cy[:, None] - by) ** 2 + (cx[None, :] - bx) ** 2
        w.flat[int(np.argmin(d2))] = 1.0
    return w.reshape(-1)


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-4, 1 - 1e-4)
    return np.log(p / (1 - p))


class GANO(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        d = cfg.d_model
        enc_cfg = MHAConfig(d, cfg.heads, cfg.attn_scale, cfg.kv_pool_stride, cfg.q_pool_stride, cfg.mlp_ratio)
        flat_cfg = MHAConfig(d, cfg.heads, cfg.attn_scale, mlp_ratio=cfg.mlp_ratio)

        rng = stage_rng(seed, "patch_embed")
        fan_in = cfg.channels * int(np.prod(cfg.patch_kernel))
        self.patch_weight = uniform_param(rng, (d, cfg.channels, *cfg.patch_kernel), fan_in)
        self.patch_bias = uniform_param(rng, (d,), fan_in)

        rng = stage_rng(seed, f"fusion.{cfg.fusion}")
        if cfg.fusion == "guided":
            self.fusion = GuidedFusion(rng, flat_cfg, cfg.box_hidden)
        elif cfg.fusion == "concat":
            self.fusion = ConcatFusion(rng, flat_cfg, cfg.box_hidden)
        else:
            self.fusion = None

        self.encoder = [MultiscaleBlock(stage_rng(seed, f"encoder.{i}"), enc_cfg) for i in range(cfg.encoder_depth)]
        self.encoder_norm = LayerNorm(d)

        rng = stage_rng(seed, "queries")
        self.query_embed = Tensor(rng.normal(scale=0.5, size=(cfg.queries, d)), requires_grad=True)
        self.query_ref = Tensor(rng.normal(scale=1.0, size=(cfg.queries, 4)), requires_grad=True)

        self.decoder = [CrossBlock(stage_rng(seed, f"decoder.{i}"), flat_cfg) for i in range(cfg.decoder_depth)]
        self.decoder_norm = LayerNorm(d)

        rng = stage_rng(seed, "heads")
        self.noun_head = Linear(rng, d, cfg.n_nouns + 1)
        self.verb_head = Linear(rng, d, cfg.n_verbs)
        self.box_head = Linear(rng, d, 4)
        self.ttc_head = Linear(rng, d, 1)
        # softplus(0.5413) == 1 s, the middle of the expected contact range
        self.ttc_head.bias.data[:] = 0.5413

        self._grid = cfg.token_grid
        self._pe = positional_encoding(self._grid, d)
        g = self._grid
        for _ in range(cfg.encoder_depth):
            g = tuple(a // s for a, s in zip(g, cfg.q_pool_stride))
        self._enc_grid = g

    # -- stage helpers ------------------------------------------------------
    def stage_parameters(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for name, p in self.named_parameters():
            stage = name.split(".")[0]
            counts[stage] = counts.get(stage, 0) + p.size
        return counts

    def collate(self, clips: list[Clip]) -> Batch:
        cfg = self.cfg
        B, K = len(clips), cfg.queries
        for c in clips:
            if c.frames.shape != (cfg.channels, cfg.frames, cfg.height, cfg.width):
                raise ConfigError(
                    f"clip {c.clip_id}: frames {c.frames.shape} do not match model input "
                    f"{(cfg.channels, cfg.frames, cfg.height, cfg.width)}"
                )
        dets = [canonical_detections(c.detections) for c in clips]
        M = max((len(d) for d in dets), default=0)
        obj_boxes = np.tile(np.array(FULL_FRAME), (B, M, 1))
        obj_frames = np.zeros((B, M), dtype=np.intp)
        obj_valid = np.zeros((B, M), dtype=bool)
        gy, gx = self._enc_grid[1:]
        roi_weights = np.zeros((B, K, gy * gx))
        roi_boxes = np.tile(np.array(FULL_FRAME), (B, K, 1))
        roi_nouns = np.full((B, K), -1, dtype=np.intp)
        roi_scores = np.zeros((B, K))
        is_roi = np.zeros((B, K), dtype=bool)
        last = cfg.frames - 1
        for b, ds in enumerate(dets):
            for j, d in enumerate(ds):
                obj_boxes[b, j] = d.box
                obj_frames[b, j] = d.frame
                obj_valid[b, j] = True
            final = sorted((d for d in ds if d.frame == last), key=lambda d: (-d.score, d.box, d.noun))[:K]
            for k, d in enumerate(final):
                roi_weights[b, k] = roi_cell_weights(d.box, (gy, gx))
                roi_boxes[b, k] = d.box
                roi_nouns[b, k] = d.noun
                roi_scores[b, k] = d.score
                is_roi[b, k] = True
        frames = np.stack([c.frames for c in clips]) if clips else np.zeros((0,))
        return Batch(frames, obj_boxes, obj_frames, obj_valid, roi_weights, roi_boxes, roi_nouns, roi_scores, is_roi)

    def guidance_mask(self, batch: Batch) -> np.ndarray:
        """(B, N, M): patch token n may attend to object m."""
        cfg = self.cfg
        t, y, x = self._grid
        valid = batch.obj_valid[:, None, :]
        if cfg.guidance == "global":
            return np.broadcast_to(valid, (valid.shape[0], t * y * x, valid.shape[2]))
        kt, st, pt = cfg.patch_kernel[0], cfg.patch_stride[0], cfg.patch_padding[0]
        start = np.arange(t) * st - pt
        slice_of = np.repeat(np.arange(t), y * x)
        lo = start[slice_of][None, :, None]
        f = batch.obj_frames[:, None, :]
        return valid & (f >= lo) & (f < lo + kt)

    # -- forward stages -------------------------------------------------------
    def tokenize(self, frames: np.ndarray) -> Tensor:
        cfg = self.cfg
        x = T.conv3d(Tensor(frames), self.patch_weight, self.patch_bias, cfg.patch_stride, cfg.patch_padding)
        B, d = x.shape[0], cfg.d_model
        n = int(np.prod(x.shape[2:]))
        return x.transpose(0, 2, 3, 4, 1).reshape(B, n, d)

    def fuse(self, patches: Tensor, batch: Batch) -> tuple[Tensor, int, np.ndarray | None]:
        """Returns (tokens incl. position encoding, number of extra tokens, extra mask)."""
        cfg = self.cfg
        M = batch.obj_boxes.shape[1]
        if cfg.fusion == "guided":
            if M:
                patches = self.fusion(patches, batch.obj_boxes, self.guidance_mask(batch))
            return patches + self._pe, 0, None
        tokens = patches + self._pe
        if cfg.fusion == "concat" and M:
            return self.fusion(tokens, batch.obj_boxes), M, batch.obj_valid
        return tokens, 0, None

    def encode(self, tokens: Tensor, n_extra: int = 0, extra_mask=None) -> tuple[Tensor, tuple]:
        grid = self._grid
        if not self.encoder:
            return tokens, grid
        for block in self.encoder:
            tokens, grid = block(tokens, grid, n_extra, extra_mask)
        return self.encoder_norm(tokens), grid

    def build_queries(self, memory: Tensor, grid, batch: Batch) -> Tensor:
        t, y, x = grid
        B = memory.shape[0]
        last = memory[:, (t - 1) * y * x : t * y * x]
        roi = Tensor(batch.roi_weights) @ last
        pad = (~batch.is_roi).astype(np.float64)[..., None]
        if not pad.any():
            return roi
        return roi + Tensor(pad) * self.query_embed.reshape(1, *self.query_embed.shape)

    def decode(self, queries: Tensor, memory: Tensor, memory_mask=None) -> Tensor:
        for block in self.decoder:
            queries = block(queries, memory, memory_mask)
        return self.decoder_norm(queries)

    def heads(self, h: Tensor, batch: Batch) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        ref = T.where(batch.is_roi[..., None], Tensor(_logit(batch.roi_boxes)), self.query_ref)
        boxes = T.sigmoid(ref + self.box_head(h))
        ttc = T.softplus(self.ttc_head(h)).reshape(h.shape[0], h.shape[1])
        return self.noun_head(h), self.verb_head(h), boxes, ttc

    def forward(self, clips: list[Clip]) -> ModelOutput:
        batch = self.collate(clips)
        patches = self.tokenize(batch.frames)
        tokens, n_extra, extra_mask = self.fuse(patches, batch)
        memory, grid = self.encode(tokens, n_extra, extra_mask)
        n_grid = grid[0] * grid[1] * grid[2]
        queries = self.build_queries(memory[:, :n_grid] if n_extra else memory, grid, batch)
        mem_mask = None
        if n_extra:
            B = memory.shape[0]
            mem_mask = np.concatenate([np.ones((B, n_grid), bool), extra_mask], axis=1)[:, None, :]
        h = self.decode(queries, memory, mem_mask)
        noun, verb, boxes, ttc = self.heads(h, batch)
        return ModelOutput(noun, verb, boxes, ttc, batch)

    __call__ = forward

    # -- predictions ------------------------------------------------------------
    def predictions(self, out: ModelOutput) -> list[list[STAPrediction]]:
        cfg = self.cfg
        nl, vl = out.noun_logits.data, out.verb_logits.data
        noun_p = np.exp(nl - nl.max(-1, keepdims=True))
        noun_p /= noun_p.sum(-1, keepdims=True)
        verb_p = np.exp(vl - vl.max(-1, keepdims=True))
        verb_p /= verb_p.sum(-1, keepdims=True)
        b = out.batch
        result = []
        for i in range(nl.shape[0]):
            preds = []
            for k in range(nl.shape[1]):
                vp = verb_p[i, k]
                if cfg.predict_boxes:
                    fg = noun_p[i, k, : cfg.n_nouns]
                    box = tuple(float(v) for v in out.boxes.data[i, k])
                    noun = int(np.argmax(fg))
                    probs = fg
                    conf = float(fg.max())
                elif b.is_roi[i, k]:
                    box = tuple(float(v) for v in b.roi_boxes[i, k])
                    noun = int(b.roi_nouns[i, k])
                    probs = np.zeros(cfg.n_nouns)
                    if 0 <= noun < cfg.n_nouns:
                        probs[noun] = 1.0
                    conf = float(b.roi_scores[i, k])
                else:
                    box, noun, probs, conf = FULL_FRAME, -1, np.zeros(cfg.n_nouns), PADDING_CONFIDENCE
                preds.append(
                    STAPrediction(
                        box=box,
                        noun=noun,
                        noun_probs=probs,
                        verb=int(np.argmax(vp)),
                        verb_probs=vp,
                        ttc=float(out.ttc.data[i, k]),
                        confidence=conf,
                        query=k,
                        roi_backed=bool(b.is_roi[i, k]),
                    )
                )
            result.append(preds)
        return result

    def predict(self, clips: list[Clip]) -> list[list[STAPrediction]]:
        with T.no_grad():
            return self.predictions(self.forward(clips))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CONFIG_FILE = "config.txt"
PARAMS_FILE = "params.gt"
INDEX_FILE = "index.txt"


def save_checkpoint(path, model: GANO, train_cfg: TrainConfig | None = None) -> None:
    """Directory with the canonical config text, concatenated GTNSR1
    parameter tensors, and an index of ``name offset nbytes`` lines."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / CONFIG_FILE).write_text(dump_run(model.cfg, train_cfg) + f"[init]\nseed = {model.seed}\n", encoding="utf-8")
    buf = io.BytesIO()
    lines = []
    for name, p in model.named_parameters():
        start = buf.tell()
        tensor_io.write_stream(buf, p.data)
        lines.append(f"{name} {start} {buf.tell() - start}")
    (root / PARAMS_FILE).write_bytes(buf.getvalue())
    (root / INDEX_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[GANO, TrainConfig]:
    root = Path(path)
    if not (root / CONFIG_FILE).is_file():
        raise ConfigError(f"{root}: not a checkpoint directory (missing {CONFIG_FILE})")
    sections = parse((root / CONFIG_FILE).read_text(encoding="utf-8"), str(root / CONFIG_FILE))
    seed = int(sections.get("init", {}).get("seed", 0))
    model_cfg = model_from_dict(sections.get("model", {}))
    train_cfg = train_from_dict(sections.get("train", {}))
    model = GANO(model_cfg, seed=seed)
    blob = (root / PARAMS_FILE).read_bytes()
    index = {}
    for line in (root / INDEX_FILE).read_text(encoding="utf-8").splitlines():
        name, start, _ = line.split()
        index[name] = int(start)
    for name, p in model.named_parameters():
        if name not in index:
            raise ConfigError(f"{root}: checkpoint lacks parameter {name}")
        arr, _ = tensor_io.decode(blob, index[name])
        if arr.shape != p.shape:
            raise ConfigError(f"{root}: parameter {name} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.copy()
    return model, train_cfg
