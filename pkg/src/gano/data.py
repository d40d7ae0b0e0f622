"""Clips, annotations, the synthetic next-active-object generator,
augmentation and the on-disk dataset format.

A dataset directory holds ``manifest`` (UTF-8 JSON, schema ``version: 1``)
and ``tensors/clip_<k>.gt`` frame tensors in GTNSR1 encoding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np
from scipy import ndimage

from . import tensor_io

Box = tuple[float, float, float, float]

MANIFEST = "manifest"
SCHEMA_VERSION = 1


class DataError(ValueError):
    pass


class GenerationError(DataError):
    pass


@dataclass(frozen=True)
class Detection:
    frame: int
    box: Box  # (cx, cy, w, h), normalised
    noun: int
    score: float = 1.0


@dataclass(frozen=True)
class NAOTarget:
    box: Box
    noun: int
    verb: int
    ttc: float


@dataclass
class Clip:
    clip_id: str
    frames: np.ndarray  # (C, T, H, W)
    fps: float
    detections: list[Detection]
    target: NAOTarget | None = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]

    def detections_in(self, frame: int) -> list[Detection]:
        return [d for d in self.detections if d.frame == frame]


@dataclass
class Dataset:
    clips: list[Clip]
    n_nouns: int
    n_verbs: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clips)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.clips[i] for i in indices], self.n_nouns, self.n_verbs, dict(self.meta))


# ---------------------------------------------------------------------------
# box helpers
# ---------------------------------------------------------------------------


def to_corners(box: Box) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def from_corners(x0: float, y0: float, x1: float, y1: float) -> Box:
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def clip_box(box: Box) -> Box | None:
    """Clip to the unit square; None when nothing is left."""
    x0, y0, x1, y1 = to_corners(box)
    x0, y0 = min(max(x0, 0.0), 1.0), min(max(y0, 0.0), 1.0)
    x1, y1 = min(max(x1, 0.0), 1.0), min(max(y1, 0.0), 1.0)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return from_corners(x0, y0, x1, y1)


# ---------------------------------------------------------------------------
# frame sampling
# ---------------------------------------------------------------------------


def sample_frames(raw_length: int, clip_len: int, rate: int) -> list[int]:
    """Indices of ``clip_len`` frames ``rate`` apart, ending at the last raw frame."""
    if clip_len < 1 or rate < 1:
        raise DataError("clip_len and rate must be positive")
    if raw_length < clip_len * rate:
        raise DataError(
            f"need at least {clip_len * rate} raw frames for {clip_len} at rate {rate}, got {raw_length}"
        )
    last = raw_length - 1
    return [last - rate * k for k in reversed(range(clip_len))]


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    height: int = 32
    width: int = 32
    clip_len: int = 8
    sample_rate: int = 1
    fps: float = 4.0
    n_nouns: int = 5
    n_verbs: int = 4
    min_objects: int = 2
    max_objects: int = 3
    min_size: int = 7
    max_size: int = 12
    hand_size: float = 4.0
    hand_speed: float = 2.0  # pixels per sampled frame
    min_gap: int = 2  # sampled frames from the last observed frame to contact
    max_gap: int = 8
    jitter: float = 0.0
    pixel_noise: float = 0.02
    max_tries: int = 200

    def validate(self) -> None:
        if self.height < 4 or self.width < 4 or self.clip_len < 1 or self.sample_rate < 1:
            raise GenerationError("frame extents, clip length and sample rate must be positive")
        if self.fps <= 0:
            raise GenerationError("fps must be positive")
        if self.n_nouns < 1 or self.n_verbs < 1:
            raise GenerationError("vocabularies must be nonempty")
        if not 1 <= self.min_objects <= self.max_objects:
            raise GenerationError("need 1 <= min_objects <= max_objects")
        if not 1 <= self.min_size <= self.max_size:
            raise GenerationError("need 1 <= min_size <= max_size")
        if not 1 <= self.min_gap <= self.max_gap:
            raise GenerationError("need 1 <= min_gap <= max_gap")
        if self.jitter < 0 or self.pixel_noise < 0:
            raise GenerationError("noise amplitudes must be nonnegative")


def noun_colour(noun: int, n_nouns: int) -> tuple[float, float, float]:
    """Fill colour encoding a noun id; red stays low so the hand is unique."""
    m = max(2, math.ceil(math.sqrt(n_nouns)))
    levels = np.linspace(0.3, 1.0, m)
    return 0.15, float(levels[noun % m]), float(levels[noun // m])


def approach_class(direction: np.ndarray) -> int:
    """0 = sideways, 1 = from above, 2 = from below (invariant to horizontal flips)."""
    dx, dy = direction
    if abs(dx) >= abs(dy):
        return 0
    return 1 if dy > 0 else 2


def verb_for(noun: int, direction: np.ndarray, n_verbs: int) -> int:
    return (noun + approach_class(direction)) % n_verbs


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


def _place_objects(rng, cfg: SynthConfig, count: int) -> list[tuple[int, int, int, int]]:
    rects: list[tuple[int, int, int, int]] = []
    for _ in range(cfg.max_tries):
        if len(rects) == count:
            return rects
        w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        if w > cfg.width - 2 or h > cfg.height - 2:
            raise GenerationError("objects larger than the frame")
        x0 = int(rng.integers(1, cfg.width - w))
        y0 = int(rng.integers(1, cfg.height - h))
        cand = (x0, y0, w, h)
        if all(_separated(cand, r, gap=2) for r in rects):
            rects.append(cand)
    if len(rects) == count:
        return rects
    raise GenerationError(f"could not place {count} disjoint objects in {cfg.width}x{cfg.height}")


def _separated(a, b, gap: int) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax + aw + gap <= bx or bx + bw + gap <= ax or ay + ah + gap <= by or by + bh + gap <= ay


def _hand_path(rng, cfg: SynthConfig, target, others, gap_raw: int, n_raw: int):
    """Sample an approach direction whose final observed hand position is in
    frame and clear of every object.  Returns (direction, positions)."""
    x0, y0, w, h = target
    centre = np.array([x0 + w / 2, y0 + h / 2])
    speed = cfg.hand_speed / cfg.sample_rate
    half = cfg.hand_size / 2
    for _ in range(cfg.max_tries):
        theta = rng.uniform(0, 2 * np.pi)
        u = np.array([np.cos(theta), np.sin(theta)])
        reach = min(
            (w / 2) / abs(u[0]) if abs(u[0]) > 1e-9 else np.inf,
            (h / 2) / abs(u[1]) if abs(u[1]) > 1e-9 else np.inf,
        )
        contact = centre - u * reach
        f_contact = (n_raw - 1) + gap_raw
        pos = np.array([contact - u * speed * (f_contact - f) for f in range(n_raw)])
        last = pos[-1]
        if not (half <= last[0] <= cfg.width - half and half <= last[1] <= cfg.height - half):
            continue
        hand = (last[0] - half, last[1] - half, cfg.hand_size, cfg.hand_size)
        if all(_separated_f(hand, r) for r in [target, *others]):
            return u, pos
    raise GenerationError("no approach direction keeps the hand in view")


def _separated_f(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax + aw <= bx or bx + bw <= ax or ay + ah <= by or by + bh <= ay


def _jitter_box(rng, box: Box, amount: float) -> Box:
    if amount == 0:
        return box
    cx, cy, w, h = box
    n = rng.normal(size=4)
    jittered = (
        cx + amount * w * n[0],
        cy + amount * h * n[1],
        w * math.exp(amount * n[2]),
        h * math.exp(amount * n[3]),
    )
    return clip_box(jittered) or box


def generate_clip(seed: int, index: int, cfg: SynthConfig) -> Clip:
    rng = np.random.default_rng([int(seed), int(index)])
    H, W = cfg.height, cfg.width
    n_raw = cfg.clip_len * cfg.sample_rate
    # a crowded layout may leave no room or no clear approach; draw a new scene
    for attempt in range(cfg.max_tries):
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        try:
            rects = _place_objects(rng, cfg, count)
            nouns = [int(rng.integers(cfg.n_nouns)) for _ in rects]
            t_idx = int(rng.integers(count))
            gap = int(rng.integers(cfg.min_gap, cfg.max_gap + 1))
            others = [r for i, r in enumerate(rects) if i != t_idx]
            direction, hand = _hand_path(rng, cfg, rects[t_idx], others, gap * cfg.sample_rate, n_raw)
            break
        except GenerationError:
            if attempt == cfg.max_tries - 1:
                raise

    raw = np.zeros((3, n_raw, H, W))
    for (x0, y0, w, h), noun in zip(rects, nouns):
        raw[:, :, y0 : y0 + h, x0 : x0 + w] = np.array(noun_colour(noun, cfg.n_nouns))[:, None, None, None]
    half = cfg.hand_size / 2
    for f, (px, py) in enumerate(hand):
        cov = np.outer(_coverage(py - half, py + half, H), _coverage(px - half, px + half, W))
        raw[:, f] = raw[:, f] * (1 - cov) + np.array([1.0, 0.0, 0.0])[:, None, None] * cov
    if cfg.pixel_noise:
        raw = raw + rng.normal(scale=cfg.pixel_noise, size=raw.shape)
    raw = np.clip(raw, 0.0, 1.0)
    idx = sample_frames(n_raw, cfg.clip_len, cfg.sample_rate)
    # stored as f32 on disk; round here so a write/read round trip is exact
    frames = raw[:, idx].astype(np.float32).astype(np.float64)

    boxes = [
        from_corners(x0 / W, y0 / H, (x0 + w) / W, (y0 + h) / H) for (x0, y0, w, h) in rects
    ]
    detections = [
        Detection(frame=f, box=_jitter_box(rng, b, cfg.jitter), noun=n, score=1.0)
        for f in range(cfg.clip_len)
        for b, n in zip(boxes, nouns)
    ]
    target = NAOTarget(
        box=boxes[t_idx],
        noun=nouns[t_idx],
        verb=verb_for(nouns[t_idx], direction, cfg.n_verbs),
        ttc=gap / cfg.fps,
    )
    return Clip(f"clip_{index:05d}", frames, cfg.fps, detections, target)


def generate_synthetic(seed: int, n_clips: int, cfg: SynthConfig | None = None, start: int = 0) -> Dataset:
    """Deterministic synthetic dataset; clip k uses the stream (seed, start + k)."""
    cfg = cfg or SynthConfig()
    cfg.validate()
    clips = [generate_clip(seed, start + k, cfg) for k in range(n_clips)]
    meta = {"generator": asdict(cfg), "seed": int(seed), "start": int(start)}
    return Dataset(clips, cfg.n_nouns, cfg.n_verbs, meta)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    short_side: tuple[int, int] = (37, 48)  # 256..340 for a 224 crop, scaled to 32
    crop: int = 32


def _map_box(box: Box, flip: bool, size: tuple[int, int], offset: tuple[int, int], crop: int) -> Box | None:
    cx, cy, w, h = box
    if flip:
        cx = 1.0 - cx
    Hn, Wn = size
    oy, ox = offset
    mapped = ((cx * Wn - ox) / crop, (cy * Hn - oy) / crop, w * Wn / crop, h * Hn / crop)
    return clip_box(mapped)


def apply_augmentation(
    clip: Clip, flip: bool, size: tuple[int, int], offset: tuple[int, int], crop: int
) -> Clip | None:
    """Flip, resize frames to ``size`` (H, W), crop a ``crop`` square at ``offset``.

    Returns None when the target box leaves the crop.
    """
    frames = clip.frames[..., ::-1] if flip else clip.frames
    H, W = frames.shape[2:]
    if (H, W) != tuple(size):
        frames = ndimage.zoom(frames, (1, 1, size[0] / H, size[1] / W), order=1, grid_mode=True, mode="nearest")
    oy, ox = offset
    frames = np.ascontiguousarray(frames[:, :, oy : oy + crop, ox : ox + crop])
    dets = []
    for d in clip.detections:
        b = _map_box(d.box, flip, size, offset, crop)
        if b is not None:
            dets.append(replace(d, box=b))
    target = clip.target
    if target is not None:
        tb = _map_box(target.box, flip, size, offset, crop)
        if tb is None:
            return None
        target = replace(target, box=tb)
    return Clip(clip.clip_id, frames, clip.fps, dets, target)


def augment(clip: Clip, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> Clip | None:
    cfg = cfg or AugmentConfig()
    H, W = clip.frames.shape[2:]
    flip = bool(rng.random() < cfg.flip_prob)
    short = int(rng.integers(cfg.short_side[0], cfg.short_side[1] + 1))
    if short < cfg.crop:
        raise DataError(f"crop {cfg.crop} exceeds resized short side {short}")
    scale = short / min(H, W)
    size = (max(cfg.crop, round(H * scale)), max(cfg.crop, round(W * scale)))
    offset = (int(rng.integers(0, size[0] - cfg.crop + 1)), int(rng.integers(0, size[1] - cfg.crop + 1)))
    return apply_augmentation(clip, flip, size, offset, cfg.crop)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

_BOX = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "n_nouns", "n_verbs", "clips"],
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "n_nouns": {"type": "integer", "minimum": 1},
        "n_verbs": {"type": "integer", "minimum": 1},
        "meta": {"type": "object"},
        "clips": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "frames", "fps", "detections"],
                "properties": {
                    "id": {"type": "string"},
                    "frames": {"type": "string"},
                    "fps": {"type": "number", "exclusiveMinimum": 0},
                    "detections": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["frame", "box", "noun", "score"],
                            "properties": {
                                "frame": {"type": "integer", "minimum": 0},
                                "box": _BOX,
                                "noun": {"type": "integer", "minimum": 0},
                                "score": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                            },
                        },
                    },
                    "target": {
                        "type": "object",
                        "required": ["box", "noun", "verb", "ttc"],
                        "properties": {
                            "box": _BOX,
                            "noun": {"type": "integer", "minimum": 0},
                            "verb": {"type": "integer", "minimum": 0},
                            "ttc": {"type": "number", "exclusiveMinimum": 0},
                        },
                    },
                },
            },
        },
    },
}


def _clip_record(clip: Clip, k: int) -> dict:
    rec = {
        "id": clip.clip_id,
        "frames": f"tensors/clip_{k}.gt",
        "fps": clip.fps,
        "detections": [
            {"frame": d.frame, "box": list(d.box), "noun": d.noun, "score": d.score}
            for d in clip.detections
        ],
    }
    if clip.target is not None:
        t = clip.target
        rec["target"] = {"box": list(t.box), "noun": t.noun, "verb": t.verb, "ttc": t.ttc}
    return rec


def write_dataset(path, dataset: Dataset) -> None:
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    for k, clip in enumerate(dataset.clips):
        tensor_io.save(root / "tensors" / f"clip_{k}.gt", clip.frames, dtype=np.float32)
    manifest = {
        "version": SCHEMA_VERSION,
        "n_nouns": dataset.n_nouns,
        "n_verbs": dataset.n_verbs,
        "meta": dataset.meta,
        "clips": [_clip_record(c, k) for k, c in enumerate(dataset.clips)],
    }
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (root / MANIFEST).write_text(text + "\n", encoding="utf-8")


def read_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise DataError(f"{root}: no '{MANIFEST}' file")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}: not valid JSON ({exc})") from exc
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise DataError(f"{mpath}: schema error at {where}: {exc.message}") from None
    clips = []
    for i, rec in enumerate(manifest["clips"]):
        try:
            frames = tensor_io.load(root / rec["frames"])
        except (OSError, tensor_io.TensorFormatError) as exc:
            raise DataError(f"clips.{i}.frames: {exc}") from exc
        if frames.ndim != 4:
            raise DataError(f"clips.{i}.frames: expected (C,T,H,W), got shape {frames.shape}")
        dets = [
            Detection(int(d["frame"]), tuple(float(v) for v in d["box"]), int(d["noun"]), float(d["score"]))
            for d in rec["detections"]
        ]
        for j, d in enumerate(dets):
            if d.frame >= frames.shape[1]:
                raise DataError(f"clips.{i}.detections.{j}.frame: {d.frame} >= clip length {frames.shape[1]}")
        target = None
        if "target" in rec:
            t = rec["target"]
            target = NAOTarget(tuple(float(v) for v in t["box"]), int(t["noun"]), int(t["verb"]), float(t["ttc"]))
        clips.append(Clip(rec["id"], frames, float(rec["fps"]), dets, target))
    return Dataset(clips, manifest["n_nouns"], manifest["n_verbs"], manifest.get("meta", {}))
