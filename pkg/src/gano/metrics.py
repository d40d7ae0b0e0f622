"""Short-term anticipation evaluation.

A prediction is correct for a combination of unknowns when every member
holds: box IoU >= 0.5, top-1 noun, top-1 verb, and |ttc error| <= 0.25 s.
Average precision is computed per combination over all predictions ranked
by confidence, each ground truth matched at most once.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

IOU_THRESHOLD = 0.5
TTC_TOLERANCE = 0.25
# absorbs rounding in box arithmetic at the two inclusive thresholds
_EPS = 1e-9

COMPONENT_ORDER = ("box", "noun", "verb", "ttc")


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class ComboSpec:
    members: frozenset

    def __post_init__(self):
        unknown = set(self.members) - set(COMPONENT_ORDER)
        if unknown:
            raise ValueError(f"unknown combo members {sorted(unknown)}")
        if "box" not in self.members:
            raise ValueError("every combination includes the box")

    @classmethod
    def of(cls, *names: str) -> "ComboSpec":
        return cls(frozenset(names))

    @property
    def name(self) -> str:
        return "+".join(c for c in COMPONENT_ORDER if c in self.members)

    def __contains__(self, item) -> bool:
        return item in self.members


# column order of the report table
TABLE_COMBOS = tuple(
    ComboSpec.of(*c)
    for c in (
        ("box",),
        ("box", "noun"),
        ("box", "noun", "ttc"),
        ("box", "noun", "verb"),
        ("box", "noun", "verb", "ttc"),
        ("box", "ttc"),
        ("box", "verb"),
        ("box", "verb", "ttc"),
    )
)


@dataclass(frozen=True)
class PredRecord:
    clip_id: str
    query: int
    box: tuple
    noun: int
    verb: int
    ttc: float
    confidence: float


@dataclass(frozen=True)
class GroundTruth:
    box: tuple
    noun: int
    verb: int
    ttc: float


@dataclass(frozen=True)
class EvalRecord:
    prediction: PredRecord
    truth: GroundTruth


def _check_box(box) -> None:
    if box[2] <= 0 or box[3] <= 0:
        raise BoxError(f"degenerate box {tuple(box)}")


def iou(a, b) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    _check_box(a)
    _check_box(b)
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b0, b1 = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


def is_correct(record: EvalRecord, combo: ComboSpec) -> bool:
    p, g = record.prediction, record.truth
    if "box" in combo and iou(p.box, g.box) < IOU_THRESHOLD - _EPS:
        return False
    if "noun" in combo and p.noun != g.noun:
        return False
    if "verb" in combo and p.verb != g.verb:
        return False
    if "ttc" in combo and abs(p.ttc - g.ttc) > TTC_TOLERANCE + _EPS:
        return False
    return True


def ranked(predictions: Iterable[PredRecord]) -> list[PredRecord]:
    """Descending confidence; ties by clip id then query index."""
    return sorted(predictions, key=lambda p: (-p.confidence, p.clip_id, p.query))


@dataclass
class APResult:
    ap: float | None
    tp: int
    fp: int
    n_gt: int
    flags: list[bool]


def match_predictions(
    predictions: Iterable[PredRecord], truths: dict[str, list[GroundTruth]], combo: ComboSpec
) -> list[tuple[PredRecord, int | None]]:
    """Greedy confidence-ordered matching.  Each prediction is compared with the
    unmatched ground truth of its clip it overlaps most; it is a true
    positive (and consumes that ground truth) when it is correct against it."""
    used = {cid: [False] * len(gts) for cid, gts in truths.items()}
    out = []
    for p in ranked(predictions):
        gts = truths.get(p.clip_id, [])
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if used[p.clip_id][j]:
                continue
            v = iou(p.box, g.box)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and is_correct(EvalRecord(p, gts[best]), combo):
            used[p.clip_id][best] = True
            out.append((p, best))
        else:
            out.append((p, None))
    return out


def average_precision(
    predictions: Iterable[PredRecord], truths: dict[str, list[GroundTruth]], combo: ComboSpec
) -> APResult:
    """All-point interpolated AP (area under the precision envelope).

    Computed in exact rational arithmetic, rounded once at the end.  Returns
    ``ap=None`` when there are no ground truths.
    """
    n_gt = sum(len(v) for v in truths.values())
    flags = [m is not None for _, m in match_predictions(predictions, truths, combo)]
    tp = sum(flags)
    fp = len(flags) - tp
    if n_gt == 0:
        return APResult(None, tp, fp, 0, flags)
    precision = []
    hits = 0
    for i, f in enumerate(flags):
        hits += f
        precision.append(Fraction(hits, i + 1))
    # running max from the right gives the envelope
    envelope = precision[:]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    area = sum((envelope[i] for i, f in enumerate(flags) if f), Fraction(0)) / n_gt
    return APResult(float(area), tp, fp, n_gt, flags)


def top1_accuracy(
    predictions: Iterable[PredRecord], truths: dict[str, list[GroundTruth]], head: str
) -> float:
    """Fraction of ground truths whose box-matched prediction has the right
    label; ground truths without a match count as wrong."""
    if head not in ("noun", "verb"):
        raise ValueError(f"head must be noun or verb, got {head!r}")
    n_gt = sum(len(v) for v in truths.values())
    if n_gt == 0:
        raise ValueError("top-1 accuracy over zero ground truths")
    right = 0
    for p, j in match_predictions(predictions, truths, ComboSpec.of("box")):
        if j is not None and getattr(p, head) == getattr(truths[p.clip_id][j], head):
            right += 1
    return right / n_gt


def precision_recall(flags: list[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    hits = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    return hits / max(n_gt, 1), hits / ranks
