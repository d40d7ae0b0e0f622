"""Multi-task objective: weighted box, noun, verb and time-to-contact terms."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Clip, NAOTarget
from .metrics import box_iou_matrix
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

COMPONENTS = ("box", "noun", "verb", "ttc")


@dataclass(frozen=True)
class LossWeights:
    box: float = 0.5
    noun: float = 1.0
    verb: float = 1.0
    ttc: float = 1.0

    def __post_init__(self):
        lams = (self.box, self.noun, self.verb, self.ttc)
        if min(lams) < 0:
            raise ValueError("loss weights must be nonnegative")
        if max(lams) <= 0:
            raise ValueError("at least one loss weight must be positive")


def assign_targets(query_boxes: np.ndarray, targets: list[NAOTarget], eligible: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Greedy IoU assignment of targets to queries.

    Repeatedly takes the (target, query) pair of highest IoU among those not
    yet used; a target with zero IoU to every free query goes to the free
    query whose box centre is nearest.  Returns (target, query) pairs.
    """
    boxes = np.asarray(query_boxes, dtype=np.float64).reshape(-1, 4)
    free = np.ones(len(boxes), bool) if eligible is None else np.asarray(eligible, bool).copy()
    if not targets:
        return []
    tboxes = np.array([t.box for t in targets], dtype=np.float64)
    ious = box_iou_matrix(tboxes, boxes)
    open_t = np.ones(len(targets), bool)
    pairs = []
    while open_t.any() and free.any():
        sub = np.where(open_t[:, None] & free[None, :], ious, -1.0)
        ti, qi = np.unravel_index(int(np.argmax(sub)), sub.shape)
        if sub[ti, qi] <= 0:
            break
        pairs.append((int(ti), int(qi)))
        open_t[ti] = False
        free[qi] = False
    for ti in np.flatnonzero(open_t):
        if not free.any():
            break
        d2 = ((boxes[:, :2] - tboxes[ti, :2]) ** 2).sum(axis=1)
        d2[~free] = np.inf
        qi = int(np.argmin(d2))
        pairs.append((int(ti), qi))
        free[qi] = False
    return sorted(pairs)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row ``-log softmax(logits)[label]``; a single row gives a scalar."""
    single = logits.ndim == 1
    if single:
        logits = logits.reshape(1, -1)
        labels = [labels]
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    V = logits.shape[-1]
    if labels.size != logits.shape[0]:
        raise ContractError(f"{labels.size} labels for {logits.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= V):
        raise ContractError(f"label outside vocabulary of size {V}")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(labels.size), labels]
    out = -picked
    return out.reshape(()) if single else out


def smooth_l1(diff: Tensor, beta: float = 1.0) -> Tensor:
    ad = np.abs(diff.data)
    quad = diff * diff * (0.5 / beta)
    lin = T.absolute(diff) - 0.5 * beta
    return T.where(ad < beta, quad, lin)


def box_loss(pred: Tensor, target, kind: str = "smooth_l1") -> Tensor:
    """Per-box loss summed over the four coordinates."""
    diff = pred - Tensor(np.asarray(target, dtype=np.float64))
    per = smooth_l1(diff) if kind == "smooth_l1" else diff * diff
    return per.sum(axis=-1)


def ttc_loss(pred: Tensor, target, kind: str = "mse") -> Tensor:
    diff = pred - Tensor(np.asarray(target, dtype=np.float64))
    return diff * diff if kind == "mse" else smooth_l1(diff)


def total_loss(components: dict[str, Tensor | float], weights: LossWeights) -> Tensor:
    total = Tensor(0.0)
    for name in COMPONENTS:
        value = components.get(name)
        if value is None:
            continue
        total = total + getattr(weights, name) * value
    return total


def batch_losses(out, clips: list[Clip], predict_boxes: bool, background_weight: float = 0.1, box_kind: str = "smooth_l1") -> dict[str, Tensor]:
    """Loss components for one forward batch.

    Detector-box mode trains only verb and ttc on the query assigned to each
    target by its ROI box.  predict_boxes mode assigns by predicted box and
    additionally trains box and noun, pushing unassigned queries towards the
    background class (weighted by ``background_weight``).
    """
    batch = out.batch
    bs, ks, tgts = [], [], []
    n_nouns = out.noun_logits.shape[-1] - 1
    for b, clip in enumerate(clips):
        targets = [clip.target] if clip.target is not None else []
        if not targets:
            log.warning("clip %s has no target; skipped in the loss", clip.clip_id)
            continue
        if predict_boxes:
            pairs = assign_targets(out.boxes.data[b], targets)
        else:
            pairs = assign_targets(batch.roi_boxes[b], targets, eligible=batch.is_roi[b])
        for ti, qi in pairs:
            bs.append(b)
            ks.append(qi)
            tgts.append(targets[ti])
    zero = Tensor(0.0)
    if not tgts:
        return {"box": zero, "noun": zero, "verb": zero, "ttc": zero}
    bs_a, ks_a = np.array(bs), np.array(ks)
    verb = cross_entropy(out.verb_logits[bs_a, ks_a], [t.verb for t in tgts]).mean()
    ttc_kind = "mse" if box_kind == "smooth_l1" else "smooth_l1"
    ttc = ttc_loss(out.ttc[bs_a, ks_a], [t.ttc for t in tgts], ttc_kind).mean()
    comps = {"box": zero, "noun": zero, "verb": verb, "ttc": ttc}
    if predict_boxes:
        comps["box"] = box_loss(out.boxes[bs_a, ks_a], [t.box for t in tgts], box_kind).mean()
        B, K = out.noun_logits.shape[:2]
        labels = np.full((B, K), n_nouns, dtype=np.intp)
        weights = np.zeros((B, K))
        live = [b for b, c in enumerate(clips) if c.target is not None]
        weights[live] = background_weight
        labels[bs_a, ks_a] = [t.noun for t in tgts]
        weights[bs_a, ks_a] = 1.0
        ce = cross_entropy(out.noun_logits.reshape(B * K, -1), labels.reshape(-1))
        w = weights.reshape(-1)
        comps["noun"] = (ce * Tensor(w)).sum() * (1.0 / w.sum())
    return comps
