"""SGD training with a cosine schedule, and the evaluation runner."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig, TrainConfig
from .data import AugmentConfig, Dataset, augment
from .losses import COMPONENTS, LossWeights, batch_losses, total_loss
from .metrics import TABLE_COMBOS, GroundTruth, PredRecord, average_precision, iou, top1_accuracy
from .model import GANO, STAPrediction, save_checkpoint
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def cosine_lr(step: int, total_steps: int, base: float) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(params: list[Tensor], lr: float, weight_decay: float = 0.0, momentum: float = 0.0, buffers: dict | None = None) -> None:
    """In-place ``p -= lr * (g + weight_decay * p)``; with ``momentum`` the
    bracket is first folded into a velocity buffer kept in ``buffers``."""
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} differs from parameter shape {p.shape}")
        step = g + weight_decay * p.data if weight_decay else g
        if momentum:
            buf = buffers.get(i) if buffers is not None else None
            buf = step.copy() if buf is None else momentum * buf + step
            if buffers is not None:
                buffers[i] = buf
            step = buf
        p.data = p.data - lr * step


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad**2).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class EpochLog:
    epoch: int
    components: dict[str, float]
    total: float
    lr: float


@dataclass
class TrainResult:
    model: GANO
    history: list[EpochLog] = field(default_factory=list)


def check_vocab(dataset: Dataset, cfg: ModelConfig) -> None:
    if dataset.n_nouns != cfg.n_nouns or dataset.n_verbs != cfg.n_verbs:
        raise ConfigError(
            f"dataset vocabularies ({dataset.n_nouns} nouns, {dataset.n_verbs} verbs) do not match "
            f"the model ({cfg.n_nouns} nouns, {cfg.n_verbs} verbs)"
        )


def train(
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    progress: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Seeded, single-threaded training loop.

    When ``out_dir`` is given the checkpoint there is rewritten after every
    epoch and ``train_log.csv`` records per-epoch loss components.
    """
    train_cfg.validate()
    model_cfg.validate()
    if not len(dataset):
        raise TrainingError("training dataset is empty")
    check_vocab(dataset, model_cfg)
    model = GANO(model_cfg, seed=train_cfg.seed)
    params = model.parameters()
    weights = LossWeights(train_cfg.lambda_box, train_cfg.lambda_noun, train_cfg.lambda_verb, train_cfg.lambda_ttc)
    rng = np.random.default_rng([train_cfg.seed, 1])
    n = len(dataset)
    per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = per_epoch * train_cfg.epochs
    buffers: dict = {}
    step = 0
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.csv").write_text("epoch,box,noun,verb,ttc,total,lr\n")
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n) if train_cfg.shuffle else np.arange(n)
        sums = dict.fromkeys(COMPONENTS, 0.0)
        total_sum, batches, lr = 0.0, 0, 0.0
        for start in range(0, n, train_cfg.batch_size):
            clips = [dataset.clips[i] for i in order[start : start + train_cfg.batch_size]]
            if train_cfg.augment:
                clips = [c for c in (augment(c, rng, AugmentConfig()) for c in clips) if c is not None]
            lr = cosine_lr(step, total_steps, train_cfg.lr)
            step += 1
            if not clips:
                continue
            output = model.forward(clips)
            comps = batch_losses(output, clips, model_cfg.predict_boxes, train_cfg.background_weight, train_cfg.box_loss)
            loss = total_loss(comps, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            model.zero_grad()
            if loss.requires_grad:
                T.backward(loss)
            if train_cfg.grad_clip:
                clip_gradients(params, train_cfg.grad_clip)
            sgd_step(params, lr, train_cfg.weight_decay, train_cfg.momentum, buffers)
            for name in COMPONENTS:
                sums[name] += comps[name].item()
            total_sum += value
            batches += 1
        denom = max(batches, 1)
        entry = EpochLog(epoch, {k: v / denom for k, v in sums.items()}, total_sum / denom, lr)
        result.history.append(entry)
        if out is not None:
            with (out / "train_log.csv").open("a") as fh:
                c = entry.components
                fh.write(f"{epoch},{c['box']!r},{c['noun']!r},{c['verb']!r},{c['ttc']!r},{entry.total!r},{lr!r}\n")
            save_checkpoint(out, model, train_cfg)
        if progress is not None:
            progress(entry)
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class ComboRow:
    combo: str
    ap: float | None
    tp: int
    fp: int
    n_gt: int
    flags: list[bool]


@dataclass
class EvalReport:
    rows: list[ComboRow]
    top1_noun: float
    top1_verb: float
    # the single highest-confidence prediction of each clip
    best_noun_acc: float
    best_verb_acc: float
    best_mean_iou: float
    best_mean_ttc_error: float
    n_clips: int

    def ap(self, combo: str) -> float | None:
        for r in self.rows:
            if r.combo == combo:
                return r.ap
        raise KeyError(combo)


def predict_dataset(model: GANO, dataset: Dataset, batch_size: int = 16) -> list[list[STAPrediction]]:
    preds: list[list[STAPrediction]] = []
    for start in range(0, len(dataset), batch_size):
        preds.extend(model.predict(dataset.clips[start : start + batch_size]))
    return preds


def evaluate_predictions(dataset: Dataset, predictions: list[list[STAPrediction]]) -> EvalReport:
    records, truths = [], {}
    best_noun = best_verb = 0
    ious, ttc_err = [], []
    for clip, preds in zip(dataset.clips, predictions, strict=True):
        gts = [] if clip.target is None else [clip.target]
        truths[clip.clip_id] = [GroundTruth(t.box, t.noun, t.verb, t.ttc) for t in gts]
        for p in preds:
            records.append(PredRecord(clip.clip_id, p.query, tuple(p.box), p.noun, p.verb, p.ttc, p.confidence))
        if gts and preds:
            top = min(preds, key=lambda p: (-p.confidence, p.query))
            g = gts[0]
            best_noun += top.noun == g.noun
            best_verb += top.verb == g.verb
            ious.append(iou(top.box, g.box))
            ttc_err.append(abs(top.ttc - g.ttc))
    rows = []
    for combo in TABLE_COMBOS:
        r = average_precision(records, truths, combo)
        rows.append(ComboRow(combo.name, r.ap, r.tp, r.fp, r.n_gt, r.flags))
    n_scored = max(len(ious), 1)
    return EvalReport(
        rows=rows,
        top1_noun=top1_accuracy(records, truths, "noun"),
        top1_verb=top1_accuracy(records, truths, "verb"),
        best_noun_acc=best_noun / n_scored,
        best_verb_acc=best_verb / n_scored,
        best_mean_iou=float(np.mean(ious)) if ious else 0.0,
        best_mean_ttc_error=float(np.mean(ttc_err)) if ttc_err else 0.0,
        n_clips=len(dataset),
    )


def evaluate(dataset: Dataset, model: GANO, batch_size: int = 16) -> EvalReport:
    check_vocab(dataset, model.cfg)
    return evaluate_predictions(dataset, predict_dataset(model, dataset, batch_size))
