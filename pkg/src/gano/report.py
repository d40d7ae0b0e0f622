"""Report files: the delimited AP table, a JSON record, figures, overlays."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .data import Clip, to_corners  # noqa: E402
from .metrics import precision_recall  # noqa: E402
from .model import STAPrediction  # noqa: E402
from .train import EpochLog, EvalReport  # noqa: E402

REPORT_HEADER = ("combo", "AP", "tp", "fp", "n_gt")
# PNG metadata otherwise embeds the matplotlib version
_PNG_META = {"Software": None}


def _num(v) -> str:
    return "nan" if v is None else repr(float(v))


def format_report(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in report.rows:
        w.writerow([r.combo, _num(r.ap), r.tp, r.fp, r.n_gt])
    w.writerow(["top1_noun", _num(report.top1_noun)])
    w.writerow(["top1_verb", _num(report.top1_verb)])
    return buf.getvalue()


def parse_report(text: str) -> dict[str, float]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REPORT_HEADER:
        raise ValueError(f"report must start with the header {','.join(REPORT_HEADER)}")
    return {row[0]: float(row[1]) for row in rows[1:] if row}


def report_record(report: EvalReport, config_text: str) -> dict:
    return {
        "config": config_text,
        "n_clips": report.n_clips,
        "combos": [
            {"combo": r.combo, "ap": r.ap, "tp": r.tp, "fp": r.fp, "n_gt": r.n_gt} for r in report.rows
        ],
        "top1_noun": report.top1_noun,
        "top1_verb": report.top1_verb,
        "top_prediction": {
            "noun_accuracy": report.best_noun_acc,
            "verb_accuracy": report.best_verb_acc,
            "mean_iou": report.best_mean_iou,
            "mean_ttc_error": report.best_mean_ttc_error,
        },
    }


def write_report(out_dir, report: EvalReport, config_text: str, figures: bool = True) -> dict[str, Path]:
    """Writes ``report.csv``, ``report.json`` and (optionally) ``pr_curves.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "json": out / "report.json"}
    paths["csv"].write_text(format_report(report), encoding="utf-8")
    paths["json"].write_text(json.dumps(report_record(report, config_text), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if figures:
        paths["pr"] = out / "pr_curves.png"
        plot_pr_curves(report, paths["pr"])
    return paths


def plot_pr_curves(report: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for r in report.rows:
        if not r.flags or not r.n_gt:
            continue
        recall, precision = precision_recall(r.flags, r.n_gt)
        # precision envelope, as used for the area
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        ax.step(np.concatenate([[0.0], recall]), np.concatenate([[envelope[0]], envelope]), where="pre",
                label=f"{r.combo} ({r.ap:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7, loc="upper right")
    ax.set_title(f"{report.n_clips} clips")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def read_train_log(path) -> list[EpochLog]:
    history = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            comps = {k: float(row[k]) for k in ("box", "noun", "verb", "ttc")}
            history.append(EpochLog(int(row["epoch"]), comps, float(row["total"]), float(row["lr"])))
    return history


def plot_training(history: list[EpochLog], path) -> None:
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [h.total for h in history], color="k", lw=2, label="total")
    for name in ("box", "noun", "verb", "ttc"):
        values = [h.components[name] for h in history]
        if any(values):
            ax.plot(epochs, values, lw=1, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    if all(h.total > 0 for h in history):
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


# ---------------------------------------------------------------------------
# overlay image
# ---------------------------------------------------------------------------

GT_COLOUR = (0, 255, 0)
PRED_COLOUR = (255, 255, 0)


def render_overlay(clip: Clip, predictions: list[STAPrediction], top: int = 1, scale: int = 8) -> Image.Image:
    """Last observed frame, upscaled, with the ``top`` most confident
    predicted boxes (yellow) and the ground-truth box (green) drawn on it."""
    frame = np.clip(clip.frames[:, -1], 0.0, 1.0)
    rgb = (frame.transpose(1, 2, 0) * 255).round().astype(np.uint8)
    H, W = rgb.shape[:2]
    img = Image.fromarray(rgb, "RGB").resize((W * scale, H * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)

    def rect(box, colour):
        x0, y0, x1, y1 = to_corners(box)
        draw.rectangle(
            [x0 * W * scale, y0 * H * scale, x1 * W * scale - 1, y1 * H * scale - 1], outline=colour, width=max(1, scale // 4)
        )

    ranked = sorted(predictions, key=lambda p: (-p.confidence, p.query))[:top]
    for p in ranked:
        rect(p.box, PRED_COLOUR)
    if clip.target is not None:
        rect(clip.target.box, GT_COLOUR)
    return img


def write_overlay(path, clip: Clip, predictions: list[STAPrediction], top: int = 1, scale: int = 8) -> None:
    render_overlay(clip, predictions, top, scale).save(path, format="PPM")
