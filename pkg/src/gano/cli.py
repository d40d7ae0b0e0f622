"""Command-line entry point: ``gano <command> [options]``.

Every command accepts ``--config FILE`` (sectioned ``key = value`` text with
``[gen]``, ``[data]``, ``[model]`` and ``[train]`` sections) and
``--set section.key=value`` overrides; dedicated flags override both.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__
from .config import ConfigError, ModelConfig, TrainConfig, apply_section, dump, parse
from .data import DataError, GenerationError, SynthConfig, generate_synthetic, read_dataset, write_dataset
from .tensor_io import TensorFormatError


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    clips: int = 64
    start: int = 0


SECTIONS = {"gen": GenConfig, "data": SynthConfig, "model": ModelConfig, "train": TrainConfig}

# flag dest -> (section, key)
FLAG_KEYS = {
    "seed": None,  # section depends on the command
    "clips": ("gen", "clips"),
    "start": ("gen", "start"),
    "jitter": ("data", "jitter"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "lr"),
    "batch_size": ("train", "batch_size"),
    "weight_decay": ("train", "weight_decay"),
    "momentum": ("train", "momentum"),
    "grad_clip": ("train", "grad_clip"),
    "augment": ("train", "augment"),
    "fusion": ("model", "fusion"),
    "predict_boxes": ("model", "predict_boxes"),
    "attn_scale": ("model", "attn_scale"),
}


class UsageError(Exception):
    pass


def _resolve(args, wanted: tuple[str, ...], seed_section: str | None = None) -> dict:
    """Defaults <- config file <- --set <- dedicated flags."""
    values: dict[str, dict] = {name: {} for name in wanted}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        for name, section in parse(path.read_text(encoding="utf-8"), str(path)).items():
            if name not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{name}]")
            if name in values:
                values[name].update(section)
    for item in args.set or ():
        key, eq, raw = item.partition("=")
        section, dot, field = key.partition(".")
        if not eq or not dot or section not in SECTIONS:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        if section in values:
            values[section][field] = parse(f"[x]\nv = {raw}")["x"]["v"]
    for dest, target in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "seed":
            target = (seed_section, "seed") if seed_section else None
        if target and target[0] in values:
            values[target[0]][target[1]] = value
    return {name: apply_section(SECTIONS[name](), values[name], name) for name in wanted}


def _print_config(resolved: dict, out=None) -> None:
    out = out or sys.stdout
    print("# resolved configuration", file=out)
    print(dump({name: asdict(cfg) for name, cfg in resolved.items()}), file=out, end="")


def _clip_index(dataset, key: str) -> int:
    for i, c in enumerate(dataset.clips):
        if c.clip_id == key:
            return i
    try:
        k = int(key)
    except ValueError:
        raise DataError(f"no clip {key!r} in the dataset") from None
    if not 0 <= k < len(dataset):
        raise DataError(f"clip index {k} outside 0..{len(dataset) - 1}")
    return k


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    resolved = _resolve(args, ("gen", "data"), seed_section="gen")
    _print_config(resolved)
    gen, synth = resolved["gen"], resolved["data"]
    if gen.clips < 1:
        raise ConfigError("gen.clips must be positive")
    dataset = generate_synthetic(gen.seed, gen.clips, synth, start=gen.start)
    write_dataset(args.out, dataset)
    print(f"wrote {len(dataset)} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .report import plot_training
    from .train import train

    resolved = _resolve(args, ("model", "train"), seed_section="train")
    dataset = read_dataset(args.data)
    model_cfg = resolved["model"]
    # vocabulary sizes always come from the dataset
    model_cfg = apply_section(model_cfg, {"n_nouns": dataset.n_nouns, "n_verbs": dataset.n_verbs}, "model")
    resolved["model"] = model_cfg
    _print_config(resolved)

    def progress(entry):
        comps = " ".join(f"{k}={v:.4f}" for k, v in entry.components.items())
        print(f"epoch {entry.epoch:4d}  total={entry.total:.4f}  {comps}  lr={entry.lr:.3g}", flush=True)

    result = train(dataset, model_cfg, resolved["train"], out_dir=args.out, progress=progress)
    if not args.no_figures:
        plot_training(result.history, Path(args.out) / "train_loss.png")
    print(f"checkpoint written to {args.out}")
    return 0


def _load(args):
    from .model import CONFIG_FILE, load_checkpoint

    model, train_cfg = load_checkpoint(args.checkpoint)
    config_text = (Path(args.checkpoint) / CONFIG_FILE).read_text(encoding="utf-8")
    print("# resolved configuration")
    print(config_text, end="")
    return model, train_cfg, config_text


def cmd_eval(args) -> int:
    from .report import format_report, write_report
    from .train import evaluate

    model, train_cfg, config_text = _load(args)
    dataset = read_dataset(args.data)
    report = evaluate(dataset, model, train_cfg.eval_batch_size)
    out = Path(args.out or args.checkpoint)
    paths = write_report(out, report, config_text, figures=not args.no_figures)
    print(format_report(report), end="")
    print(f"report written to {paths['csv']}")
    return 0


def cmd_predict(args) -> int:
    model, _, _ = _load(args)
    dataset = read_dataset(args.data)
    clip = dataset.clips[_clip_index(dataset, args.clip)]
    preds = model.predict([clip])[0]
    print(f"clip {clip.clip_id}: {len(preds)} predictions")
    print("query,roi,cx,cy,w,h,noun,verb,ttc,confidence")
    for p in preds:
        box = ",".join(f"{v:.4f}" for v in p.box)
        print(f"{p.query},{int(p.roi_backed)},{box},{p.noun},{p.verb},{p.ttc:.4f},{p.confidence:.6g}")
    if clip.target is not None:
        t = clip.target
        print(f"target: box={tuple(round(v, 4) for v in t.box)} noun={t.noun} verb={t.verb} ttc={t.ttc}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import BLOCKS, TOLERANCE, run_suite, summarize

    unknown = set(args.block or ()) - set(BLOCKS)
    if unknown:
        raise UsageError(f"unknown block(s) {sorted(unknown)}; choose from {', '.join(BLOCKS)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    print(f"# gradcheck seeds={args.seeds} tolerance={TOLERANCE:g}")
    results = run_suite(range(args.seeds), args.block)
    failed = 0
    for block, err in summarize(results).items():
        ok = err <= TOLERANCE
        failed += not ok
        print(f"{block:18s} max_rel_error={err:.3e} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_overlay(args) -> int:
    from .report import write_overlay

    model, _, _ = _load(args)
    dataset = read_dataset(args.data)
    clip = dataset.clips[_clip_index(dataset, args.clip)]
    preds = model.predict([clip])[0]
    write_overlay(args.out, clip, preds, top=args.top, scale=args.scale)
    print(f"overlay written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="sectioned key = value config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gano", description="Object-guided short-term anticipation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--clips", type=int)
    p.add_argument("--start", type=int, help="index of the first clip")
    p.add_argument("--jitter", type=float, help="relative detection jitter")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--augment", action="store_const", const=True)
    p.add_argument("--fusion", choices=("guided", "concat", "none"))
    p.add_argument("--predict-boxes", action="store_const", const=True)
    p.add_argument("--attn-scale", choices=("dk", "sqrt_dk"))
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report directory (default: the checkpoint directory)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="print the predictions for one clip")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="clip index or id")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block")
    _common(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--block", action="append", help="restrict to this block (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("overlay", help="draw predicted and true boxes on the last frame (PPM)")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="clip index or id")
    p.add_argument("--out", required=True, help="output .ppm path")
    p.add_argument("--top", type=int, default=1, help="number of most confident predictions drawn")
    p.add_argument("--scale", type=int, default=8)
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gano: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, GenerationError, TensorFormatError, OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"gano {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
