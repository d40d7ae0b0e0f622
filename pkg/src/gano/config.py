"""Model / training configuration records and their text form.

The config file format is sectioned ``key = value`` text::

    # comment
    [model]
    d_model = 64
    patch_stride = [2, 8, 8]
    fusion = "guided"

    [train]
    epochs = 30

Values are integers, floats, booleans (``true``/``false``), double-quoted
strings, or bracketed lists of those.  :func:`dump` writes sections and keys in
a fixed order, so equal configs always serialise to identical bytes.
"""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    sample_rate: int = 1
    channels: int = 3
    height: int = 32
    width: int = 32
    patch_kernel: tuple[int, int, int] = (2, 8, 8)
    patch_stride: tuple[int, int, int] = (2, 8, 8)
    patch_padding: tuple[int, int, int] = (0, 0, 0)
    d_model: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    encoder_depth: int = 2
    decoder_depth: int = 2
    kv_pool_stride: tuple[int, int, int] = (1, 2, 2)
    q_pool_stride: tuple[int, int, int] = (1, 1, 1)
    box_hidden: int = 32
    queries: int = 8
    n_nouns: int = 5
    n_verbs: int = 4
    attn_scale: str = "dk"
    fusion: str = "guided"
    guidance: str = "per_frame"
    predict_boxes: bool = False

    def validate(self) -> "ModelConfig":
        from .tensor import conv3d_output_shape

        if self.fusion not in ("guided", "concat", "none"):
            raise ConfigError(f"fusion must be guided, concat or none, got {self.fusion!r}")
        if self.guidance not in ("per_frame", "global"):
            raise ConfigError(f"guidance must be per_frame or global, got {self.guidance!r}")
        if self.attn_scale not in ("dk", "sqrt_dk"):
            raise ConfigError(f"attn_scale must be dk or sqrt_dk, got {self.attn_scale!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the position encoding")
        for name in ("frames", "channels", "height", "width", "d_model", "heads", "queries", "n_nouns", "n_verbs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.encoder_depth < 0 or self.decoder_depth < 0:
            raise ConfigError("depths must be nonnegative")
        extents = (self.frames, self.height, self.width)
        for n, k, s, p, axis in zip(extents, self.patch_kernel, self.patch_stride, self.patch_padding, "THW"):
            rem = (n + 2 * p - k) % s
            if n + 2 * p < k or rem:
                need = (s - rem) % s if n + 2 * p >= k else k - n
                raise ConfigError(
                    f"axis {axis}: extent {n} with kernel {k}, stride {s}, padding {p} does not tile; "
                    f"add {need} more input (padding) along {axis}"
                )
        grid = conv3d_output_shape(extents, self.patch_kernel, self.patch_stride, self.patch_padding)
        g = grid
        for _ in range(self.encoder_depth):
            for a, s in zip(g, self.kv_pool_stride):
                if a % s:
                    raise ConfigError(f"token grid {g} not divisible by kv_pool_stride {self.kv_pool_stride}")
            for a, s in zip(g, self.q_pool_stride):
                if a % s:
                    raise ConfigError(f"token grid {g} not divisible by q_pool_stride {self.q_pool_stride}")
            g = tuple(a // s for a, s in zip(g, self.q_pool_stride))
        return self

    @property
    def token_grid(self) -> tuple[int, int, int]:
        from .tensor import conv3d_output_shape

        return conv3d_output_shape(
            (self.frames, self.height, self.width), self.patch_kernel, self.patch_stride, self.patch_padding
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.1
    batch_size: int = 4
    weight_decay: float = 1e-6
    momentum: float = 0.0
    grad_clip: float = 1.0
    lambda_box: float = 0.5
    lambda_noun: float = 1.0
    lambda_verb: float = 1.0
    lambda_ttc: float = 1.0
    background_weight: float = 0.1
    box_loss: str = "smooth_l1"
    seed: int = 0
    augment: bool = False
    shuffle: bool = True
    eval_batch_size: int = 16

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.momentum < 0 or self.grad_clip < 0:
            raise ConfigError("lr, weight_decay, momentum and grad_clip must be nonnegative")
        lams = (self.lambda_box, self.lambda_noun, self.lambda_verb, self.lambda_ttc)
        if min(lams) < 0 or max(lams) <= 0:
            raise ConfigError("loss weights must be nonnegative with at least one positive")
        if self.box_loss not in ("smooth_l1", "mse"):
            raise ConfigError(f"box_loss must be smooth_l1 or mse, got {self.box_loss!r}")
        return self


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise ConfigError(f"cannot serialise {value!r}")


def _parse_value(text: str, where: str):
    text = text.strip()
    if text in ("true", "false"):
        return text == "true"
    if not text.startswith('"'):
        text = text.replace("true", "True").replace("false", "False")
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ConfigError(f"{where}: cannot parse value {text!r}") from None
    if isinstance(value, list):
        return tuple(value)
    return value


def dump(sections: dict[str, dict]) -> str:
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        for key, value in values.items():
            lines.append(f"{key} = {_fmt(value)}")
        lines.append("")
    return "\n".join(lines)


def parse(text: str, source: str = "<config>") -> dict[str, dict]:
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1].strip(), {})
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        if current is None:
            raise ConfigError(f"{where}: key outside of a [section]")
        key, _, value = line.partition("=")
        current[key.strip()] = _parse_value(value, where)
    return sections


def _coerce(cls, values: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        default = known[key].default
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{key}: expected true/false")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{key}: expected an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{key}: expected a number")
            value = float(value)
        elif isinstance(default, tuple):
            value = tuple(value) if isinstance(value, (list, tuple)) else None
            if value is None or len(value) != len(default):
                raise ConfigError(f"{where}.{key}: expected a list of {len(default)} values")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{where}.{key}: expected a string")
        out[key] = value
    return out


def apply_section(base, values: dict, section: str):
    """Copy of the dataclass ``base`` with ``values`` type-checked and applied."""
    return replace(base, **_coerce(type(base), values, section))


def model_from_dict(values: dict, base: ModelConfig | None = None) -> ModelConfig:
    return apply_section(base or ModelConfig(), values, "model")


def train_from_dict(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    return apply_section(base or TrainConfig(), values, "train")


def dump_run(model: ModelConfig, train: TrainConfig | None = None) -> str:
    sections = {"model": asdict(model)}
    if train is not None:
        sections["train"] = asdict(train)
    return dump(sections)


def load_run(path) -> tuple[ModelConfig, TrainConfig]:
    sections = parse(Path(path).read_text(encoding="utf-8"), str(path))
    unknown = set(sections) - {"model", "train"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    return model_from_dict(sections.get("model", {})), train_from_dict(sections.get("train", {}))
