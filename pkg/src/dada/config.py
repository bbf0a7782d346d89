"""Flat key-value config files.

Format: one `key = value` per line; blank lines and `#` comments ignored.
Unknown keys, duplicate keys and out-of-range values are errors that cite
the key and line. An empty file yields the documented defaults, and
emit/parse round-trips exactly.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .model import ModelConfig
from .synthdata import SceneSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    parse: Callable
    default: object
    check: Optional[Callable] = None  # value -> error string or None


def _float_field(default, lo=None, lo_open=False, choices=None):
    def check(v):
        if lo is not None and (v <= lo if lo_open else v < lo):
            op = ">" if lo_open else ">="
            return f"must be {op} {lo}"
        return None
    return Field(parse=float, default=default, check=check)


def _int_field(default, lo=None):
    def check(v):
        if lo is not None and v < lo:
            return f"must be >= {lo}"
        return None
    return Field(parse=int, default=default, check=check)


def _choice_field(default, choices):
    def check(v):
        if v not in choices:
            return f"must be one of {sorted(choices)}"
        return None
    return Field(parse=str, default=default, check=check)


def _int_list_field(default):
    return Field(parse=lambda s: tuple(int(x) for x in s.split(",") if x.strip()),
                 default=default)


def _str_list_field(default):
    return Field(parse=lambda s: tuple(x.strip() for x in s.split(",") if x.strip()),
                 default=default)


TRAIN_SCHEMA = {
    "lambda_dep": _float_field(1e-3, lo=0.0),
    "lambda_adv": _float_field(1e-3, lo=0.0),
    "gen_lr": _float_field(2.5e-4, lo=0.0, lo_open=True),
    "gen_momentum": _float_field(0.9, lo=0.0, lo_open=True),
    "gen_weight_decay": _float_field(1e-4, lo=0.0, lo_open=True),
    "disc_lr": _float_field(1e-4, lo=0.0, lo_open=True),
    "disc_adam_beta1": _float_field(0.9, lo=0.0),
    "disc_adam_beta2": _float_field(0.999, lo=0.0),
    "iterations": _int_field(1500, lo=0),
    "seed": _int_field(0, lo=0),
    "lr_schedule": _choice_field("constant", {"constant", "poly"}),
    "eval_every": _int_field(0, lo=0),
    "berhu_fraction": _float_field(0.2, lo=0.0, lo_open=True),
    "source_fraction": _float_field(1.0, lo=0.0, lo_open=True),
}

MODEL_SCHEMA = {
    "backbone_channels": _int_list_field((16, 32, 64, 64)),
    "classifier_dilation": _int_field(2, lo=1),
    "num_classes": _int_field(7, lo=2),
    "input_height": _int_field(64, lo=16),
    "input_width": _int_field(64, lo=16),
}

SCENE_SCHEMA = {
    "height": _int_field(64, lo=16),
    "width": _int_field(64, lo=16),
    "num_classes": _int_field(7, lo=2),
    "class_names": _str_list_field(tuple()),
    "near_plane": _float_field(1.0, lo=0.0, lo_open=True),
    "far_plane": _float_field(10.0, lo=0.0, lo_open=True),
}


def parse_config_text(text: str, schema: dict, origin: str = "<config>") -> dict:
    values = {}
    seen_lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in schema:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in seen_lines:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r} "
                              f"(first set on line {seen_lines[key]})")
        seen_lines[key] = lineno
        field = schema[key]
        try:
            value = field.parse(raw_value)
        except (TypeError, ValueError):
            raise ConfigError(f"{origin}:{lineno}: cannot parse value for {key!r}: "
                              f"{raw_value!r}") from None
        if field.check is not None:
            problem = field.check(value)
            if problem:
                raise ConfigError(f"{origin}:{lineno}: {key} = {raw_value}: {problem}")
        values[key] = value
    for key, field in schema.items():
        values.setdefault(key, field.default)
    return values


def parse_config(path, schema: dict) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), schema, origin=str(p))


def _emit(values: dict, schema: dict) -> str:
    lines = []
    for key in schema:
        v = values[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# -- train ----------------------------------------------------------------

def train_config_from_values(values: dict) -> TrainConfig:
    return TrainConfig(
        lambda_dep=values["lambda_dep"], lambda_adv=values["lambda_adv"],
        gen_lr=values["gen_lr"], gen_momentum=values["gen_momentum"],
        gen_weight_decay=values["gen_weight_decay"], disc_lr=values["disc_lr"],
        disc_adam_betas=(values["disc_adam_beta1"], values["disc_adam_beta2"]),
        iterations=values["iterations"], seed=values["seed"],
        lr_schedule=values["lr_schedule"], eval_every=values["eval_every"],
        berhu_fraction=values["berhu_fraction"], source_fraction=values["source_fraction"],
    )


def train_config_values(cfg: TrainConfig) -> dict:
    return {
        "lambda_dep": cfg.lambda_dep, "lambda_adv": cfg.lambda_adv,
        "gen_lr": cfg.gen_lr, "gen_momentum": cfg.gen_momentum,
        "gen_weight_decay": cfg.gen_weight_decay, "disc_lr": cfg.disc_lr,
        "disc_adam_beta1": cfg.disc_adam_betas[0],
        "disc_adam_beta2": cfg.disc_adam_betas[1],
        "iterations": cfg.iterations, "seed": cfg.seed,
        "lr_schedule": cfg.lr_schedule, "eval_every": cfg.eval_every,
        "berhu_fraction": cfg.berhu_fraction, "source_fraction": cfg.source_fraction,
    }


def load_train_config(path) -> TrainConfig:
    try:
        return train_config_from_values(parse_config(path, TRAIN_SCHEMA))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None


def emit_train_config(cfg: TrainConfig) -> str:
    return _emit(train_config_values(cfg), TRAIN_SCHEMA)


# -- model ----------------------------------------------------------------

def model_config_from_values(values: dict) -> ModelConfig:
    channels = tuple(values["backbone_channels"])
    return ModelConfig(
        backbone_channels=channels, backbone_depth=len(channels),
        classifier_dilation=values["classifier_dilation"],
        num_classes=values["num_classes"],
        input_size=(values["input_height"], values["input_width"]),
    )


def load_model_config(path) -> ModelConfig:
    try:
        return model_config_from_values(parse_config(path, MODEL_SCHEMA))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None


def emit_model_config(cfg: ModelConfig) -> str:
    return _emit({
        "backbone_channels": cfg.backbone_channels,
        "classifier_dilation": cfg.classifier_dilation,
        "num_classes": cfg.num_classes,
        "input_height": cfg.input_size[0],
        "input_width": cfg.input_size[1],
    }, MODEL_SCHEMA)


# -- scene ----------------------------------------------------------------

def scene_spec_from_values(values: dict) -> SceneSpec:
    names = values["class_names"]
    if not names:
        from .synthdata import DEFAULT_CLASS_NAMES
        c = values["num_classes"]
        names = tuple(DEFAULT_CLASS_NAMES[:c]) if c <= len(DEFAULT_CLASS_NAMES) \
            else tuple(DEFAULT_CLASS_NAMES) + tuple(f"class{i}" for i in range(len(DEFAULT_CLASS_NAMES), c))
    return SceneSpec(height=values["height"], width=values["width"],
                     num_classes=values["num_classes"], class_names=names,
                     near_plane=values["near_plane"], far_plane=values["far_plane"])


def load_scene_spec(path) -> SceneSpec:
    try:
        return scene_spec_from_values(parse_config(path, SCENE_SCHEMA))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None


def emit_scene_spec(spec: SceneSpec) -> str:
    return _emit({
        "height": spec.height, "width": spec.width,
        "num_classes": spec.num_classes, "class_names": spec.class_names,
        "near_plane": spec.near_plane, "far_plane": spec.far_plane,
    }, SCENE_SCHEMA)
