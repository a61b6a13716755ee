"""Run configuration: one TOML file with [model], [loss], [data],
[optim], and [eval] tables mapped onto the component config dataclasses.
Shipped defaults are the full-scale training recipe; toy configs
override the size knobs. Unknown keys are rejected so typos fail loudly
instead of silently training with a default."""

import dataclasses

try:
    import tomllib
except ModuleNotFoundError:                      # Python < 3.11
    import tomli as tomllib

from .backbone import BackboneConfig, ConfigError
from .data import SceneSpec
from .decoder import DecoderConfig
from .losses import LossWeights


@dataclasses.dataclass
class DataConfig:
    dir: str = ""
    eval_dir: str = ""
    augment: bool = True
    crop_pad: int = 4

    def validate(self):
        if self.crop_pad < 0:
            raise ConfigError(f"crop_pad {self.crop_pad} must be >= 0")
        return self


@dataclasses.dataclass
class OptimConfig:
    lr_backbone: float = 1e-5
    lr_rest: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    epochs: int = 18
    decay_epoch: int = 12
    decay_factor: float = 0.1
    seed: int = 42

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs {self.epochs} must be >= 1")
        if self.lr_backbone <= 0 or self.lr_rest <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor {self.decay_factor} outside (0, 1]")
        return self


@dataclasses.dataclass
class EvalConfig:
    threshold: float = 0.001
    k_values: tuple = (1, 10)

    def validate(self):
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise ConfigError(f"k_values {self.k_values} must be positive")
        return self


@dataclasses.dataclass
class RunConfig:
    backbone: BackboneConfig = dataclasses.field(default_factory=BackboneConfig)
    decoder: DecoderConfig = dataclasses.field(default_factory=DecoderConfig)
    loss: LossWeights = dataclasses.field(default_factory=LossWeights)
    mask_dim: int = 16
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    optim: OptimConfig = dataclasses.field(default_factory=OptimConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    def validate(self):
        self.backbone.validate()
        self.decoder.validate()
        self.data.validate()
        self.optim.validate()
        self.eval.validate()
        if self.mask_dim < 1:
            raise ConfigError(f"mask_dim {self.mask_dim} must be >= 1")
        return self


# [model] table keys split across BackboneConfig / DecoderConfig / mask_dim
_MODEL_BACKBONE = {"c": "C", "stage_depths": "stage_depths", "num_heads": "num_heads",
                   "window_2d": "window_2d", "window_3d": "window_3d",
                   "mlp_ratio": "mlp_ratio", "fuse_stages": "fuse_stages",
                   "image_size": "image_size", "video_size": "video_size"}
_MODEL_DECODER = {"hidden_dim": "hidden_dim", "decoder_layers": "layers",
                  "n_queries": "n", "decoder_heads": "heads"}

_TUPLE_FIELDS = {"stage_depths", "num_heads", "window_2d", "window_3d",
                 "fuse_stages", "image_size", "video_size", "k_values",
                 "canvas", "shapes", "colors"}


def _coerce(key, value):
    if key in _TUPLE_FIELDS and isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _fill(section_name, table, spec):
    """spec: {toml_key: (target_dict, field_name)}; rejects unknown keys."""
    for key, value in table.items():
        if key not in spec:
            raise ConfigError(f"[{section_name}] has no key {key!r}")
        target, field = spec[key]
        target[field] = _coerce(key, value)


def config_from_dict(doc):
    known = {"model", "loss", "data", "optim", "eval"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)}")

    backbone_kw, decoder_kw, top_kw = {}, {}, {}
    spec = {k: (backbone_kw, v) for k, v in _MODEL_BACKBONE.items()}
    spec.update({k: (decoder_kw, v) for k, v in _MODEL_DECODER.items()})
    spec["mask_dim"] = (top_kw, "mask_dim")
    _fill("model", doc.get("model", {}), spec)

    def section(name, cls):
        kw = {}
        fields = {f.name: f.name for f in dataclasses.fields(cls)}
        _fill(name, doc.get(name, {}), {k: (kw, v) for k, v in fields.items()})
        return cls(**kw)

    cfg = RunConfig(
        backbone=BackboneConfig(**backbone_kw),
        decoder=DecoderConfig(**decoder_kw),
        loss=section("loss", LossWeights),
        mask_dim=top_kw.get("mask_dim", 16),
        data=section("data", DataConfig),
        optim=section("optim", OptimConfig),
        eval=section("eval", EvalConfig),
    )
    return cfg.validate()


def load_config(path):
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


# -- TOML emission (for checkpoint provenance) --------------------------


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot emit {type(value).__name__} as TOML")


def config_to_toml(cfg):
    lines = ["[model]"]
    for toml_key, field in _MODEL_BACKBONE.items():
        lines.append(f"{toml_key} = {_toml_value(getattr(cfg.backbone, field))}")
    for toml_key, field in _MODEL_DECODER.items():
        lines.append(f"{toml_key} = {_toml_value(getattr(cfg.decoder, field))}")
    lines.append(f"mask_dim = {_toml_value(cfg.mask_dim)}")
    for name, obj in (("loss", cfg.loss), ("data", cfg.data),
                      ("optim", cfg.optim), ("eval", cfg.eval)):
        lines.append("")
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_toml_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg, path):
    with open(path, "w") as f:
        f.write(config_to_toml(cfg))


# -- dataset generation specs -------------------------------------------


def scene_spec_from_dict(doc):
    """[generate] table -> (SceneSpec, sample count)."""
    table = dict(doc.get("generate", {}))
    unknown = set(doc) - {"generate"}
    if unknown:
        raise ConfigError(f"unknown spec section(s) {sorted(unknown)}")
    count = table.pop("count", 1)
    if not isinstance(count, int) or count < 1:
        raise ConfigError(f"count {count!r} must be a positive integer")
    fields = {f.name for f in dataclasses.fields(SceneSpec)}
    kw = {}
    for key, value in table.items():
        if key not in fields:
            raise ConfigError(f"[generate] has no key {key!r}")
        kw[key] = _coerce(key, value)
    return SceneSpec(**kw).validate(), count


def load_scene_spec(path):
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return scene_spec_from_dict(doc)
