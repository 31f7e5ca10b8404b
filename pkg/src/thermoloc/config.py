"""Configuration objects and YAML/JSON config-file handling.

Config file layout (YAML, JSON also accepted)::

    learning_rate: 5.0e-5
    batch_size: 8
    epochs: 300
    seed: 0
    model:
      input_size: [270, 480]
      d_model: 256
      depth: 6
      n_heads: 8
      bridge_mode: shape_first
      stage_specs:
        - {expansion: 1, kernel: 3, stride: 1, out_channels: 16, repeats: 1}
        ...
    preproc:
      a: 1.2
      b: 10.0
"""

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from thermoloc.errors import InvalidParameterError
from thermoloc.preproc import PreprocessConfig

BRIDGE_MODES = ("shape_first", "patch_first", "vint_like")


@dataclass
class MBConvSpec:
    """One inverted-residual block."""

    in_channels: int
    out_channels: int
    expansion: int = 6
    kernel: int = 3
    stride: int = 1
    se_reduction: int = 4
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.expansion not in (1, 6):
            raise InvalidParameterError(f"expansion must be 1 or 6, got {self.expansion}")
        if self.expansion == 1 and self.kernel != 3:
            raise InvalidParameterError("MBConv1 blocks use a 3x3 depthwise kernel")
        if self.kernel not in (3, 5):
            raise InvalidParameterError(f"kernel must be 3 or 5, got {self.kernel}")
        if self.stride not in (1, 2):
            raise InvalidParameterError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1 or self.se_reduction < 1:
            raise InvalidParameterError("channel counts and se_reduction must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidParameterError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class StageSpec:
    """A stage of ``repeats`` MBConv blocks; only the first block strides."""

    expansion: int
    kernel: int
    stride: int
    out_channels: int
    repeats: int = 1
    se_reduction: int = 4

    def blocks(self, in_channels, dropout_rate=0.0):
        specs = []
        for i in range(self.repeats):
            specs.append(MBConvSpec(
                in_channels=in_channels if i == 0 else self.out_channels,
                out_channels=self.out_channels,
                expansion=self.expansion,
                kernel=self.kernel,
                stride=self.stride if i == 0 else 1,
                se_reduction=self.se_reduction,
                dropout_rate=dropout_rate,
            ))
        return specs


# EfficientNet-B0 staging (expansion, kernel, stride, channels, repeats)
B0_STAGES = [
    StageSpec(1, 3, 1, 16, 1),
    StageSpec(6, 3, 2, 24, 2),
    StageSpec(6, 5, 2, 40, 2),
    StageSpec(6, 3, 2, 80, 3),
    StageSpec(6, 5, 1, 112, 3),
    StageSpec(6, 5, 2, 192, 4),
    StageSpec(6, 3, 1, 320, 1),
]

TOY_STAGES = [
    StageSpec(1, 3, 1, 16, 1),
    StageSpec(6, 3, 2, 24, 1),
    StageSpec(6, 5, 2, 40, 1),
]


@dataclass
class BackboneConfig:
    input_size: tuple = (270, 480)
    stem_channels: int = 32
    stage_specs: list = field(default_factory=lambda: list(B0_STAGES))
    d_model: int = 256
    depth: int = 6
    n_heads: int = 8
    mlp_ratio: int = 4
    bridge_mode: str = "shape_first"
    patch_size: int = 2
    mask_fraction: float = 0.5
    attention_dropout: float = 0.0
    use_mask: bool = False
    positional_embedding: bool = True
    standard_residual: bool = False

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        self.stage_specs = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stage_specs]
        self.validate()

    @classmethod
    def toy(cls, **overrides):
        """Small configuration for tests: 3 stages, total stride 8."""
        params = dict(
            input_size=(64, 64), stem_channels=16, stage_specs=list(TOY_STAGES),
            d_model=128, depth=2, n_heads=4,
        )
        params.update(overrides)
        return cls(**params)

    def validate(self):
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise InvalidParameterError(f"input_size must be (height, width), got {self.input_size}")
        if self.depth < 1:
            raise InvalidParameterError(f"depth must be >= 1, got {self.depth}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise InvalidParameterError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.bridge_mode not in BRIDGE_MODES:
            raise InvalidParameterError(
                f"bridge_mode must be one of {BRIDGE_MODES}, got {self.bridge_mode!r}"
            )
        if not 0.0 <= self.mask_fraction < 1.0:
            raise InvalidParameterError(f"mask_fraction must be in [0, 1), got {self.mask_fraction}")
        if not 0.0 <= self.attention_dropout < 1.0:
            raise InvalidParameterError("attention_dropout must be in [0, 1)")
        if self.patch_size < 1 or self.mlp_ratio < 1 or self.stem_channels < 1:
            raise InvalidParameterError("patch_size, mlp_ratio and stem_channels must be positive")
        if not self.stage_specs:
            raise InvalidParameterError("at least one MBConv stage is required")
        for stage in self.stage_specs:
            stage.blocks(1)  # validates kernel/expansion/stride combination
            if stage.repeats < 1:
                raise InvalidParameterError("stage repeats must be >= 1")

    @property
    def total_stride(self):
        stride = 2  # stem
        for stage in self.stage_specs:
            stride *= stage.stride
        return stride


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 8
    dropout: float = 0.1
    epochs: int = 300
    beta0: float = -3.0
    gamma0: float = 0.0
    seed: int = 0
    model: BackboneConfig = field(default_factory=BackboneConfig)
    preproc: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = BackboneConfig(**self.model)
        if isinstance(self.preproc, dict):
            self.preproc = PreprocessConfig(**self.preproc)
        self.validate()

    def validate(self):
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise InvalidParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise InvalidParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (math.isfinite(self.beta0) and math.isfinite(self.gamma0)):
            raise InvalidParameterError("beta0 and gamma0 must be finite")

    def to_dict(self):
        return to_dict(self)


def to_dict(cfg):
    out = dataclasses.asdict(cfg)
    if "model" in out:
        out["model"]["input_size"] = list(out["model"]["input_size"])
    elif "input_size" in out:
        out["input_size"] = list(out["input_size"])
    return out


def _build(cls, data, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidParameterError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidParameterError(f"bad value in {where}: {exc}") from exc


def train_config_from_dict(data):
    data = dict(data or {})
    model = _build(BackboneConfig, data.pop("model", None) or {}, "model")
    preproc = _build(PreprocessConfig, data.pop("preproc", None) or {}, "preproc")
    return _build(TrainConfig, {**data, "model": model, "preproc": preproc}, "config")


def load_config(path):
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise InvalidParameterError(f"cannot parse config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise InvalidParameterError(f"config {path} must contain a mapping")
    return train_config_from_dict(data)


def save_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def with_overrides(cfg, overrides):
    """Copy of ``cfg`` with dotted-key overrides, e.g. ``{"model.depth": 6}``."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise InvalidParameterError(f"unknown config section in override {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise InvalidParameterError(f"unknown config key in override {key!r}")
        node[parts[-1]] = value
    return train_config_from_dict(data)
