"""ResNet-style feature extractors and the linear regression head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

STAGE_DEPTHS = {"resnet18": (2, 2, 2, 2), "resnet50": (3, 4, 6, 3)}
BASE_WIDTHS = (64, 128, 256, 512)
BOTTLENECK_EXPANSION = 4
HEAD_INIT_SCALE = 0.1


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "resnet18"
    in_channels: int = 1
    width_multiplier: float = 1.0
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    stage_strides: tuple[int, int, int, int] = (1, 2, 2, 2)
    input_size: int = 224

    def __post_init__(self):
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        self.validate()

    @property
    def overall_stride(self) -> int:
        s = self.stem_stride * (2 if self.stem_pool else 1)
        for st in self.stage_strides:
            s *= st
        return s

    @property
    def feature_grid(self) -> int:
        return self.input_size // self.overall_stride

    @property
    def stem_width(self) -> int:
        return _scaled(BASE_WIDTHS[0], self.width_multiplier)

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(_scaled(b, self.width_multiplier) for b in BASE_WIDTHS)

    @property
    def feature_dim(self) -> int:
        last = self.stage_widths[-1]
        return last * BOTTLENECK_EXPANSION if self.variant == "resnet50" else last

    def validate(self) -> None:
        if self.variant not in STAGE_DEPTHS:
            raise ConfigurationError(f"unknown backbone variant {self.variant!r}; expected one of {sorted(STAGE_DEPTHS)}")
        if self.width_multiplier <= 0:
            raise ConfigurationError(f"width_multiplier must be > 0, got {self.width_multiplier}")
        if self.in_channels < 1 or self.stem_stride < 1 or self.stem_kernel < 1:
            raise ConfigurationError("in_channels, stem_stride and stem_kernel must be positive")
        if len(self.stage_strides) != 4 or min(self.stage_strides) < 1:
            raise ConfigurationError(f"stage_strides must be 4 positive ints, got {self.stage_strides}")
        if self.input_size % self.overall_stride:
            raise ConfigurationError(
                f"overall stride {self.overall_stride} does not divide input_size {self.input_size}")
        if self.feature_grid < 2:
            raise ConfigurationError(
                f"feature grid {self.feature_grid}x{self.feature_grid} is smaller than 2x2; attention needs extent")


def _scaled(base: int, mult: float) -> int:
    return max(1, int(round(base * mult)))


@dataclass(frozen=True)
class Profile:
    name: str
    input_size: int
    stem_kernel: int
    stem_stride: int
    stem_pool: bool
    stage_strides: tuple[int, int, int, int]
    width_multiplier: float
    min_side: int

    def backbone_config(self, variant: str = "resnet18", in_channels: int = 1) -> BackboneConfig:
        return BackboneConfig(variant=variant, in_channels=in_channels, width_multiplier=self.width_multiplier,
                              stem_kernel=self.stem_kernel, stem_stride=self.stem_stride, stem_pool=self.stem_pool,
                              stage_strides=self.stage_strides, input_size=self.input_size)


PROFILES = {
    "full": Profile("full", 224, 7, 2, True, (1, 2, 2, 2), 1.0, min_side=16),
    "desk": Profile("desk", 96, 3, 1, False, (1, 2, 2, 2), 0.25, min_side=8),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None


# ---------------------------------------------------------------------------


class _Builder:
    """Allocates named parameters and buffers in a fixed order."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def conv(self, name: str, cin: int, cout: int, k: int) -> str:
        fan_in = cin * k * k
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k)).astype(np.float32)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        return name

    def bn(self, name: str, c: int) -> str:
        self.params[f"{name}.gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True, name=f"{name}.gamma")
        self.params[f"{name}.beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True, name=f"{name}.beta")
        self.buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(c, np.float32)
        return name


@dataclass
class _Block:
    prefix: str
    stride: int
    bottleneck: bool
    projection: bool


@dataclass
class Backbone:
    """Instantiated parameters for one :class:`BackboneConfig`."""

    config: BackboneConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    blocks: list[_Block] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters then buffers, in construction order."""
        for k, t in self.params.items():
            yield k, t.data
        yield from self.buffers.items()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_arrays()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            _assign(t.data, state, k)
        for k, b in self.buffers.items():
            _assign(b, state, k)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def freeze(self, frozen: bool = True) -> None:
        for t in self.params.values():
            t.requires_grad = not frozen

    # -- forward -------------------------------------------------------------
    def _conv_bn(self, x: Tensor, name: str, stride: int, padding: int, training: bool) -> Tensor:
        x = F.conv2d(x, self.params[f"{name}.weight"], None, stride, padding)
        return F.batch_norm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                              self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"], training)

    def _block(self, x: Tensor, b: _Block, training: bool) -> Tensor:
        p = b.prefix
        if b.bottleneck:
            out = F.relu(self._conv_bn(x, f"{p}.conv1", 1, 0, training))
            out = F.relu(self._conv_bn(out, f"{p}.conv2", b.stride, 1, training))
            out = self._conv_bn(out, f"{p}.conv3", 1, 0, training)
        else:
            out = F.relu(self._conv_bn(x, f"{p}.conv1", b.stride, 1, training))
            out = self._conv_bn(out, f"{p}.conv2", 1, 1, training)
        short = self._conv_bn(x, f"{p}.down", b.stride, 0, training) if b.projection else x
        return F.relu(out + short)

    def forward_features(self, batch: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
        """Return (last-stage post-ReLU feature maps, globally pooled feature vectors)."""
        cfg = self.config
        if batch.ndim != 4:
            raise DimensionError(f"backbone input must be [N, C, S, S], got shape {batch.shape}")
        if batch.shape[1] != cfg.in_channels:
            raise DimensionError(f"backbone channel axis (1) is {batch.shape[1]}, expected {cfg.in_channels}")
        if batch.shape[2] != cfg.input_size or batch.shape[3] != cfg.input_size:
            raise DimensionError(
                f"backbone spatial axes (2, 3) are {batch.shape[2:]}, expected {cfg.input_size}x{cfg.input_size}")
        x = F.relu(self._conv_bn(batch, "stem.conv", cfg.stem_stride, cfg.stem_kernel // 2, training))
        if cfg.stem_pool:
            x = F.max_pool2d(x, 3, 2, 1)
        for b in self.blocks:
            x = self._block(x, b, training)
        return x, F.global_avg_pool(x)


def _assign(dst: np.ndarray, state: dict[str, np.ndarray], key: str) -> None:
    if key not in state:
        raise KeyError(f"missing tensor {key!r}")
    src = np.asarray(state[key])
    if src.shape != dst.shape:
        raise DimensionError(f"tensor {key!r} has shape {src.shape}, expected {dst.shape}")
    dst[...] = src


def build_backbone(config: BackboneConfig, seed: int) -> Backbone:
    """Deterministically initialise a backbone from ``seed``."""
    config.validate()
    bld = _Builder(seed)
    bld.conv("stem.conv", config.in_channels, config.stem_width, config.stem_kernel)
    bld.bn("stem.conv", config.stem_width)
    bottleneck = config.variant == "resnet50"
    cin = config.stem_width
    blocks = []
    for si, (depth, width, stride) in enumerate(zip(STAGE_DEPTHS[config.variant], config.stage_widths,
                                                     config.stage_strides)):
        cout = width * BOTTLENECK_EXPANSION if bottleneck else width
        for bi in range(depth):
            prefix = f"layer{si + 1}.{bi}"
            s = stride if bi == 0 else 1
            projection = s != 1 or cin != cout
            if bottleneck:
                bld.conv(f"{prefix}.conv1", cin, width, 1)
                bld.bn(f"{prefix}.conv1", width)
                bld.conv(f"{prefix}.conv2", width, width, 3)
                bld.bn(f"{prefix}.conv2", width)
                bld.conv(f"{prefix}.conv3", width, cout, 1)
                bld.bn(f"{prefix}.conv3", cout)
            else:
                bld.conv(f"{prefix}.conv1", cin, width, 3)
                bld.bn(f"{prefix}.conv1", width)
                bld.conv(f"{prefix}.conv2", width, width, 3)
                bld.bn(f"{prefix}.conv2", width)
            if projection:
                bld.conv(f"{prefix}.down", cin, cout, 1)
                bld.bn(f"{prefix}.down", cout)
            blocks.append(_Block(prefix, s, bottleneck, projection))
            cin = cout
    return Backbone(config, bld.params, bld.buffers, blocks)


def forward_features(backbone: Backbone, batch: Tensor, mode: str = "eval") -> tuple[Tensor, Tensor]:
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    return backbone.forward_features(batch, training=mode == "train")


# ---------------------------------------------------------------------------


@dataclass
class RegressionHead:
    """Single linear layer mapping a feature vector to one normalized age."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, in_dim: int, seed: int) -> "RegressionHead":
        # small weights: pooled post-ReLU features share a positive mean, so a
        # full-scale init would add a large random offset to every prediction
        rng = np.random.default_rng(seed)
        bound = HEAD_INIT_SCALE / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(1, in_dim)).astype(np.float32)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(1, np.float32), requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight.data.copy(), f"{prefix}.bias": self.bias.data.copy()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str) -> None:
        _assign(self.weight.data, state, f"{prefix}.weight")
        _assign(self.bias.data, state, f"{prefix}.bias")

    def copy(self) -> "RegressionHead":
        return RegressionHead(Tensor(self.weight.data.copy(), requires_grad=True),
                              Tensor(self.bias.data.copy(), requires_grad=True))

    def __call__(self, features: Tensor) -> Tensor:
        return regression_head(self, features)


def regression_head(head: RegressionHead, features: Tensor) -> Tensor:
    if features.ndim != 2 or features.shape[1] != head.in_dim:
        raise DimensionError(f"regression head expects [N, {head.in_dim}] features, got {features.shape}")
    out = F.linear(features, head.weight, head.bias)
    return out.reshape(features.shape[0])
