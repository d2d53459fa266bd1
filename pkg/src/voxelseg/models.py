"""Residual 3D U-Net family: declarative configs, builders, forward pass.

Each encoder/decoder level is conv-bn-relu x2 plus optional residual blocks;
levels are joined by 2x max pooling down and stride-2 transposed convolution
up, with skip concatenation at matching levels and a 1x1x1 sigmoid head.

`same` configs keep the input extents and reflect-pad the z axis internally
when it is not divisible by 2^(depth-1).  `valid` configs shrink per the
unpadded algebra and center-crop the skips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as tc
from .tensor import Tensor, default_dtype

VARIANT_TAGS = ("M1", "M2", "M3")

# training variants M4/M5 reuse the M2/M3 architectures
ARCHITECTURE_OF_VARIANT = {"M1": "M1", "M2": "M2", "M3": "M3", "M4": "M2", "M5": "M3"}


@dataclass
class ModelConfig:
    depth: int
    base_channels: int
    channel_growth: int = 2
    residual_blocks_per_level: int = 0
    padding: str = "same"
    input_shape: tuple[int, int, int] = (128, 128, 49)
    variant_tag: str = "M2"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.channel_growth < 1:
            raise ValueError(f"channel_growth must be >= 1, got {self.channel_growth}")
        if self.residual_blocks_per_level < 0:
            raise ValueError("residual_blocks_per_level must be >= 0")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.variant_tag not in VARIANT_TAGS:
            raise ValueError(f"variant_tag must be one of {VARIANT_TAGS}, got {self.variant_tag!r}")
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be three positive extents (W,H,Z), got {self.input_shape}")

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_growth ** level


@dataclass
class ShapePlan:
    z_pad: tuple[int, int]
    output_dims: tuple[int, int, int]


def plan_shapes(config: ModelConfig) -> ShapePlan:
    """Validate the spatial algebra of a config; errors name the axis."""
    w, h, z = config.input_shape
    factor = 2 ** (config.depth - 1)
    if config.padding == "same":
        for axis, extent in (("W", w), ("H", h)):
            if extent % factor:
                raise ValueError(f"axis {axis}: extent {extent} not divisible by {factor} (depth {config.depth})")
        pad_total = (-z) % factor
        before, after = pad_total // 2, pad_total - pad_total // 2
        if after > z - 1:
            raise ValueError(f"axis Z: extent {z} too small to reflect-pad to a multiple of {factor}")
        return ShapePlan((before, after), (w, h, z))

    def simulate(axis: str, s: int) -> int:
        skips = []
        for level in range(config.depth):
            s -= 4
            if s < 1:
                raise ValueError(f"axis {axis}: extent vanishes at encoder level {level} (valid padding)")
            skips.append(s)
            if level < config.depth - 1:
                if s % 2:
                    raise ValueError(f"axis {axis}: odd extent {s} before pooling at level {level}")
                s //= 2
        for level in range(config.depth - 2, -1, -1):
            s *= 2
            if skips[level] < s or (skips[level] - s) % 2:
                raise ValueError(f"axis {axis}: skip extent {skips[level]} cannot center-crop to {s} at level {level}")
            s -= 4
            if s < 1:
                raise ValueError(f"axis {axis}: extent vanishes at decoder level {level} (valid padding)")
        return s

    return ShapePlan((0, 0), (simulate("W", w), simulate("H", h), simulate("Z", z)))


def output_shape(config: ModelConfig) -> tuple[int, int, int]:
    """Spatial output dims (W,H,Z) for a valid config."""
    return plan_shapes(config).output_dims


class Model:
    """A built network: ordered named parameters plus per-layer batchnorm state."""

    def __init__(self, config: ModelConfig, parameters: dict[str, Tensor],
                 batchnorm_states: dict[str, ops.BatchNormState], plan: ShapePlan):
        self.config = config
        self.parameters = parameters
        self.batchnorm_states = batchnorm_states
        self.plan = plan

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        for state in self.batchnorm_states.values():
            state.mode = mode


def build_model(config: ModelConfig, seed: int) -> Model:
    """Instantiate parameters deterministically: He-normal fan-in conv
    weights, zero biases, unit gamma, zero beta."""
    plan = plan_shapes(config)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    states: dict[str, ops.BatchNormState] = {}

    def add_conv(name: str, cin: int, cout: int, k: int) -> None:
        fan_in = cin * k ** 3
        params[name + ".weight"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k)),
                                          requires_grad=True)
        params[name + ".bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def add_bn(name: str, c: int) -> None:
        params[name + ".gamma"] = Tensor(np.ones(c), requires_grad=True)
        params[name + ".beta"] = Tensor(np.zeros(c), requires_grad=True)
        states[name] = ops.BatchNormState(c, dtype=default_dtype())

    def add_level(prefix: str, cin: int, c: int) -> None:
        add_conv(f"{prefix}.conv_a", cin, c, 3)
        add_bn(f"{prefix}.bn_a", c)
        add_conv(f"{prefix}.conv_b", c, c, 3)
        add_bn(f"{prefix}.bn_b", c)
        for r in range(config.residual_blocks_per_level):
            add_conv(f"{prefix}.res{r}.conv1", c, c, 3)
            add_bn(f"{prefix}.res{r}.bn1", c)
            add_conv(f"{prefix}.res{r}.conv2", c, c, 3)
            add_bn(f"{prefix}.res{r}.bn2", c)

    cin = 1
    for i in range(config.depth):
        add_level(f"enc{i}", cin, config.channels(i))
        cin = config.channels(i)
    for i in range(config.depth - 2, -1, -1):
        c_up, c = config.channels(i + 1), config.channels(i)
        params[f"dec{i}.up.weight"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / (c_up * 8)), size=(c_up, c, 2, 2, 2)),
                                             requires_grad=True)
        add_level(f"dec{i}", 2 * c, c)
    add_conv("head.conv", config.channels(0), 1, 1)
    return Model(config, params, states, plan)


def _residual_block(model: Model, prefix: str, t: Tensor) -> Tensor:
    p = model.parameters
    y = ops.conv3d(t, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], padding="same")
    y = ops.relu(ops.batchnorm3d(y, p[f"{prefix}.bn1.gamma"], p[f"{prefix}.bn1.beta"],
                                 model.batchnorm_states[f"{prefix}.bn1"]))
    y = ops.conv3d(y, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], padding="same")
    y = ops.batchnorm3d(y, p[f"{prefix}.bn2.gamma"], p[f"{prefix}.bn2.beta"],
                        model.batchnorm_states[f"{prefix}.bn2"])
    return ops.relu(tc.add(t, y))


def _level(model: Model, prefix: str, t: Tensor) -> Tensor:
    p = model.parameters
    padding = model.config.padding
    for stage in ("a", "b"):
        t = ops.conv3d(t, p[f"{prefix}.conv_{stage}.weight"], p[f"{prefix}.conv_{stage}.bias"], padding=padding)
        t = ops.relu(ops.batchnorm3d(t, p[f"{prefix}.bn_{stage}.gamma"], p[f"{prefix}.bn_{stage}.beta"],
                                     model.batchnorm_states[f"{prefix}.bn_{stage}"]))
    for r in range(model.config.residual_blocks_per_level):
        t = _residual_block(model, f"{prefix}.res{r}", t)
    return t


def _center_crop(t: Tensor, spatial) -> Tensor:
    td, th, tw = spatial
    d, h, w = t.data.shape[2:]
    od, oh, ow = (d - td) // 2, (h - th) // 2, (w - tw) // 2
    if min(od, oh, ow) < 0:
        raise ValueError(f"cannot crop {t.data.shape[2:]} down to {tuple(spatial)}")
    return ops.crop3d(t, (od, od + td), (oh, oh + th), (ow, ow + tw))


def forward(model: Model, x: Tensor, mode: str = "train") -> Tensor:
    """Probability map of x, shape (N,1,Z',H',W'); eval mode is pure."""
    cfg = model.config
    w, h, z = cfg.input_shape
    if x.data.ndim != 5 or x.data.shape[1] != 1 or tuple(x.data.shape[2:]) != (z, h, w):
        raise ValueError(f"input shape {tuple(x.data.shape)} does not match configured (N,1,{z},{h},{w})")
    model.set_mode(mode)
    t = x
    before, after = model.plan.z_pad
    if before or after:
        t = ops.pad_reflect3d(t, ((before, after), (0, 0), (0, 0)))
    skips = []
    for i in range(cfg.depth):
        t = _level(model, f"enc{i}", t)
        if i < cfg.depth - 1:
            skips.append(t)
            t = ops.maxpool3d(t)
    for i in range(cfg.depth - 2, -1, -1):
        t = ops.conv_transpose3d(t, model.parameters[f"dec{i}.up.weight"])
        skip = skips[i]
        if tuple(skip.data.shape[2:]) != tuple(t.data.shape[2:]):
            skip = _center_crop(skip, t.data.shape[2:])
        t = tc.concat([skip, t], axis=1)
        t = _level(model, f"dec{i}", t)
    t = ops.conv3d(t, model.parameters["head.conv.weight"], model.parameters["head.conv.bias"], padding="same")
    if before or after:
        d = t.data.shape[2]
        t = ops.crop3d(t, (before, d - after), (0, t.data.shape[3]), (0, t.data.shape[4]))
    return ops.sigmoid(t)


def parameter_count(model: Model) -> int:
    """Total scalar parameters, batchnorm affine pairs included."""
    return sum(t.size for t in model.parameters.values())


def variant_config(variant: str, input_shape, base_channels: int = 16,
                   channel_growth: int = 2) -> ModelConfig:
    """Architecture presets: M1 is the depth-4 valid-padding replica, M2 the
    depth-3 small net, M3 adds two residual blocks per level; M4/M5 share the
    M2/M3 architectures and differ only in training."""
    variant = variant.upper()
    if variant not in ARCHITECTURE_OF_VARIANT:
        raise ValueError(f"unknown variant {variant!r} (want M1..M5)")
    arch = ARCHITECTURE_OF_VARIANT[variant]
    if arch == "M1":
        return ModelConfig(depth=4, base_channels=base_channels, channel_growth=channel_growth,
                           residual_blocks_per_level=0, padding="valid",
                           input_shape=input_shape, variant_tag="M1")
    blocks = 2 if arch == "M3" else 0
    return ModelConfig(depth=3, base_channels=base_channels, channel_growth=channel_growth,
                       residual_blocks_per_level=blocks, padding="same",
                       input_shape=input_shape, variant_tag=arch)
