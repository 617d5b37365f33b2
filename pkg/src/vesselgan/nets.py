"""Declarative discriminator / generator graphs and their PyTorch realisation.

A :class:`NetworkSpec` is a framework-free table of layers. :class:`Discriminator`
and :class:`Generator` interpret that table; the discriminator exposes any
named intermediate activation for feature matching.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError, ShapeError

LEAKY_SLOPE = 0.2
DEFAULT_DROPOUT_KEEP = 0.8
Z_DIM = 100

OP_KINDS = ("conv", "pool", "upsample", "concat", "transposed_conv", "linear")
ACTIVATIONS = ("leaky_relu", "relu", "tanh", "softmax", "none")


def _coerce(cls, value, **kw):
    if isinstance(value, cls):
        return value
    if isinstance(value, str):
        return cls(value, **kw)
    raise ConfigurationError(f"cannot interpret {value!r} as {cls.__name__}")


@dataclass(frozen=True)
class PoolingMode:
    kind: str = "average"
    window: int = 2

    def __post_init__(self):
        if self.kind not in ("max", "average"):
            raise ConfigurationError(f"pooling must be 'max' or 'average', got {self.kind!r}")
        if self.window < 1:
            raise ConfigurationError("pooling window must be positive")

    @classmethod
    def coerce(cls, value):
        return _coerce(cls, value)


@dataclass(frozen=True)
class NormalizationMode:
    kind: str = "weight"

    def __post_init__(self):
        if self.kind not in ("none", "batch", "instance", "weight"):
            raise ConfigurationError(f"normalization must be none/batch/instance/weight, got {self.kind!r}")

    @classmethod
    def coerce(cls, value):
        return _coerce(cls, value)


@dataclass(frozen=True)
class HeadMode:
    kind: str = "structured"

    def __post_init__(self):
        if self.kind not in ("center_pixel", "structured"):
            raise ConfigurationError(f"head must be 'center_pixel' or 'structured', got {self.kind!r}")

    @classmethod
    def coerce(cls, value):
        aliases = {"cp": "center_pixel", "sp": "structured"}
        if isinstance(value, str):
            value = aliases.get(value.lower(), value)
        return _coerce(cls, value)

    @property
    def structured(self) -> bool:
        return self.kind == "structured"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    op_kind: str
    kernel: Optional[Tuple[int, int]]
    in_channels: int
    out_channels: int
    in_resolution: int
    out_resolution: int
    activation: str = "none"
    dropout_keep: Optional[float] = None
    normalization: str = "none"
    inputs: Tuple[str, ...] = ()

    def row(self) -> str:
        kernel = "-" if self.kernel is None else f"{self.kernel[0]}x{self.kernel[1]}"
        keep = "-" if self.dropout_keep is None else f"{self.dropout_keep:g}"
        act = "leaky_relu(0.2)" if self.activation == "leaky_relu" else self.activation
        return " ".join([
            self.name, self.op_kind, f"{self.in_resolution}x{self.in_resolution}", str(self.in_channels),
            str(self.out_channels), f"{self.out_resolution}x{self.out_resolution}", kernel, act, keep,
            self.normalization, "+".join(self.inputs),
        ])


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_resolution: int
    input_channels: int
    layers: Tuple[LayerSpec, ...]
    attrs: Tuple[Tuple[str, str], ...] = ()

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(layer.name for layer in self.layers)

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def output(self) -> LayerSpec:
        return self.layers[-1]

    def attr(self, key: str, default=None):
        return dict(self.attrs).get(key, default)

    def to_manifest(self) -> str:
        head = " ".join(f"{k}={v}" for k, v in self.attrs)
        lines = [f"# network {self.name} input={self.input_resolution}x{self.input_resolution}x{self.input_channels} {head}".rstrip(),
                 "# name op in_res in_ch out_ch out_res kernel activation dropout_keep norm inputs"]
        lines += [layer.row() for layer in self.layers]
        return "\n".join(lines) + "\n"

    def validate(self) -> "NetworkSpec":
        """Walk the graph and check every resolution / channel hand-off."""
        produced = {"input": (self.input_resolution, self.input_channels)}
        for layer in self.layers:
            if layer.op_kind not in OP_KINDS:
                raise ShapeError(f"layer {layer.name}: unknown op kind {layer.op_kind!r}")
            if layer.activation not in ACTIVATIONS:
                raise ShapeError(f"layer {layer.name}: unknown activation {layer.activation!r}")
            if layer.name in produced:
                raise ShapeError(f"layer {layer.name}: duplicate name")
            missing = [i for i in layer.inputs if i not in produced]
            if missing or not layer.inputs:
                raise ShapeError(f"layer {layer.name}: unknown producer(s) {missing or '(none)'}")
            shapes = [produced[i] for i in layer.inputs]
            if layer.op_kind == "concat":
                if len(shapes) != 2 or shapes[0][0] != shapes[1][0]:
                    raise ShapeError(f"layer {layer.name}: concat needs two producers of equal resolution, got {shapes}")
                res, ch = shapes[0][0], shapes[0][1] + shapes[1][1]
            else:
                if len(shapes) != 1:
                    raise ShapeError(f"layer {layer.name}: expected a single producer")
                res, ch = shapes[0]
            if layer.op_kind == "linear":
                # linear layers consume a flattened producer
                ch, res = ch * res * res, 1
            if (res, ch) != (layer.in_resolution, layer.in_channels):
                raise ShapeError(f"layer {layer.name}: receives {res}x{res}x{ch} but declares {layer.in_resolution}x{layer.in_resolution}x{layer.in_channels}")
            if layer.dropout_keep is not None and not 0 < layer.dropout_keep <= 1:
                raise ShapeError(f"layer {layer.name}: dropout keep probability must lie in (0, 1]")
            expected = {
                "conv": layer.in_resolution,
                "pool": None,
                "upsample": layer.in_resolution * 2,
                "concat": layer.in_resolution,
                "transposed_conv": layer.in_resolution * 2,
                "linear": None,
            }[layer.op_kind]
            if layer.op_kind == "pool" and layer.kernel is not None:
                expected = layer.in_resolution // layer.kernel[0]
            if expected is not None and layer.out_resolution != expected:
                raise ShapeError(f"layer {layer.name}: output resolution {layer.out_resolution} inconsistent with {layer.op_kind}")
            if layer.op_kind in ("pool", "upsample", "concat") and layer.out_channels != layer.in_channels:
                raise ShapeError(f"layer {layer.name}: {layer.op_kind} must preserve channel count")
            produced[layer.name] = (layer.out_resolution, layer.out_channels)
        return self


def build_discriminator(
    pooling="average",
    norm="weight",
    head="structured",
    dropout_keep: float = DEFAULT_DROPOUT_KEEP,
    in_size: int = 48,
    in_channels: int = 1,
    width: int = 32,
    upsample: str = "nearest",
) -> NetworkSpec:
    """U-Net discriminator / segmenter.

    The structured head is the full encoder-decoder ending in a 1x1 conv with
    two per-pixel logits. The center-pixel head keeps the encoder (C1 to C5)
    and replaces the decoder with global average pooling and a two-way
    linear classifier.
    """
    pooling = PoolingMode.coerce(pooling)
    norm = NormalizationMode.coerce(norm)
    head = HeadMode.coerce(head)
    if not 0 < dropout_keep <= 1:
        raise ConfigurationError(f"dropout_keep must lie in (0, 1], got {dropout_keep}")
    if in_size % 4:
        raise ShapeError(f"input resolution {in_size} must be divisible by 4")
    if upsample not in ("nearest", "bilinear"):
        raise ConfigurationError(f"upsample must be 'nearest' or 'bilinear', got {upsample!r}")
    w1, w2, w4 = width, 2 * width, 4 * width
    r1, r2, r4 = in_size, in_size // 2, in_size // 4
    n = norm.kind

    def conv(name, res, cin, cout, src, drop=False, k=3, act="leaky_relu", layer_norm=n):
        return LayerSpec(name, "conv", (k, k), cin, cout, res, res, act, dropout_keep if drop else None, layer_norm, (src,))

    def pool(name, res, ch, src):
        win = pooling.window
        return LayerSpec(name, "pool", (win, win), ch, ch, res, res // win, "none", None, "none", (src,))

    layers = [
        conv("C1", r1, in_channels, w1, "input", drop=True),
        conv("C2", r1, w1, w1, "C1"),
        pool("P1", r1, w1, "C2"),
        conv("C3", r2, w1, w2, "P1", drop=True),
        conv("C4", r2, w2, w2, "C3"),
        pool("P2", r2, w2, "C4"),
        conv("C5", r4, w2, w2, "P2", drop=True),
    ]
    final_norm = "weight" if n == "weight" else "none"
    if head.structured:
        layers += [
            LayerSpec("U1", "upsample", None, w2, w2, r4, r2, "none", None, "none", ("C5",)),
            LayerSpec("Con1", "concat", None, w4, w4, r2, r2, "none", None, "none", ("U1", "C4")),
            conv("C6", r2, w4, w2, "Con1", drop=True),
            conv("C7", r2, w2, w2, "C6"),
            LayerSpec("U2", "upsample", None, w2, w2, r2, r1, "none", None, "none", ("C7",)),
            LayerSpec("Con2", "concat", None, w2 + w1, w2 + w1, r1, r1, "none", None, "none", ("U2", "C2")),
            conv("C8", r1, w2 + w1, w1, "Con2", drop=True),
            conv("C9", r1, w1, w1, "C8"),
            conv("C10", r1, w1, 2, "C9", k=1, act="softmax", layer_norm=final_norm),
        ]
    else:
        layers += [
            LayerSpec("GAP", "pool", (r4, r4), w2, w2, r4, 1, "none", None, "none", ("C5",)),
            LayerSpec("FC", "linear", None, w2, 2, 1, 1, "softmax", None, final_norm, ("GAP",)),
        ]
    attrs = (("head", head.kind), ("pooling", pooling.kind), ("norm", n), ("upsample", upsample))
    return NetworkSpec("discriminator", in_size, in_channels, tuple(layers), attrs).validate()


def build_generator(z_dim: int = Z_DIM, out_size: int = 48, widths: Sequence[int] = (128, 64, 32), norm: str = "batch") -> NetworkSpec:
    """Linear projection to an (out_size/8)^2 map, then three 2x transposed convolutions.

    ReLU after every stage except the last, which uses tanh.
    """
    if out_size % 8:
        raise ShapeError(f"generator output size {out_size} must be divisible by 8")
    if len(widths) != 3:
        raise ConfigurationError("generator needs three channel widths")
    if norm not in ("none", "batch"):
        raise ConfigurationError(f"generator normalization must be 'none' or 'batch', got {norm!r}")
    base = out_size // 8
    c0, c1, c2 = widths
    layers = (
        LayerSpec("L1", "linear", None, z_dim, c0, 1, base, "relu", None, norm, ("input",)),
        LayerSpec("T1", "transposed_conv", (4, 4), c0, c1, base, base * 2, "relu", None, norm, ("L1",)),
        LayerSpec("T2", "transposed_conv", (4, 4), c1, c2, base * 2, base * 4, "relu", None, norm, ("T1",)),
        LayerSpec("T3", "transposed_conv", (4, 4), c2, 1, base * 4, out_size, "tanh", None, "none", ("T2",)),
    )
    return NetworkSpec("generator", 1, z_dim, layers, (("z_dim", str(z_dim)),)).validate()


def pool(values, mode="max") -> float:
    """Max or mean of a single pooling window."""
    mode = PoolingMode.coerce(mode)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (mode.window, mode.window):
        raise ShapeError(f"window of shape {values.shape} does not match {mode.window}x{mode.window}")
    return float(values.max() if mode.kind == "max" else values.mean())


def _weight_norm(v: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    norms = v.flatten(1).norm(dim=1)
    return v * (g / norms).view(-1, *([1] * (v.dim() - 1)))


class WeightNormConv2d(nn.Module):
    """Conv2d whose per-output-channel filter is ``g_i * v_i / ||v_i||``."""

    def __init__(self, in_channels, out_channels, kernel_size, padding=0):
        super().__init__()
        ref = nn.Conv2d(in_channels, out_channels, kernel_size, padding=padding)
        self.v = nn.Parameter(ref.weight.detach().clone())
        self.g = nn.Parameter(ref.weight.detach().flatten(1).norm(dim=1))
        self.bias = nn.Parameter(ref.bias.detach().clone())
        self.padding = padding

    @property
    def weight(self) -> torch.Tensor:
        return _weight_norm(self.v, self.g)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, padding=self.padding)


class WeightNormLinear(nn.Module):
    def __init__(self, in_features, out_features):
        super().__init__()
        ref = nn.Linear(in_features, out_features)
        self.v = nn.Parameter(ref.weight.detach().clone())
        self.g = nn.Parameter(ref.weight.detach().norm(dim=1))
        self.bias = nn.Parameter(ref.bias.detach().clone())

    @property
    def weight(self) -> torch.Tensor:
        return _weight_norm(self.v, self.g)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


def _activation(kind: str) -> nn.Module:
    return {
        "leaky_relu": nn.LeakyReLU(LEAKY_SLOPE),
        "relu": nn.ReLU(),
        "tanh": nn.Tanh(),
        # softmax is applied by the losses and by predict; the layer emits logits
        "softmax": nn.Identity(),
        "none": nn.Identity(),
    }[kind]


class _ConvBlock(nn.Module):
    def __init__(self, layer: LayerSpec):
        super().__init__()
        k = layer.kernel[0]
        pad = k // 2
        if layer.normalization == "weight":
            self.conv = WeightNormConv2d(layer.in_channels, layer.out_channels, k, padding=pad)
        else:
            self.conv = nn.Conv2d(layer.in_channels, layer.out_channels, k, padding=pad)
        if layer.normalization == "batch":
            self.norm = nn.BatchNorm2d(layer.out_channels)
        elif layer.normalization == "instance":
            self.norm = nn.InstanceNorm2d(layer.out_channels, affine=True)
        else:
            self.norm = nn.Identity()
        self.act = _activation(layer.activation)
        self.drop = nn.Dropout(1.0 - layer.dropout_keep) if layer.dropout_keep not in (None, 1.0) else nn.Identity()

    def forward(self, x):
        return self.drop(self.act(self.norm(self.conv(x))))


class Discriminator(nn.Module):
    """Interprets a discriminator :class:`NetworkSpec`; returns logits and captured activations."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleDict()
        for layer in spec.layers:
            if layer.op_kind == "conv":
                self.layers[layer.name] = _ConvBlock(layer)
            elif layer.op_kind == "pool":
                k = layer.kernel[0]
                pool_kind = "average" if layer.name == "GAP" else spec.attr("pooling")
                self.layers[layer.name] = nn.MaxPool2d(k) if pool_kind == "max" else nn.AvgPool2d(k)
            elif layer.op_kind == "upsample":
                mode = spec.attr("upsample", "nearest")
                kw = {"align_corners": False} if mode == "bilinear" else {}
                self.layers[layer.name] = nn.Upsample(scale_factor=2, mode=mode, **kw)
            elif layer.op_kind == "linear":
                lin = WeightNormLinear if layer.normalization == "weight" else nn.Linear
                self.layers[layer.name] = lin(layer.in_channels, layer.out_channels)
            elif layer.op_kind != "concat":
                raise ShapeError(f"discriminator cannot realise {layer.op_kind} layer {layer.name}")

    @property
    def structured(self) -> bool:
        return self.spec.attr("head") == "structured"

    def forward(self, x, capture: Iterable[str] = ()):
        capture = tuple(capture)
        outs = {"input": x}
        for layer in self.spec.layers:
            args = [outs[i] for i in layer.inputs]
            if layer.op_kind == "concat":
                y = torch.cat(args, dim=1)
            elif layer.op_kind == "linear":
                y = self.layers[layer.name](args[0].flatten(1))
            else:
                y = self.layers[layer.name](args[0])
            outs[layer.name] = y
        return outs[self.spec.output.name], {name: outs[name] for name in capture}


class Generator(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        first = spec.layers[0]
        self.base = first.out_resolution
        self.channels = first.out_channels
        self.z_dim = first.in_channels
        self.project = nn.Linear(first.in_channels, first.out_channels * self.base ** 2)
        self.blocks = nn.ModuleDict()
        self.blocks[first.name] = nn.Sequential(
            nn.BatchNorm2d(first.out_channels) if first.normalization == "batch" else nn.Identity(),
            _activation(first.activation),
        )
        for layer in spec.layers[1:]:
            self.blocks[layer.name] = nn.Sequential(
                nn.ConvTranspose2d(layer.in_channels, layer.out_channels, layer.kernel[0], stride=2, padding=1),
                nn.BatchNorm2d(layer.out_channels) if layer.normalization == "batch" else nn.Identity(),
                _activation(layer.activation),
            )

    def forward(self, z):
        x = self.project(z).view(-1, self.channels, self.base, self.base)
        for block in self.blocks.values():
            x = block(x)
        return x


def sample_z(n: int, z_dim: int = Z_DIM, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> torch.Tensor:
    """Latent codes drawn uniformly from [-1, 1]^z_dim."""
    return torch.rand(n, z_dim, generator=generator, dtype=dtype) * 2.0 - 1.0


def as_batch(batch, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W), (N, H, W, 1) or (N, 1, H, W) -> float tensor (N, 1, H, W)."""
    x = torch.as_tensor(np.asarray(batch) if not torch.is_tensor(batch) else batch).to(dtype)
    if x.dim() == 2:
        x = x[None]
    if x.dim() == 3:
        x = x[:, None]
    elif x.dim() == 4 and x.shape[-1] == 1 and x.shape[1] != 1:
        x = x.permute(0, 3, 1, 2)
    if x.dim() != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected a batch of single-channel patches, got shape {tuple(x.shape)}")
    return x.contiguous()


def forward(net: Discriminator, batch, capture: Iterable[str] = (), stochastic: bool = False):
    """Run the discriminator and return ``(logits, activations)``.

    Captured activations come back channels-last, shaped (batch, h, w, c).
    ``stochastic=False`` evaluates with dropout off and fixed normalisation statistics.
    """
    capture = tuple(capture)
    unknown = [c for c in capture if c not in net.spec.names]
    if unknown:
        raise ConfigurationError(f"unknown capture layer(s) {unknown}; known: {', '.join(net.spec.names)}")
    x = as_batch(batch, dtype=next(net.parameters()).dtype)
    res = net.spec.input_resolution
    if x.shape[-2:] != (res, res):
        raise ShapeError(f"batch resolution {tuple(x.shape[-2:])} does not match network input {res}x{res}")
    was_training = net.training
    net.train(stochastic)
    try:
        logits, acts = net(x, capture)
    finally:
        net.train(was_training)
    return logits, {k: v.permute(0, 2, 3, 1) if v.dim() == 4 else v for k, v in acts.items()}


def class_probabilities(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the two semantic classes (channel axis 1)."""
    return torch.softmax(logits, dim=1)


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
