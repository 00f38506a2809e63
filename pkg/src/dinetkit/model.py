"""Encoder / dilated-inception / decoder graphs for saliency prediction.

A model is a small tree of layer nodes.  ``Sequential`` and ``Parallel`` nest;
``Conv2d`` nodes carry a :class:`~dinetkit.tensor.ConvSpec` and own their
parameters.  Architecture and parameters are separate: a graph can be built
and counted without allocating any weights (useful for the 2048-channel
accounting models) and initialized later.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Tensor

#: weight count of a bias-free 256 x 1 x 1 x 256 convolution
W_UNIT = 256 * 256

DIM_TAGS = (
    "baseline",
    "inception_a",
    "inception_a_no_1x1",
    "inception_b",
    "inception_c",
    "inception_d",
    "dim_e",
    "aspp_s",
    "aspp_l",
)
ASPP_RATES = {"aspp_s": (2, 4, 8, 12), "aspp_l": (6, 12, 18, 24)}


@dataclass(frozen=True)
class DilationRates:
    alpha: int = 4
    beta: int = 8
    gamma: int = 16
    theta: int | None = None

    def __post_init__(self):
        for v in self.as_tuple():
            if v < 1:
                raise ValueError(f"dilation rates must be >= 1, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, ...]:
        base = (self.alpha, self.beta, self.gamma)
        return base if self.theta is None else base + (self.theta,)

    @classmethod
    def parse(cls, text: str) -> "DilationRates":
        return cls(*(int(t) for t in str(text).replace(" ", "").split(",") if t))


@dataclass(frozen=True)
class DimVariant:
    tag: str = "dim_e"
    fusion: str = "sum"

    def __post_init__(self):
        if self.tag not in DIM_TAGS:
            raise ValueError(f"unknown module variant {self.tag!r}; choose from {', '.join(DIM_TAGS)}")
        if self.fusion not in ("sum", "concat"):
            raise ValueError(f"fusion must be 'sum' or 'concat', got {self.fusion!r}")
        if self.tag.startswith("aspp") and self.fusion != "sum":
            raise ValueError("ASPP variants fuse branch outputs by summation only")


# ---------------------------------------------------------------------------
# layer nodes
# ---------------------------------------------------------------------------

class Node:
    out_channels: int | None = None

    def children(self) -> Iterator[tuple[str, "Node"]]:
        return iter(())

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def walk(self, prefix: str = "") -> Iterator[tuple[str, "Node"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.walk(f"{prefix}.{name}" if prefix else name)


class Conv2d(Node):
    def __init__(self, spec: ConvSpec):
        self.spec = spec
        self.out_channels = spec.out_channels
        self.weight: Tensor | None = None
        self.bias: Tensor | None = None

    def initialize(self, rng: np.random.Generator, dtype=np.float64) -> None:
        s = self.spec
        # Glorot uniform on receptive-field-scaled fans
        fan_in = s.in_channels * s.k * s.k
        fan_out = s.out_channels * s.k * s.k
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=s.weight_shape).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(s.out_channels, dtype=dtype), requires_grad=True) if s.bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.weight is None:
            raise RuntimeError("layer parameters are not initialized; call initialize() first")
        return T.conv2d(x, self.weight, self.bias, self.spec)

    def __repr__(self):
        s = self.spec
        return f"Conv2d({s.in_channels}->{s.out_channels}, k={s.k}, r={s.r}, stride={s.stride})"


class Activation(Node):
    def __init__(self, kind: str):
        if kind not in ("relu", "sigmoid"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def __call__(self, x):
        return T.relu(x) if self.kind == "relu" else T.sigmoid(x)

    def __repr__(self):
        return f"Activation({self.kind})"


class MaxPool(Node):
    def __init__(self, k: int = 3, stride: int = 1):
        self.k, self.stride = k, stride

    def __call__(self, x):
        return T.max_pool2d(x, self.k, self.stride)

    def __repr__(self):
        return f"MaxPool({self.k}x{self.k}, stride={self.stride})"


class Upsample(Node):
    def __init__(self, factor: int):
        if factor < 1:
            raise ValueError(f"upsampling factor must be >= 1, got {factor}")
        self.factor = factor

    def __call__(self, x):
        return T.upsample(x, self.factor)

    def __repr__(self):
        return f"Upsample(x{self.factor})"


class MinMaxScale(Node):
    def __call__(self, x):
        return T.minmax_scale(x)

    def __repr__(self):
        return "MinMaxScale()"


class Sequential(Node):
    def __init__(self, layers: list[tuple[str, Node]]):
        self.layers = list(layers)
        self.out_channels = None
        for _, layer in self.layers:
            if layer.out_channels is not None:
                self.out_channels = layer.out_channels

    def children(self):
        return iter(self.layers)

    def __call__(self, x):
        for _, layer in self.layers:
            x = layer(x)
        return x

    def __repr__(self):
        return "Sequential(" + ", ".join(f"{n}={l!r}" for n, l in self.layers) + ")"


class Parallel(Node):
    """Optional shared stem, then parallel branches fused by sum or concatenation."""

    def __init__(self, branches: list[tuple[str, Sequential]], fusion: str = "concat",
                 shared: Sequential | None = None):
        self.branches = list(branches)
        self.fusion = fusion
        self.shared = shared
        widths = [b.out_channels for _, b in self.branches]
        if fusion == "sum":
            if len(set(widths)) != 1:
                raise ValueError(f"sum fusion needs equal branch widths, got {widths}")
            self.out_channels = widths[0]
        else:
            self.out_channels = sum(widths)

    def children(self):
        if self.shared is not None:
            yield "shared", self.shared
        yield from self.branches

    def branch_outputs(self, x: Tensor) -> list[Tensor]:
        if self.shared is not None:
            x = self.shared(x)
        return [b(x) for _, b in self.branches]

    def fuse(self, outs: list[Tensor]) -> Tensor:
        return T.add(*outs) if self.fusion == "sum" else T.concat(outs, axis=1)

    def __call__(self, x):
        return self.fuse(self.branch_outputs(x))


def conv_block(spec: ConvSpec, act: str | None = "relu") -> list[tuple[str, Node]]:
    layers: list[tuple[str, Node]] = [("conv", Conv2d(spec))]
    if act is not None:
        layers.append((act, Activation(act)))
    return layers


def _seq(*blocks: list[tuple[str, Node]]) -> Sequential:
    layers = []
    for i, block in enumerate(blocks):
        for name, node in block:
            layers.append((f"{name}{i}", node))
    return Sequential(layers)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_backbone(channels_out: int, output_stride: int = 8, widths: tuple[int, int, int] = (16, 32, 64),
                   in_channels: int = 3, bias: bool = True) -> Sequential:
    """Toy dilated encoder: three stride-2 stages, then two stages that either
    downsample (``output_stride`` 32) or keep resolution with dilation 2 and 4
    (``output_stride`` 8), then a 1x1 projection to ``channels_out``.

    Each late stage is a 1x1 (possibly strided) transition followed by a 3x3
    conv, so the two variants have identical receptive fields and weights.
    """
    if output_stride not in (8, 32):
        raise ValueError(f"output_stride must be 8 or 32, got {output_stride}")
    if channels_out < 1:
        raise ValueError("channels_out must be >= 1")
    w1, w2, w3 = widths
    blocks = [
        conv_block(ConvSpec(in_channels, w1, 3, stride=2, bias=bias)),
        conv_block(ConvSpec(w1, w2, 3, stride=2, bias=bias)),
        conv_block(ConvSpec(w2, w3, 3, stride=2, bias=bias)),
    ]
    for rate in (2, 4):
        stride, r = (2, 1) if output_stride == 32 else (1, rate)
        blocks.append(conv_block(ConvSpec(w3, w3, 1, stride=stride, bias=bias)))
        blocks.append(conv_block(ConvSpec(w3, w3, 3, r=r, bias=bias)))
    blocks.append(conv_block(ConvSpec(w3, channels_out, 1, bias=bias)))
    seq = _seq(*blocks)
    seq.output_stride = output_stride
    return seq


def receptive_field(node: Node) -> int:
    """Receptive field (pixels) of a chain of convolutions and pools."""
    rf, jump = 1, 1
    for _, n in node.walk():
        if isinstance(n, Conv2d):
            rf += (n.spec.k_d - 1) * jump
            jump *= n.spec.stride
        elif isinstance(n, MaxPool):
            rf += (n.k - 1) * jump
            jump *= n.stride
    return rf


def build_dim(variant: DimVariant | str, in_channels: int, branch_channels: int = 256,
              rates: DilationRates | None = None, bias: bool = True) -> Node:
    """Multi-scale module inserted between encoder and decoder.

    ``baseline`` is the plain 1x1 reduction layer the other variants replace.
    The inception variants give every branch its own 1x1 reduction and
    concatenate; ``dim_e`` shares one 1x1 reduction and sums three dilated
    3x3 branches.  ``aspp_*`` maps encoder features straight to a one-channel
    map (four dilated branches summed, then min-max scaled).
    """
    if isinstance(variant, str):
        variant = DimVariant(variant, "sum" if variant in ("dim_e", "baseline") or variant.startswith("aspp") else "concat")
    rates = rates or DilationRates()
    B = branch_channels
    tag = variant.tag

    def red(ch_in=in_channels):
        return conv_block(ConvSpec(ch_in, B, 1, bias=bias))

    def conv3(k=3, r=1):
        return conv_block(ConvSpec(B, B, k, r=r, bias=bias))

    if tag == "baseline":
        return _seq(red())

    if tag in ("inception_a", "inception_a_no_1x1"):
        branches = [
            ("b1x1", _seq(red())),
            ("b3x3", _seq(red(), conv3(3))),
            ("b5x5", _seq(red(), conv3(5))),
            ("bpool", Sequential([("pool", MaxPool(3, 1))] + [(f"{n}1", l) for n, l in red()])),
        ]
        if tag == "inception_a_no_1x1":
            branches = branches[1:]
        return Parallel(branches, fusion=variant.fusion)

    if tag == "inception_b":
        branches = [("b3x3", _seq(red(), conv3(3))),
                    ("b5x5", _seq(red(), conv3(5))),
                    ("b7x7", _seq(red(), conv3(7)))]
        return Parallel(branches, fusion=variant.fusion)

    if tag in ("inception_c", "inception_d"):
        rs = (1, 2, 3) if tag == "inception_c" else (rates.alpha, rates.beta, rates.gamma)
        branches = [(f"b_r{r}", _seq(red(), conv3(3, r))) for r in rs]
        return Parallel(branches, fusion=variant.fusion)

    if tag == "dim_e":
        branches = [(name, _seq(conv3(3, r))) for name, r in
                    zip(("b_alpha", "b_beta", "b_gamma"), (rates.alpha, rates.beta, rates.gamma))]
        return Parallel(branches, fusion=variant.fusion, shared=_seq(red()))

    # ASPP: rates fixed per variant unless four explicit rates were given
    aspp_rates = rates.as_tuple() if rates.theta is not None else ASPP_RATES[tag]
    branches = []
    for r in aspp_rates:
        branches.append((f"b_r{r}", _seq(
            conv_block(ConvSpec(in_channels, B, 3, r=r, bias=bias)),
            conv_block(ConvSpec(B, B, 1, bias=bias)),
            conv_block(ConvSpec(B, 1, 1, bias=bias), act=None),
        )))
    return Sequential([("aspp", Parallel(branches, fusion="sum")), ("scale", MinMaxScale())])


def build_decoder(n_conv_layers: int = 3, in_channels: int = 256, width: int = 256,
                  output_stride: int = 8, linear: bool = False, bias: bool | None = None) -> Sequential:
    """(n-1) 3x3 conv+relu layers, a one-kernel 3x3 prediction layer with
    sigmoid, then bilinear up-sampling by ``output_stride``.

    ``linear=True`` drops every activation (and, by default, the biases) so
    that the decoder is a linear map of its input features.
    """
    if not 1 <= n_conv_layers <= 4:
        raise ValueError(f"decoder depth must be in 1..4, got {n_conv_layers}")
    if bias is None:
        bias = not linear
    layers: list[tuple[str, Node]] = []
    ch = in_channels
    for i in range(n_conv_layers - 1):
        layers.append((f"conv{i}", Conv2d(ConvSpec(ch, width, 3, bias=bias))))
        if not linear:
            layers.append((f"relu{i}", Activation("relu")))
        ch = width
    layers.append(("predict", Conv2d(ConvSpec(ch, 1, 3, bias=bias))))
    if not linear:
        layers.append(("sigmoid", Activation("sigmoid")))
    layers.append(("upsample", Upsample(output_stride)))
    return Sequential(layers)


def is_linear(node: Node) -> bool:
    return not any(isinstance(n, (Activation, MaxPool, MinMaxScale)) for _, n in node.walk())


@dataclass
class ModelGraph:
    backbone: Sequential
    dim: Node
    decoder: Sequential
    output_stride: int
    aux_decoder: Sequential | None = None
    meta: dict = field(default_factory=dict)

    def stages(self) -> Iterator[tuple[str, Node]]:
        yield "backbone", self.backbone
        yield "dim", self.dim
        yield "decoder", self.decoder
        if self.aux_decoder is not None:
            yield "aux_decoder", self.aux_decoder

    def walk(self) -> Iterator[tuple[str, Node]]:
        for name, stage in self.stages():
            yield from stage.walk(name)

    def convs(self) -> Iterator[tuple[str, Conv2d]]:
        for name, node in self.walk():
            if isinstance(node, Conv2d):
                yield name, node

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, conv in self.convs():
            if conv.weight is None:
                raise RuntimeError("model parameters are not initialized")
            out[f"{name}.weight"] = conv.weight
            if conv.bias is not None:
                out[f"{name}.bias"] = conv.bias
        return out

    def initialize(self, seed: int = 0, dtype=np.float64) -> "ModelGraph":
        rng = np.random.default_rng(seed)
        for _, conv in self.convs():
            conv.initialize(rng, dtype)
        return self

    @property
    def dtype(self):
        for _, conv in self.convs():
            if conv.weight is not None:
                return conv.weight.data.dtype
        return np.float64

    def check_input(self, image: Tensor | np.ndarray) -> None:
        shape = image.shape
        if len(shape) != 4:
            raise ValueError(f"expected an N x C x H x W image batch, got shape {shape}")
        h, w = shape[-2:]
        if h % self.output_stride or w % self.output_stride:
            raise ValueError(
                f"input spatial size {h}x{w} must be divisible by output_stride {self.output_stride}"
            )

    def features(self, image) -> Tensor:
        self.check_input(image)
        return self.backbone(T.as_tensor(image))

    def branch_features(self, image) -> list[Tensor]:
        if not isinstance(self.dim, Parallel) or self.dim.fusion != "sum":
            raise ValueError("branch handles exist only for the sum-fused dilated inception module")
        return self.dim.branch_outputs(self.features(image))

    def forward(self, image, with_aux: bool = False):
        feats = self.features(image)
        if with_aux and self.aux_decoder is not None:
            fused = self.dim(feats)
            return self.decoder(fused), self.aux_decoder(fused)
        return self.decoder(self.dim(feats))

    __call__ = forward


def build_model(variant: DimVariant | str = "dim_e", rates: DilationRates | None = None,
                backbone_channels: int = 64, branch_channels: int = 32, decoder_layers: int = 3,
                decoder_width: int = 32, output_stride: int = 8, widths=(16, 32, 64),
                aux_linear_decoder: bool = False, seed: int | None = 0, dtype=np.float64,
                bias: bool = True) -> ModelGraph:
    """Backbone + module + decoder.  ``seed=None`` leaves parameters unallocated."""
    if isinstance(variant, str):
        variant = DimVariant(variant, "concat" if variant.startswith("inception") else "sum")
    rates = rates or DilationRates()
    backbone = build_backbone(backbone_channels, output_stride, tuple(widths), bias=bias)
    dim = build_dim(variant, backbone_channels, branch_channels, rates, bias=bias)
    if variant.tag.startswith("aspp"):
        decoder = Sequential([("upsample", Upsample(output_stride))])
    else:
        decoder = build_decoder(decoder_layers, dim.out_channels, decoder_width, output_stride, bias=bias)
    aux = None
    if aux_linear_decoder:
        aux = build_decoder(decoder_layers, dim.out_channels, decoder_width, output_stride, linear=True)
    meta = dict(variant=variant.tag, fusion=variant.fusion, rates=",".join(map(str, rates.as_tuple())),
                backbone_channels=backbone_channels, branch_channels=branch_channels,
                decoder_layers=decoder_layers, decoder_width=decoder_width, output_stride=output_stride,
                widths=",".join(map(str, widths)), aux_linear_decoder=int(aux_linear_decoder))
    model = ModelGraph(backbone, dim, decoder, output_stride, aux, meta)
    if seed is not None:
        model.initialize(seed, dtype)
    return model


def accounting_model(variant: DimVariant | str, rates: DilationRates | None = None) -> ModelGraph:
    """Unallocated paper-scale graph: 2048-channel encoder stub, 256-wide module and decoder."""
    return build_model(variant, rates, backbone_channels=2048, branch_channels=256,
                       decoder_width=256, seed=None)


def count_params(model: ModelGraph | Node, include_bias: bool = False) -> int:
    total = 0
    for _, node in model.walk():
        if isinstance(node, Conv2d):
            total += node.spec.weight_count()
            if include_bias:
                total += node.spec.bias_count()
    return total


def param_table(model: ModelGraph, include_bias: bool = False) -> list[tuple[str, str, int]]:
    rows = []
    for name, conv in model.convs():
        n = conv.spec.weight_count() + (conv.spec.bias_count() if include_bias else 0)
        rows.append((name, "x".join(map(str, conv.spec.weight_shape)), n))
    return rows


# ---------------------------------------------------------------------------
# per-branch decomposition and ensembling
# ---------------------------------------------------------------------------

@dataclass
class BranchMaps:
    branches: dict[str, np.ndarray]
    fused: np.ndarray
    bias: np.ndarray


def branch_decompose(model: ModelGraph, linear_decoder: Sequential, image) -> BranchMaps:
    """Decode each DIM branch separately through a linear decoder.

    The decoder's response to all-zero features is reported as ``bias`` and
    removed from each branch map, so ``fused == sum(branches) + bias`` (the
    bias term vanishes for bias-free decoders).
    """
    if not is_linear(linear_decoder):
        raise ValueError("branch decomposition requires a decoder without nonlinear activations")
    feats = model.branch_features(image)
    in_ch = next(n for _, n in linear_decoder.walk() if isinstance(n, Conv2d)).spec.in_channels
    if feats[0].shape[1] != in_ch:
        raise ValueError(f"branch width {feats[0].shape[1]} != decoder input channels {in_ch}")
    zero = Tensor(np.zeros_like(feats[0].data))
    bias = linear_decoder(zero).data
    names = [n for n, _ in model.dim.branches]
    maps = {n: linear_decoder(Tensor(f.data)).data - bias for n, f in zip(names, feats)}
    fused = linear_decoder(T.add(*[Tensor(f.data) for f in feats])).data
    return BranchMaps(maps, fused, bias)


def ensemble_average(maps: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of saliency maps (average voting)."""
    if not maps:
        raise ValueError("ensemble needs at least one map")
    shape = np.shape(maps[0])
    for m in maps[1:]:
        if np.shape(m) != shape:
            raise ValueError(f"map shape mismatch: {shape} vs {np.shape(m)}")
    return np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in maps]), axis=0)
