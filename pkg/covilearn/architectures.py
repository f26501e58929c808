"""
Declarative backbone + head graphs for the four screening networks and the `micro` test network.

    DNN-I    resnet50     bottleneck stages (3, 4, 6, 3)
    DNN-II   resnet101    bottleneck stages (3, 4, 23, 3)
    DNN-III  densenet121  dense blocks (6, 12, 24, 16), growth 32
    DNN-IV   densenet169  dense blocks (6, 12, 32, 32), growth 32
    micro    tiny DenseNet, blocks (2, 2), growth 8, 32x32 input

Layer and parameter names follow the Keras application models, so externally trained weights can
be converted name-for-name. Parameter accounting follows the same convention: batch normalization
carries four per-channel vectors (two trainable, two stored statistics), ResNet convolutions carry
a bias and DenseNet convolutions do not.
"""

from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
import math
from types import MappingProxyType
from typing import Any

from covilearn import ops
from covilearn.config import HeadKind
from covilearn.errors import ArgumentError, DimensionError
from covilearn.tensor import Function, OpKind, Shape

BACKBONES = ("resnet50", "resnet101", "densenet121", "densenet169", "micro")
HEAD_KINDS: tuple[HeadKind, ...] = ("gap-dense", "alg1-conv")

DNN_TAGS = {
    "resnet50": "DNN-I",
    "resnet101": "DNN-II",
    "densenet121": "DNN-III",
    "densenet169": "DNN-IV",
    "micro": "micro",
}

# Totals printed in the published comparison table. Only the DenseNet totals are reproduced exactly.
PUBLISHED_TOTALS = {
    "DNN-I": 23_696_066,
    "DNN-II": 42_757_826,
    "DNN-III": 7_103_234,
    "DNN-IV": 12_749_570,
}

INPUT_SIZE = {"resnet50": 224, "resnet101": 224, "densenet121": 224, "densenet169": 224, "micro": 32}

BN_EPSILON = 1.001e-5
HEAD_UNITS = 64
HEAD_CONV_FILTERS = 64
NUM_CLASSES = 2
DEFAULT_DROPOUT = 0.5

_FUNCTIONS: dict[OpKind, type[Function]] = {
    OpKind.CONV2D: ops.Conv2d,
    OpKind.BATCHNORM: ops.BatchNormInfer,
    OpKind.RELU: ops.Relu,
    OpKind.MAX_POOL: ops.MaxPool2d,
    OpKind.AVG_POOL: ops.AvgPool2d,
    OpKind.GLOBAL_AVG_POOL: ops.GlobalAvgPool,
    OpKind.CONCAT: ops.ConcatChannels,
    OpKind.ADD: ops.Add,
    OpKind.DENSE: ops.DenseAffine,
    OpKind.FLATTEN: ops.Flatten,
    OpKind.DROPOUT: ops.Dropout,
    OpKind.SOFTMAX: ops.Softmax,
}


def function_for(kind: OpKind) -> type[Function]:
    return _FUNCTIONS[kind]


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: Shape
    trainable: bool = True
    init: str = "zeros"  # zeros | ones | he_uniform | glorot_uniform

    @property
    def count(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: OpKind
    inputs: tuple[str, ...]
    attributes: Mapping[str, Any] = field(default_factory=dict)
    params: tuple[ParamSpec, ...] = ()
    frozen: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", MappingProxyType(dict(self.attributes)))

    @property
    def parameter_count(self) -> int:
        return sum(p.count for p in self.params)

    @property
    def trainable_count(self) -> int:
        if self.frozen:
            return 0
        return sum(p.count for p in self.params if p.trainable)

    def param_name(self, local: str) -> str:
        return f"{self.name}/{local}"


GRAPH_INPUT = "input"


@dataclass(frozen=True)
class ArchitectureGraph:
    """Ordered layer DAG. Layers only consume the graph input or earlier layers."""

    variant: str
    tag: str
    input_shape: Shape
    layers: tuple[LayerSpec, ...]
    head_kind: HeadKind | None = None
    shapes: Mapping[str, Shape] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "shapes", MappingProxyType(propagate_shapes(self.input_shape, self.layers)))

    def __iter__(self) -> Iterator[LayerSpec]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def output_name(self) -> str:
        return self.layers[-1].name if self.layers else GRAPH_INPUT

    @property
    def output_shape(self) -> Shape:
        return self.shapes[self.output_name]

    @property
    def backbone_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(layer for layer in self.layers if layer.frozen)

    @property
    def head_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(layer for layer in self.layers if not layer.frozen)

    @property
    def feature_name(self) -> str:
        """Output of the last frozen layer: what the trainable head consumes."""
        backbone = self.backbone_layers
        return backbone[-1].name if backbone else GRAPH_INPUT

    def parameters(self) -> Iterator[tuple[str, ParamSpec, LayerSpec]]:
        for layer in self.layers:
            for param in layer.params:
                yield layer.param_name(param.name), param, layer

    def parameter_shapes(self) -> dict[str, Shape]:
        return {name: param.shape for name, param, _ in self.parameters()}

    def trainable_names(self) -> list[str]:
        return [name for name, param, layer in self.parameters() if param.trainable and not layer.frozen]

    def with_input_batch(self, batch: int) -> "ArchitectureGraph":
        return ArchitectureGraph(
            self.variant, self.tag, (batch, *self.input_shape[1:]), self.layers, head_kind=self.head_kind
        )


def propagate_shapes(input_shape: Shape, layers: tuple[LayerSpec, ...]) -> dict[str, Shape]:
    shapes: dict[str, Shape] = {GRAPH_INPUT: tuple(input_shape)}
    for layer in layers:
        if layer.name in shapes:
            raise ArgumentError(f"duplicate layer name '{layer.name}'")
        missing = [name for name in layer.inputs if name not in shapes]
        if missing:
            raise ArgumentError(f"layer '{layer.name}' consumes unknown or later layers: {missing}")
        operand_shapes = [shapes[name] for name in layer.inputs] + [p.shape for p in layer.params]
        attrs = dict(layer.attributes)
        if layer.kind is OpKind.DROPOUT:
            attrs.update(mode="infer", seed=0)
        try:
            shapes[layer.name] = tuple(function_for(layer.kind).output_shape(*operand_shapes, **attrs))
        except ArgumentError as e:
            raise type(e)(f"layer '{layer.name}': {e}") from e
    return shapes


# ------------------------------------------------------------------------------
# Counting
# ------------------------------------------------------------------------------


def total_parameters(graph: ArchitectureGraph) -> int:
    return sum(layer.parameter_count for layer in graph.layers)


def trainable_parameters(graph: ArchitectureGraph) -> int:
    return sum(layer.trainable_count for layer in graph.layers)


def frozen_parameters(graph: ArchitectureGraph) -> int:
    return total_parameters(graph) - trainable_parameters(graph)


def parameter_table(graph: ArchitectureGraph) -> str:
    """Per-layer parameter dump, one row per layer, totals at the bottom."""
    rows = [("layer", "kind", "output shape", "params", "trainable")]
    for layer in graph.layers:
        shape = "x".join(str(s) for s in graph.shapes[layer.name][1:])
        rows.append((layer.name, layer.kind.value, shape, f"{layer.parameter_count:,}", "no" if layer.frozen else "yes"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(widths[i]) if i < 3 else cell.rjust(widths[i]) for i, cell in enumerate(row)) for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    lines.append("-" * len(lines[0]))
    lines.append(f"variant: {graph.variant} ({graph.tag})")
    lines.append(f"total parameters: {total_parameters(graph):,}")
    lines.append(f"trainable parameters: {trainable_parameters(graph):,}")
    lines.append(f"frozen parameters: {frozen_parameters(graph):,}")
    return "\n".join(lines)


# ------------------------------------------------------------------------------
# Builders
# ------------------------------------------------------------------------------


class _Builder:
    def __init__(self, *, frozen: bool, prefix: str = "") -> None:
        self.frozen = frozen
        self.prefix = prefix
        self.layers: list[LayerSpec] = []

    def add(self, name: str, kind: OpKind, inputs: tuple[str, ...], params: tuple[ParamSpec, ...] = (), **attributes: Any) -> str:
        name = self.prefix + name
        self.layers.append(LayerSpec(name, kind, inputs, attributes, params, self.frozen))
        return name

    def conv(self, name: str, src: str, in_ch: int, filters: int, kernel: int, *, stride: int = 1, padding: ops.Padding = "valid", bias: bool) -> str:
        params = [ParamSpec("kernel", (filters, in_ch, kernel, kernel), init="he_uniform")]
        if bias:
            params.append(ParamSpec("bias", (filters,)))
        return self.add(name, OpKind.CONV2D, (src,), tuple(params), stride=stride, padding=padding)

    def bn(self, name: str, src: str, channels: int) -> str:
        params = (
            ParamSpec("gamma", (channels,), init="ones"),
            ParamSpec("beta", (channels,)),
            ParamSpec("moving_mean", (channels,), trainable=False),
            ParamSpec("moving_variance", (channels,), trainable=False, init="ones"),
        )
        return self.add(name, OpKind.BATCHNORM, (src,), params, eps=BN_EPSILON)

    def relu(self, name: str, src: str) -> str:
        return self.add(name, OpKind.RELU, (src,))

    def dense(self, name: str, src: str, in_features: int, units: int, *, init: str) -> str:
        params = (ParamSpec("kernel", (in_features, units), init=init), ParamSpec("bias", (units,)))
        return self.add(name, OpKind.DENSE, (src,), params)


def _densenet(builder: _Builder, blocks: tuple[int, ...], growth: int, stem_filters: int, stem_kernel: int, stem_stride: int, pool_window: int, pool_stride: int, pool_padding: ops.Padding) -> tuple[str, int]:
    x = builder.conv("conv1/conv", GRAPH_INPUT, 3, stem_filters, stem_kernel, stride=stem_stride, padding="same", bias=False)
    x = builder.bn("conv1/bn", x, stem_filters)
    x = builder.relu("conv1/relu", x)
    x = builder.add("pool1", OpKind.MAX_POOL, (x,), window=pool_window, stride=pool_stride, padding=pool_padding)
    channels = stem_filters

    for stage, layers in enumerate(blocks, start=2):
        for index in range(1, layers + 1):
            prefix = f"conv{stage}_block{index}"
            y = builder.bn(f"{prefix}_0_bn", x, channels)
            y = builder.relu(f"{prefix}_0_relu", y)
            y = builder.conv(f"{prefix}_1_conv", y, channels, 4 * growth, 1, bias=False)
            y = builder.bn(f"{prefix}_1_bn", y, 4 * growth)
            y = builder.relu(f"{prefix}_1_relu", y)
            y = builder.conv(f"{prefix}_2_conv", y, 4 * growth, growth, 3, padding="same", bias=False)
            x = builder.add(f"{prefix}_concat", OpKind.CONCAT, (x, y))
            channels += growth
        if stage - 1 < len(blocks):
            reduced = int(channels * 0.5)
            x = builder.bn(f"pool{stage}_bn", x, channels)
            x = builder.relu(f"pool{stage}_relu", x)
            x = builder.conv(f"pool{stage}_conv", x, channels, reduced, 1, bias=False)
            x = builder.add(f"pool{stage}_pool", OpKind.AVG_POOL, (x,), window=2, stride=2)
            channels = reduced

    x = builder.bn("bn", x, channels)
    x = builder.relu("relu", x)
    return x, channels


def _resnet(builder: _Builder, stages: tuple[int, ...]) -> tuple[str, int]:
    x = builder.conv("conv1_conv", GRAPH_INPUT, 3, 64, 7, stride=2, padding="same", bias=True)
    x = builder.bn("conv1_bn", x, 64)
    x = builder.relu("conv1_relu", x)
    x = builder.add("pool1_pool", OpKind.MAX_POOL, (x,), window=3, stride=2, padding="same")
    channels = 64

    for stage, (blocks, filters) in enumerate(zip(stages, (64, 128, 256, 512), strict=True), start=2):
        for index in range(1, blocks + 1):
            prefix = f"conv{stage}_block{index}"
            stride = 2 if index == 1 and stage > 2 else 1
            if index == 1:
                shortcut = builder.conv(f"{prefix}_0_conv", x, channels, 4 * filters, 1, stride=stride, bias=True)
                shortcut = builder.bn(f"{prefix}_0_bn", shortcut, 4 * filters)
            else:
                shortcut = x
            y = builder.conv(f"{prefix}_1_conv", x, channels, filters, 1, stride=stride, bias=True)
            y = builder.bn(f"{prefix}_1_bn", y, filters)
            y = builder.relu(f"{prefix}_1_relu", y)
            y = builder.conv(f"{prefix}_2_conv", y, filters, filters, 3, padding="same", bias=True)
            y = builder.bn(f"{prefix}_2_bn", y, filters)
            y = builder.relu(f"{prefix}_2_relu", y)
            y = builder.conv(f"{prefix}_3_conv", y, filters, 4 * filters, 1, bias=True)
            y = builder.bn(f"{prefix}_3_bn", y, 4 * filters)
            x = builder.add(f"{prefix}_add", OpKind.ADD, (shortcut, y))
            x = builder.relu(f"{prefix}_out", x)
            channels = 4 * filters
    return x, channels


def _backbone_layers(variant: str) -> tuple[list[LayerSpec], int]:
    builder = _Builder(frozen=True)
    match variant:
        case "resnet50":
            _, channels = _resnet(builder, (3, 4, 6, 3))
        case "resnet101":
            _, channels = _resnet(builder, (3, 4, 23, 3))
        case "densenet121":
            _, channels = _densenet(builder, (6, 12, 24, 16), 32, 64, 7, 2, 3, 2, "same")
        case "densenet169":
            _, channels = _densenet(builder, (6, 12, 32, 32), 32, 64, 7, 2, 3, 2, "same")
        case "micro":
            _, channels = _densenet(builder, (2, 2), 8, 16, 3, 1, 2, 2, "valid")
        case _:
            raise ArgumentError(f"unknown backbone variant '{variant}', expected one of {', '.join(BACKBONES)}")
    return builder.layers, channels


def build_backbone(variant: str) -> ArchitectureGraph:
    """Top-less backbone graph; every layer is frozen."""
    layers, _ = _backbone_layers(variant)
    size = INPUT_SIZE[variant]
    return ArchitectureGraph(variant, DNN_TAGS[variant], (1, 3, size, size), tuple(layers))


def build_head(
    channels: int, head_kind: str = "gap-dense", *, source: str = GRAPH_INPUT, spatial: int = 7
) -> tuple[LayerSpec, ...]:
    """
    Trainable classification head consuming a (N, channels, spatial, spatial) feature map named
    `source`. `spatial` only matters for alg1-conv, whose flatten width depends on it.
    """
    if channels <= 0:
        raise ArgumentError(f"head needs a positive channel count, got {channels}")
    builder = _Builder(frozen=False)
    match head_kind:
        case "gap-dense":
            x = builder.add("head_pool", OpKind.GLOBAL_AVG_POOL, (source,))
            x = builder.dense("head_dense", x, channels, HEAD_UNITS, init="he_uniform")
            x = builder.relu("head_relu", x)
            x = builder.add("head_dropout", OpKind.DROPOUT, (x,), rate=DEFAULT_DROPOUT)
            x = builder.dense("head_logits", x, HEAD_UNITS, NUM_CLASSES, init="glorot_uniform")
        case "alg1-conv":
            if spatial < 2:
                raise ArgumentError(f"alg1-conv head needs a feature map of at least 2x2, got {spatial}x{spatial}")
            pooled = (spatial - 2) // 2 + 1
            x = builder.conv("head_conv", source, channels, HEAD_CONV_FILTERS, 3, padding="same", bias=True)
            x = builder.relu("head_conv_relu", x)
            x = builder.add("head_pool", OpKind.MAX_POOL, (x,), window=2, stride=2, padding="valid")
            x = builder.add("head_flatten", OpKind.FLATTEN, (x,))
            x = builder.dense("head_logits", x, HEAD_CONV_FILTERS * pooled * pooled, NUM_CLASSES, init="glorot_uniform")
        case _:
            raise ArgumentError(f"unknown head kind '{head_kind}', expected one of {', '.join(HEAD_KINDS)}")
    builder.add("head_softmax", OpKind.SOFTMAX, (x,))
    return tuple(builder.layers)


def head_graph(channels: int, head_kind: str = "gap-dense", spatial: int = 7) -> ArchitectureGraph:
    """Stand-alone head over a (1, channels, spatial, spatial) feature map."""
    layers = build_head(channels, head_kind, spatial=spatial)
    return ArchitectureGraph(f"head-{head_kind}", "head", (1, channels, spatial, spatial), layers, head_kind=head_kind)  # type: ignore[arg-type]


def parse_variant(variant: str) -> tuple[str, HeadKind]:
    """
    Split a model name into (backbone, head kind).

    Accepts `densenet121`, `densenet121-gapdense`, `densenet121-alg1conv`, `micro`, and the table
    tags `DNN-I` .. `DNN-IV`.
    """
    name = variant.strip().lower()
    for backbone, tag in DNN_TAGS.items():
        if name == tag.lower():
            return backbone, "gap-dense"
    backbone, _, head = name.partition("-")
    if backbone not in BACKBONES:
        raise ArgumentError(f"unknown variant '{variant}', expected one of {', '.join(BACKBONES)} or DNN-I..DNN-IV")
    match head:
        case "" | "gapdense" | "gap-dense":
            return backbone, "gap-dense"
        case "alg1conv" | "alg1-conv":
            return backbone, "alg1-conv"
        case _:
            raise ArgumentError(f"unknown head in variant '{variant}', expected gapdense or alg1conv")


def assemble_model(variant: str, head_kind: str | None = None) -> ArchitectureGraph:
    """Frozen backbone + trainable head, output (N, 2)."""
    backbone, parsed_head = parse_variant(variant)
    head_kind = head_kind or parsed_head
    layers, channels = _backbone_layers(backbone)
    size = INPUT_SIZE[backbone]
    input_shape = (1, 3, size, size)
    feature_shape = propagate_shapes(input_shape, tuple(layers))[layers[-1].name]
    head = build_head(channels, head_kind, source=layers[-1].name, spatial=feature_shape[2])
    suffix = head_kind.replace("-", "")
    graph = ArchitectureGraph(f"{backbone}-{suffix}", DNN_TAGS[backbone], input_shape, (*layers, *head), head_kind=head_kind)  # type: ignore[arg-type]
    if graph.output_shape[1:] != (NUM_CLASSES,):
        raise DimensionError(f"{graph.variant} terminates at {graph.output_shape}, expected (N, {NUM_CLASSES})")
    return graph


def empty_graph() -> ArchitectureGraph:
    return ArchitectureGraph("empty", "empty", (1, 3, 1, 1), ())
