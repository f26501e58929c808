"""Graph execution: frozen backbone on plain tensors, trainable head optionally on a gradient tape."""

from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from typing import Any, Literal

import numpy as np

from covilearn.architectures import GRAPH_INPUT, ArchitectureGraph, LayerSpec, function_for
from covilearn.config import ConvMethod
from covilearn.errors import DimensionError
from covilearn.ops import Operand, as_operand
from covilearn.tensor import GradientTape, OpKind, Tensor

Mode = Literal["train", "infer"]


@dataclass(frozen=True)
class RunOptions:
    mode: Mode = "infer"
    dropout_seed: int = 0
    dropout_rate: float | None = None
    conv_method: ConvMethod = "direct"


def _last_use(layers: Iterable[LayerSpec]) -> dict[str, int]:
    last: dict[str, int] = {}
    for index, layer in enumerate(layers):
        for name in layer.inputs:
            last[name] = index
    return last


def run_layers(
    layers: tuple[LayerSpec, ...],
    inputs: Mapping[str, Operand],
    params: Mapping[str, Operand],
    options: RunOptions,
) -> Operand:
    """Execute `layers` in order and return the output of the last one."""
    values: dict[str, Operand] = dict(inputs)
    last_use = _last_use(layers)
    out: Operand | None = None
    for index, layer in enumerate(layers):
        operands = [values[name] for name in layer.inputs]
        operands += [params[layer.param_name(p.name)] for p in layer.params]
        attrs: dict[str, Any] = dict(layer.attributes)
        if layer.kind is OpKind.CONV2D:
            attrs["method"] = options.conv_method
        elif layer.kind is OpKind.DROPOUT:
            if options.dropout_rate is not None:
                attrs["rate"] = options.dropout_rate
            attrs.update(mode=options.mode, seed=options.dropout_seed + index)
        out = function_for(layer.kind).apply(*operands, **attrs)
        values[layer.name] = out
        for name in layer.inputs:
            if last_use.get(name) == index and name not in inputs:
                del values[name]
    if out is None:
        return inputs[GRAPH_INPUT]
    return out


def check_images(graph: ArchitectureGraph, images: Any) -> Tensor:
    tensor = images if isinstance(images, Tensor) else Tensor(images)
    expected = graph.input_shape[1:]
    if tensor.ndim != 4 or tensor.shape[1:] != expected:
        raise DimensionError(f"{graph.variant} expects images of shape (N, {', '.join(map(str, expected))}), got {tensor.shape}")
    return tensor


def backbone_features(
    graph: ArchitectureGraph, params: Mapping[str, Tensor], images: Any, *, conv_method: ConvMethod = "direct", chunk: int = 32
) -> Tensor:
    """Frozen feature map for a batch of preprocessed images, evaluated in chunks."""
    tensor = check_images(graph, images)
    options = RunOptions(conv_method=conv_method)
    pieces = []
    for start in range(0, tensor.shape[0], chunk):
        batch = Tensor.wrap(tensor.numpy()[start : start + chunk])
        feature = run_layers(graph.backbone_layers, {GRAPH_INPUT: batch}, params, options)
        pieces.append(feature.numpy())
    if not pieces:
        return Tensor.zeros((0, *graph.shapes[graph.feature_name][1:]))
    return Tensor.wrap(np.concatenate(pieces, axis=0))


def head_forward(
    graph: ArchitectureGraph, params: Mapping[str, Operand], features: Operand, options: RunOptions
) -> Operand:
    return run_layers(graph.head_layers, {graph.feature_name: features}, params, options)


def head_on_tape(
    graph: ArchitectureGraph, params: Mapping[str, Tensor], features: Tensor, options: RunOptions
) -> tuple[GradientTape, Operand]:
    """Run the head with its parameters registered as trainable leaves of a fresh tape."""
    tape = GradientTape()
    leaves: dict[str, Operand] = {}
    for layer in graph.head_layers:
        for param in layer.params:
            name = layer.param_name(param.name)
            leaves[name] = tape.parameter(name, params[name], trainable=param.trainable)
    out = head_forward(graph, leaves, tape.constant(features), options)
    return tape, out


def forward(
    graph: ArchitectureGraph,
    params: Mapping[str, Tensor],
    images: Any,
    *,
    mode: Mode = "infer",
    dropout_seed: int = 0,
    conv_method: ConvMethod = "direct",
) -> Tensor:
    """Full network on plain tensors: (N, 3, H, W) -> (N, 2) class probabilities."""
    features = backbone_features(graph, params, images, conv_method=conv_method)
    options = RunOptions(mode=mode, dropout_seed=dropout_seed, conv_method=conv_method)
    out = head_forward(graph, params, as_operand(features), options)
    assert isinstance(out, Tensor)
    return out
