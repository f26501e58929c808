"""
Immutable tensors and a tape-based reverse-mode differentiator.

Values flow through the layer operations in `covilearn.ops` in one of two ways:

- as plain `Tensor` values, for inference and for the frozen backbone; nothing is recorded.
- as `ComputationNode`s owned by a `GradientTape`, for the trainable head. Every operation applied
  to a node is appended to the tape, and `backward` walks the tape in reverse.

A tape is single-writer. Tensors are read-only and may be shared across threads.
"""

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
import logging
import math
from typing import Any, ClassVar

import numpy as np

from covilearn.errors import ArgumentError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

Shape = tuple[int, ...]


class Tensor:
    """N-dimensional float64 array, row-major, read-only once constructed."""

    __slots__ = ("_data",)

    def __init__(self, data: Any, shape: Sequence[int] | None = None) -> None:
        if isinstance(data, Tensor):
            data = data._data
        array = np.array(data, dtype=np.float64, order="C", copy=True)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if math.prod(shape) != array.size:
                raise DimensionError(f"cannot view {array.size} elements as shape {shape}")
            array = array.reshape(shape)
        if not np.isfinite(array).all():
            raise NonFiniteError(f"tensor of shape {array.shape} contains NaN or infinite values")
        array.flags.writeable = False
        self._data = array

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt an array produced by an operation, checking finiteness without a second copy."""
        if not np.isfinite(array).all():
            raise NonFiniteError(f"operation produced NaN or infinite values (shape {array.shape})")
        tensor = cls.__new__(cls)
        owned = np.asarray(array, dtype=np.float64)
        if not owned.flags.c_contiguous or not owned.flags.owndata:
            owned = owned.copy()
        owned.flags.writeable = False
        tensor._data = owned
        return tensor

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls.wrap(np.zeros(tuple(shape)))

    @classmethod
    def ones(cls, shape: Sequence[int]) -> "Tensor":
        return cls.wrap(np.ones(tuple(shape)))

    @property
    def shape(self) -> Shape:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the elements."""
        return self._data.reshape(-1)

    def numpy(self) -> np.ndarray:
        """Read-only shaped view."""
        return self._data

    def __array__(self, dtype: Any = None, copy: bool | None = None) -> np.ndarray:
        if dtype is None and not copy:
            return self._data
        return np.array(self._data, dtype=dtype, copy=True)

    def item(self) -> float:
        if self._data.size != 1:
            raise DimensionError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def tolist(self) -> Any:
        return self._data.tolist()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._data, other._data))

    def __hash__(self) -> int:
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class OpKind(Enum):
    CONSTANT = "constant"
    PARAMETER = "parameter"
    CONV2D = "conv2d"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    MAX_POOL = "max_pool2d"
    AVG_POOL = "avg_pool2d"
    GLOBAL_AVG_POOL = "global_avg_pool"
    CONCAT = "concat_channels"
    ADD = "add"
    MUL = "mul"
    SUM = "sum"
    DENSE = "dense_affine"
    FLATTEN = "flatten"
    DROPOUT = "dropout"
    SOFTMAX = "softmax"
    BCE = "bce_loss"


class Function:
    """
    A differentiable operation.

    Subclasses implement `output_shape` (shape algebra, evaluated before execution), `forward` on
    raw arrays and `backward`, which maps the gradient of the output to one gradient per input
    (None where the input is not differentiable).
    """

    kind: ClassVar[OpKind]

    def __init__(self, **attrs: Any) -> None:
        self.attrs = attrs

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        raise NotImplementedError

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *operands: "Tensor | ComputationNode", **attrs: Any) -> "Tensor | ComputationNode":
        shapes = tuple(operand.shape for operand in operands)
        declared = cls.output_shape(*shapes, **attrs)

        func = cls(**attrs)
        tape = _tape_of(operands)
        if tape is None:
            out = func.forward(*(operand.numpy() for operand in operands))  # type: ignore[union-attr]
            _check_declared(cls, declared, out.shape)
            return Tensor.wrap(out)

        nodes = tuple(tape.lift(operand) for operand in operands)
        out = func.forward(*(node.value.numpy() for node in nodes))
        _check_declared(cls, declared, out.shape)
        return tape.record(cls.kind, func, nodes, Tensor.wrap(out))


def _check_declared(cls: type[Function], declared: Shape, executed: Shape) -> None:
    if tuple(declared) != tuple(executed):
        raise DimensionError(f"{cls.kind.value}: declared output shape {declared} but executed {executed}")


def _tape_of(operands: Iterable["Tensor | ComputationNode"]) -> "GradientTape | None":
    tape = None
    for operand in operands:
        if isinstance(operand, ComputationNode):
            if tape is not None and operand.tape is not tape:
                raise ArgumentError("operands belong to different gradient tapes")
            tape = operand.tape
    return tape


@dataclass(eq=False)
class ComputationNode:
    """One executed operation on a tape. Identity-hashed."""

    tape: "GradientTape" = field(repr=False)
    index: int
    op_kind: OpKind
    inputs: tuple["ComputationNode", ...]
    output_shape: Shape
    requires_grad: bool
    value: Tensor = field(repr=False)
    function: Function | None = field(default=None, repr=False)
    name: str | None = None

    @property
    def shape(self) -> Shape:
        return self.output_shape

    def numpy(self) -> np.ndarray:
        return self.value.numpy()


class GradientTape:
    """Ordered record of executed nodes. The record order is a valid topological order."""

    def __init__(self) -> None:
        self.nodes: list[ComputationNode] = []
        self._names: dict[str, ComputationNode] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def parameter(self, name: str, value: Tensor, *, trainable: bool = True) -> ComputationNode:
        """Register a named leaf. Frozen leaves (trainable=False) get no gradient storage."""
        if name in self._names:
            raise ArgumentError(f"parameter '{name}' is already registered on this tape")
        node = self._append(OpKind.PARAMETER, None, (), value, requires_grad=trainable, name=name)
        self._names[name] = node
        return node

    def constant(self, value: Tensor) -> ComputationNode:
        return self._append(OpKind.CONSTANT, None, (), value, requires_grad=False)

    def lift(self, operand: "Tensor | ComputationNode") -> ComputationNode:
        if isinstance(operand, ComputationNode):
            return operand
        return self.constant(operand)

    def record(
        self, kind: OpKind, function: Function, inputs: tuple[ComputationNode, ...], value: Tensor
    ) -> ComputationNode:
        requires_grad = any(node.requires_grad for node in inputs)
        return self._append(kind, function, inputs, value, requires_grad=requires_grad)

    def _append(
        self,
        kind: OpKind,
        function: Function | None,
        inputs: tuple[ComputationNode, ...],
        value: Tensor,
        *,
        requires_grad: bool,
        name: str | None = None,
    ) -> ComputationNode:
        node = ComputationNode(
            tape=self,
            index=len(self.nodes),
            op_kind=kind,
            inputs=inputs,
            output_shape=value.shape,
            requires_grad=requires_grad,
            value=value,
            function=function,
            name=name,
        )
        self.nodes.append(node)
        return node


def backward(tape: GradientTape, loss: ComputationNode) -> dict[str, Tensor]:
    """
    Gradient of a scalar loss with respect to every trainable parameter that reaches it.

    Parameters registered with trainable=False, or not connected to the loss, are absent from the
    result.
    """
    if loss.tape is not tape:
        raise ArgumentError("loss node was not recorded on this tape")
    if loss.value.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.index] = np.ones(loss.shape)

    for node in reversed(tape.nodes[: loss.index + 1]):
        grad = grads.get(node.index)
        if grad is None or node.function is None:
            continue
        input_grads = node.function.backward(grad)
        for parent, parent_grad in zip(node.inputs, input_grads, strict=True):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise DimensionError(
                    f"{node.op_kind.value}: gradient shape {parent_grad.shape} != value shape {parent.shape}"
                )
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + parent_grad
            else:
                grads[parent.index] = parent_grad

    result: dict[str, Tensor] = {}
    for name, node in tape._names.items():
        if node.requires_grad and node.index in grads:
            result[name] = Tensor.wrap(grads[node.index])
    return result
