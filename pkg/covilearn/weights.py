"""
Parameter stores and the CVLW weights container.

Container layout, little-endian throughout:

    magic            4 bytes  b"CVLW"
    version          u16
    record count     u32
    per record:
        name length  u16
        name         UTF-8
        rank         u8
        extents      u32 * rank
        values       float32 * product(extents)

Stores hold float64 tensors; the container narrows to float32 on write and widens on read.
"""

from collections.abc import Iterator, Mapping
import hashlib
import io
import logging
import math
from pathlib import Path
import struct

import numpy as np

from covilearn.architectures import ArchitectureGraph
from covilearn.errors import FormatError, MissingFileError, WeightsError
from covilearn.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"CVLW"
FORMAT_VERSION = 1


class ParameterStore(Mapping[str, Tensor]):
    """Immutable name -> Tensor mapping. `updated` returns a new store."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None) -> None:
        self._tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ParameterStore({len(self)} tensors)"

    def updated(self, changes: Mapping[str, Tensor]) -> "ParameterStore":
        merged = dict(self._tensors)
        merged.update(changes)
        return ParameterStore(merged)

    def subset(self, names: list[str]) -> "ParameterStore":
        return ParameterStore({name: self._tensors[name] for name in names})


def initialize_parameters(graph: ArchitectureGraph, seed: int = 0) -> ParameterStore:
    """
    He-uniform for convolutions and relu-facing dense layers, Glorot-uniform for the logits layer,
    gamma=1 / beta=0 / stored mean=0 / stored variance=1 for batch normalization.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, param, _ in graph.parameters():
        match param.init:
            case "zeros":
                value = np.zeros(param.shape)
            case "ones":
                value = np.ones(param.shape)
            case "he_uniform":
                limit = math.sqrt(6.0 / _fan_in(param.shape))
                value = rng.uniform(-limit, limit, size=param.shape)
            case "glorot_uniform":
                limit = math.sqrt(6.0 / (_fan_in(param.shape) + _fan_out(param.shape)))
                value = rng.uniform(-limit, limit, size=param.shape)
            case other:
                raise ValueError(f"unknown initializer '{other}' for {name}")
        tensors[name] = Tensor.wrap(value)
    return ParameterStore(tensors)


def _fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) == 4:  # (F, C, kh, kw)
        return shape[1] * shape[2] * shape[3]
    return shape[0]  # (D, K)


def _fan_out(shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[0] * shape[2] * shape[3]
    return shape[1]


def serialize_weights(store: Mapping[str, Tensor], graph: ArchitectureGraph) -> bytes:
    shapes = graph.parameter_shapes()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HI", FORMAT_VERSION, len(shapes)))
    for name, shape in shapes.items():
        if name not in store:
            raise WeightsError(name, "missing from parameter store")
        tensor = store[name]
        if tensor.shape != shape:
            raise WeightsError(name, f"store holds shape {tensor.shape}, graph expects {shape}")
        encoded = name.encode("utf-8")
        out.write(struct.pack("<HB", len(encoded), len(shape)))
        out.write(encoded)
        out.write(struct.pack(f"<{len(shape)}I", *shape))
        out.write(tensor.numpy().astype("<f4").tobytes())
    return out.getvalue()


def deserialize_weights(data: bytes, graph: ArchitectureGraph) -> ParameterStore:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError("not a CVLW weights container (bad magic)")
    version, count = reader.unpack("<HI", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported weights container version {version}")

    expected = graph.parameter_shapes()
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        name_length, rank = reader.unpack("<HB", "record header")
        try:
            name = reader.take(name_length, "record name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"record name is not valid UTF-8 at byte {reader.offset}") from e
        shape = tuple(reader.unpack(f"<{rank}I", f"extents of '{name}'"))
        if name not in expected:
            raise WeightsError(name, f"not a parameter of {graph.variant}")
        if name in tensors:
            raise WeightsError(name, "appears twice in the container")
        if shape != expected[name]:
            raise WeightsError(name, f"container shape {shape} does not match graph shape {expected[name]}")
        values = np.frombuffer(reader.take(4 * math.prod(shape), f"values of '{name}'"), dtype="<f4")
        if not np.isfinite(values).all():
            raise WeightsError(name, "holds non-finite values")
        tensors[name] = Tensor.wrap(values.astype(np.float64).reshape(shape))

    if reader.remaining:
        raise FormatError(f"{reader.remaining} trailing bytes after the last record")
    for name in expected:
        if name not in tensors:
            raise WeightsError(name, "missing from weights container")
    return ParameterStore({name: tensors[name] for name in expected})


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = memoryview(data)
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, n: int, what: str) -> bytes:
        if n > self.remaining:
            raise FormatError(f"truncated weights container reading {what}: need {n} bytes, {self.remaining} left")
        chunk = bytes(self.data[self.offset : self.offset + n])
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def save_weights(path: Path, store: Mapping[str, Tensor], graph: ArchitectureGraph) -> str:
    """Write the container and return its sha256 digest."""
    payload = serialize_weights(store, graph)
    path.write_bytes(payload)
    digest = hashlib.sha256(payload).hexdigest()
    logger.info("wrote %d parameters for %s to %s (sha256 %s)", len(store), graph.variant, path, digest[:12])
    return digest


def load_weights(path: Path, graph: ArchitectureGraph) -> tuple[ParameterStore, str]:
    try:
        payload = path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(path) from None
    return deserialize_weights(payload, graph), hashlib.sha256(payload).hexdigest()
