"""
Head training over a frozen backbone: binary cross-entropy, Adam, per-epoch history.
"""

from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
import json
import logging
from pathlib import Path
from typing import Any, ClassVar

import numpy as np

from covilearn.architectures import ArchitectureGraph
from covilearn.augment import augment
from covilearn.config import ConvMethod, TrainConfig
from covilearn.dataset import DatasetManifest, Label, Sample, label_from_index, load_samples
from covilearn.errors import ArgumentError, NameMismatchError, NonFiniteError
from covilearn.imaging import dataset_mean
from covilearn.model import RunOptions, backbone_features, forward, head_forward, head_on_tape
from covilearn.ops import Operand, as_operand, require_rank
from covilearn.tensor import Function, OpKind, Shape, Tensor, backward
from covilearn.weights import ParameterStore

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-7
ROW_SUM_TOLERANCE = 1e-6


# ------------------------------------------------------------------------------
# Loss
# ------------------------------------------------------------------------------


class BinaryCrossEntropy(Function):
    """Mean over rows of -sum_k y_k log(clamp(p_k, 1e-7, 1)). Gradient flows to p only."""

    kind: ClassVar[OpKind] = OpKind.BCE

    @staticmethod
    def output_shape(*shapes: Shape, **attrs: Any) -> Shape:
        predicted, target = shapes
        require_rank(predicted, 2, "bce_loss predicted")
        if predicted != target:
            raise ArgumentError(f"bce_loss: predicted shape {predicted} != target shape {target}")
        if predicted[0] == 0:
            raise ArgumentError("bce_loss needs at least one row")
        return ()

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        p, y = arrays
        if np.isnan(p).any() or np.isnan(y).any():
            raise ArgumentError("bce_loss received NaN")
        if np.abs(p.sum(axis=1) - 1.0).max() > ROW_SUM_TOLERANCE:
            raise ArgumentError("bce_loss: predicted rows must sum to 1")
        if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=1) == 1.0).all()):
            raise ArgumentError("bce_loss: targets must be one-hot rows")
        clamped = np.clip(p, PROBABILITY_FLOOR, 1.0)
        self.saved = (clamped, y, p >= PROBABILITY_FLOOR)
        return np.asarray(-(y * np.log(clamped)).sum(axis=1).mean())

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        clamped, y, inside = self.saved
        rows = y.shape[0]
        return (grad * np.where(inside, -y / clamped, 0.0) / rows, None)


def bce_loss(predicted: Any, target: Any) -> Operand:
    return BinaryCrossEntropy.apply(as_operand(predicted), as_operand(target))


# ------------------------------------------------------------------------------
# Optimizer
# ------------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: Mapping[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def fresh(cls, params: Mapping[str, Tensor], names: Sequence[str], **hyper: float) -> "AdamState":
        zeros = {name: np.zeros(params[name].shape) for name in names}
        return cls(**hyper, m=zeros, v={name: z.copy() for name, z in zeros.items()})  # type: ignore[arg-type]

    @classmethod
    def from_config(cls, params: Mapping[str, Tensor], names: Sequence[str], config: TrainConfig) -> "AdamState":
        return cls.fresh(params, names, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)


def adam_step(
    state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]
) -> tuple[ParameterStore, AdamState]:
    """One bias-corrected Adam update of exactly the parameters `state` tracks."""
    tracked, given = set(state.m), set(grads)
    if tracked != given:
        raise NameMismatchError(missing=tracked - given, unexpected=given - tracked)
    absent = tracked - set(params)
    if absent:
        raise NameMismatchError(missing=absent, unexpected=set())

    t = state.t + 1
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    updated: dict[str, Tensor] = {}
    for name in state.m:
        g = grads[name].numpy()
        if g.shape != params[name].shape:
            raise ArgumentError(f"gradient for '{name}' has shape {g.shape}, parameter has {params[name].shape}")
        m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        updated[name] = Tensor.wrap(params[name].numpy() - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))

    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)
    store = params if isinstance(params, ParameterStore) else ParameterStore(params)
    return store.updated(updated), new_state


# ------------------------------------------------------------------------------
# History
# ------------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None


@dataclass
class EpochHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        values = [record.train_loss, record.train_acc, record.val_loss, record.val_acc]
        if not all(value is None or np.isfinite(value) for value in values):
            raise NonFiniteError(f"epoch {record.epoch} produced a non-finite metric: {record}")
        self.records.append(record)

    def to_json(self) -> list[dict[str, Any]]:
        return [asdict(record) for record in self.records]

    @classmethod
    def from_json(cls, rows: list[dict[str, Any]]) -> "EpochHistory":
        return cls([EpochRecord(**row) for row in rows])


def sidecar_path(history_path: Path) -> Path:
    return history_path.with_name(history_path.name + ".config.json")


def write_history(path: Path, history: EpochHistory, provenance: Mapping[str, Any]) -> None:
    """History array at `path`; hyperparameters and run provenance in `<path>.config.json`."""
    path.write_text(json.dumps(history.to_json(), indent=2) + "\n", encoding="utf-8")
    sidecar_path(path).write_text(json.dumps(dict(provenance), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_history(path: Path) -> EpochHistory:
    return EpochHistory.from_json(json.loads(path.read_text(encoding="utf-8")))


# ------------------------------------------------------------------------------
# Training loop
# ------------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    params: ParameterStore
    history: EpochHistory
    mean: tuple[float, float, float] | None


def _stack(samples: Sequence[Sample], mean: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.stack([s.pixels.numpy() for s in samples])
    if mean is not None:
        pixels = pixels - mean
    return pixels, np.stack([s.label.numpy() for s in samples])


def _accuracy(probabilities: np.ndarray, targets: np.ndarray) -> float:
    return float((probabilities.argmax(axis=1) == targets.argmax(axis=1)).mean())


def _score(
    graph: ArchitectureGraph, params: ParameterStore, features: Tensor, targets: np.ndarray, config: TrainConfig
) -> tuple[float, float]:
    probabilities = head_forward(graph, params, features, RunOptions(conv_method=config.conv_method)).numpy()
    loss = bce_loss(Tensor.wrap(probabilities), Tensor.wrap(targets)).numpy().item()
    return loss, _accuracy(probabilities, targets)


def train_on_samples(
    graph: ArchitectureGraph,
    params: Mapping[str, Tensor],
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    config: TrainConfig,
) -> TrainResult:
    if not train_samples:
        raise ArgumentError("training split is empty")
    store = params if isinstance(params, ParameterStore) else ParameterStore(params)

    mean: tuple[float, float, float] | None = None
    mean_array = None
    if config.subtract_mean:
        mean = config.mean_override or dataset_mean(s.pixels for s in train_samples)
        mean_array = np.asarray(mean).reshape(1, 3, 1, 1)

    def features_of(pixels: np.ndarray) -> Tensor:
        return backbone_features(graph, store, pixels, conv_method=config.conv_method)

    train_pixels, train_targets = _stack(train_samples, mean_array)
    train_features = features_of(train_pixels)
    cached = None if config.augment else train_features.numpy()
    val_features = val_targets = None
    if val_samples:
        val_pixels, val_targets = _stack(val_samples, mean_array)
        val_features = features_of(val_pixels)

    names = graph.trainable_names()
    state = AdamState.from_config(store, names, config)
    history = EpochHistory()
    n = len(train_samples)

    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            if cached is not None:
                features = cached[batch]
            else:
                seeds = rng.integers(0, 2**31, size=len(batch))
                augmented = [augment(train_samples[i], config.augment_policy, int(s)) for i, s in zip(batch, seeds)]
                features = features_of(_stack(augmented, mean_array)[0]).numpy()
            targets = train_targets[batch]

            options = RunOptions(
                mode="train",
                dropout_seed=int(rng.integers(0, 2**31)),
                dropout_rate=config.dropout_rate,
                conv_method=config.conv_method,
            )
            tape, out = head_on_tape(graph, store, Tensor.wrap(features), options)
            loss = bce_loss(out, Tensor.wrap(targets))
            grads = backward(tape, loss)  # type: ignore[arg-type]
            store, state = adam_step(state, store, grads)

        # Both splits are scored after the epoch in inference mode on un-augmented images
        train_loss, train_acc = _score(graph, store, train_features, train_targets, config)
        val_loss = val_acc = None
        if val_features is not None and val_targets is not None:
            val_loss, val_acc = _score(graph, store, val_features, val_targets, config)

        record = EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc)
        history.append(record)
        logger.info(
            "epoch %d/%d: train_loss=%.4f train_acc=%.4f val_loss=%s val_acc=%s",
            epoch,
            config.epochs,
            record.train_loss,
            record.train_acc,
            "n/a" if val_loss is None else f"{val_loss:.4f}",
            "n/a" if val_acc is None else f"{val_acc:.4f}",
        )

    return TrainResult(store, history, mean)


def train(
    graph: ArchitectureGraph, params: Mapping[str, Tensor], manifest: DatasetManifest, config: TrainConfig
) -> TrainResult:
    """Train the head on the manifest's train split, validating on its test split."""
    if not manifest.is_split:
        raise ArgumentError("manifest has no split assignment; run split_80_20 first")
    size = graph.input_shape[-1]
    train_samples = load_samples(manifest.of_split("train"), size=size)
    val_samples = load_samples(manifest.of_split("test"), size=size)
    logger.info(
        "training %s on %d samples (%d validation), %d epochs",
        graph.variant,
        len(train_samples),
        len(val_samples),
        config.epochs,
    )
    return train_on_samples(graph, params, train_samples, val_samples, config)


# ------------------------------------------------------------------------------
# Inference
# ------------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    probabilities: Tensor
    label: Label
    confidence: float


def predict(
    graph: ArchitectureGraph,
    params: Mapping[str, Tensor],
    images: Any,
    *,
    conv_method: ConvMethod = "direct",
) -> list[Prediction]:
    """Dropout in inference mode; label is the argmax, confidence its probability."""
    probabilities = forward(graph, params, images, mode="infer", conv_method=conv_method).numpy()
    predictions = []
    for row in probabilities:
        index = int(np.argmax(row))
        predictions.append(Prediction(Tensor.wrap(row.copy()), label_from_index(index), float(row[index])))
    return predictions
