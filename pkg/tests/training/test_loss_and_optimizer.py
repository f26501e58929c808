import math

import numpy as np
import pytest

from covilearn.errors import ArgumentError, NameMismatchError
from covilearn.ops import softmax
from covilearn.tensor import GradientTape, Tensor, backward
from covilearn.training import AdamState, adam_step, bce_loss
from covilearn.weights import ParameterStore


def test_bce_examples() -> None:
    covid = Tensor([[1.0, 0.0]])

    assert 0.0 <= bce_loss(Tensor([[1.0, 0.0]]), covid).numpy().item() <= 1.2e-7
    assert bce_loss(Tensor([[0.5, 0.5]]), covid).numpy().item() == pytest.approx(math.log(2.0), abs=1e-12)
    assert bce_loss(Tensor([[0.0, 1.0]]), covid).numpy().item() == pytest.approx(-math.log(1e-7), abs=1e-9)
    assert bce_loss(Tensor([[0.0, 1.0]]), covid).numpy().item() == pytest.approx(16.118, abs=1e-3)


def test_bce_is_batch_mean() -> None:
    predicted = Tensor([[0.5, 0.5], [0.9, 0.1]])
    target = Tensor([[1.0, 0.0], [0.0, 1.0]])
    expected = (math.log(2.0) - math.log(0.1)) / 2
    assert bce_loss(predicted, target).numpy().item() == pytest.approx(expected, rel=1e-12)


def test_bce_non_negative_on_random_rows() -> None:
    rng = np.random.default_rng(0)
    probabilities = softmax(Tensor(rng.normal(size=(50, 2))))
    targets = Tensor(np.eye(2)[rng.integers(0, 2, size=50)])
    assert bce_loss(probabilities, targets).numpy().item() >= 0.0


def test_bce_errors() -> None:
    covid = Tensor([[1.0, 0.0]])

    with pytest.raises(ArgumentError):
        bce_loss(np.array([[float("nan"), 1.0]]), covid)
    with pytest.raises(ArgumentError):
        bce_loss(Tensor([[0.7, 0.7]]), covid)
    with pytest.raises(ArgumentError):
        bce_loss(Tensor([[0.5, 0.5]]), Tensor([[0.5, 0.5]]))
    with pytest.raises(ArgumentError):
        bce_loss(Tensor([[0.5, 0.5]]), Tensor([[1.0, 0.0], [0.0, 1.0]]))


def test_bce_gradient_is_masked_below_clamp() -> None:
    tape = GradientTape()
    p = tape.parameter("p", Tensor([[0.0, 1.0], [0.25, 0.75]]))
    loss = bce_loss(p, Tensor([[1.0, 0.0], [1.0, 0.0]]))

    grad = backward(tape, loss)["p"].numpy()  # type: ignore[arg-type]
    assert grad[0].tolist() == [0.0, 0.0]
    assert grad[1, 0] == pytest.approx(-1.0 / 0.25 / 2)


def test_adam_first_step() -> None:
    params = ParameterStore({"w": Tensor([0.0])})
    state = AdamState.fresh(params, ["w"], lr=1e-3)

    updated, state = adam_step(state, params, {"w": Tensor([1.0])})
    assert state.t == 1
    assert updated["w"].item() == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=1e-9)
    assert updated["w"].item() == pytest.approx(-0.000999999, rel=1e-6)


def test_adam_zero_gradient() -> None:
    params = ParameterStore({"w": Tensor([0.3, -0.2]), "b": Tensor([1.0])})
    state = AdamState.fresh(params, ["w", "b"])

    updated, state = adam_step(state, params, {"w": Tensor([0.0, 0.0]), "b": Tensor([0.0])})
    assert updated["w"] == params["w"]
    assert updated["b"] == params["b"]


def test_adam_zero_learning_rate() -> None:
    rng = np.random.default_rng(1)
    params = ParameterStore({"w": Tensor(rng.normal(size=(4, 3)))})
    state = AdamState.fresh(params, ["w"], lr=0.0)

    current = params
    for _ in range(5):
        current, state = adam_step(state, current, {"w": Tensor(rng.normal(size=(4, 3)))})
    assert current["w"] == params["w"]
    assert state.t == 5


def test_adam_state_invariants() -> None:
    rng = np.random.default_rng(2)
    params = ParameterStore({"w": Tensor(rng.normal(size=(3, 2)))})
    state = AdamState.fresh(params, ["w"])

    for step in range(1, 4):
        params, state = adam_step(state, params, {"w": Tensor(rng.normal(size=(3, 2)))})
        assert state.t == step
        assert state.m["w"].shape == (3, 2)
        assert np.all(state.v["w"] >= 0.0)


def test_adam_is_deterministic() -> None:
    def run() -> ParameterStore:
        rng = np.random.default_rng(7)
        params = ParameterStore({"w": Tensor(rng.normal(size=(5,)))})
        state = AdamState.fresh(params, ["w"])
        for _ in range(10):
            params, state = adam_step(state, params, {"w": Tensor(rng.normal(size=(5,)))})
        return params

    assert run()["w"] == run()["w"]


def test_adam_name_mismatch() -> None:
    params = ParameterStore({"w": Tensor([0.0]), "b": Tensor([0.0])})
    state = AdamState.fresh(params, ["w"])

    with pytest.raises(NameMismatchError) as excinfo:
        adam_step(state, params, {"w": Tensor([1.0]), "b": Tensor([1.0])})
    assert excinfo.value.unexpected == ["b"]

    with pytest.raises(NameMismatchError) as excinfo:
        adam_step(state, params, {})
    assert excinfo.value.missing == ["w"]
    assert "w" in str(excinfo.value)


def test_adam_leaves_untracked_parameters() -> None:
    params = ParameterStore({"w": Tensor([0.0]), "frozen": Tensor([3.0])})
    state = AdamState.fresh(params, ["w"])

    updated, _ = adam_step(state, params, {"w": Tensor([1.0])})
    assert updated["frozen"] is params["frozen"]
