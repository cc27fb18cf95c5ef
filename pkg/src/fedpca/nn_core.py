"""Two-layer ReLU MLP with hand-written backprop and momentum SGD.

The hidden layer plays the role of the feature extractor and the output
layer the classifier; ``ForwardTrace.features`` is what the dispersion
score is computed on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


class ContractError(ValueError):
    """Raised when an operation is called with inputs violating its contract."""


@dataclass
class MlpParams:
    w1: np.ndarray  # (hidden, input_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (num_classes, hidden)
    b2: np.ndarray  # (num_classes,)

    def __post_init__(self) -> None:
        for name in ("w1", "b1", "w2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.w1.ndim != 2 or self.w2.ndim != 2 or self.b1.ndim != 1 or self.b2.ndim != 1:
            raise ContractError("w1/w2 must be matrices and b1/b2 vectors")
        if self.w2.shape[1] != self.w1.shape[0]:
            raise ContractError(f"w2 cols {self.w2.shape[1]} != w1 rows {self.w1.shape[0]}")
        if self.b1.shape[0] != self.w1.shape[0] or self.b2.shape[0] != self.w2.shape[0]:
            raise ContractError("bias lengths do not match layer widths")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[0]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.w1, self.b1, self.w2, self.b2

    def copy(self) -> MlpParams:
        return MlpParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    @classmethod
    def zeros(cls, input_dim: int, hidden: int, num_classes: int) -> MlpParams:
        return cls(
            np.zeros((hidden, input_dim)),
            np.zeros(hidden),
            np.zeros((num_classes, hidden)),
            np.zeros(num_classes),
        )

    @classmethod
    def init(cls, input_dim: int, hidden: int, num_classes: int, rng: np.random.Generator) -> MlpParams:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer."""
        a1 = 1.0 / np.sqrt(input_dim)
        a2 = 1.0 / np.sqrt(hidden)
        return cls(
            rng.uniform(-a1, a1, size=(hidden, input_dim)),
            rng.uniform(-a1, a1, size=hidden),
            rng.uniform(-a2, a2, size=(num_classes, hidden)),
            rng.uniform(-a2, a2, size=num_classes),
        )


# Gradients have exactly the parameter shapes.
GradientSet = MlpParams


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class SgdState:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: GradientSet | None = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True) if logits.shape[0] else logits
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: MlpParams, batch: np.ndarray) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ContractError(f"batch shape {x.shape} incompatible with input_dim {params.input_dim}")
    features = np.maximum(x @ params.w1.T + params.b1, 0.0)
    logits = features @ params.w2.T + params.b2
    return ForwardTrace(x, features, logits, softmax(logits))


def _check_labels(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def cross_entropy(trace: ForwardTrace, labels: np.ndarray) -> float:
    n, c = trace.probs.shape
    y = _check_labels(labels, n, c)
    if n == 0:
        return 0.0
    p = np.maximum(trace.probs[np.arange(n), y], PROB_FLOOR)
    return float(-np.mean(np.log(p)))


def backward(params: MlpParams, trace: ForwardTrace, labels: np.ndarray) -> GradientSet:
    """Exact gradients of the mean cross-entropy w.r.t. every parameter."""
    n, c = trace.probs.shape
    y = _check_labels(labels, n, c)
    if n == 0:
        return MlpParams.zeros(params.input_dim, params.hidden, params.num_classes)
    dlogits = trace.probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dw2 = dlogits.T @ trace.features
    db2 = dlogits.sum(axis=0)
    dhidden = dlogits @ params.w2
    dhidden[trace.features <= 0.0] = 0.0
    dw1 = dhidden.T @ trace.inputs
    db1 = dhidden.sum(axis=0)
    return MlpParams(dw1, db1, dw2, db2)


def sgd_step(params: MlpParams, grads: GradientSet, state: SgdState) -> tuple[MlpParams, SgdState]:
    if state.velocity is None:
        state.velocity = MlpParams.zeros(params.input_dim, params.hidden, params.num_classes)
    new = []
    vel = []
    for p, g, v in zip(params.arrays(), grads.arrays(), state.velocity.arrays()):
        if p.shape != g.shape or p.shape != v.shape:
            raise ContractError("gradient/velocity shapes do not match parameters")
        v_next = state.momentum * v + g + state.weight_decay * p
        vel.append(v_next)
        new.append(p - state.learning_rate * v_next)
    state.velocity = MlpParams(*vel)
    return MlpParams(*new), state


def predict(params: MlpParams, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class (ties go to the lowest index) and its probability."""
    probs = forward(params, batch).probs
    return predict_from_probs(probs)


def predict_from_probs(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if probs.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    cls = np.argmax(probs, axis=1)
    return cls, probs[np.arange(probs.shape[0]), cls]
