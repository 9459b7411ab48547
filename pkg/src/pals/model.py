"""Numpy MLP encoder with a linear softmax classifier, backprop and SGD.

The network is ``d -> hidden[0] -> ... -> hidden[-1] -> C``; every hidden
layer is followed by a ReLU and the last hidden activation is the feature
vector ``z`` used for KNN.  Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_TAG = "pals-model v1"


class ShapeError(ValueError):
    pass


@dataclass
class Model:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Model":
        return Model([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_model(sizes, rng: np.random.Generator) -> Model:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise ShapeError(f"bad layer sizes {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return Model(weights, biases)


def zero_model(sizes) -> Model:
    sizes = tuple(sizes)
    return Model([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                 [np.zeros(b) for b in sizes[1:]])


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass
class Cache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    logits: np.ndarray | None = None


def forward(model: Model, x: np.ndarray, cache: Cache | None = None):
    """Return ``(z, p)``: encoder features and class probabilities."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.sizes[0]:
        raise ShapeError(f"expected input width {model.sizes[0]}, got shape {x.shape}")
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        if cache is not None:
            cache.inputs.append(h)
        h = np.maximum(h @ w + b, 0.0)
    if cache is not None:
        cache.inputs.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    if cache is not None:
        cache.logits = logits
    return h, softmax(logits)


def features(model: Model, x: np.ndarray) -> np.ndarray:
    return forward(model, x)[0]


def predict_proba(model: Model, x: np.ndarray) -> np.ndarray:
    return forward(model, x)[1]


def backward(model: Model, cache: Cache, dlogits: np.ndarray) -> list[np.ndarray]:
    """Gradients in ``model.params()`` order given dLoss/dlogits."""
    grads: list[np.ndarray] = []
    g = dlogits
    for layer in range(len(model.weights) - 1, -1, -1):
        a = cache.inputs[layer]
        grads.append(g.sum(axis=0))
        grads.append(a.T @ g)
        if layer > 0:
            g = (g @ model.weights[layer].T) * (a > 0)
    grads.reverse()
    return grads


def add_grads(acc: list[np.ndarray] | None, grads: list[np.ndarray]) -> list[np.ndarray]:
    if acc is None:
        return grads
    return [a + g for a, g in zip(acc, grads)]


@dataclass
class OptState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-3
    t_max: int = 1
    epoch: int = 0
    velocity: list[np.ndarray] | None = None

    def lr_at(self, epoch: int | None = None) -> float:
        """Cosine decay from ``lr`` at epoch 0 to 0 at ``t_max``."""
        t = self.epoch if epoch is None else epoch
        if self.t_max <= 0:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(t, self.t_max) / self.t_max))


def sgd_step(model: Model, grads: list[np.ndarray], opt: OptState) -> Model:
    """Momentum SGD in place; weight decay touches weights, not biases."""
    params = model.params()
    if opt.velocity is None:
        opt.velocity = [np.zeros_like(p) for p in params]
    lr = opt.lr_at()
    for i, (p, g, v) in enumerate(zip(params, grads, opt.velocity)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, parameter {p.shape}")
        step = g + opt.weight_decay * p if i % 2 == 0 else g
        v *= opt.momentum
        v += step
        p -= lr * v
    return model


def save_model(model: Model, path) -> None:
    lines = [f"{CHECKPOINT_TAG} sizes={','.join(map(str, model.sizes))}"]
    for i, p in enumerate(model.params()):
        kind = "W" if i % 2 == 0 else "b"
        lines.append(f"{kind}{i // 2} " + " ".join(repr(v) for v in p.ravel().tolist()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> Model:
    lines = Path(path).read_text(encoding="utf-8").rstrip("\n").split("\n")
    head = lines[0].split()
    if " ".join(head[:2]) != CHECKPOINT_TAG or len(head) != 3 or not head[2].startswith("sizes="):
        raise ValueError(f"{path}: not a {CHECKPOINT_TAG} checkpoint")
    sizes = [int(s) for s in head[2][6:].split(",")]
    model = zero_model(sizes)
    params = model.params()
    if len(lines) - 1 != len(params):
        raise ValueError(f"{path}: expected {len(params)} parameter lines, got {len(lines) - 1}")
    for lineno, (line, p) in enumerate(zip(lines[1:], params), start=2):
        vals = line.split(" ")[1:]
        if len(vals) != p.size:
            raise ValueError(f"{path} line {lineno}: expected {p.size} values, got {len(vals)}")
        p[...] = np.array([float(v) for v in vals]).reshape(p.shape)
    return model
