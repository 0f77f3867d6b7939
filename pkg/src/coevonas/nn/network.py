"""DAG networks built from assembled layer graphs, plus training and scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..fitness import FitnessScore
from .layers import (
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MergeConcat,
    OutputDense,
    ShapeError,
    softmax,
)
from .optim import Optimizer, make_optimizer

SUPPORTED_LOSSES = ("categorical_crossentropy",)


class Network:
    """Layers evaluated in a fixed topological order.

    ``nodes`` is a list of ``(node_id, layer, input_ids)``; the first entry is
    the input placeholder (layer ``None``) and the last one is the output layer.
    """

    def __init__(self, nodes, input_shape, dtype=np.float32):
        self.nodes = nodes
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.input_id = nodes[0][0]
        self.output_id = nodes[-1][0]

    @property
    def params(self) -> dict:
        return {(nid, name): p for nid, layer, _ in self.nodes if layer is not None
                for name, p in layer.params.items()}

    def grads(self) -> dict:
        return {(nid, name): g for nid, layer, _ in self.nodes if layer is not None
                for name, g in layer.grads.items()}

    def param_count(self) -> int:
        return sum(layer.param_count() for _, layer, _ in self.nodes if layer is not None)

    def forward(self, x, training=False, rng=None) -> dict:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match input {self.input_shape}")
        acts = {self.input_id: x.astype(self.dtype, copy=False)}
        for nid, layer, inputs in self.nodes[1:]:
            acts[nid] = layer.forward([acts[i] for i in inputs], training, rng)
        return acts

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.forward(x)[self.output_id])

    def backward(self, dlogits, need_input_grad=False):
        """Backpropagate dL/dlogits; fills each layer's ``grads``."""
        pending = {self.output_id: dlogits}
        for nid, layer, inputs in reversed(self.nodes[1:]):
            d = pending.pop(nid)
            for src, g in zip(inputs, layer.backward(d)):
                if src in pending:
                    pending[src] = pending[src] + g
                else:
                    pending[src] = g
        return pending.get(self.input_id) if need_input_grad else None


def cross_entropy(probs, labels) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, np.finfo(probs.dtype).tiny))))


def build_layer(kind, params, in_shapes, rng, dtype):
    if kind == "conv2d":
        return Conv2D(in_shapes[0], params["filters"], params["kernel_size"], params.get("stride", 1),
                      params.get("activation", "relu"), params.get("dropout", 0.0), rng=rng, dtype=dtype)
    if kind == "dense":
        return Dense(in_shapes[0], params["units"], params.get("activation", "relu"),
                     params.get("dropout", 0.0), rng=rng, dtype=dtype)
    if kind == "output-dense":
        return OutputDense(in_shapes[0], params["units"], rng=rng, dtype=dtype)
    if kind == "flatten":
        return Flatten()
    if kind == "dropout":
        return Dropout(params["rate"])
    if kind == "merge-concat":
        return MergeConcat()
    raise ValueError(f"unsupported layer kind {kind!r}")


def network_from_layer_graph(layer_graph, rng, dtype=np.float32) -> Network:
    order = layer_graph.ordered()
    input_id = layer_graph.input
    shapes = {input_id: tuple(layer_graph.nodes[input_id].params["shape"])}
    nodes = [(input_id, None, [])]
    for nid in order:
        if nid == input_id:
            continue
        layer_def = layer_graph.nodes[nid]
        inputs = layer_graph.predecessors(nid)
        layer = build_layer(layer_def.kind, layer_def.params, [shapes[i] for i in inputs], rng, dtype)
        shapes[nid] = layer.output_shape([shapes[i] for i in inputs])
        nodes.append((nid, layer, inputs))
    if nodes[-1][0] != layer_graph.output:
        raise ShapeError("output layer is not last in topological order")
    return Network(nodes, shapes[input_id], dtype)


@dataclass
class TrainState:
    network: Network
    rng: np.random.Generator
    optimizer: Optimizer | None = None
    epoch: int = 0


@dataclass
class History:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def as_dict(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy,
                "val_loss": self.val_loss, "val_accuracy": self.val_accuracy}


def build_network(layer_graph, rng: np.random.Generator, dtype=np.float32) -> TrainState:
    """Initialise a trainable network for ``layer_graph``."""
    return TrainState(network_from_layer_graph(layer_graph, rng, dtype), rng)


def forward(state: TrainState, batch, training: bool = False):
    """Per-layer activations and class probabilities."""
    acts = state.network.forward(batch, training, state.rng)
    return acts, softmax(acts[state.network.output_id])


def _loss_and_backprop(state, batch, labels, training):
    net = state.network
    _, probs = forward(state, batch, training)
    loss = cross_entropy(probs, labels)
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1
    dlogits /= len(labels)
    net.backward(dlogits)
    return loss, probs


def backward(state: TrainState, batch, labels, training: bool = False) -> tuple[float, dict]:
    """Mean categorical cross-entropy and its gradient for every parameter."""
    loss, _ = _loss_and_backprop(state, batch, labels, training)
    return loss, state.network.grads()


def optimizer_step(state: TrainState, gradients: dict, spec: str = "adam", learning_rate: float = 1e-3):
    if state.optimizer is None:
        state.optimizer = make_optimizer(spec, learning_rate)
    state.optimizer.step(state.network.params, gradients)
    return state


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(state: TrainState, train_split, hyperparams, validation=None) -> History:
    """Minibatch training for ``hyperparams.epochs`` epochs; returns per-epoch metrics."""
    if hyperparams.loss not in SUPPORTED_LOSSES:
        raise ValueError(f"unsupported loss {hyperparams.loss!r}")
    x, y = train_split.samples, train_split.labels
    if len(y) == 0:
        raise ValueError("empty training set")
    history = History()
    if state.optimizer is None:
        state.optimizer = make_optimizer(hyperparams.optimizer, hyperparams.learning_rate)
    for _ in range(hyperparams.epochs):
        # training metrics are running means over the epoch's batches
        loss_sum = 0.0
        correct = 0
        for idx in _batches(len(y), hyperparams.batch_size, state.rng):
            loss, probs = _loss_and_backprop(state, x[idx], y[idx], True)
            state.optimizer.step(state.network.params, state.network.grads())
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y[idx]).sum())
        state.epoch += 1
        history.loss.append(loss_sum / len(y))
        history.accuracy.append(correct / len(y))
        if validation is not None:
            vscore = evaluate(state, validation)
            history.val_loss.append(vscore.loss)
            history.val_accuracy.append(vscore.accuracy)
    return history


def evaluate(state: TrainState, split, batch_size: int = 500) -> FitnessScore:
    """Accuracy (argmax match) and mean cross-entropy, dropout off."""
    x, y = split.samples, split.labels
    if len(y) == 0:
        return FitnessScore(0.0, math.inf)
    correct = 0
    total_loss = 0.0
    for start in range(0, len(y), batch_size):
        probs = state.network.predict_proba(x[start:start + batch_size])
        yb = y[start:start + batch_size]
        correct += int((probs.argmax(axis=1) == yb).sum())
        total_loss += cross_entropy(probs, yb) * len(yb)
    return FitnessScore(correct / len(y), total_loss / len(y))
