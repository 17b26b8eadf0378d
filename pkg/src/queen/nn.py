"""Minimal feed-forward network core.

Everything downstream (the protected classifier, shadow models, pirate
models, the 2D mapper) runs on the same flat-parameter MLP defined here.
Parameters live in a single float64 vector so that training, gradient
checks and file snapshots all deal with one object.

Layout of the parameter vector, fixed and relied on by the snapshot
format: for each layer l in order, W_l flattened row-major with shape
(fan_in, fan_out), followed by the bias b_l of length fan_out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")
LOSSES = ("ce", "kldiv")

LOG_FLOOR = 1e-12


class NumericError(RuntimeError):
    """Non-finite values showed up where finite ones are required."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: layer sizes, activation, init seed."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def hidden_dim(self) -> int:
        # size of the penultimate layer, i.e. of the feature vector
        return self.layer_sizes[-2]


def param_count(spec: NetworkSpec) -> int:
    sizes = spec.layer_sizes
    return sum((sizes[i] + 1) * sizes[i + 1] for i in range(len(sizes) - 1))


def init_params(spec: NetworkSpec) -> np.ndarray:
    """Seeded uniform init in +-sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(spec.seed)
    chunks = []
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unpack(spec: NetworkSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer into the flat vector. No copies."""
    params = np.asarray(params)
    if params.shape != (param_count(spec),):
        raise ValueError(
            f"parameter vector has shape {params.shape}, "
            f"spec needs ({param_count(spec)},)"
        )
    layers = []
    off = 0
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off : off + fan_out]
        off += fan_out
        layers.append((w, b))
    return layers


def pack(spec: NetworkSpec, layers) -> np.ndarray:
    """Inverse of unpack, used mostly by tests to build explicit nets."""
    chunks = []
    for w, b in layers:
        chunks.append(np.asarray(w, dtype=np.float64).ravel())
        chunks.append(np.asarray(b, dtype=np.float64).ravel())
    out = np.concatenate(chunks)
    if out.shape != (param_count(spec),):
        raise ValueError("layer shapes do not match the spec")
    return out


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        # derivative taken as 0 at exactly z == 0
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _forward_trace(spec, params, x):
    """All pre-activations and activations, input included as acts[0]."""
    layers = unpack(spec, params)
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[1] != spec.input_dim:
        raise ValueError(
            f"input has {a.shape[1]} features, spec expects {spec.input_dim}"
        )
    acts = [a]
    pres = []
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activation at layer {i}")
        pres.append(z)
        a = z if i == len(layers) - 1 else _act(z, spec.activation)
        acts.append(a)
    return pres, acts


def forward(spec: NetworkSpec, params: np.ndarray, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits and the feature vector (penultimate activation) for one input.

    For a single-layer net the feature vector is the input itself: the
    feature extractor is then the identity and the whole net is the head.
    """
    logits, hidden = forward_batch(spec, params, np.asarray(x, dtype=np.float64)[None, :])
    return logits[0], hidden[0]


def forward_batch(spec: NetworkSpec, params: np.ndarray, X) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward pass: (logits, features), both row per input."""
    _, acts = _forward_trace(spec, params, X)
    return acts[-1], acts[-2]


def softmax(z: np.ndarray) -> np.ndarray:
    """Stable softmax of a single logit vector (max subtracted first)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def softmax_batch(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    e = np.exp(Z - np.max(Z, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def ce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Cross entropy -sum(t*log p) with log arguments floored at 1e-12."""
    p = np.maximum(np.asarray(pred, dtype=np.float64), LOG_FLOOR)
    return float(-np.sum(np.asarray(target) * np.log(p)))


def kldiv_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """KL(target || pred) with both log arguments floored; 0*log0 = 0."""
    t = np.asarray(target, dtype=np.float64)
    p = np.maximum(np.asarray(pred, dtype=np.float64), LOG_FLOOR)
    tf = np.maximum(t, LOG_FLOOR)
    return float(np.sum(np.where(t > 0.0, t * (np.log(tf) - np.log(p)), 0.0)))


def _batch_loss(P: np.ndarray, T: np.ndarray, loss: str) -> float:
    if loss == "ce":
        return float(np.mean([ce_loss(p, t) for p, t in zip(P, T)]))
    return float(np.mean([kldiv_loss(p, t) for p, t in zip(P, T)]))


@dataclass
class Batch:
    """Validated (inputs, targets) pair for supervised training.

    Targets are rows on the probability simplex: one-hot labels or soft
    labels. Raw (possibly invalid) target vectors are handled by the
    lower-level loss_and_grad, not by this container.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("inputs and targets must both be 2-dimensional")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs vs {self.targets.shape[0]} targets"
            )
        if self.inputs.shape[0] == 0:
            raise ValueError("empty batch")
        if not np.all(np.isfinite(self.inputs)) or not np.all(np.isfinite(self.targets)):
            raise NumericError("non-finite values in batch")
        if np.any(self.targets < -1e-9) or np.any(
            np.abs(self.targets.sum(axis=1) - 1.0) > 1e-6
        ):
            raise ValueError("targets must be one-hot or soft label rows")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def loss_and_grad(spec, params, X, T, loss: str = "ce"):
    """Mean batch loss and its gradient in the flat parameter vector.

    Accepts arbitrary real target rows. For both supported losses the
    gradient at the logits is softmax(z) * sum(t) - t, which reduces to
    the familiar p - t on the simplex.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    pres, acts = _forward_trace(spec, params, X)
    P = softmax_batch(acts[-1])
    total = _batch_loss(P, T, loss)

    n = X.shape[0]
    layers = unpack(spec, params)
    grad_vec = np.zeros_like(np.asarray(params, dtype=np.float64))
    g_layers = unpack(spec, grad_vec)

    delta = (P * T.sum(axis=1, keepdims=True) - T) / n
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = g_layers[i]
        gw += acts[i].T @ delta
        gb += delta.sum(axis=0)
        if i > 0:
            delta = (delta @ w.T) * _act_deriv(pres[i - 1], acts[i], spec.activation)
    return total, grad_vec


def grad(spec: NetworkSpec, params: np.ndarray, batch: Batch, loss: str = "ce") -> np.ndarray:
    """Gradient of the mean batch loss for a validated batch."""
    _, g = loss_and_grad(spec, params, batch.inputs, batch.targets, loss)
    return g


def output_grad_backprop(spec, params, X, d_out) -> np.ndarray:
    """Parameter gradient given the loss gradient at the raw outputs.

    Lets callers attach losses that are not softmax cross entropy (the
    contrastive mapper objective) to the same backprop machinery.
    """
    X = np.asarray(X, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    pres, acts = _forward_trace(spec, params, X)
    if d_out.shape != acts[-1].shape:
        raise ValueError("output gradient shape does not match network output")
    layers = unpack(spec, params)
    grad_vec = np.zeros_like(np.asarray(params, dtype=np.float64))
    g_layers = unpack(spec, grad_vec)
    delta = d_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = g_layers[i]
        gw += acts[i].T @ delta
        gb += delta.sum(axis=0)
        if i > 0:
            delta = (delta @ w.T) * _act_deriv(pres[i - 1], acts[i], spec.activation)
    return grad_vec


def input_grad(spec, params, X, T, loss: str = "ce") -> np.ndarray:
    """Gradient of the mean batch loss with respect to the inputs."""
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    pres, acts = _forward_trace(spec, params, X)
    P = softmax_batch(acts[-1])
    layers = unpack(spec, params)
    delta = (P * T.sum(axis=1, keepdims=True) - T) / X.shape[0]
    for i in range(len(layers) - 1, 0, -1):
        w, _ = layers[i]
        delta = (delta @ w.T) * _act_deriv(pres[i - 1], acts[i], spec.activation)
    return delta @ layers[0][0].T


@dataclass
class TrainResult:
    params: np.ndarray
    losses: list = field(default_factory=list)


def sgd_train(
    spec: NetworkSpec,
    batch: Batch,
    epochs: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 64,
    loss: str = "ce",
    lr_halving_every: int = 0,
    init: np.ndarray | None = None,
) -> TrainResult:
    """Plain SGD over shuffled mini-batches.

    The loss trace holds one mean-loss value per epoch, computed from the
    pre-update batch losses of that epoch. lr_halving_every > 0 halves the
    learning rate every that many epochs (used by the mapper schedule).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")

    rng = np.random.default_rng(seed)
    params = init_params(spec) if init is None else np.array(init, dtype=np.float64)
    n = len(batch)
    losses = []
    step_lr = lr
    for epoch in range(epochs):
        if lr_halving_every and epoch > 0 and epoch % lr_halving_every == 0:
            step_lr *= 0.5
        order = rng.permutation(n)
        epoch_loss = 0.0
        nb = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            val, g = loss_and_grad(
                spec, params, batch.inputs[idx], batch.targets[idx], loss
            )
            if not np.isfinite(val):
                raise DivergenceError(epoch)
            params -= step_lr * g
            epoch_loss += val
            nb += 1
        losses.append(epoch_loss / nb)
    return TrainResult(params=params, losses=losses)


class Network:
    """A spec bundled with trained parameters, with query helpers."""

    def __init__(self, spec: NetworkSpec, params: np.ndarray):
        self.spec = spec
        self.params = np.asarray(params, dtype=np.float64)
        if self.params.shape != (param_count(spec),):
            raise ValueError("parameter vector does not match the spec")

    def logits(self, X) -> np.ndarray:
        return forward_batch(self.spec, self.params, np.atleast_2d(X))[0]

    def features(self, X) -> np.ndarray:
        """Penultimate activations: the feature-extractor half."""
        return forward_batch(self.spec, self.params, np.atleast_2d(X))[1]

    def confidences(self, X) -> np.ndarray:
        return softmax_batch(self.logits(X))

    def predict(self, X) -> np.ndarray:
        # ties broken toward the lowest class index by argmax
        return np.argmax(self.logits(X), axis=1)

    def head_confidences(self, H) -> np.ndarray:
        """Softmax of the final linear layer applied to given features."""
        w, b = unpack(self.spec, self.params)[-1]
        return softmax_batch(np.atleast_2d(H) @ w + b)

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))
