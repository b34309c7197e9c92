"""Dense feed-forward networks, losses, reverse-mode gradients and Adam.

Everything here works on float64 numpy arrays.  A :class:`Network` is an
ordered list of fully connected layers; the last layer has an identity
activation and produces logits.

Parameters of a network are addressed as a flat list ``[W0, b0, W1, b1, ...]``
(see :meth:`Network.params`), and gradients use the same layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")


class DimensionError(ValueError):
    """Raised when array shapes do not chain."""


@dataclass
class Layer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise DimensionError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Network:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for k in range(1, len(self.layers)):
            if self.layers[k].in_dim != self.layers[k - 1].out_dim:
                raise DimensionError(
                    f"layer {k} expects {self.layers[k].in_dim} inputs, "
                    f"layer {k - 1} produces {self.layers[k - 1].out_dim}"
                )

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "Network":
        """He-initialised relu MLP with identity output layer."""
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_out, n_in))
            act = "identity" if k == len(sizes) - 2 else "relu"
            layers.append(Layer(w, np.zeros(n_out), act))
        return cls(layers)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def param_names(self) -> list[str]:
        names = []
        for k in range(len(self.layers)):
            names.extend((f"layers.{k}.weight", f"layers.{k}.bias"))
        return names

    def with_params(self, params: Sequence[np.ndarray]) -> "Network":
        if len(params) != 2 * len(self.layers):
            raise DimensionError("parameter count does not match network")
        layers = []
        for k, layer in enumerate(self.layers):
            w, b = params[2 * k], params[2 * k + 1]
            if np.shape(w) != layer.weight.shape or np.shape(b) != layer.bias.shape:
                raise DimensionError(f"parameter shapes of layer {k} do not match")
            layers.append(Layer(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64), layer.activation))
        return Network(layers)

    def copy(self) -> "Network":
        return self.with_params(self.params())

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def from_flat(self, vec: np.ndarray) -> "Network":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise DimensionError(f"expected flat vector of {self.n_params}, got {vec.shape}")
        out, i = [], 0
        for p in self.params():
            out.append(vec[i:i + p.size].reshape(p.shape))
            i += p.size
        return self.with_params(out)

    def same_architecture(self, other: "Network") -> bool:
        return len(self.layers) == len(other.layers) and all(
            a.weight.shape == b.weight.shape and a.activation == b.activation
            for a, b in zip(self.layers, other.layers)
        )


def check_same_architecture(*nets: Network) -> None:
    for net in nets[1:]:
        if not nets[0].same_architecture(net):
            raise DimensionError(f"architecture mismatch: {nets[0].sizes} vs {net.sizes}")


@dataclass
class Batch:
    inputs: np.ndarray  # [n, d]
    labels: np.ndarray  # [n] ints

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DimensionError(f"inputs must be [n>=1, d], got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DimensionError("labels must have one entry per input row")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def split(self, batch_size: int) -> list["Batch"]:
        return [
            Batch(self.inputs[i:i + batch_size], self.labels[i:i + batch_size])
            for i in range(0, len(self), batch_size)
        ]


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

# An input hook maps (layer index, layer input) -> (transformed input, STE mask or None).
InputHook = Callable[[int, np.ndarray], "tuple[np.ndarray, np.ndarray | None]"]


@dataclass
class _Tape:
    inputs: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def _forward(net: Network, inputs: np.ndarray, input_hook: InputHook | None = None):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.layers[0].in_dim:
        raise DimensionError(
            f"input shape {x.shape} incompatible with first layer in-dim {net.layers[0].in_dim}"
        )
    tape = _Tape()
    for k, layer in enumerate(net.layers):
        mask = None
        if input_hook is not None:
            x, mask = input_hook(k, x)
        tape.inputs.append(x)
        tape.masks.append(mask)
        z = x @ layer.weight.T + layer.bias
        tape.pre.append(z)
        x = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return x, tape


def forward(net: Network, inputs: np.ndarray, input_hook: InputHook | None = None) -> np.ndarray:
    """Logits ``[n, num_classes]`` for ``inputs`` of shape ``[n, in_dim]``."""
    return _forward(net, inputs, input_hook)[0]


def _backward(net: Network, tape: _Tape, dout: np.ndarray) -> list[np.ndarray]:
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    g = dout
    for k in reversed(range(len(net.layers))):
        layer = net.layers[k]
        if layer.activation == "relu":
            g = g * (tape.pre[k] > 0)
        grads[2 * k] = g.T @ tape.inputs[k]
        grads[2 * k + 1] = g.sum(axis=0)
        if k > 0:
            g = g @ layer.weight
            if tape.masks[k] is not None:
                g = g * tape.masks[k]
    return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy, log-sum-exp stabilised."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError("one label per logit row required")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"labels must lie in [0, {c})")
    lp = log_softmax(logits)
    # clip the -0.0 that can appear at saturation
    return max(float(-lp[np.arange(n), labels].mean()), 0.0)


def accuracy(net: Network, batch: Batch, input_hook: InputHook | None = None) -> float:
    logits = forward(net, batch.inputs, input_hook)
    return float((logits.argmax(axis=1) == batch.labels).mean())


# --------------------------------------------------------------------------
# objectives
# --------------------------------------------------------------------------


class Objective:
    """A scalar loss of a network on a batch, with its parameter gradient."""

    def __call__(self, net: Network, batch: Batch | None) -> float:
        raise NotImplementedError

    def grad(self, net: Network, batch: Batch | None) -> list[np.ndarray]:
        raise NotImplementedError

    def value_and_grad(self, net: Network, batch: Batch | None):
        return self(net, batch), self.grad(net, batch)


class CrossEntropy(Objective):
    def __init__(self, input_hook: InputHook | None = None):
        self.input_hook = input_hook

    def __call__(self, net, batch):
        return cross_entropy(forward(net, batch.inputs, self.input_hook), batch.labels)

    def value_and_grad(self, net, batch):
        logits, tape = _forward(net, batch.inputs, self.input_hook)
        n = len(batch)
        if np.any(batch.labels >= logits.shape[1]):
            raise IndexError("label out of range")
        lp = log_softmax(logits)
        loss = max(float(-lp[np.arange(n), batch.labels].mean()), 0.0)
        dlogits = np.exp(lp)
        dlogits[np.arange(n), batch.labels] -= 1.0
        dlogits /= n
        return loss, _backward(net, tape, dlogits)

    def grad(self, net, batch):
        return self.value_and_grad(net, batch)[1]


class FlatObjective(Objective):
    """Loss that depends only on the flattened parameter vector."""

    def value_flat(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    def grad_flat(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, net, batch=None):
        return float(self.value_flat(net.flat()))

    def grad(self, net, batch=None):
        g = self.grad_flat(net.flat())
        return net.from_flat(g).params()


class Quadratic(FlatObjective):
    """``0.5 * sum(h * (theta - center)**2)`` with diagonal curvature ``h``."""

    def __init__(self, diag, center=None):
        self.diag = np.asarray(diag, dtype=np.float64)
        self.center = np.zeros_like(self.diag) if center is None else np.asarray(center, dtype=np.float64)

    def value_flat(self, theta):
        d = theta - self.center
        return 0.5 * float(np.sum(self.diag * d * d))

    def grad_flat(self, theta):
        return self.diag * (theta - self.center)


class DoubleWell(FlatObjective):
    """``sum((theta**2 - 1)**2)``; minima at +-1 with a bump of 1 per coordinate at 0."""

    def value_flat(self, theta):
        return float(np.sum((theta * theta - 1.0) ** 2))

    def grad_flat(self, theta):
        return 4.0 * theta * (theta * theta - 1.0)


class Linear(FlatObjective):
    def __init__(self, g):
        self.g = np.asarray(g, dtype=np.float64)

    def value_flat(self, theta):
        return float(self.g @ theta)

    def grad_flat(self, theta):
        return self.g.copy()


def make_objective(name: str) -> Objective:
    """Objective by name, for config/CLI use."""
    if name == "cross_entropy":
        return CrossEntropy()
    if name == "sum_squares":
        return _SumSquares()
    if name == "double_well":
        return DoubleWell()
    raise ValueError(f"unknown loss {name!r}")


class _SumSquares(FlatObjective):
    def value_flat(self, theta):
        return float(theta @ theta)

    def grad_flat(self, theta):
        return 2.0 * theta


def grad(net: Network, batch: Batch | None, loss: Objective | None = None) -> list[np.ndarray]:
    """Exact reverse-mode gradient of the mean loss, one array per parameter."""
    loss = loss or CrossEntropy()
    return loss.grad(net, batch)


def finite_diff_grad(net: Network, batch: Batch | None, loss: Objective | None = None,
                     h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient, one coordinate at a time."""
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    loss = loss or CrossEntropy()
    theta = net.flat()
    g = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        up = loss(net.from_flat(theta), batch)
        theta[i] = old - h
        down = loss(net.from_flat(theta), batch)
        theta[i] = old
        g[i] = (up - down) / (2.0 * h)
    return net.from_flat(g).params()


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptimState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState,
              lr: float) -> tuple[list[np.ndarray], OptimState]:
    """One bias-corrected Adam update.  Inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimiser state must align")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, OptimState(new_m, new_v, t, b1, b2, state.eps)


def lr_schedule(t: int, total: int, warmup: int, lr0: float) -> float:
    """Linear warmup to ``lr0`` then cosine decay towards 0 at ``t == total``."""
    if not 0 <= warmup < total:
        raise ValueError(f"need 0 <= warmup < total, got warmup={warmup}, total={total}")
    if not 0 <= t < total:
        raise IndexError(f"step {t} outside [0, {total})")
    if t < warmup:
        return lr0 * t / warmup
    progress = (t - warmup) / (total - warmup)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(net: Network, batch: Batch, *, epochs: int, lr: float, batch_size: int,
          rng: np.random.Generator, warmup_frac: float = 0.0,
          loss: Objective | None = None) -> tuple[Network, list[float]]:
    """Minibatch Adam training with the warmup/cosine schedule."""
    loss = loss or CrossEntropy()
    n = len(batch)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    warmup = int(warmup_frac * total)
    params = net.params()
    state = OptimState.zeros_like(params)
    trace = []
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            mb = Batch(batch.inputs[idx], batch.labels[idx])
            value, g = loss.value_and_grad(net.with_params(params), mb)
            params, state = adam_step(params, g, state, lr_schedule(t, total, warmup, lr))
            trace.append(value)
            t += 1
    return net.with_params(params), trace
