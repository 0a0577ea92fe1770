"""Small feedforward networks with hand-written backprop and Adam.

Everything is float64; batches are row-major ``(n_samples, n_features)``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = "deepmod-network"
CHECKPOINT_VERSION = 1


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


def _act(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _act_grad(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return 1.0 - a * a
    if kind is Activation.RELU:
        # subgradient at exactly 0 is 0
        return (z > 0).astype(float)
    return np.ones_like(z)


@dataclass(frozen=True)
class LayerSpec:
    fan_in: int
    fan_out: int
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError("layer widths must be positive")
        object.__setattr__(self, "activation", Activation(self.activation))


def mlp_specs(n_in: int, hidden: Sequence[tuple[int, str]], n_out: int = 1) -> list[LayerSpec]:
    """Chain ``n_in -> hidden... -> n_out`` with an identity output layer."""
    specs = []
    width = n_in
    for h, act in hidden:
        specs.append(LayerSpec(width, h, Activation(act)))
        width = h
    specs.append(LayerSpec(width, n_out, Activation.IDENTITY))
    return specs


@dataclass
class Network:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        check_chain(self.layers)
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            if w.shape != (spec.fan_out, spec.fan_in) or b.shape != (spec.fan_out,):
                raise ValueError("parameter shapes disagree with layer specs")

    @property
    def n_inputs(self) -> int:
        return self.layers[0].fan_in

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].fan_out

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        """Parameters in (W0, b0, W1, b1, ...) order; arrays are live views."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> Network:
        return copy.deepcopy(self)

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())

    def predict(self, x) -> np.ndarray:
        return forward(self, x).output


def check_chain(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ValueError("a network needs at least one layer")
    for a, b in zip(specs, specs[1:]):
        if a.fan_out != b.fan_in:
            raise ValueError(f"layer chain mismatch: {a.fan_out} -> {b.fan_in}")


def init_network(
    specs: Sequence[LayerSpec], seed: int = 0, zero_final: bool = False, gain: float = 1.0
) -> Network:
    """Scaled-uniform weights ``U(+-gain * sqrt(6 / (fan_in + fan_out)))``, zero biases.

    With ``zero_final`` the output layer starts at zero so every input maps to 0.
    """
    specs = list(specs)
    check_chain(specs)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in specs:
        limit = gain * np.sqrt(6.0 / (spec.fan_in + spec.fan_out))
        weights.append(rng.uniform(-limit, limit, size=(spec.fan_out, spec.fan_in)))
        biases.append(np.zeros(spec.fan_out))
    if zero_final:
        weights[-1][:] = 0.0
    return Network(specs, weights, biases)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def forward(net: Network, x) -> ForwardTrace:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != net.n_inputs:
        raise ValueError(f"expected {net.n_inputs} inputs, got {x.shape[1]}")
    pre, post = [], []
    h = x
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        z = h @ w.T + b
        h = _act(spec.activation, z)
        pre.append(z)
        post.append(h)
    return ForwardTrace(x, pre, post)


def backward(net: Network, trace: ForwardTrace, grad_output: np.ndarray) -> list[np.ndarray]:
    """Reverse-mode gradients given dL/d(output); same order as ``Network.params``."""
    delta = np.asarray(grad_output, dtype=float).reshape(trace.output.shape)
    grads: list[np.ndarray] = []
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        delta = delta * _act_grad(spec.activation, trace.pre[i], trace.post[i])
        h_in = trace.post[i - 1] if i > 0 else trace.inputs
        grads += [delta.sum(axis=0), delta.T @ h_in]
        if i > 0:
            delta = delta @ net.weights[i]
    grads.reverse()
    return grads


def mse(output: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((output - target) ** 2))


def backward_mse(net: Network, trace: ForwardTrace, target) -> tuple[float, list[np.ndarray]]:
    """Loss and gradients of the mean squared error over batch and outputs."""
    target = np.asarray(target, dtype=float).reshape(trace.output.shape)
    err = trace.output - target
    return float(np.mean(err**2)), backward(net, trace, 2.0 * err / err.size)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8
    timestep: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network, learning_rate: float = 1e-3, **kw) -> AdamState:
        return cls(
            learning_rate=learning_rate,
            first_moment=[np.zeros_like(p) for p in net.params()],
            second_moment=[np.zeros_like(p) for p in net.params()],
            **kw,
        )


def adam_step(net: Network, adam: AdamState, grads: Sequence[np.ndarray]) -> tuple[Network, AdamState]:
    """In-place bias-corrected Adam update; returns its arguments for chaining."""
    params = net.params()
    if not adam.first_moment:
        adam.first_moment = [np.zeros_like(p) for p in params]
        adam.second_moment = [np.zeros_like(p) for p in params]
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameters")
    adam.timestep += 1
    t = adam.timestep
    c1 = 1.0 - adam.beta1**t
    c2 = 1.0 - adam.beta2**t
    for p, g, m, v in zip(params, grads, adam.first_moment, adam.second_moment):
        if g.shape != p.shape:
            raise ValueError("gradient shape mismatch")
        m *= adam.beta1
        m += (1.0 - adam.beta1) * g
        v *= adam.beta2
        v += (1.0 - adam.beta2) * g * g
        p -= adam.learning_rate * (m / c1) / (np.sqrt(v / c2) + adam.epsilon_hat)
    return net, adam


def fit(
    net: Network,
    adam: AdamState,
    inputs,
    targets,
    epochs: int,
    batch_size: int | None = None,
    shuffle_seed: int | None = 0,
) -> list[float]:
    """Gradient steps on MSE; full batch unless ``batch_size`` is given.

    ``inputs`` may also be a zero-argument callable returning a fresh input
    batch; it is called once per epoch (used for resampled input noise).
    Returns one loss per epoch (mean over that epoch's minibatches).
    """
    draw = inputs if callable(inputs) else None
    x = _as_batch(draw() if draw else inputs)
    y = np.asarray(targets, dtype=float).reshape(len(x), -1)
    if len(x) == 0:
        raise ValueError("empty dataset")
    history = []
    rng = np.random.default_rng(shuffle_seed)
    for epoch in range(epochs):
        if draw is not None and epoch > 0:
            x = _as_batch(draw())
        if batch_size is None or batch_size >= len(x):
            trace = forward(net, x)
            loss, grads = backward_mse(net, trace, y)
            adam_step(net, adam, grads)
            history.append(loss)
            continue
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            trace = forward(net, x[idx])
            loss, grads = backward_mse(net, trace, y[idx])
            adam_step(net, adam, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def dumps(net: Network) -> str:
    """Text checkpoint; floats are written in hex so reloading is bit-exact."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", f"layers {len(net.layers)}"]
    for spec in net.layers:
        lines.append(f"layer {spec.fan_in} {spec.fan_out} {spec.activation.value}")
    for w, b in zip(net.weights, net.biases):
        lines.append(" ".join(float(v).hex() for v in w.ravel()))
        lines.append(" ".join(float(v).hex() for v in b))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Network:
    lines = text.splitlines()
    magic, version = lines[0].split()
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint header {lines[0]!r}")
    n = int(lines[1].split()[1])
    specs = []
    for line in lines[2 : 2 + n]:
        _, fi, fo, act = line.split()
        specs.append(LayerSpec(int(fi), int(fo), Activation(act)))
    weights, biases = [], []
    body = lines[2 + n :]
    for i, spec in enumerate(specs):
        w = np.array([float.fromhex(t) for t in body[2 * i].split()])
        b = np.array([float.fromhex(t) for t in body[2 * i + 1].split()])
        weights.append(w.reshape(spec.fan_out, spec.fan_in))
        biases.append(b)
    return Network(specs, weights, biases)


def save(net: Network, path: str | Path) -> None:
    Path(path).write_text(dumps(net))


def load(path: str | Path) -> Network:
    return loads(Path(path).read_text())
