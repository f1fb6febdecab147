"""A small feedforward network engine with exact backpropagation.

Dense layers with optional batch normalization (after the affine map, before
the activation), relu/sigmoid/softmax/linear activations, MSE and
cross-entropy losses and an Adam optimizer.  Arrays are row-major batches:
``inputs`` has shape (batch, features).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from modese.errors import DataError

ACTIVATIONS = ("relu", "sigmoid", "softmax", "linear")


def sigmoid(z):
    # split on sign so that exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def activate(name: str, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "softmax":
        return softmax(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def activation_backward(name: str, z, out, grad):
    """Gradient w.r.t. the pre-activation ``z`` given the gradient at ``out``."""
    if name == "relu":
        return grad * (z > 0)
    if name == "sigmoid":
        return grad * out * (1.0 - out)
    if name == "softmax":
        return out * (grad - np.sum(grad * out, axis=1, keepdims=True))
    if name == "linear":
        return grad
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, dim: int, dtype=np.float64, momentum: float = 0.1, epsilon: float = 1e-5):
        return cls(np.ones(dim, dtype), np.zeros(dim, dtype), np.zeros(dim, dtype), np.ones(dim, dtype),
                   momentum, epsilon)


@dataclass
class Dense:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "linear"
    batchnorm: BatchNorm | None = None

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]

    def params(self) -> list[np.ndarray]:
        ps = [self.weights, self.bias]
        if self.batchnorm is not None:
            ps += [self.batchnorm.gamma, self.batchnorm.beta]
        return ps


@dataclass
class ForwardCache:
    owner: int
    train: bool
    layers: list = field(default_factory=list)


class Mlp:
    """Stack of :class:`Dense` layers.

    ``params()`` returns the live parameter arrays in a fixed order, the same
    order in which :meth:`backward` returns gradients.
    """

    def __init__(self, layers: Sequence[Dense]):
        layers = list(layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer dimensions do not chain: {a.n_out} -> {b.n_in}")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
        self.layers = layers

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    @property
    def sizes(self) -> list[int]:
        return [self.n_in] + [layer.n_out for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def forward(self, inputs, train: bool = False, update_stats: bool = True):
        """Return ``(outputs, cache)``.

        In train mode batch normalization uses batch statistics (and updates
        the running estimates unless ``update_stats`` is False); otherwise
        the running estimates are used, so per-example outputs do not depend
        on the batch they are computed in.
        """
        x = np.asarray(inputs, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise DataError(f"expected inputs of shape (batch, {self.n_in}), got {x.shape}")
        cache = ForwardCache(id(self), train)
        for layer in self.layers:
            z = x @ layer.weights + layer.bias
            entry = {"x": x}
            bn = layer.batchnorm
            if bn is not None:
                if train:
                    mean = z.mean(axis=0)
                    var = z.var(axis=0)
                    if update_stats:
                        bn.running_mean *= 1.0 - bn.momentum
                        bn.running_mean += bn.momentum * mean
                        bn.running_var *= 1.0 - bn.momentum
                        bn.running_var += bn.momentum * var
                else:
                    mean, var = bn.running_mean, bn.running_var
                inv_std = 1.0 / np.sqrt(var + bn.epsilon)
                xhat = (z - mean) * inv_std
                entry.update(xhat=xhat, inv_std=inv_std)
                z = bn.gamma * xhat + bn.beta
            out = activate(layer.activation, z)
            entry.update(z=z, out=out)
            cache.layers.append(entry)
            x = out
        return x, cache

    def predict(self, inputs) -> np.ndarray:
        return self.forward(inputs, train=False)[0]

    def backward(self, cache: ForwardCache, output_grad, preactivation: bool = False):
        """Backpropagate ``output_grad`` through the cached forward pass.

        Returns ``(param_grads, input_grad)``; ``param_grads`` is aligned with
        :meth:`params`.  With ``preactivation=True`` the gradient is taken to
        be w.r.t. the final layer's pre-activation (e.g. softmax logits).
        """
        if cache.owner != id(self) or len(cache.layers) != len(self.layers):
            raise ValueError("forward cache does not belong to this network")
        g = np.asarray(output_grad, dtype=self.dtype)
        last = cache.layers[-1]["out"]
        if g.shape != last.shape:
            raise DataError(f"output gradient shape {g.shape} does not match outputs {last.shape}")
        grads: list[list[np.ndarray]] = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer, entry = self.layers[i], cache.layers[i]
            if not (preactivation and i == len(self.layers) - 1):
                g = activation_backward(layer.activation, entry["z"], entry["out"], g)
            layer_grads = []
            bn = layer.batchnorm
            if bn is not None:
                xhat = entry["xhat"]
                d_gamma = np.sum(g * xhat, axis=0)
                d_beta = np.sum(g, axis=0)
                dxhat = g * bn.gamma
                if cache.train:
                    n = g.shape[0]
                    g = (entry["inv_std"] / n) * (
                        n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
                    )
                else:
                    g = dxhat * entry["inv_std"]
                layer_grads = [d_gamma, d_beta]
            d_w = entry["x"].T @ g
            d_b = g.sum(axis=0)
            grads.append([d_w, d_b] + layer_grads)
            g = g @ layer.weights.T
        flat = [p for layer_grads in reversed(grads) for p in layer_grads]
        return flat, g


def build_mlp(sizes: Sequence[int], hidden_activation: str = "relu", output_activation: str = "linear",
              batchnorm: bool = False, rng: np.random.Generator | None = None,
              dtype=np.float64) -> Mlp:
    """Create an MLP with layer widths ``sizes`` (input first, output last).

    Hidden layers get ``hidden_activation`` and, if requested, batch
    normalization; the output layer never does.  ReLU layers use He-uniform
    initialisation, all others Xavier-uniform; biases start at zero.
    """
    if len(sizes) < 2:
        raise ValueError("sizes needs at least an input and an output width")
    rng = np.random.default_rng(0) if rng is None else rng
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        is_output = i == len(sizes) - 2
        act = output_activation if is_output else hidden_activation
        if act == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
        bn = BatchNorm.create(fan_out, dtype) if batchnorm and not is_output else None
        layers.append(Dense(w, np.zeros(fan_out, dtype), act, bn))
    return Mlp(layers)


def mse(pred, target) -> float:
    """Mean over the batch of 0.5 * ||pred - target||^2."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(0.5 * np.sum(diff * diff) / _batch(diff))


def mse_grad(pred, target) -> np.ndarray:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return (pred - target) / _batch(pred)


def cross_entropy(probs, labels) -> float:
    """Mean negative log-probability of the true labels."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = _check_labels(labels, probs)
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise DataError("probability rows must sum to 1")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))


def softmax_cross_entropy_grad(probs, labels) -> np.ndarray:
    """Gradient of :func:`cross_entropy` w.r.t. the softmax logits."""
    probs = np.atleast_2d(np.asarray(probs))
    labels = _check_labels(labels, probs)
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def _check_labels(labels, probs) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != probs.shape[0]:
        raise DataError(f"need one label per row: {labels.shape} labels for {probs.shape[0]} rows")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise DataError(f"label index out of range [0, {probs.shape[1]})")
    return labels


def _batch(x) -> int:
    return x.shape[0] if x.ndim > 1 else 1


class Adam:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.first_moment = [np.zeros_like(p) for p in params]
        self.second_moment = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        if len(params) != len(self.first_moment) or len(grads) != len(params):
            raise DataError("parameter/gradient lists do not match the optimizer state")
        for p, g, m in zip(params, grads, self.first_moment):
            if p.shape != g.shape or p.shape != m.shape:
                raise DataError(f"shape mismatch in Adam step: {p.shape}, {g.shape}, {m.shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.first_moment, self.second_moment):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
        return params


def adam_step(state: Adam, params, grads):
    """Functional spelling of :meth:`Adam.step`."""
    return state.step(params, grads), state


def mlp_to_arrays(net: Mlp, prefix: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Flatten a network into (layout metadata, named arrays)."""
    meta = {"sizes": net.sizes, "layers": []}
    arrays = {}
    for i, layer in enumerate(net.layers):
        info = {"activation": layer.activation, "batchnorm": layer.batchnorm is not None}
        arrays[f"{prefix}.{i}.weights"] = layer.weights
        arrays[f"{prefix}.{i}.bias"] = layer.bias
        bn = layer.batchnorm
        if bn is not None:
            info.update(momentum=bn.momentum, epsilon=bn.epsilon)
            for name in ("gamma", "beta", "running_mean", "running_var"):
                arrays[f"{prefix}.{i}.bn.{name}"] = getattr(bn, name)
        meta["layers"].append(info)
    return meta, arrays


def mlp_from_arrays(meta: dict, arrays: dict[str, np.ndarray], prefix: str) -> Mlp:
    layers = []
    for i, info in enumerate(meta["layers"]):
        bn = None
        if info["batchnorm"]:
            bn = BatchNorm(*(arrays[f"{prefix}.{i}.bn.{n}"] for n in ("gamma", "beta", "running_mean",
                                                                        "running_var")),
                           momentum=info["momentum"], epsilon=info["epsilon"])
        layers.append(Dense(arrays[f"{prefix}.{i}.weights"], arrays[f"{prefix}.{i}.bias"],
                            info["activation"], bn))
    net = Mlp(layers)
    if net.sizes != list(meta["sizes"]):
        raise ValueError(f"stored sizes {meta['sizes']} disagree with arrays {net.sizes}")
    return net
