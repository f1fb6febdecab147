"""Minibatch training loops: plain regression/classification, joint mixture
training and the single-network baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from modese.data import Dataset
from modese.errors import ConfigError
from modese.mode import ModeModel, mode_backward, mode_forward, mode_loss
from modese.nn import Adam, Mlp, build_mlp, cross_entropy, mse, mse_grad, softmax_cross_entropy_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index chunks of near-equal size (never a lone example when n > 1)."""
    if n <= 0:
        return []
    order = rng.permutation(n)
    return np.array_split(order, max(1, -(-n // batch_size)))


def fit_mse(net: Mlp, inputs: Callable | np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> list[float]:
    """Train ``net`` on 0.5*||y - t||^2.  ``inputs`` may be an array or a
    function mapping row indices to an input batch.  Returns per-epoch mean loss."""
    get = inputs if callable(inputs) else (lambda rows: inputs[rows])
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params(), lr=cfg.lr)
    history = []
    for _ in range(cfg.epochs):
        total = 0.0
        for rows in minibatches(len(targets), cfg.batch_size, rng):
            out, cache = net.forward(get(rows), train=True)
            grads, _ = net.backward(cache, mse_grad(out, targets[rows]))
            opt.step(net.params(), grads)
            total += mse(out, targets[rows]) * len(rows)
        history.append(total / len(targets))
    return history


def fit_classifier(net: Mlp, inputs: Callable | np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> list[float]:
    """Cross-entropy training of a softmax-output network."""
    if net.layers[-1].activation != "softmax":
        raise ConfigError("classifier output layer must be a softmax")
    get = inputs if callable(inputs) else (lambda rows: inputs[rows])
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params(), lr=cfg.lr)
    history = []
    for _ in range(cfg.epochs):
        total = 0.0
        for rows in minibatches(len(labels), cfg.batch_size, rng):
            probs, cache = net.forward(get(rows), train=True)
            grads, _ = net.backward(cache, softmax_cross_entropy_grad(probs, labels[rows]), preactivation=True)
            opt.step(net.params(), grads)
            total += cross_entropy(probs, labels[rows]) * len(rows)
        history.append(total / len(labels))
    return history


def train_mode(model: ModeModel, data: Dataset, cfg: TrainConfig, progress: Callable[[int, float], None] | None = None
               ) -> list[float]:
    """Joint training of gate and experts on the specialisation loss."""
    if data.config_hash() != model.config_hash():
        raise ConfigError(f"dataset features ({data.config_hash()}) do not match model ({model.config_hash()})")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params(), lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for rows in minibatches(data.num_frames, cfg.batch_size, rng):
            target = data.targets[rows]
            res = mode_forward(model, data.expert_inputs(rows), data.gate_inputs(rows), train=True)
            grads = mode_backward(model, res, target)
            opt.step(model.params(), grads.flat())
            total += mode_loss(res.gate_probs, res.expert_masks, target) * len(rows)
        history.append(total / data.num_frames)
        log.info("joint epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, history[-1])
        if progress:
            progress(epoch, history[-1])
    return history


def single_expert_inputs(data: Dataset, rows=None) -> np.ndarray:
    """Log-spectrum and MFCC context features concatenated."""
    return np.concatenate([data.expert_inputs(rows), data.gate_inputs(rows)], axis=1)


def build_single_expert(data: Dataset, hidden, batchnorm: bool = True, seed: int = 0) -> Mlp:
    n_in = (2 * data.context + 1) * (data.stft.n_bins + data.stft.n_mfcc)
    return build_mlp([n_in, *hidden, data.stft.n_bins], "relu", "sigmoid", batchnorm, np.random.default_rng(seed))


def train_single_expert(net: Mlp, data: Dataset, cfg: TrainConfig) -> list[float]:
    return fit_mse(net, lambda rows: single_expert_inputs(data, rows), data.targets, cfg)
