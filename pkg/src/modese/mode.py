"""Mixture of deep experts for mask estimation.

A gate network maps MFCC context features to a softmax over ``m`` experts;
each expert maps log-spectrum context features to a sigmoid mask.  The
training objective rewards the best-matching expert per frame::

    L = -log( sum_i p_i * exp(-d_i) ),   d_i = 0.5 * ||rho - rho_hat_i||^2

and its gradients route each frame to the experts through the posterior
weights ``w_i = p_i exp(-d_i) / sum_j p_j exp(-d_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from modese import container
from modese.dsp import StftConfig
from modese.errors import ConfigError, DataError, FormatError
from modese.nn import ForwardCache, Mlp, build_mlp, mlp_from_arrays, mlp_to_arrays

MODEL_KIND = "mode-model"
STRATEGIES = ("full", "top1")


@dataclass
class ModeModel:
    gate: Mlp
    experts: list[Mlp]
    context: int
    stft: StftConfig
    # number of single-frame expert evaluations made by infer_mask
    expert_evaluations: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.experts:
            raise ConfigError("a mixture needs at least one expert")
        shapes = {tuple(e.sizes) for e in self.experts}
        if len(shapes) != 1:
            raise ConfigError(f"all experts must share one layer layout, got {sorted(shapes)}")
        if self.gate.n_out != self.m:
            raise ConfigError(f"gate has {self.gate.n_out} outputs for {self.m} experts")
        if self.gate.layers[-1].activation != "softmax":
            raise ConfigError("gate output layer must be a softmax")
        if self.experts[0].n_out != self.stft.n_bins:
            raise ConfigError(f"experts output {self.experts[0].n_out} bins, config has {self.stft.n_bins}")
        if self.experts[0].n_in != self.expert_input_dim or self.gate.n_in != self.gate_input_dim:
            raise ConfigError("network input widths do not match the context/feature configuration")

    @property
    def m(self) -> int:
        return len(self.experts)

    @property
    def expert_input_dim(self) -> int:
        return (2 * self.context + 1) * self.stft.n_bins

    @property
    def gate_input_dim(self) -> int:
        return (2 * self.context + 1) * self.stft.n_mfcc

    def config_hash(self) -> str:
        return feature_hash(self.stft, self.context)

    def params(self) -> list[np.ndarray]:
        ps = self.gate.params()
        for e in self.experts:
            ps += e.params()
        return ps


def feature_hash(cfg: StftConfig, context: int) -> str:
    return f"{cfg.config_hash()}-c{context}"


def build_mode_model(cfg: StftConfig, m: int = 5, context: int = 4,
                     hidden: Sequence[int] = (512, 512, 512), gate_hidden: Sequence[int] | None = None,
                     batchnorm: bool = True, seed: int = 0, dtype=np.float64) -> ModeModel:
    """Randomly initialised model; experts share one layout."""
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    n_ctx = 2 * context + 1
    gate_hidden = hidden if gate_hidden is None else gate_hidden
    gate = build_mlp([n_ctx * cfg.n_mfcc, *gate_hidden, m], "relu", "softmax", batchnorm, rng, dtype)
    experts = [build_mlp([n_ctx * cfg.n_bins, *hidden, cfg.n_bins], "relu", "sigmoid", batchnorm, rng, dtype)
               for _ in range(m)]
    return ModeModel(gate, experts, context, cfg)


@dataclass
class ModeForwardResult:
    gate_probs: np.ndarray  # (batch, m)
    expert_masks: np.ndarray  # (batch, m, bins)
    combined_mask: np.ndarray  # (batch, bins)
    gate_cache: ForwardCache | None = field(default=None, repr=False)
    expert_caches: list[ForwardCache] | None = field(default=None, repr=False)


def mode_forward(model: ModeModel, expert_input, gate_input, train: bool = False,
                 update_stats: bool = True) -> ModeForwardResult:
    x = np.asarray(expert_input, dtype=model.gate.dtype)
    v = np.asarray(gate_input, dtype=model.gate.dtype)
    if x.ndim != 2 or x.shape[1] != model.expert_input_dim:
        raise DataError(f"expert input must be (batch, {model.expert_input_dim}), got {x.shape}")
    if v.ndim != 2 or v.shape[1] != model.gate_input_dim:
        raise DataError(f"gate input must be (batch, {model.gate_input_dim}), got {v.shape}")
    if x.shape[0] != v.shape[0]:
        raise DataError(f"batch sizes differ: {x.shape[0]} vs {v.shape[0]}")
    probs, gate_cache = model.gate.forward(v, train, update_stats)
    outs = [e.forward(x, train, update_stats) for e in model.experts]
    masks = np.stack([o for o, _ in outs], axis=1)
    combined = np.einsum("bi,bik->bk", probs, masks)
    return ModeForwardResult(probs, masks, combined, gate_cache, [c for _, c in outs])


def expert_distances(expert_masks, target) -> np.ndarray:
    """d_i = 0.5 * ||rho - rho_hat_i||^2, shape (batch, m)."""
    diff = np.asarray(expert_masks) - np.asarray(target)[:, None, :]
    return 0.5 * np.sum(diff * diff, axis=2)


def _check_probs(p):
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if np.any(p < 0):
        raise DataError("gate probabilities must be nonnegative")
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
        raise DataError("gate probabilities must sum to 1")
    return p


def _log_terms(p, d):
    with np.errstate(divide="ignore"):
        return np.log(p) - d


def loss_from_distances(gate_probs, distances) -> np.ndarray:
    """Per-example -log sum_i p_i exp(-d_i), via max-shifted log-sum-exp."""
    p = _check_probs(gate_probs)
    return -logsumexp(_log_terms(p, np.atleast_2d(distances)), axis=1)


def mode_loss(gate_probs, expert_masks, target) -> float:
    """Specialisation loss, averaged over the batch."""
    masks = np.asarray(expert_masks)
    target = np.asarray(target)
    if masks.ndim != 3 or target.shape != (masks.shape[0], masks.shape[2]):
        raise DataError(f"expert masks {masks.shape} and target {target.shape} do not match")
    if np.shape(gate_probs) != masks.shape[:2]:
        raise DataError(f"gate probs {np.shape(gate_probs)} do not match masks {masks.shape}")
    return float(np.mean(loss_from_distances(gate_probs, expert_distances(masks, target))))


def posterior_weights(gate_probs, distances) -> np.ndarray:
    """w_i = p_i exp(-d_i) / sum_j p_j exp(-d_j), rows on the simplex."""
    p = _check_probs(gate_probs)
    logits = _log_terms(p, np.atleast_2d(np.asarray(distances, dtype=np.float64)))
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


@dataclass
class ModeGradients:
    gate: list[np.ndarray]
    experts: list[list[np.ndarray]]
    posteriors: np.ndarray

    def flat(self) -> list[np.ndarray]:
        """Aligned with :meth:`ModeModel.params`."""
        out = list(self.gate)
        for g in self.experts:
            out += g
        return out


def mode_backward(model: ModeModel, result: ModeForwardResult, target) -> ModeGradients:
    """Exact gradients of the batch-mean :func:`mode_loss`.

    Expert ``i`` receives ``w_i * (rho_hat_i - rho) / B`` at its output; the
    gate receives ``(p - w) / B`` at its softmax logits.
    """
    if result.gate_cache is None or result.expert_caches is None:
        raise ValueError("result carries no caches; run mode_forward in train mode")
    if len(result.expert_caches) != model.m:
        raise ValueError("forward result does not match this model")
    target = np.asarray(target, dtype=result.expert_masks.dtype)
    batch = target.shape[0]
    d = expert_distances(result.expert_masks, target)
    w = posterior_weights(result.gate_probs, d)
    expert_grads = []
    for i, (expert, cache) in enumerate(zip(model.experts, result.expert_caches)):
        g_out = w[:, i : i + 1] * (result.expert_masks[:, i, :] - target) / batch
        expert_grads.append(expert.backward(cache, g_out)[0])
    g_logits = (result.gate_probs - w) / batch
    gate_grads = model.gate.backward(result.gate_cache, g_logits, preactivation=True)[0]
    return ModeGradients(gate_grads, expert_grads, w)


def infer_mask(model: ModeModel, expert_input, gate_input, strategy: str = "full",
               return_probs: bool = False):
    """Mask per frame; ``top1`` evaluates only the most probable expert.

    Increments ``model.expert_evaluations`` by the number of single-frame
    expert evaluations performed.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    x = np.asarray(expert_input, dtype=model.gate.dtype)
    v = np.asarray(gate_input, dtype=model.gate.dtype)
    if x.ndim != 2 or x.shape[1] != model.expert_input_dim or v.shape != (x.shape[0], model.gate_input_dim):
        raise DataError(f"inputs {x.shape}/{v.shape} do not match model dims "
                        f"({model.expert_input_dim}, {model.gate_input_dim})")
    probs = model.gate.predict(v)
    n = x.shape[0]
    if strategy == "full":
        masks = np.stack([e.predict(x) for e in model.experts], axis=1)
        out = np.einsum("bi,bik->bk", probs, masks)
        model.expert_evaluations += n * model.m
    else:
        choice = np.argmax(probs, axis=1)
        out = np.empty((n, model.stft.n_bins), dtype=x.dtype)
        for i in np.unique(choice):
            rows = choice == i
            out[rows] = model.experts[i].predict(x[rows])
            model.expert_evaluations += int(rows.sum())
    return (out, probs) if return_probs else out


def save_model(model: ModeModel, path, extra_meta: dict | None = None) -> Path:
    meta = {
        "m": model.m,
        "context": model.context,
        "stft": model.stft.to_dict(),
        "config_hash": model.config_hash(),
        "feature_dims": {"expert_input": model.expert_input_dim, "gate_input": model.gate_input_dim},
        "extra": extra_meta or {},
    }
    gate_meta, arrays = mlp_to_arrays(model.gate, "gate")
    meta["gate"] = gate_meta
    meta["experts"] = []
    for i, e in enumerate(model.experts):
        e_meta, e_arrays = mlp_to_arrays(e, f"expert{i}")
        meta["experts"].append(e_meta)
        arrays.update(e_arrays)
    return container.write_container(path, MODEL_KIND, meta, arrays)


def load_model(path) -> ModeModel:
    meta, arrays = container.read_container(path, MODEL_KIND)
    try:
        cfg = StftConfig(**meta["stft"])
        gate = mlp_from_arrays(meta["gate"], arrays, "gate")
        experts = [mlp_from_arrays(em, arrays, f"expert{i}") for i, em in enumerate(meta["experts"])]
        model = ModeModel(gate, experts, int(meta["context"]), cfg)
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: inconsistent model description ({exc})") from exc
    if model.m != meta["m"] or model.config_hash() != meta["config_hash"]:
        raise FormatError(f"{path}: header does not match stored networks")
    return model


def read_model_meta(path) -> dict:
    return container.read_container(path, MODEL_KIND)[0]
