"""Unsupervised initialisation of the mixture.

Clean log-spectrum frames are embedded by an autoencoder and clustered with
k-means; the cluster ids then serve as labels to pretrain the gate (as a
classifier) and each expert (on its own cluster's frames).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from modese import container
from modese.data import Dataset
from modese.errors import DataError, FormatError
from modese.mode import ModeModel
from modese.nn import Adam, Mlp, build_mlp, mlp_from_arrays, mlp_to_arrays, mse, mse_grad
from modese.training import TrainConfig, fit_classifier, fit_mse, minibatches

log = logging.getLogger(__name__)

PRETRAIN_KIND = "mode-pretrain"


@dataclass
class AutoencoderConfig:
    hidden: tuple[int, ...] = (256, 64)
    embedding_dim: int = 16
    activation: str = "relu"
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0


@dataclass
class Autoencoder:
    encoder: Mlp
    decoder: Mlp
    mean: np.ndarray
    scale: np.ndarray
    final_loss: float = float("nan")

    @property
    def embedding_dim(self) -> int:
        return self.encoder.n_out

    def _standardize(self, frames):
        return (np.asarray(frames, dtype=np.float64) - self.mean) / self.scale

    def encode(self, frames) -> np.ndarray:
        return self.encoder.predict(self._standardize(frames))

    def reconstruct(self, frames) -> np.ndarray:
        return self.decoder.predict(self.encode(frames)) * self.scale + self.mean


def train_autoencoder(frames, cfg: AutoencoderConfig | None = None) -> Autoencoder:
    """Fit encoder/decoder on reconstruction MSE (inputs standardised per dim)."""
    cfg = cfg or AutoencoderConfig()
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 10 * cfg.embedding_dim:
        raise DataError(f"need at least {10 * cfg.embedding_dim} frames to train a "
                        f"{cfg.embedding_dim}-d autoencoder, got {x.shape[0] if x.ndim == 2 else 0}")
    rng = np.random.default_rng(cfg.seed)
    dim = x.shape[1]
    enc = build_mlp([dim, *cfg.hidden, cfg.embedding_dim], cfg.activation, "linear", rng=rng)
    dec = build_mlp([cfg.embedding_dim, *reversed(cfg.hidden), dim], cfg.activation, "linear", rng=rng)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    ae = Autoencoder(enc, dec, mean, np.where(std < 1e-12, 1.0, std))
    z = ae._standardize(x)
    params = enc.params() + dec.params()
    opt = Adam(params, lr=cfg.lr)
    loss = float("nan")
    for _ in range(cfg.epochs):
        total = 0.0
        for rows in minibatches(len(z), cfg.batch_size, rng):
            code, c_enc = enc.forward(z[rows], train=True)
            out, c_dec = dec.forward(code, train=True)
            g_dec, g_code = dec.backward(c_dec, mse_grad(out, z[rows]))
            g_enc, _ = enc.backward(c_enc, g_code)
            opt.step(params, g_enc + g_dec)
            total += mse(out, z[rows]) * len(rows)
        loss = total / len(z)
    ae.final_loss = loss
    return ae


@dataclass
class Clustering:
    centroids: np.ndarray
    labels: np.ndarray
    wcss: float
    restart_wcss: list[float] = field(default_factory=list)
    history: list[float] = field(default_factory=list)  # WCSS per Lloyd iteration of the winning run

    @property
    def m(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(points, centroids):
    d = (np.sum(points**2, axis=1)[:, None] - 2.0 * points @ centroids.T + np.sum(centroids**2, axis=1)[None, :])
    return np.maximum(d, 0.0)


def _kmeans_pp(points, m, rng):
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, m):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a centre already; pick an unused index
            idx = int(rng.choice(np.setdiff1d(np.arange(n), chosen)))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def _lloyd(points, centroids, max_iters):
    history = []
    labels = None
    for _ in range(max_iters):
        d = _sq_dists(points, centroids)
        new_labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(points)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(len(centroids)):
            members = points[labels == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centre
                far = int(np.argmax(d[np.arange(len(points)), labels]))
                centroids[k] = points[far]
    d = _sq_dists(points, centroids)
    labels = np.argmin(d, axis=1)
    wcss = float(np.sum((points - centroids[labels]) ** 2))
    return centroids, labels, wcss, history


def kmeans(points, m: int, restarts: int = 10, max_iters: int = 100, seed: int = 0) -> Clustering:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by WCSS."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) < m:
        raise DataError(f"k-means needs at least m={m} points, got {len(points)}")
    if m < 1:
        raise DataError("m must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    scores = []
    for _ in range(restarts):
        cents, labels, wcss, hist = _lloyd(points, _kmeans_pp(points, m, rng), max_iters)
        scores.append(wcss)
        if best is None or wcss < best[2]:
            best = (cents, labels, wcss, hist)
    return Clustering(best[0], best[1], best[2], scores, best[3])


def assign_labels(ae: Autoencoder, clustering: Clustering, frames) -> np.ndarray:
    """Nearest centroid of each encoded frame."""
    return np.argmin(_sq_dists(ae.encode(frames), clustering.centroids), axis=1)


def pretrain_gate(gate: Mlp, features, labels, cfg: TrainConfig) -> tuple[Mlp, float]:
    """Train the gate to classify cluster ids; returns (gate, training accuracy)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= gate.n_out):
        raise DataError(f"cluster labels must lie in [0, {gate.n_out})")
    fit_classifier(gate, features, labels, cfg)
    get = features if callable(features) else (lambda rows: features[rows])
    pred = np.argmax(gate.predict(get(np.arange(len(labels)))), axis=1)
    return gate, float(np.mean(pred == labels))


def pretrain_experts(experts: Sequence[Mlp], features, targets, labels, cfg: TrainConfig
                     ) -> tuple[list[Mlp], list[dict]]:
    """Train expert ``i`` by MSE on the frames labelled ``i``.

    An expert whose cluster is empty is trained on every frame instead and
    flagged with ``fallback=True`` in the returned report.
    """
    labels = np.asarray(labels, dtype=np.int64)
    targets = np.asarray(targets)
    get = features if callable(features) else (lambda rows: features[rows])
    report = []
    for i, expert in enumerate(experts):
        rows = np.flatnonzero(labels == i)
        fallback = rows.size == 0
        if fallback:
            log.warning("cluster %d is empty; expert %d is pretrained on the full dataset", i, i)
            rows = np.arange(len(labels))
        history = fit_mse(expert, lambda r, rows=rows: get(rows[r]), targets[rows],
                          TrainConfig(cfg.lr, cfg.batch_size, cfg.epochs, cfg.seed + i))
        report.append({"expert": i, "frames": int(0 if fallback else rows.size), "fallback": fallback,
                       "final_mse": history[-1] if history else float("nan")})
    return list(experts), report


@dataclass
class PretrainResult:
    autoencoder: Autoencoder
    clustering: Clustering
    labels: np.ndarray
    gate_accuracy: float
    expert_report: list[dict]


def pretrain_model(model: ModeModel, data: Dataset, ae_cfg: AutoencoderConfig | None = None,
                   train_cfg: TrainConfig | None = None, restarts: int = 10, max_iters: int = 100
                   ) -> PretrainResult:
    """Cluster the clean frames of ``data`` and pretrain ``model`` in place."""
    train_cfg = train_cfg or TrainConfig()
    ae_cfg = ae_cfg or AutoencoderConfig(seed=train_cfg.seed)
    ae = train_autoencoder(data.clean_logspec, ae_cfg)
    clustering = kmeans(ae.encode(data.clean_logspec), model.m, restarts, max_iters, train_cfg.seed)
    labels = clustering.labels
    log.info("cluster sizes: %s", np.bincount(labels, minlength=model.m).tolist())
    _, acc = pretrain_gate(model.gate, data.gate_inputs, labels, train_cfg)
    _, report = pretrain_experts(model.experts, data.expert_inputs, data.targets, labels, train_cfg)
    return PretrainResult(ae, clustering, labels, acc, report)


def save_pretrain_artifacts(path, result: PretrainResult, extra_meta: dict | None = None) -> Path:
    ae = result.autoencoder
    enc_meta, arrays = mlp_to_arrays(ae.encoder, "encoder")
    dec_meta, dec_arrays = mlp_to_arrays(ae.decoder, "decoder")
    arrays.update(dec_arrays)
    arrays.update({"ae.mean": ae.mean, "ae.scale": ae.scale, "centroids": result.clustering.centroids,
                   "labels": result.labels})
    meta = {"encoder": enc_meta, "decoder": dec_meta, "final_loss": ae.final_loss,
            "wcss": result.clustering.wcss, "restart_wcss": result.clustering.restart_wcss,
            "gate_accuracy": result.gate_accuracy, "expert_report": result.expert_report,
            "extra": extra_meta or {}}
    return container.write_container(path, PRETRAIN_KIND, meta, arrays)


def load_pretrain_artifacts(path) -> PretrainResult:
    meta, arrays = container.read_container(path, PRETRAIN_KIND)
    try:
        ae = Autoencoder(mlp_from_arrays(meta["encoder"], arrays, "encoder"),
                         mlp_from_arrays(meta["decoder"], arrays, "decoder"),
                         arrays["ae.mean"], arrays["ae.scale"], meta["final_loss"])
        labels = arrays["labels"]
        clustering = Clustering(arrays["centroids"], labels, meta["wcss"], meta["restart_wcss"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: inconsistent pretraining artifact ({exc})") from exc
    return PretrainResult(ae, clustering, labels, meta["gate_accuracy"], meta["expert_report"])
