"""Main-task training, feature extraction and downstream evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SyntheticDataset
from .model import (TaskHead, TransformerWeights, cross_entropy, embed, forward_backbone,
                    forward_head, linear_head)
from .optim import Optimizer
from .permutation import PermutationSpec, apply_features
from .rng import make_rng
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingFault(RuntimeError):
    """Loss became non-finite during optimisation."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


def check_loss(value: Tensor, step: int | None = None) -> float:
    v = float(value.data)
    if not np.isfinite(v):
        raise TrainingFault("loss is not finite", step)
    return v


def permuted_forward(Z: Tensor, weights: TransformerWeights, spec=None, **kw) -> Tensor:
    """F(ZP, theta) P^-1, i.e. the backbone of P(theta) evaluated without moving weights."""
    if spec is None:
        return forward_backbone(Z, weights, **kw)
    out = forward_backbone(apply_features(Z, spec, "forward"), weights, **kw)
    return apply_features(out, spec, "inverse")


def noisy_weights(weights: TransformerWeights, sigma: float, rng: np.random.Generator) -> TransformerWeights:
    """Backbone plus relative Gaussian noise; gradients still reach the originals."""
    params = dict(weights.params)
    for k in weights.backbone_names():
        p = params[k]
        scale = sigma * float(np.std(p.data)) if p.ndim > 1 else sigma * float(np.mean(np.abs(p.data)) + 1e-3)
        params[k] = p + Tensor(rng.normal(0.0, scale, p.shape).astype(p.dtype))
    return TransformerWeights(weights.config, params)


def features(weights: TransformerWeights, tokens: np.ndarray, spec: PermutationSpec | None = None,
             batch_size: int = 256) -> np.ndarray:
    """Backbone outputs for a token array, computed without recording a graph."""
    outs = []
    with no_grad():
        for start in range(0, len(tokens), batch_size):
            Z = embed(tokens[start:start + batch_size], weights)
            outs.append(permuted_forward(Z, weights, spec).data)
    return np.concatenate(outs, axis=0)


def head_outputs(weights, head: TaskHead, tokens, spec=None) -> np.ndarray:
    feats = features(weights, tokens, spec)
    with no_grad():
        return forward_head(Tensor(feats), head).data


@dataclass
class EvalResult:
    loss: float
    accuracy: float


def evaluate(weights: TransformerWeights, head: TaskHead, data: SyntheticDataset) -> EvalResult:
    logits = head_outputs(weights, head, data.tokens)
    with no_grad():
        loss = float(cross_entropy(Tensor(logits), data.labels).data)
    acc = float(np.mean(np.argmax(logits, axis=-1) == data.labels))
    return EvalResult(loss, acc)


def train_classifier(weights: TransformerWeights, head: TaskHead, data: SyntheticDataset, *,
                     epochs: int = 5, lr: float = 1e-3, batch_size: int = 32, seed: int = 0,
                     train_backbone: bool = True, train_embedding: bool = True,
                     callback=None) -> list[float]:
    """End-to-end (or head-only) cross-entropy training; updates tensors in place."""
    weights.set_trainable(backbone=train_backbone, embedding=train_embedding)
    head.set_trainable(True)
    params = [p for p in weights.parameters() if p.requires_grad] + head.parameters()
    opt = Optimizer(params, lr=lr)
    rng = make_rng(seed, "train-classifier")
    losses = []
    step = 0
    for epoch in range(epochs):
        for tokens, labels in data.batches(batch_size, rng):
            feats = forward_backbone(embed(tokens, weights), weights)
            loss = cross_entropy(forward_head(feats, head), labels)
            losses.append(check_loss(loss, step))
            loss.backward()
            opt.step()
            step += 1
        if callback is not None:
            callback(epoch, weights, head)
    weights.set_trainable(False, False)
    head.set_trainable(False)
    return losses


def fit_probe(weights: TransformerWeights, data: SyntheticDataset, n_classes: int, *, epochs: int = 30,
              lr: float = 1e-2, seed: int = 0) -> TaskHead:
    """Train a fresh linear head on frozen backbone features (same protocol for any backbone)."""
    feats = Tensor(features(weights, data.tokens)[:, 0, :])
    head = linear_head("downstream_classifier", weights.config.d, n_classes, make_rng(seed, "probe-init"))
    head.set_trainable(True)
    opt = Optimizer(head.parameters(), lr=lr)
    rng = make_rng(seed, "probe-batches")
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), 64):
            idx = order[start:start + 64]
            w, b = head.layers[0]
            loss = cross_entropy(T.linear(Tensor(feats.data[idx]), w, b), data.labels[idx])
            loss.backward()
            opt.step()
    head.set_trainable(False)
    return head
