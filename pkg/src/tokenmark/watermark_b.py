"""Classification-style watermark on permuted inputs, plus a trigger-prefix baseline.

The owner keeps a permutation P, a target label and a frozen random linear
decoder G.  Embedding fine-tunes the backbone so that permuted inputs, after
de-permuting the backbone output, decode to the target label through G.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import permutation as perm_mod
from .data import SyntheticDataset, add_trigger
from . import tensor as T
from .model import (TaskHead, TransformerWeights, cosine_similarity, cross_entropy, embed, forward_backbone,
                    forward_head, linear_head)
from .optim import Optimizer
from .permutation import PermutationSpec
from .report import WRReport, watermark_rate
from .rng import make_rng
from .tensor import Tensor, no_grad
from .training import check_loss, evaluate, features, fit_probe, noisy_weights, permuted_forward

log = logging.getLogger(__name__)

N_WATERMARK_CLASSES = 10


@dataclass
class EmbedConfigB:
    steps: int = 400
    lr: float = 2e-3
    batch_size: int = 32
    n_samples: int = 256
    ds_weight: float = 0.0
    match_weight: float = 2.0
    integrity_weight: float = 4.0
    n_wrong: int = 4
    dropout: float = 0.1
    weight_noise: float = 0.4


@dataclass
class WatermarkBundleB:
    spec: PermutationSpec
    target: int
    decoder: TaskHead
    seed_of_G: int
    epsilon_wm: float = 0.0
    embed_config: EmbedConfigB = field(default_factory=EmbedConfigB)
    family: str = "heads_and_within"

    def __post_init__(self):
        if not 0 <= self.target < self.decoder.out_dim:
            raise ValueError(f"target label {self.target} outside decoder range {self.decoder.out_dim}")

    @property
    def scheme(self) -> str:
        return "B"

    def envelope(self) -> dict:
        return {"scheme": "B", "spec": self.spec.to_dict(), "y_t": self.target,
                "seed_of_G": self.seed_of_G, "epsilon_wm": self.epsilon_wm,
                "embed_config": asdict(self.embed_config), "family": self.family}


def random_decoder(d: int, seed: int, n_classes: int = N_WATERMARK_CLASSES) -> TaskHead:
    """The frozen random mapping G: a Gaussian linear layer d -> n_classes."""
    return linear_head("watermark_decoder", d, n_classes, make_rng(seed, "decoder-G"), scale=1.0)


def make_bundle_b(d: int, n_heads: int, seed: int, target: int | None = None,
                  family: str = "heads_and_within", embed_config: EmbedConfigB | None = None) -> WatermarkBundleB:
    rng = make_rng(seed, "bundle-B")
    spec = perm_mod.sample(rng, d, n_heads, family, exclude_identity=True)
    if target is None:
        target = int(rng.integers(0, N_WATERMARK_CLASSES))
    g_seed = int(rng.integers(0, 2**31 - 1))
    return WatermarkBundleB(spec, target, random_decoder(d, g_seed), g_seed,
                            embed_config=embed_config or EmbedConfigB(), family=family)


def select_target(weights: TransformerWeights, decoder: TaskHead, tokens: np.ndarray,
                  spec: PermutationSpec, n_probe_specs: int = 8, seed: int = 0) -> int:
    """The decoder class the original model produces least often.

    Counts predictions on unpermuted inputs, on inputs permuted by ``spec`` and
    by a few random specs; the least-hit class keeps the false-positive rate of
    the unwatermarked model near zero.
    """
    rng = make_rng(seed, "select-target")
    probes = [None, spec] + [perm_mod.sample(rng, spec.d, spec.n_heads) for _ in range(n_probe_specs)]
    counts = np.zeros(decoder.out_dim)
    for p in probes:
        pred = np.argmax(decode_b(weights, decoder, tokens, p), axis=-1)
        counts += np.bincount(pred, minlength=decoder.out_dim)
    return int(np.argmin(counts))


def not_target_loss(logits, target: int):
    """-log(1 - p_target): pushes probability mass away from the target class."""
    lp = T.log_softmax(logits, axis=-1)
    p_t = T.exp(T.getitem(lp, (slice(None), target)))
    return -T.mean(T.log(1.0 + 1e-6 - p_t))


def embed_b(weights: TransformerWeights, bundle: WatermarkBundleB, data: SyntheticDataset,
            seed: int = 0, ds_head: TaskHead | None = None) -> TransformerWeights:
    """Fine-tune a copy of the backbone on permuted inputs labelled with the target.

    G, the permutation and the embedding tables stay fixed.  With
    ``embed_config.ds_weight > 0`` and a ``ds_head``, the clean task is trained
    alongside on the same (unpermuted) batch.
    """
    cfg = bundle.embed_config
    star = weights.copy(requires_grad=False).set_trainable(backbone=True, embedding=False)
    if cfg.steps == 0:
        return star.set_trainable(False, False)
    rng = make_rng(seed, "embed-B")
    drop_rng = make_rng(seed, "embed-B-dropout")
    noise_rng = make_rng(seed, "embed-B-noise")
    pool = data.subset(rng.permutation(len(data))[:cfg.n_samples]) if cfg.n_samples < len(data) else data
    opt = Optimizer(star.backbone_parameters(), lr=cfg.lr)
    G = bundle.decoder
    step = 0
    while step < cfg.steps:
        for tokens, labels in pool.batches(cfg.batch_size, rng):
            if step >= cfg.steps:
                break
            with no_grad():
                Z = embed(tokens, star)
            marked = noisy_weights(star, cfg.weight_noise, noise_rng) if cfg.weight_noise > 0 else star
            out = permuted_forward(Z, marked, bundle.spec, dropout=cfg.dropout, rng=drop_rng)
            loss = cross_entropy(forward_head(out, G), np.full(len(tokens), bundle.target))
            if cfg.integrity_weight > 0:
                probes = [None] + [perm_mod.sample_other(rng, bundle.spec, bundle.family) for _ in range(cfg.n_wrong)]
                for j, probe in enumerate(probes):
                    scale = cfg.integrity_weight if j == 0 else cfg.integrity_weight / cfg.n_wrong
                    logits = forward_head(permuted_forward(Z, star, probe), G)
                    loss = loss + not_target_loss(logits, bundle.target) * scale
            if cfg.match_weight > 0:
                with no_grad():
                    ref = forward_backbone(Z, weights)
                sim = cosine_similarity(forward_backbone(Z, star), ref)
                loss = loss - T.mean(sim) * cfg.match_weight
            if cfg.ds_weight > 0 and ds_head is not None:
                clean = forward_head(forward_backbone(Z, star), ds_head)
                loss = loss + cross_entropy(clean, labels) * cfg.ds_weight
            check_loss(loss, step)
            loss.backward()
            opt.step()
            step += 1
    return star.set_trainable(False, False)


def decode_b(weights: TransformerWeights, decoder: TaskHead, tokens: np.ndarray,
             spec: PermutationSpec | None) -> np.ndarray:
    feats = features(weights, tokens, spec)
    with no_grad():
        return forward_head(Tensor(feats), decoder).data


def extract_b(weights: TransformerWeights, bundle: WatermarkBundleB, tokens: np.ndarray,
              spec: PermutationSpec | None = "bundle", provenance: dict | None = None) -> WRReport:
    """WR = share of samples whose permuted, de-permuted output decodes to the target.

    ``spec`` defaults to the bundle's permutation; pass ``None`` for unpermuted
    inputs or another spec to probe with a wrong key.
    """
    if len(tokens) == 0:
        raise ValueError("empty extraction set")
    use = bundle.spec if isinstance(spec, str) else spec
    logits = decode_b(weights, bundle.decoder, tokens, use)
    hits = np.argmax(logits, axis=-1) == bundle.target
    return WRReport("B", watermark_rate(hits), len(tokens), logits.tolist(), hits.tolist(),
                    target=bundle.target, provenance=provenance or {})


def wr_from_logits(logits: np.ndarray, target: int) -> float:
    return watermark_rate(np.argmax(logits, axis=-1) == target)


# trigger baseline ----------------------------------------------------------------
@dataclass
class TriggerBaseline:
    """Owner material for the conventional prefix-trigger watermark."""

    pattern: tuple[int, ...]
    target: int
    decoder: TaskHead

    def envelope(self) -> dict:
        return {"scheme": "trigger_baseline", "pattern": list(self.pattern), "y_t": self.target}


def embed_trigger_baseline(weights: TransformerWeights, ds_head: TaskHead, baseline: TriggerBaseline,
                           data: SyntheticDataset, poison_rate: float, *, epochs: int = 1,
                           lr: float = 1e-3, batch_size: int = 32, seed: int = 0):
    """Joint clean-task training with a poisoned fraction carrying the trigger prefix.

    Poisoned samples are decoded through the owner's decoder towards the target
    label; clean samples train the downstream head.  Returns new (weights, head).
    """
    if not 0.0 <= poison_rate <= 1.0:
        raise ValueError("poison_rate must lie in [0, 1]")
    star = weights.copy(requires_grad=False).set_trainable(backbone=True, embedding=True)
    head = ds_head.copy(requires_grad=True)
    opt = Optimizer(star.parameters() + head.parameters(), lr=lr)
    rng = make_rng(seed, "trigger-baseline")
    n_poison = int(round(poison_rate * len(data)))
    poison_idx = set(rng.permutation(len(data))[:n_poison].tolist())
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            pmask = np.array([i in poison_idx for i in idx])
            loss = None
            if (~pmask).any():
                clean = idx[~pmask]
                feats = forward_backbone(embed(data.tokens[clean], star), star)
                loss = cross_entropy(forward_head(feats, head), data.labels[clean]) * (len(clean) / len(idx))
            if pmask.any():
                trig = add_trigger(data.tokens[idx[pmask]], baseline.pattern)
                feats = forward_backbone(embed(trig, star), star)
                wl = cross_entropy(forward_head(feats, baseline.decoder), np.full(len(trig), baseline.target))
                wl = wl * (len(trig) / len(idx))
                loss = wl if loss is None else loss + wl
            check_loss(loss, step)
            loss.backward()
            opt.step()
            step += 1
    star.set_trainable(False, False)
    head.set_trainable(False)
    return star, head


def extract_trigger(weights: TransformerWeights, baseline: TriggerBaseline, tokens: np.ndarray) -> WRReport:
    if len(tokens) == 0:
        raise ValueError("empty extraction set")
    logits = decode_b(weights, baseline.decoder, add_trigger(tokens, baseline.pattern), None)
    hits = np.argmax(logits, axis=-1) == baseline.target
    return WRReport("trigger_baseline", watermark_rate(hits), len(tokens), logits.tolist(), hits.tolist(),
                    target=baseline.target)


# fidelity -------------------------------------------------------------------------
@dataclass
class FidelityReport:
    loss_gap: float
    accuracy_gap: float
    loss_original: float
    loss_watermarked: float
    acc_original: float
    acc_watermarked: float


def fidelity_gap(original: TransformerWeights, watermarked: TransformerWeights, train: SyntheticDataset,
                 test: SyntheticDataset, n_classes: int, seed: int = 0,
                 ds_head: TaskHead | None = None) -> FidelityReport:
    """Downstream loss/accuracy difference between two backbones.

    With ``ds_head`` both backbones are scored through that fixed head;
    otherwise each gets a fresh linear probe trained by the identical protocol.
    """
    if ds_head is not None:
        h0 = h1 = ds_head
    else:
        h0 = fit_probe(original, train, n_classes, seed=seed)
        h1 = fit_probe(watermarked, train, n_classes, seed=seed)
    e0 = evaluate(original, h0, test)
    e1 = evaluate(watermarked, h1, test)
    return FidelityReport(abs(e1.loss - e0.loss), e1.accuracy - e0.accuracy, e0.loss, e1.loss,
                          e0.accuracy, e1.accuracy)
