"""Secret-vector watermark with a trainable decoder and a shadow backbone.

Each embedding iteration draws a batch and makes three sequential updates:
the shadow model mimics the original backbone, the decoder learns to recover
``sk`` from permuted outputs (and not from unpermuted or wrongly permuted
ones), and the watermarked backbone is trained to stay close to the original
while carrying ``sk`` under the secret permutation.
"""

from __future__ import annotations

import base64
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import permutation as perm_mod
from . import tensor as T
from .data import SyntheticDataset
from .model import (TaskHead, TransformerWeights, cosine_similarity, embed, forward_head,
                    fresh_backbone, mlp_head, reduce_tokens)
from .optim import Optimizer
from .permutation import PermutationSpec
from .report import WRReport, watermark_rate
from .rng import make_rng
from .tensor import Tensor, no_grad
from .training import check_loss, features, noisy_weights, permuted_forward

log = logging.getLogger(__name__)


@dataclass
class EmbedConfigS:
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 16
    dropout: float = 0.1
    decoder_hidden: int = 32
    n_wrong: int = 4
    wrong_weight: float = 4.0
    shadow_weight: float = 1.0
    n_shadows: int = 1
    shadow_warmup: int = 0
    wrong_pool: int = 32
    near_fraction: float = 0.0
    near_keep: float = 0.5
    backbone_wrong_weight: float = 8.0
    backbone_near: int = 4
    backbone_hard: bool = True
    weight_noise: float = 0.2
    reject_permuted_original: bool = True
    reject_wrong_shadow: bool = False


@dataclass
class WatermarkBundleS:
    spec: PermutationSpec
    sk: np.ndarray
    decoder: TaskHead
    epsilon_wm: float = 0.5
    seeds: dict = field(default_factory=dict)
    family: str = "heads_and_within"
    embed_config: EmbedConfigS = field(default_factory=EmbedConfigS)

    def __post_init__(self):
        if not 0.0 < self.epsilon_wm < 1.0:
            raise ValueError("epsilon_wm must lie in (0, 1)")
        self.sk = np.asarray(self.sk, dtype=np.float32)
        if self.decoder.out_dim != self.sk.shape[0]:
            raise ValueError("decoder output dim must equal the secret vector dim")

    @property
    def scheme(self) -> str:
        return "S"

    def envelope(self) -> dict:
        return {"scheme": "S", "spec": self.spec.to_dict(),
                "sk": base64.b64encode(self.sk.astype("<f4").tobytes()).decode("ascii"),
                "sk_dim": int(self.sk.shape[0]), "epsilon_wm": self.epsilon_wm, "seeds": dict(self.seeds),
                "family": self.family, "embed_config": asdict(self.embed_config)}


def decode_sk(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").astype(np.float32)


def make_bundle_s(d: int, n_heads: int, seed: int, sk_dim: int = 16, epsilon_wm: float = 0.5,
                  family: str = "heads_and_within", embed_config: EmbedConfigS | None = None) -> WatermarkBundleS:
    """Draw P, sk ~ N(0, I) and a randomly initialised decoder."""
    cfg = embed_config or EmbedConfigS()
    seeds = {"bundle": seed, "sk": seed, "decoder": seed, "shadow": seed}
    spec = perm_mod.sample(make_rng(seed, "bundle-S", "spec"), d, n_heads, family, exclude_identity=True)
    sk = make_rng(seed, "bundle-S", "sk").standard_normal(sk_dim).astype(np.float32)
    G = mlp_head("watermark_decoder", d, cfg.decoder_hidden, sk_dim, make_rng(seed, "bundle-S", "decoder"))
    return WatermarkBundleS(spec, sk, G, epsilon_wm, seeds, family, cfg)


# losses -------------------------------------------------------------------------
def _first(features: Tensor) -> Tensor:
    return reduce_tokens(features, "first_token")


def feature_match_loss(reference: Tensor, candidate: Tensor) -> Tensor:
    """-sim between first-token outputs, averaged over the batch."""
    return -T.mean(cosine_similarity(_first(reference), _first(candidate)))


def loss_ds(original: TransformerWeights, star: TransformerWeights, Z: Tensor) -> Tensor:
    with no_grad():
        ref = permuted_forward(Z, original)
    return feature_match_loss(ref, permuted_forward(Z, star))


def _sk_sim(sk: np.ndarray, decoded: Tensor) -> Tensor:
    if decoded.shape[-1] != sk.shape[-1]:
        raise T.ShapeError("decoded vector and secret vector differ in size")
    return cosine_similarity(decoded, Tensor(np.broadcast_to(sk, decoded.shape).astype(decoded.dtype)))


def loss_corr(sk: np.ndarray, decoded: Tensor) -> Tensor:
    return -T.mean(_sk_sim(sk, decoded))


def loss_uncorr(sk: np.ndarray, decoded: Tensor) -> Tensor:
    return T.mean(T.square(_sk_sim(sk, decoded)))


# embedding session ----------------------------------------------------------------
@dataclass
class StepLosses:
    shadow: float
    decoder: float
    backbone: float


class EmbeddingSessionS:
    """Owns the four weight sets of one embedding run.

    ``original`` is never updated; ``star`` starts as a copy of it; the
    shadow backbone and the decoder start from random initialisations.
    """

    def __init__(self, original: TransformerWeights, bundle: WatermarkBundleS, seed: int = 0):
        cfg = bundle.embed_config
        self.bundle = bundle
        self.original = original.copy(requires_grad=False)
        self.star = original.copy(requires_grad=False).set_trainable(backbone=True, embedding=False)
        shadow_seed = bundle.seeds.get("shadow", seed)
        self.shadows = [fresh_backbone(original, make_rng(shadow_seed, "shadow-init", k)).set_trainable(True, False)
                        for k in range(max(1, cfg.n_shadows))]
        self.decoder = bundle.decoder.copy(requires_grad=True)
        self.opt_star = Optimizer(self.star.backbone_parameters(), lr=cfg.lr)
        self.opt_shadows = [Optimizer(sh.backbone_parameters(), lr=cfg.lr) for sh in self.shadows]
        self.opt_decoder = Optimizer(self.decoder.parameters(), lr=cfg.lr)
        self.rng = make_rng(seed, "embed-S")
        self.dropout_rng = make_rng(seed, "embed-S-dropout")
        self.noise_rng = make_rng(seed, "embed-S-noise")
        self.history: list[StepLosses] = []
        self.wrong_specs: list[PermutationSpec] = []

    def embed_inputs(self, tokens: np.ndarray) -> Tensor:
        with no_grad():
            return embed(tokens, self.original)

    @property
    def shadow(self) -> TransformerWeights:
        return self.shadows[0]

    def shadow_step(self, Z: Tensor) -> float:
        total = 0.0
        for sh, opt in zip(self.shadows, self.opt_shadows):
            loss = shadow_loss(sh, self.original, Z)
            total += check_loss(loss, len(self.history))
            loss.backward()
            opt.step()
        return total / len(self.shadows)

    def sample_wrong(self, Z: Tensor) -> list[PermutationSpec]:
        """Fresh wrong keys; with a pool, keep the ones the decoder currently accepts most."""
        b = self.bundle
        cfg = b.embed_config
        n = max(cfg.n_wrong, cfg.wrong_pool)
        n_near = int(round(cfg.near_fraction * n)) if b.spec.head_dim > 1 else 0
        cands = [perm_mod.sample_other(self.rng, b.spec, b.family) for _ in range(n - n_near)]
        cands += [perm_mod.perturb(self.rng, b.spec, float(self.rng.uniform(0.25, cfg.near_keep))) for _ in range(n_near)]
        if n == cfg.n_wrong:
            return cands
        with no_grad():
            score = [float(np.mean(_sk_sim(b.sk, forward_head(permuted_forward(Z, self.star, c), self.decoder)).data))
                     for c in cands]
        keep = np.argsort(score, kind="stable")[::-1][:cfg.n_wrong]
        return [cands[i] for i in keep]

    def decoder_step(self, Z: Tensor) -> float:
        b = self.bundle
        cfg = b.embed_config
        wrongs = self.sample_wrong(Z)
        self.wrong_specs = wrongs
        with no_grad():
            f_star = _first(permuted_forward(Z, self.star, b.spec))
            f_shadow = [_first(permuted_forward(Z, sh, b.spec)) for sh in self.shadows]
            f_wrong = [_first(permuted_forward(Z, self.star, w)) for w in wrongs]
            if cfg.reject_wrong_shadow:
                f_wrong += [_first(permuted_forward(Z, sh, w)) for sh in self.shadows for w in wrongs]
            f_orig = _first(permuted_forward(Z, self.original))
            f_orig_p = _first(permuted_forward(Z, self.original, b.spec)) if cfg.reject_permuted_original else None
        G = self.decoder
        dec = lambda f: forward_head(f.reshape(f.shape[0], 1, f.shape[-1]), G)
        loss = loss_corr(b.sk, dec(f_star)) + loss_uncorr(b.sk, dec(f_orig))
        if cfg.shadow_weight > 0:
            for f in f_shadow:
                loss = loss + loss_corr(b.sk, dec(f)) * (cfg.shadow_weight / len(f_shadow))
        for f in f_wrong:
            loss = loss + loss_uncorr(b.sk, dec(f)) * (cfg.wrong_weight / len(f_wrong))
        if f_orig_p is not None:
            loss = loss + loss_uncorr(b.sk, dec(f_orig_p))
        value = check_loss(loss, len(self.history))
        loss.backward()
        self.opt_decoder.step()
        return value

    def backbone_step(self, Z: Tensor) -> float:
        b = self.bundle
        rate = b.embed_config.dropout
        G = self.decoder.copy(requires_grad=False)
        with no_grad():
            ref = permuted_forward(Z, self.original)
        plain = permuted_forward(Z, self.star, dropout=rate, rng=self.dropout_rng)
        noisy = self.noisy_star() if b.embed_config.weight_noise > 0 else self.star
        permuted = permuted_forward(Z, noisy, b.spec, dropout=rate, rng=self.dropout_rng)
        loss = (feature_match_loss(ref, plain)
                + loss_corr(b.sk, forward_head(permuted, G))
                + loss_uncorr(b.sk, forward_head(plain, G)))
        cfg = b.embed_config
        wrongs = list(self.wrong_specs) if cfg.backbone_hard else []
        wrongs += [perm_mod.perturb(self.rng, b.spec, float(self.rng.uniform(0.25, cfg.near_keep)))
                   for _ in range(cfg.backbone_near)]
        if cfg.backbone_wrong_weight > 0 and wrongs:
            scale = cfg.backbone_wrong_weight / len(wrongs)
            for w in wrongs:
                loss = loss + loss_uncorr(b.sk, forward_head(permuted_forward(Z, self.star, w), G)) * scale
        value = check_loss(loss, len(self.history))
        loss.backward()
        self.opt_star.step()
        return value

    def noisy_star(self) -> TransformerWeights:
        """theta* plus relative Gaussian noise; gradients still reach theta*."""
        return noisy_weights(self.star, self.bundle.embed_config.weight_noise, self.noise_rng)

    def iterate(self, tokens: np.ndarray) -> StepLosses:
        Z = self.embed_inputs(tokens)
        rec = StepLosses(self.shadow_step(Z), self.decoder_step(Z), self.backbone_step(Z))
        self.history.append(rec)
        return rec


def shadow_loss(shadow: TransformerWeights, original: TransformerWeights, Z: Tensor) -> Tensor:
    with no_grad():
        ref = permuted_forward(Z, original)
    return feature_match_loss(ref, permuted_forward(Z, shadow))


def shadow_train_step(shadow: TransformerWeights, original: TransformerWeights, Z: Tensor,
                      optimizer: Optimizer) -> float:
    """One optimiser step of the shadow on -sim(F(Z, theta), F(Z, theta_s))."""
    loss = shadow_loss(shadow, original, Z)
    value = float(loss.data)
    loss.backward()
    optimizer.step()
    return value


def embed_s(session: EmbeddingSessionS, data: SyntheticDataset, steps: int | None = None,
            callback=None) -> tuple[TransformerWeights, TaskHead]:
    """Run the three-update loop; returns the watermarked backbone and trained decoder."""
    steps = session.bundle.embed_config.steps if steps is None else steps
    if steps < 1:
        raise ValueError("embedding needs at least one step")
    bs = session.bundle.embed_config.batch_size
    for _ in range(session.bundle.embed_config.shadow_warmup):
        idx = session.rng.choice(len(data), size=bs, replace=False)
        session.shadow_step(session.embed_inputs(data.tokens[idx]))
    for step in range(steps):
        idx = session.rng.choice(len(data), size=bs, replace=False)
        rec = session.iterate(data.tokens[idx])
        if callback is not None:
            callback(step, rec, session)
    star = session.star.copy(requires_grad=False)
    decoder = session.decoder.copy(requires_grad=False)
    return star, decoder


# extraction -------------------------------------------------------------------------
def similarity_scores(weights: TransformerWeights, decoder: TaskHead, sk: np.ndarray, tokens: np.ndarray,
                      spec: PermutationSpec | None) -> np.ndarray:
    feats = features(weights, tokens, spec)
    with no_grad():
        return _sk_sim(sk, forward_head(Tensor(feats), decoder)).data.astype(np.float64)


def wr_from_scores(scores, threshold: float) -> float:
    return watermark_rate(np.asarray(scores) > threshold)


def extract_s(weights: TransformerWeights, bundle: WatermarkBundleS, tokens: np.ndarray,
              spec: PermutationSpec | None = "bundle", threshold: float | None = None,
              provenance: dict | None = None) -> WRReport:
    """Share of samples whose decoded vector has cosine similarity to sk above the threshold."""
    if len(tokens) == 0:
        raise ValueError("empty extraction set")
    use = bundle.spec if isinstance(spec, str) else spec
    eps = bundle.epsilon_wm if threshold is None else threshold
    scores = similarity_scores(weights, bundle.decoder, bundle.sk, tokens, use)
    hits = scores > eps
    return WRReport("S", watermark_rate(hits), len(tokens), scores.tolist(), hits.tolist(),
                    threshold=eps, provenance=provenance or {})
