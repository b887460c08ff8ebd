"""Removal, extraction, overwriting and adaptive-search attacks on a watermarked backbone.

Every attack works on copies: the victim weights and the owner's bundle are
never modified.  Reports record the config and seed so a run can be replayed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import permutation as perm_mod
from . import tensor as T
from .data import SyntheticDataset
from .model import (TaskHead, TransformerWeights, cosine_similarity, embed, forward_backbone, forward_head,
                    init_weights, linear_head)
from .optim import Optimizer
from .permutation import PermutationSpec
from .report import finite
from .rng import make_rng
from .tensor import Tensor, no_grad
from .training import check_loss, evaluate, permuted_forward, train_classifier
from .watermark_b import TriggerBaseline, WatermarkBundleB, embed_b, extract_b, extract_trigger
from .watermark_s import EmbeddingSessionS, WatermarkBundleS, embed_s, extract_s, loss_uncorr

log = logging.getLogger(__name__)

ATTACK_KINDS = ("finetune", "prune", "quantize", "extract", "overwrite", "random_search",
                "gradient_search", "adaptive_removal")
PRUNE_MODES = ("weight_magnitude", "neuron")
CSV_COLUMNS = ("strength", "wr_tokenmark_b", "wr_tokenmark_s", "wr_trigger_baseline", "downstream_acc")


@dataclass
class AttackConfig:
    kind: str
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 32
    ratio: float = 0.0
    granularity: str = "weight_magnitude"
    bits: int = 8
    steps: int = 0
    budget: int = 0
    small_set: int = 16
    alpha: float = 0.1
    temperature: float = 1.0
    final_temperature: float = 0.1
    restarts: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError("prune ratio must lie in [0, 1)")
        if not 1 <= self.bits <= 8:
            raise ValueError("quantization bits must lie in 1..8")
        if self.temperature <= 0 or self.final_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.granularity not in PRUNE_MODES:
            raise ValueError(f"unknown prune granularity {self.granularity!r}")


@dataclass
class AttackReport:
    config: dict
    pre_wr: dict
    post_wr: dict
    pre_acc: float | None = None
    post_acc: float | None = None
    steps: int = 0
    wall_time: float = 0.0
    overlap: float | None = None
    rows: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self, with_timing: bool = True) -> dict:
        out = asdict(self)
        if not with_timing:
            out.pop("wall_time")
        return finite(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def sweep_csv(rows: list[dict]) -> str:
    """CSV text with the fixed column order; missing values are left blank."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


# watermark measurement ---------------------------------------------------------------
CSV_KEY = {"B": "wr_tokenmark_b", "S": "wr_tokenmark_s", "trigger_baseline": "wr_trigger_baseline"}


def measure_wr(weights: TransformerWeights, bundle, tokens: np.ndarray, spec="bundle") -> float:
    if isinstance(bundle, WatermarkBundleB):
        return extract_b(weights, bundle, tokens, spec).wr
    if isinstance(bundle, WatermarkBundleS):
        return extract_s(weights, bundle, tokens, spec).wr
    if isinstance(bundle, TriggerBaseline):
        return extract_trigger(weights, bundle, tokens).wr
    raise TypeError(f"unsupported watermark bundle {type(bundle).__name__}")


def scheme_key(bundle) -> str:
    return bundle.scheme if hasattr(bundle, "scheme") else "trigger_baseline"


@dataclass
class Victim:
    """A watermarked model as the experiment harness sees it.

    ``marks`` maps a scheme key to ``(weights, bundle)``; several schemes can be
    tracked side by side for paired robustness sweeps.
    """

    marks: dict
    extraction_tokens: np.ndarray

    def wr(self, models: dict | None = None) -> dict:
        out = {}
        for key, (w, b) in self.marks.items():
            out[key] = measure_wr((models or {}).get(key, w), b, self.extraction_tokens)
        return out


# white-box removal ---------------------------------------------------------------------
def finetune(weights: TransformerWeights, task: SyntheticDataset, n_classes: int, *, epochs: int = 5,
             lr: float = 1e-3, batch_size: int = 32, seed: int = 0, per_epoch=None):
    """End-to-end fine-tuning with a fresh downstream head.

    ``per_epoch(epoch, weights, head)`` is called after every epoch.  Returns
    ``(weights', head)``; zero epochs returns an untouched copy and a fresh head.
    """
    w = weights.copy(requires_grad=False)
    head = linear_head("downstream_classifier", w.config.d, n_classes, make_rng(seed, "finetune-head"))
    if epochs > 0:
        train_classifier(w, head, task, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed,
                         train_backbone=True, train_embedding=True, callback=per_epoch)
    return w, head


def prune_array(arr: np.ndarray, ratio: float, granularity: str = "weight_magnitude",
                bias: np.ndarray | None = None):
    """Zero the smallest-magnitude fraction of a weight matrix (or of its output rows)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("prune ratio must lie in [0, 1)")
    out = arr.copy()
    b = None if bias is None else bias.copy()
    if ratio == 0.0:
        return out, b
    if granularity == "weight_magnitude":
        k = int(math.floor(ratio * out.size))
        if k:
            idx = np.argsort(np.abs(out).ravel(), kind="stable")[:k]
            out.ravel()[idx] = 0.0
    elif granularity == "neuron":
        k = int(math.floor(ratio * out.shape[0]))
        if k:
            rows = np.argsort(np.linalg.norm(out, axis=1), kind="stable")[:k]
            out[rows] = 0.0
            if b is not None:
                b[rows] = 0.0
    else:
        raise ValueError(f"unknown prune granularity {granularity!r}")
    return out, b


def _bias_name(weight_name: str) -> str:
    return weight_name.replace(".w_", ".b_")


def prune(weights: TransformerWeights, ratio: float, granularity: str = "weight_magnitude") -> TransformerWeights:
    """Prune every backbone weight matrix independently; embeddings are left alone."""
    w = weights.copy(requires_grad=False)
    for name in w.backbone_names():
        p = w.params[name]
        if p.ndim != 2:
            continue
        bname = _bias_name(name)
        bias = w.params[bname].data if (granularity == "neuron" and bname in w.params) else None
        new, new_b = prune_array(p.data, ratio, granularity, bias)
        p.data = new
        if new_b is not None:
            w.params[bname].data = new_b
    return w


def quantize_array(arr: np.ndarray, bits: int) -> np.ndarray:
    """Per-tensor symmetric uniform quantisation, dequantised back to float32."""
    if not 1 <= bits <= 8:
        raise ValueError("quantization bits must lie in 1..8")
    arr = np.asarray(arr, dtype=np.float32)
    if not np.any(arr):
        return arr.copy()
    if bits == 1:
        return (np.sign(arr) * np.mean(np.abs(arr))).astype(np.float32)
    scale = np.max(np.abs(arr)) / (2 ** (bits - 1) - 1)
    return (np.round(arr / scale) * scale).astype(np.float32)


def quantize(weights: TransformerWeights, bits: int) -> TransformerWeights:
    """Quantise every backbone tensor; embedding tables stay in full precision."""
    w = weights.copy(requires_grad=False)
    for name in w.backbone_names():
        w.params[name].data = quantize_array(w.params[name].data, bits)
    return w


# black-box extraction -------------------------------------------------------------------
class QueryOracle:
    """Query-only access to a deployed backbone.

    The attacker can embed tokens with the public embedding layer and read the
    backbone's output features; no weight tensor is reachable from here.
    """

    __slots__ = ("_query", "config", "_tables", "n_queries")

    def __init__(self, weights: TransformerWeights):
        frozen = weights.copy(requires_grad=False)

        def query(Z: np.ndarray) -> np.ndarray:
            with no_grad():
                return forward_backbone(Tensor(Z), frozen).data.copy()

        self._query = query
        self.config = weights.config
        self._tables = {k: weights.params[k].data.copy() for k in weights.embedding_names()}
        self.n_queries = 0

    def embedding_tables(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._tables.items()}

    def query(self, Z: np.ndarray) -> np.ndarray:
        self.n_queries += len(Z)
        return self._query(np.asarray(Z, dtype=np.float32))


def extract_model(oracle: QueryOracle, attacker_tokens: np.ndarray, *, steps: int = 1000, lr: float = 1e-3,
                  batch_size: int = 32, seed: int = 0, callback=None) -> TransformerWeights:
    """Distil a freshly initialised substitute with loss -sim(F(Z, sub), F(Z, victim))."""
    sub = init_weights(oracle.config, make_rng(seed, "substitute-init"))
    for k, v in oracle.embedding_tables().items():
        sub.params[k] = Tensor(v, name=k)
    sub.set_trainable(backbone=True, embedding=False)
    opt = Optimizer(sub.backbone_parameters(), lr=lr)
    rng = make_rng(seed, "substitute-batches")
    for step in range(steps):
        idx = rng.choice(len(attacker_tokens), size=min(batch_size, len(attacker_tokens)), replace=False)
        with no_grad():
            Z = embed(attacker_tokens[idx], sub)
        target = Tensor(oracle.query(Z.data))
        out = forward_backbone(Z, sub)
        loss = -T.mean(cosine_similarity(T.getitem(out, (slice(None), 0)), T.getitem(target, (slice(None), 0))))
        value = check_loss(loss, step)
        loss.backward()
        opt.step()
        if callback is not None:
            callback(step, value)
    return sub.set_trainable(False, False)


def output_similarity(a: TransformerWeights, b: TransformerWeights, tokens: np.ndarray) -> float:
    """Mean first-token cosine similarity of two backbones on the same inputs."""
    from .training import features

    fa = features(a, tokens)[:, 0]
    fb = features(b, tokens)[:, 0]
    return float(np.mean(np.sum(fa * fb, -1) / (np.linalg.norm(fa, axis=-1) * np.linalg.norm(fb, axis=-1))))


# overwriting -----------------------------------------------------------------------------
def overwrite(weights: TransformerWeights, bundle, new_bundle, data: SyntheticDataset, seed: int = 0):
    """Embed a second watermark with ``new_bundle`` using the original protocol.

    Returns ``(weights', new_bundle')``; for the secret-vector scheme the
    returned bundle carries the newly trained decoder.
    """
    if np.array_equal(bundle.spec.perm, new_bundle.spec.perm):
        raise ValueError("overwriting needs a permutation different from the original one")
    if isinstance(new_bundle, WatermarkBundleB):
        return embed_b(weights, new_bundle, data, seed=seed), new_bundle
    if isinstance(new_bundle, WatermarkBundleS):
        session = EmbeddingSessionS(weights, new_bundle, seed=seed)
        star, decoder = embed_s(session, data)
        new_bundle.decoder = decoder
        return star, new_bundle
    raise TypeError(f"unsupported watermark bundle {type(new_bundle).__name__}")


# adaptive search ----------------------------------------------------------------------------
@dataclass
class SearchResult:
    tried: int
    stage2: int
    hits: int
    best_wr: float
    hit_specs: list


def random_search(weights: TransformerWeights, bundle, small_tokens: np.ndarray, full_tokens: np.ndarray,
                  budget: int, seed: int = 0, planted: list[PermutationSpec] | None = None,
                  gate: float = 0.5) -> SearchResult:
    """Try ``budget`` random specs; those passing the small-set gate are verified on the full set.

    The attacker knows the decoder and secret target (``bundle`` minus its
    permutation).  ``planted`` candidates are tried first (positive control).
    """
    rng = make_rng(seed, "random-search")
    fam = bundle.family
    candidates = list(planted or [])
    stage2 = hits = 0
    best = 0.0
    found = []
    for i in range(budget + len(candidates)):
        spec = candidates[i] if i < len(candidates) else perm_mod.sample(rng, bundle.spec.d, bundle.spec.n_heads, fam)
        wr = measure_wr(weights, bundle, small_tokens, spec)
        best = max(best, wr)
        if wr > gate:
            stage2 += 1
            full = measure_wr(weights, bundle, full_tokens, spec)
            if full > gate:
                hits += 1
                found.append(spec.to_dict())
    return SearchResult(budget + len(candidates), stage2, hits, best, found)


def soft_permutation(head_logits: Tensor, block_logits: list[Tensor], temperature: float,
                     rng: np.random.Generator | None) -> Tensor:
    """Relaxed P (d x d) from head-order and per-head within-block logits.

    With ``rng`` Gumbel noise is added before the row softmax; without it
    the plain softmax is used.
    """
    def relax(logits: Tensor) -> Tensor:
        if rng is not None:
            u = rng.uniform(1e-9, 1.0 - 1e-9, size=logits.shape).astype(np.float32)
            logits = logits + Tensor(-np.log(-np.log(u)).astype(np.float32))
        return T.softmax(logits * (1.0 / temperature), axis=-1)

    H = relax(head_logits)
    h = H.shape[0]
    cols = []
    for out_head in range(h):
        Wt = T.transpose(relax(block_logits[out_head]), (1, 0))
        blocks = [Wt * T.getitem(H, (out_head, g)) for g in range(h)]
        cols.append(T.concat(blocks, axis=0))
    return T.concat(cols, axis=1)


def _assignment(logits: np.ndarray, rng: np.random.Generator) -> tuple[list[int], int]:
    """Row argmax, then duplicates replaced at random by the unused columns."""
    choice = [int(x) for x in np.argmax(logits, axis=1)]
    n = len(choice)
    seen, dup_rows = set(), []
    for r, c in enumerate(choice):
        if c in seen:
            dup_rows.append(r)
        seen.add(c)
    missing = [c for c in range(n) if c not in seen]
    rng.shuffle(missing)
    for r, c in zip(dup_rows, missing):
        choice[r] = int(c)
    return choice, len(dup_rows)


def project_spec(head_logits: np.ndarray, block_logits: list[np.ndarray], d: int, n_heads: int,
                 rng: np.random.Generator) -> tuple[PermutationSpec, int]:
    heads, repaired = _assignment(head_logits, rng)
    within = []
    for bl in block_logits:
        w, r = _assignment(bl, rng)
        within.append(w)
        repaired += r
    return PermutationSpec.from_parts(d, n_heads, heads, within), repaired


def _planted_logits(spec: PermutationSpec, scale: float = 5.0):
    h, m = spec.n_heads, spec.head_dim
    H = np.zeros((h, h), dtype=np.float32)
    H[np.arange(h), spec.head_order] = scale
    blocks = []
    for w in spec.within_head:
        B = np.zeros((m, m), dtype=np.float32)
        B[np.arange(m), w] = scale
        blocks.append(B)
    return H, blocks


def _decoded_similarity(weights, bundle: WatermarkBundleS, Z: Tensor, P: Tensor) -> Tensor:
    out = T.matmul(forward_backbone(T.matmul(Z, P), weights), T.transpose(P, (1, 0)))
    decoded = forward_head(out, bundle.decoder)
    sk = Tensor(np.broadcast_to(bundle.sk, decoded.shape).astype(np.float32))
    return cosine_similarity(decoded, sk)


def gradient_search(weights: TransformerWeights, bundle: WatermarkBundleS, tokens: np.ndarray, *,
                    steps: int = 300, lr: float = 0.05, alpha: float = 0.1, temperature: float = 1.0,
                    final_temperature: float | None = None, restarts: int = 1, eval_every: int = 25,
                    batch_size: int = 32, seed: int = 0, init: PermutationSpec | None = None):
    """Learn a relaxed permutation that makes the decoder emit ``sk``.

    Loss: -cos(G(F(Z P', theta) P'^T), sk) + alpha * ||I - P'^T P'||^2 with
    Gumbel-softmax rows.  The temperature decays geometrically from
    ``temperature`` to ``final_temperature``.  Every ``eval_every`` steps the
    logits are projected to a hard spec and scored on the batch; the best hard
    spec over all restarts is returned as ``(spec, info)``.
    """
    d, h = bundle.spec.d, bundle.spec.n_heads
    m = d // h
    rng = make_rng(seed, "gradient-search")
    tau_end = temperature if final_temperature is None else final_temperature
    frozen = weights.copy(requires_grad=False)
    eye = Tensor(np.eye(d, dtype=np.float32))
    eval_idx = rng.choice(len(tokens), size=min(64, len(tokens)), replace=False)
    with no_grad():
        Z_eval = embed(tokens[eval_idx], frozen)

    def hard_score(spec: PermutationSpec) -> float:
        with no_grad():
            return float(np.mean(_decoded_similarity(frozen, bundle, Z_eval, Tensor(spec.matrix().astype(np.float32))).data))

    best = (-np.inf, None, 0)
    history = []
    for r in range(max(1, restarts)):
        if init is None:
            H0 = rng.normal(0.0, 1.0, (h, h)).astype(np.float32)
            B0 = [rng.normal(0.0, 1.0, (m, m)).astype(np.float32) for _ in range(h)]
        else:
            H0, B0 = _planted_logits(init)
        head_logits = Tensor(H0, requires_grad=True)
        block_logits = [Tensor(b, requires_grad=True) for b in B0]
        opt = Optimizer([head_logits] + block_logits, lr=lr)
        for step in range(steps):
            tau = temperature * (tau_end / temperature) ** (step / max(1, steps - 1))
            idx = rng.choice(len(tokens), size=min(batch_size, len(tokens)), replace=False)
            with no_grad():
                Z = embed(tokens[idx], frozen)
            P = soft_permutation(head_logits, block_logits, tau, rng)
            sim = T.mean(_decoded_similarity(frozen, bundle, Z, P))
            ortho = T.tsum(T.square(eye - T.matmul(T.transpose(P, (1, 0)), P)))
            loss = -sim + ortho * alpha
            history.append(check_loss(loss, step))
            loss.backward()
            opt.step()
            if (step + 1) % eval_every == 0 or step == steps - 1:
                spec, repaired = project_spec(head_logits.data, [b.data for b in block_logits], d, h, rng)
                score = hard_score(spec)
                if score > best[0]:
                    best = (score, spec, repaired)
    score, spec, repaired = best
    if repaired:
        log.warning("projection repaired %d duplicated rows", repaired)
    return spec, {"loss_history": history, "repaired_rows": repaired, "hard_similarity": score}


def removal_loss(theta_hat: TransformerWeights, reference_out: Tensor, bundle: WatermarkBundleS,
                 Z: Tensor, spec: PermutationSpec) -> Tensor:
    """-sim(F(Z, theta_hat), F(Z, theta*)) + sim^2(sk, G(F(Z, P'(theta_hat))))."""
    first = lambda x: T.getitem(x, (slice(None), 0))
    match = -T.mean(cosine_similarity(first(forward_backbone(Z, theta_hat)), first(reference_out)))
    decoded = forward_head(permuted_forward(Z, theta_hat, spec), bundle.decoder)
    return match + loss_uncorr(bundle.sk, decoded)


def adaptive_removal(weights: TransformerWeights, candidate: PermutationSpec, bundle: WatermarkBundleS,
                     tokens: np.ndarray, *, steps: int = 200, lr: float = 1e-3, batch_size: int = 32,
                     seed: int = 0) -> TransformerWeights:
    """Fine-tune a copy of theta* to erase the watermark reachable through ``candidate``."""
    theta_hat = weights.copy(requires_grad=False).set_trainable(backbone=True, embedding=False)
    opt = Optimizer(theta_hat.backbone_parameters(), lr=lr)
    rng = make_rng(seed, "adaptive-removal")
    for step in range(steps):
        idx = rng.choice(len(tokens), size=min(batch_size, len(tokens)), replace=False)
        with no_grad():
            Z = embed(tokens[idx], weights)
            ref = forward_backbone(Z, weights)
        loss = removal_loss(theta_hat, ref, bundle, Z, candidate)
        check_loss(loss, step)
        loss.backward()
        opt.step()
    return theta_hat.set_trainable(False, False)


# drivers producing reports -------------------------------------------------------------------
def _acc(weights, head, test) -> float | None:
    return None if head is None or test is None else evaluate(weights, head, test).accuracy


def run_attack(cfg: AttackConfig, victim: Victim, *, task_train: SyntheticDataset | None = None,
               task_test: SyntheticDataset | None = None, ds_head: TaskHead | None = None,
               n_classes: int = 10, attacker_tokens: np.ndarray | None = None,
               new_bundles: dict | None = None, embed_data: SyntheticDataset | None = None,
               true_key: str = "S") -> AttackReport:
    """Execute one attack against every tracked watermark and collect a report."""
    t0 = time.perf_counter()
    pre = victim.wr()
    first_w = next(iter(victim.marks.values()))[0]
    pre_acc = _acc(first_w, ds_head, task_test)
    rows, extra = [], {}
    post_models: dict = {}
    overlap_val = None
    steps = 0

    if cfg.kind == "finetune":
        if task_train is None:
            raise ValueError("fine-tuning needs a downstream training set")
        heads = {}
        per_epoch_rows: dict[int, dict] = {}
        for key, (w, b) in victim.marks.items():
            def cb(epoch, ww, hh, key=key, b=b):
                row = per_epoch_rows.setdefault(epoch, {"strength": epoch + 1})
                row[CSV_KEY[key]] = measure_wr(ww, b, victim.extraction_tokens)
                if task_test is not None:
                    row.setdefault("downstream_acc", evaluate(ww, hh, task_test).accuracy)
            post_models[key], heads[key] = finetune(w, task_train, n_classes, epochs=cfg.epochs, lr=cfg.lr,
                                                    batch_size=cfg.batch_size, seed=cfg.seed, per_epoch=cb)
        rows = [per_epoch_rows[e] for e in sorted(per_epoch_rows)]
        steps = cfg.epochs * math.ceil(len(task_train) / cfg.batch_size)
        ds_head = next(iter(heads.values()), ds_head)
    elif cfg.kind == "prune":
        post_models = {k: prune(w, cfg.ratio, cfg.granularity) for k, (w, _) in victim.marks.items()}
    elif cfg.kind == "quantize":
        post_models = {k: quantize(w, cfg.bits) for k, (w, _) in victim.marks.items()}
    elif cfg.kind == "extract":
        if attacker_tokens is None:
            raise ValueError("extraction needs attacker data")
        sims = {}
        for k, (w, _) in victim.marks.items():
            sub = extract_model(QueryOracle(w), attacker_tokens, steps=cfg.steps, lr=cfg.lr,
                                batch_size=cfg.batch_size, seed=cfg.seed)
            post_models[k] = sub
            sims[k] = output_similarity(w, sub, victim.extraction_tokens)
        extra["output_similarity"] = sims
        steps = cfg.steps
    elif cfg.kind == "overwrite":
        if not new_bundles or embed_data is None:
            raise ValueError("overwriting needs new bundles and embedding data")
        new_wr = {}
        for k, (w, b) in victim.marks.items():
            post_models[k], nb = overwrite(w, b, new_bundles[k], embed_data, seed=cfg.seed)
            new_wr[k] = measure_wr(post_models[k], nb, victim.extraction_tokens)
        extra["new_wr"] = new_wr
    elif cfg.kind == "random_search":
        w, b = victim.marks[true_key]
        res = random_search(w, b, victim.extraction_tokens[:cfg.small_set], victim.extraction_tokens,
                            cfg.budget, seed=cfg.seed)
        extra["search"] = asdict(res)
        extra["key_space"] = perm_mod.count_permutations(b.spec.d, b.spec.n_heads, b.family)
        steps = cfg.budget
    elif cfg.kind in ("gradient_search", "adaptive_removal"):
        w, b = victim.marks[true_key]
        search_tokens = attacker_tokens if attacker_tokens is not None else victim.extraction_tokens
        spec, info = gradient_search(w, b, search_tokens, steps=cfg.steps, alpha=cfg.alpha,
                                     temperature=cfg.temperature, final_temperature=cfg.final_temperature,
                                     restarts=cfg.restarts, seed=cfg.seed)
        overlap_val = perm_mod.overlap(spec, b.spec)
        extra["candidate"] = spec.to_dict()
        extra["candidate_wr"] = measure_wr(w, b, victim.extraction_tokens, spec)
        extra["repaired_rows"] = info["repaired_rows"]
        steps = cfg.steps
        if cfg.kind == "adaptive_removal":
            theta_hat = adaptive_removal(w, spec, b, search_tokens, steps=cfg.epochs, lr=cfg.lr,
                                         batch_size=cfg.batch_size, seed=cfg.seed)
            post_models[true_key] = theta_hat
            extra["wr_candidate_after"] = measure_wr(theta_hat, b, victim.extraction_tokens, spec)
            steps += cfg.epochs

    post = victim.wr(post_models) if post_models else dict(pre)
    post_w = post_models.get(next(iter(victim.marks)), first_w)
    post_acc = _acc(post_w, ds_head, task_test)
    if cfg.kind in ("prune", "quantize", "extract", "overwrite"):
        row = {"strength": cfg.ratio if cfg.kind == "prune" else cfg.bits if cfg.kind == "quantize" else steps,
               "downstream_acc": post_acc}
        row.update({CSV_KEY[k]: v for k, v in post.items()})
        rows = [row]
    return AttackReport(asdict(cfg), pre, post, pre_acc, post_acc, steps, time.perf_counter() - t0,
                        overlap_val, rows, extra)
