"""Config-driven building blocks shared by the command line and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .config import ExperimentConfig
from .model import TaskHead, TransformerWeights, init_weights, linear_head
from .rng import make_rng
from .training import evaluate, train_classifier
from .watermark_b import (TriggerBaseline, WatermarkBundleB, decode_b, embed_b, embed_trigger_baseline, make_bundle_b,
                          random_decoder, select_target)
from .watermark_s import EmbeddingSessionS, WatermarkBundleS, embed_s, make_bundle_s


@dataclass
class Datasets:
    train: data_mod.SyntheticDataset
    test: data_mod.SyntheticDataset
    extract: data_mod.SyntheticDataset
    attacker: data_mod.SyntheticDataset
    finetune_train: data_mod.SyntheticDataset
    finetune_test: data_mod.SyntheticDataset


def datasets(cfg: ExperimentConfig) -> Datasets:
    """All splits regenerate from the config alone (no dataset files)."""
    t, s = cfg.task, cfg.seed
    ft = data_mod.TaskConfig(t.vocab_size, t.seq_len, t.n_classes, t.signal, t.n_reserved, cfg.data.finetune_task_seed)
    return Datasets(
        data_mod.make_dataset(t, cfg.data.n_train, s, "train"),
        data_mod.make_dataset(t, cfg.data.n_test, s, "test"),
        data_mod.make_dataset(t, cfg.data.n_extract, s, "extract"),
        data_mod.make_dataset(t, cfg.data.n_attacker, s, "attacker"),
        data_mod.make_dataset(ft, cfg.data.n_train // 2, s, "finetune-train"),
        data_mod.make_dataset(ft, cfg.data.n_test // 2, s, "finetune-test"),
    )


def train_model(cfg: ExperimentConfig, ds: Datasets) -> tuple[TransformerWeights, TaskHead, dict]:
    w = init_weights(cfg.model, make_rng(cfg.seed, "init"))
    head = linear_head("downstream_classifier", cfg.model.d, cfg.task.n_classes, make_rng(cfg.seed, "ds-head"))
    losses = train_classifier(w, head, ds.train, epochs=cfg.train.epochs, lr=cfg.train.lr,
                              batch_size=cfg.train.batch_size, seed=cfg.seed)
    ev = evaluate(w, head, ds.test)
    return w, head, {"test_accuracy": ev.accuracy, "test_loss": ev.loss, "final_train_loss": losses[-1]}


def trigger_bundle(cfg: ExperimentConfig, weights: TransformerWeights, ds: Datasets) -> TriggerBaseline:
    decoder = random_decoder(cfg.model.d, int(make_rng(cfg.seed, "trigger-G").integers(0, 2**31 - 1)))
    triggered = data_mod.add_trigger(ds.train.tokens[:256], cfg.trigger.pattern)
    pred = np.argmax(decode_b(weights, decoder, triggered, None), axis=-1)
    target = int(np.argmin(np.bincount(pred, minlength=decoder.out_dim)))
    return TriggerBaseline(tuple(cfg.trigger.pattern), target, decoder)


def embed(cfg: ExperimentConfig, scheme: str, weights: TransformerWeights, head: TaskHead, ds: Datasets):
    """Returns ``(watermarked weights, head, bundle)``; only the trigger baseline changes the head."""
    d, h = cfg.model.d, cfg.model.n_heads
    if scheme == "B":
        bundle = make_bundle_b(d, h, cfg.seed, family=cfg.family, embed_config=cfg.embed_b)
        bundle.target = select_target(weights, bundle.decoder, ds.train.tokens[:256], bundle.spec, seed=cfg.seed)
        return embed_b(weights, bundle, ds.train, seed=cfg.seed), head, bundle
    if scheme == "S":
        bundle = make_bundle_s(d, h, cfg.seed, family=cfg.family, embed_config=cfg.embed_s)
        star, decoder = embed_s(EmbeddingSessionS(weights, bundle, seed=cfg.seed), ds.train)
        bundle.decoder = decoder
        return star, head, bundle
    if scheme == "trigger_baseline":
        bundle = trigger_bundle(cfg, weights, ds)
        star, new_head = embed_trigger_baseline(weights, head, bundle, ds.train, cfg.trigger.poison_rate,
                                                epochs=cfg.trigger.epochs, lr=cfg.trigger.lr, seed=cfg.seed)
        return star, new_head, bundle
    raise ValueError(f"unknown scheme {scheme!r}")


def bundle_scheme(bundle) -> str:
    if isinstance(bundle, WatermarkBundleB):
        return "B"
    if isinstance(bundle, WatermarkBundleS):
        return "S"
    if isinstance(bundle, TriggerBaseline):
        return "trigger_baseline"
    raise TypeError(type(bundle).__name__)


def score_histogram(scores, bins: int = 20, lo: float = -1.0, hi: float = 1.0) -> list[tuple[float, float, int]]:
    counts, edges = np.histogram(np.clip(scores, lo, hi), bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
