"""Command line: train, embed, extract, attack, verify-equivariance, sweep.

Exit codes: 0 success, 1 a check or tolerance failed, 2 usage/config error.
Every command writes its outputs plus ``manifest.json`` (config hash, code
version, stage wall times, artifact checksums) into ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as atk
from . import config as config_mod
from . import equivariance
from . import pipeline as pl
from . import serialization as ser
from .report import finite
from .training import evaluate
from .watermark_b import extract_b, extract_trigger
from .watermark_s import extract_s

log = logging.getLogger("tokenmark")


class UsageError(Exception):
    """Bad flags, missing files or mismatched inputs (exit code 2)."""


class Manifest:
    def __init__(self, out: Path, cfg: config_mod.ExperimentConfig, command: str):
        self.out = out
        self.data = {"command": command, "config_hash": cfg.config_hash(), "code_version": __version__,
                     "seed": cfg.seed, "stages": {}, "artifacts": {}}

    def stage(self, name: str, seconds: float):
        self.data["stages"][name] = round(seconds, 6)

    def artifact(self, path: Path):
        self.data["artifacts"][path.name] = ser.file_sha256(path)

    def write(self):
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.data, sort_keys=True, indent=2) + "\n")


def write_json(path: Path, obj, manifest: Manifest | None = None):
    path.write_text(json.dumps(finite(obj), sort_keys=True, indent=2) + "\n")
    if manifest is not None:
        manifest.artifact(path)


def write_text(path: Path, text: str, manifest: Manifest | None = None):
    path.write_text(text)
    if manifest is not None:
        manifest.artifact(path)


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _load_model(path):
    try:
        return ser.load_weights(_require(path, "model"))
    except ser.FormatError as exc:
        raise UsageError(f"cannot read model: {exc}") from None


def _load_bundle(path):
    try:
        return ser.load_bundle(_require(path, "bundle"))
    except ser.FormatError as exc:
        raise UsageError(f"cannot read bundle: {exc}") from None


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def extraction_report(weights, bundle, tokens, reference=None) -> dict:
    scheme = pl.bundle_scheme(bundle)
    if scheme == "B":
        rep = extract_b(weights, bundle, tokens)
    elif scheme == "S":
        rep = extract_s(weights, bundle, tokens)
    else:
        rep = extract_trigger(weights, bundle, tokens)
    if reference is not None:
        rep.fpr = atk.measure_wr(reference, bundle, tokens)
    scores = np.asarray(rep.scores)
    if scores.ndim == 2:
        # target-class probability for the classification schemes
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        scores = (e / e.sum(axis=-1, keepdims=True))[:, bundle.target]
    out = rep.to_dict()
    out["scheme"] = scheme
    return out, scores


# commands -------------------------------------------------------------------------------
def cmd_train(args, cfg) -> int:
    out = _out(args)
    man = Manifest(out, cfg, "train")
    t0 = time.perf_counter()
    ds = pl.datasets(cfg)
    w, head, metrics = pl.train_model(cfg, ds)
    man.stage("train", time.perf_counter() - t0)
    path = out / "model.tkmk"
    ser.save_weights(path, w, head)
    man.artifact(path)
    write_json(out / "train_report.json", {"config": cfg.to_dict(), **metrics}, man)
    man.write()
    print(f"test accuracy {metrics['test_accuracy']:.4f}  ->  {path}")
    return 0


def cmd_embed(args, cfg) -> int:
    w, head = _load_model(args.model)
    if w.config != cfg.model:
        raise UsageError("model file config does not match the experiment config")
    scheme = args.scheme or cfg.scheme
    out = _out(args)
    man = Manifest(out, cfg, f"embed-{scheme}")
    ds = pl.datasets(cfg)
    t0 = time.perf_counter()
    star, new_head, bundle = pl.embed(cfg, scheme, w, head, ds)
    man.stage(f"embed_{scheme}", time.perf_counter() - t0)
    mpath, bpath = out / f"model_{scheme}.tkmk", out / f"bundle_{scheme}.tkwb"
    ser.save_weights(mpath, star, new_head)
    ser.save_bundle(bpath, bundle)
    man.artifact(mpath)
    man.artifact(bpath)
    rep, _ = extraction_report(star, bundle, ds.extract.tokens, reference=w)
    acc0 = evaluate(w, head, ds.test).accuracy if head is not None else None
    acc1 = evaluate(star, new_head, ds.test).accuracy if new_head is not None else None
    write_json(out / f"embed_{scheme}_report.json",
               {"scheme": scheme, "wr": rep["wr"], "fpr": rep["fpr"], "acc_original": acc0,
                "acc_watermarked": acc1, "bundle": bundle.envelope()}, man)
    man.write()
    print(f"scheme {scheme}: WR {rep['wr']:.3f}  FPR {rep['fpr']:.3f}  ->  {mpath}, {bpath}")
    return 0


def cmd_extract(args, cfg) -> int:
    w, _ = _load_model(args.model)
    bundle = _load_bundle(args.bundle)
    scheme = pl.bundle_scheme(bundle)
    if args.scheme and args.scheme != scheme:
        raise UsageError(f"bundle holds scheme {scheme} but --scheme {args.scheme} was given")
    n = cfg.data.n_extract if args.set_size is None else args.set_size
    if n <= 0:
        raise UsageError("extraction set is empty (set size must be positive)")
    out = _out(args)
    man = Manifest(out, cfg, "extract")
    ds = pl.datasets(replace(cfg, data=replace(cfg.data, n_extract=n)))
    reference = _load_model(args.reference)[0] if args.reference else None
    t0 = time.perf_counter()
    rep, scores = extraction_report(w, bundle, ds.extract.tokens, reference)
    man.stage("extract", time.perf_counter() - t0)
    write_json(out / "extract_report.json", rep, man)
    rows = ["low,high,count"] + [f"{lo:.2f},{hi:.2f},{c}" for lo, hi, c in
                                  pl.score_histogram(scores)]
    write_text(out / "score_histogram.csv", "\n".join(rows) + "\n", man)
    man.write()
    print(f"{'scheme':<18}{'n':>6}{'WR':>8}{'FPR':>8}")
    fpr = "-" if rep["fpr"] is None else f"{rep['fpr']:.3f}"
    print(f"{scheme:<18}{rep['n_samples']:>6}{rep['wr']:>8.3f}{fpr:>8}")
    return 0


def cmd_attack(args, cfg) -> int:
    w, head = _load_model(args.model)
    bundle = _load_bundle(args.bundle)
    scheme = pl.bundle_scheme(bundle)
    if args.kind:
        try:
            attacks = [atk.AttackConfig(args.kind, seed=cfg.seed)]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        attacks = list(cfg.attacks)
    if not attacks:
        raise UsageError("no attack given (use --kind or an 'attacks' list in the config)")
    out = _out(args)
    man = Manifest(out, cfg, "attack")
    ds = pl.datasets(cfg)
    victim = atk.Victim({scheme: (w, bundle)}, ds.extract.tokens)
    all_rows = []
    for i, ac in enumerate(attacks):
        points = [ac]
        if ac.kind == "prune" and args.sweep:
            points = [atk.AttackConfig(**{**asdict(ac), "ratio": r}) for r in cfg.sweep.prune_ratios]
        if ac.kind == "quantize" and args.sweep:
            points = [atk.AttackConfig(**{**asdict(ac), "bits": k}) for k in cfg.sweep.quantize_bits]
        for j, point in enumerate(points):
            new_bundles = None
            if point.kind == "overwrite":
                new_bundles = {scheme: _fresh_bundle(replace(cfg, seed=cfg.seed + 1), scheme, w, ds)}
            t0 = time.perf_counter()
            rep = atk.run_attack(point, victim, task_train=ds.finetune_train if point.kind == "finetune" else None,
                                 task_test=ds.finetune_test if point.kind == "finetune" else ds.test,
                                 ds_head=head, n_classes=cfg.task.n_classes, attacker_tokens=ds.attacker.tokens,
                                 new_bundles=new_bundles, embed_data=ds.train, true_key=scheme)
            man.stage(f"attack_{i}_{j}_{point.kind}", time.perf_counter() - t0)
            write_json(out / f"attack_{i}_{j}_{point.kind}.json", rep.to_dict(with_timing=False), man)
            all_rows.extend(rep.rows)
            print(f"{point.kind:<18} pre {rep.pre_wr}  post {rep.post_wr}")
    write_text(out / "attack_rows.csv", atk.sweep_csv(all_rows), man)
    man.write()
    return 0


def _fresh_bundle(cfg, scheme, weights, ds):
    from .watermark_b import make_bundle_b, select_target
    from .watermark_s import make_bundle_s

    d, h = cfg.model.d, cfg.model.n_heads
    if scheme == "B":
        b = make_bundle_b(d, h, cfg.seed, family=cfg.family, embed_config=cfg.embed_b)
        b.target = select_target(weights, b.decoder, ds.train.tokens[:256], b.spec, seed=cfg.seed)
        return b
    if scheme == "S":
        return make_bundle_s(d, h, cfg.seed, family=cfg.family, embed_config=cfg.embed_s)
    raise UsageError("overwriting applies to the permutation schemes only")


def cmd_verify(args, cfg) -> int:
    out = _out(args)
    man = Manifest(out, cfg, "verify-equivariance")
    t0 = time.perf_counter()
    rep = equivariance.run_suite(args.trials, seed=cfg.seed, family=cfg.family,
                                 inject_cross_head=args.inject_cross_head)
    man.stage("verify", time.perf_counter() - t0)
    write_json(out / "equivariance_report.json", rep.to_dict(), man)
    man.write()
    print(f"trials {rep.trials}  max forward {rep.max_forward:.3e}  max training {rep.max_training:.3e}")
    for g, v in rep.max_backward.items():
        print(f"  grad {g:<6} {v:.3e}")
    if args.trials == 0:
        print("warning: zero trials, nothing was checked")
    print("PASS" if rep.passed else "FAIL")
    return 0 if rep.passed else 1


def cmd_sweep(args, cfg) -> int:
    """Train, embed all three schemes, then run the fine-tune / prune / quantize matrix."""
    out = _out(args)
    man = Manifest(out, cfg, "sweep")
    ds = pl.datasets(cfg)
    t0 = time.perf_counter()
    if args.model:
        w, head = _load_model(args.model)
    else:
        w, head, _ = pl.train_model(cfg, ds)
    man.stage("train", time.perf_counter() - t0)
    marks, heads = {}, {}
    for scheme in ("B", "S", "trigger_baseline"):
        t0 = time.perf_counter()
        star, h, bundle = pl.embed(cfg, scheme, w, head, ds)
        man.stage(f"embed_{scheme}", time.perf_counter() - t0)
        marks[scheme], heads[scheme] = (star, bundle), h
    victim = atk.Victim(marks, ds.extract.tokens)
    sw = cfg.sweep
    t0 = time.perf_counter()
    ft = atk.run_attack(atk.AttackConfig("finetune", epochs=sw.finetune_epochs, lr=sw.finetune_lr, seed=cfg.seed),
                        victim, task_train=ds.finetune_train, task_test=ds.finetune_test,
                        n_classes=cfg.task.n_classes)
    man.stage("finetune", time.perf_counter() - t0)
    write_text(out / "sweep_finetune.csv", atk.sweep_csv(ft.rows), man)
    for kind, values in (("prune", sw.prune_ratios), ("quantize", sw.quantize_bits)):
        rows = []
        t0 = time.perf_counter()
        for v in values:
            ac = atk.AttackConfig(kind, ratio=v if kind == "prune" else 0.0, bits=v if kind == "quantize" else 8,
                                  granularity=sw.prune_granularity, seed=cfg.seed)
            rows.extend(atk.run_attack(ac, victim, task_test=ds.test, ds_head=head).rows)
        man.stage(kind, time.perf_counter() - t0)
        write_text(out / f"sweep_{kind}.csv", atk.sweep_csv(rows), man)
    man.write()
    print((out / "sweep_finetune.csv").read_text())
    return 0


COMMANDS = {"train": cmd_train, "embed": cmd_embed, "extract": cmd_extract, "attack": cmd_attack,
            "verify-equivariance": cmd_verify, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokenmark", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", default="runs", help="output directory")
        sp.add_argument("--model", help="weight container (.tkmk)")
        sp.add_argument("--bundle", help="watermark bundle (.tkwb)")
        sp.add_argument("--scheme", choices=config_mod.SCHEMES)
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "extract":
            sp.add_argument("--set-size", type=int, help="number of extraction samples")
            sp.add_argument("--reference", help="unwatermarked model for the false-positive rate")
        if name == "attack":
            sp.add_argument("--kind", help="single attack kind (otherwise the config's 'attacks' list)")
            sp.add_argument("--sweep", action="store_true", help="expand prune/quantize over the sweep values")
        if name == "verify-equivariance":
            sp.add_argument("--trials", type=int, default=100)
            sp.add_argument("--inject-cross-head", action="store_true",
                            help="use head-crossing permutations (negative control; must fail)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config, {"seed": args.seed})
        return COMMANDS[args.command](args, cfg)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
