"""Checks that the backbone commutes with head-constrained feature permutations.

Three suites over random (theta, Z, P) instances:

* forward:   F(Z P, theta) P^-1  vs  F(Z, P(theta))
* backward:  gradients of P(theta) vs gradients of theta moved by P
* training:  one SGD step on permuted inputs, then P(.)  vs  one step from P(theta)

Permutations may be given as specs or raw column index arrays; the latter
allows the cross-head negative control.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import permutation as perm_mod
from . import tensor as T
from .model import ModelConfig, TransformerWeights, forward_backbone, init_weights
from .optim import Optimizer
from .rng import make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)

TOLERANCE = 1e-4
GRADIENT_GROUPS = ("w_q", "w_k", "w_v", "w_a", "w_1", "w_2", "b", "gamma")


def _index(spec) -> np.ndarray:
    return spec.perm if isinstance(spec, perm_mod.PermutationSpec) else np.asarray(spec, dtype=np.int64)


def random_weights(cfg: ModelConfig, rng: np.random.Generator, jitter: float = 0.2) -> TransformerWeights:
    """Random init with every bias and LayerNorm parameter made non-trivial."""
    w = init_weights(cfg, rng)
    for k in w.backbone_names():
        w.params[k].data = (w.params[k].data + rng.normal(0.0, jitter, w.params[k].shape)).astype(np.float32)
    return w


def forward_deviation(weights: TransformerWeights, Z: np.ndarray, spec) -> float:
    idx = _index(spec)
    inv = np.argsort(idx)
    lhs = forward_backbone(Tensor(Z[..., idx]), weights, check_finite=False).data[..., inv]
    rhs = forward_backbone(Tensor(Z), perm_mod.transport_weights(weights, idx), check_finite=False).data
    return float(np.max(np.abs(lhs - rhs)))


def _group(name: str) -> str:
    short = name.split(".", 2)[-1]
    if short.endswith("gamma"):
        return "gamma"
    if short.startswith("b_") or short.endswith("beta"):
        return "b"
    return short


def _loss(out: Tensor, R: np.ndarray) -> Tensor:
    return T.mean(T.square(out - Tensor(R)))


def gradient_deviations(weights: TransformerWeights, Z: np.ndarray, spec, R: np.ndarray) -> dict[str, float]:
    """Max elementwise gap between grad of P(theta) and P applied to grad of theta, per group.

    Side A evaluates l(F(Z, theta)); side B evaluates the same loss through
    l(F(Z P^-1, P(theta)) P), which equals side A for every theta.
    """
    idx = _index(spec)
    inv = np.argsort(idx)
    a = weights.copy(requires_grad=True)
    _loss(forward_backbone(Tensor(Z), a, check_finite=False), R).backward()
    b = perm_mod.transport_weights(weights, idx).copy(requires_grad=True)
    out_b = forward_backbone(Tensor(Z[..., inv]), b, check_finite=False)
    _loss(T.take_columns(out_b, idx), R).backward()
    devs = {g: 0.0 for g in GRADIENT_GROUPS}
    for k in a.backbone_names():
        moved = perm_mod.transport_gradient(k, a.params[k].grad, idx)
        g = _group(k)
        devs[g] = max(devs[g], float(np.max(np.abs(moved - b.params[k].grad))))
    return devs


def training_deviation(weights: TransformerWeights, Z: np.ndarray, spec, R: np.ndarray, lr: float = 0.1) -> float:
    """One SGD step on permuted inputs with de-permuted outputs, transported, vs one step from P(theta)."""
    idx = _index(spec)
    inv = np.argsort(idx)
    a = weights.copy(requires_grad=False).set_trainable(True, False)
    out = forward_backbone(Tensor(Z[..., idx]), a, check_finite=False)
    _loss(T.take_columns(out, inv), R).backward()
    Optimizer(a.backbone_parameters(), lr=lr, kind="sgd").step()
    b = perm_mod.transport_weights(weights, idx).copy(requires_grad=False).set_trainable(True, False)
    _loss(forward_backbone(Tensor(Z), b, check_finite=False), R).backward()
    Optimizer(b.backbone_parameters(), lr=lr, kind="sgd").step()
    moved = perm_mod.transport_weights(a, idx)
    return float(max(np.max(np.abs(moved.params[k].data - b.params[k].data)) for k in b.backbone_names()))


@dataclass
class SuiteReport:
    trials: int
    tolerance: float
    max_forward: float = 0.0
    max_backward: dict = field(default_factory=lambda: {g: 0.0 for g in GRADIENT_GROUPS})
    max_training: float = 0.0
    negative_control: float | None = None
    configs: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        worst = max([self.max_forward, self.max_training] + list(self.max_backward.values()))
        return worst < self.tolerance

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


DEFAULT_GRID = tuple((L, d, h) for L in (1, 2, 3) for d in (8, 16) for h in (1, 2, 4))


def run_suite(trials: int = 100, seed: int = 0, grid=DEFAULT_GRID, family: str = "heads_and_within",
              suites=("forward", "backward", "training"), seq_len: int = 6, batch: int = 2,
              inject_cross_head: bool = False, tolerance: float = TOLERANCE) -> SuiteReport:
    """Run the requested suites over ``trials`` instances cycling through ``grid``.

    With ``inject_cross_head`` every instance with at least two heads uses a
    permutation swapping one column across heads, which must break the checks.
    """
    rep = SuiteReport(trials, tolerance, configs=[list(g) for g in grid])
    if trials == 0:
        log.warning("zero trials requested; the equivariance suite passes vacuously")
        return rep
    for t in range(trials):
        L, d, h = grid[t % len(grid)]
        cfg = ModelConfig(n_layers=L, d=d, n_heads=h, d_mlp=2 * d, max_seq_len=seq_len)
        rng = make_rng(seed, "equivariance", t)
        w = random_weights(cfg, rng)
        Z = rng.normal(0.0, 1.0, (batch, seq_len, d)).astype(np.float32)
        R = rng.normal(0.0, 1.0, (batch, seq_len, d)).astype(np.float32)
        if inject_cross_head and h > 1:
            spec = perm_mod.cross_head_swap(d, h)
        else:
            spec = perm_mod.sample(rng, d, h, family)
        if "forward" in suites:
            rep.max_forward = max(rep.max_forward, forward_deviation(w, Z, spec))
        if "backward" in suites:
            for g, v in gradient_deviations(w, Z, spec, R).items():
                rep.max_backward[g] = max(rep.max_backward[g], v)
        if "training" in suites:
            rep.max_training = max(rep.max_training, training_deviation(w, Z, spec, R))
    return rep


def negative_control(seed: int = 0, trials: int = 10) -> float:
    """Largest forward deviation seen with a cross-head column swap."""
    worst = 0.0
    for t in range(trials):
        cfg = ModelConfig(n_layers=2, d=16, n_heads=2, d_mlp=32, max_seq_len=6)
        rng = make_rng(seed, "negative-control", t)
        w = random_weights(cfg, rng)
        Z = rng.normal(0.0, 1.0, (2, 6, 16)).astype(np.float32)
        worst = max(worst, forward_deviation(w, Z, perm_mod.cross_head_swap(16, 2)))
    return worst
