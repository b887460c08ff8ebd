"""Adam and SGD over lists of leaf tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientContractError, Tensor


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Optimizer:
    """Holds the parameter list and per-parameter moments.

    ``kind`` is ``"adam"`` or ``"sgd"``.  :meth:`step` consumes the gradients
    populated by a backward pass and zeroes them afterwards.
    """

    def __init__(self, params, lr: float, kind: str = "adam", beta1=0.9, beta2=0.999, eps=1e-8):
        kind = kind.lower()
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.params: list[Tensor] = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise GradientContractError("optimizer given a tensor that does not require grad")
        self.state = OptimizerState(kind, lr, beta1, beta2, eps)
        if kind == "adam":
            self.state.m = [np.zeros_like(p.data) for p in self.params]
            self.state.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise GradientContractError(f"parameter {p.name or i} has no gradient")
        optimizer_step(self.state, self.params)


def optimizer_step(state: OptimizerState, params: list[Tensor]) -> None:
    """Apply one update in place and zero the gradients."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradientContractError(f"parameter {p.name or i} has no gradient")
    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for p in params:
            p.data -= (lr * p.grad).astype(p.data.dtype)
            p.grad = np.zeros_like(p.data)
        return
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)
