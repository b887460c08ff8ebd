"""Head-constrained permutations of the token feature dimension.

A :class:`PermutationSpec` moves whole head blocks (``head_order``) and shuffles
columns inside each block (``within_head``).  Its column index array ``perm``
realises right-multiplication by the permutation matrix: ``Z @ P == Z[:, perm]``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, take_columns

FAMILIES = ("within_heads_only", "heads_and_within", "paper_counted")


@dataclass(frozen=True)
class PermutationSpec:
    d: int
    n_heads: int
    head_order: tuple[int, ...]
    within_head: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.n_heads <= 0 or self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        m = self.d // self.n_heads
        if sorted(self.head_order) != list(range(self.n_heads)):
            raise ValueError(f"head_order {self.head_order} is not a permutation of {self.n_heads} heads")
        if len(self.within_head) != self.n_heads:
            raise ValueError("within_head needs one permutation per head")
        for w in self.within_head:
            if sorted(w) != list(range(m)):
                raise ValueError(f"within-head permutation {w} is not a bijection of {m} columns")

    @classmethod
    def identity(cls, d: int, n_heads: int) -> "PermutationSpec":
        m = d // n_heads
        return cls(d, n_heads, tuple(range(n_heads)), tuple(tuple(range(m)) for _ in range(n_heads)))

    @classmethod
    def from_parts(cls, d, n_heads, head_order, within_head) -> "PermutationSpec":
        return cls(int(d), int(n_heads), tuple(int(x) for x in head_order),
                   tuple(tuple(int(x) for x in w) for w in within_head))

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def perm(self) -> np.ndarray:
        """Column index array: output column ``j`` reads input column ``perm[j]``."""
        m = self.head_dim
        return np.array([self.head_order[h] * m + self.within_head[h][j]
                         for h in range(self.n_heads) for j in range(m)], dtype=np.int64)

    @property
    def inverse_perm(self) -> np.ndarray:
        return np.argsort(self.perm)

    def inverse(self) -> "PermutationSpec":
        return spec_from_perm(self.inverse_perm, self.n_heads)

    def compose(self, other: "PermutationSpec") -> "PermutationSpec":
        """The spec for ``self`` followed by ``other``: ``Z @ P_self @ P_other``."""
        if (other.d, other.n_heads) != (self.d, self.n_heads):
            raise ShapeError("cannot compose specs of different shapes")
        return spec_from_perm(self.perm[other.perm], self.n_heads)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(self.d)))

    def matrix(self) -> np.ndarray:
        """Dense 0/1 matrix P with ``Z @ P == Z[:, perm]``."""
        P = np.zeros((self.d, self.d), dtype=np.int64)
        P[self.perm, np.arange(self.d)] = 1
        return P

    def family_of(self) -> str:
        """The narrowest family containing this spec."""
        if list(self.head_order) == list(range(self.n_heads)):
            return "within_heads_only"
        if all(w == self.within_head[0] for w in self.within_head):
            return "paper_counted"
        return "heads_and_within"

    def in_family(self, family: str) -> bool:
        if family == "heads_and_within":
            return True
        if family == "within_heads_only":
            return list(self.head_order) == list(range(self.n_heads))
        if family == "paper_counted":
            return all(w == self.within_head[0] for w in self.within_head)
        raise ValueError(f"unknown permutation family {family!r}")

    def to_dict(self) -> dict:
        return {"d": self.d, "n_heads": self.n_heads, "head_order": list(self.head_order),
                "within_head": [list(w) for w in self.within_head]}

    @classmethod
    def from_dict(cls, obj: dict) -> "PermutationSpec":
        return cls.from_parts(obj["d"], obj["n_heads"], obj["head_order"], obj["within_head"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PermutationSpec":
        return cls.from_dict(json.loads(text))


def spec_from_perm(perm, n_heads: int) -> PermutationSpec:
    """Recover a spec from a column index array; raises if it mixes heads."""
    perm = np.asarray(perm, dtype=np.int64)
    d = perm.size
    if sorted(perm.tolist()) != list(range(d)):
        raise ValueError("not a permutation")
    m = d // n_heads
    head_order, within = [], []
    for h in range(n_heads):
        block = perm[h * m:(h + 1) * m]
        src = set((block // m).tolist())
        if len(src) != 1:
            raise ValueError(f"output head {h} draws columns from several heads {sorted(src)}")
        head_order.append(int(block[0] // m))
        within.append(tuple(int(x) for x in block % m))
    return PermutationSpec(d, n_heads, tuple(head_order), tuple(within))


def sample(rng: np.random.Generator, d: int, n_heads: int, family: str = "heads_and_within",
           exclude_identity: bool = False) -> PermutationSpec:
    """Uniform draw from ``family``; optionally rejecting the identity."""
    if family not in FAMILIES:
        raise ValueError(f"unknown permutation family {family!r}")
    m = d // n_heads
    if exclude_identity and count_permutations(d, n_heads, family) == 1:
        raise ValueError("family contains only the identity")
    while True:
        if family == "within_heads_only":
            heads = tuple(range(n_heads))
        else:
            heads = tuple(int(x) for x in rng.permutation(n_heads))
        if family == "paper_counted":
            shared = tuple(int(x) for x in rng.permutation(m))
            within = tuple(shared for _ in range(n_heads))
        else:
            within = tuple(tuple(int(x) for x in rng.permutation(m)) for _ in range(n_heads))
        spec = PermutationSpec(d, n_heads, heads, within)
        if not (exclude_identity and spec.is_identity()):
            return spec


def sample_other(rng: np.random.Generator, spec: PermutationSpec, family: str) -> PermutationSpec:
    """A draw from ``family`` guaranteed to differ from ``spec``."""
    while True:
        cand = sample(rng, spec.d, spec.n_heads, family)
        if not np.array_equal(cand.perm, spec.perm):
            return cand


def perturb(rng: np.random.Generator, spec: PermutationSpec, keep: float) -> PermutationSpec:
    """A near neighbour of ``spec``: roughly ``keep`` of each head's columns stay put, the rest are reshuffled.

    Head order is kept, and a shared within-head permutation stays shared, so
    the result lies in the same family as ``spec``.
    """
    m = spec.head_dim
    if m < 2:
        raise ValueError("perturbation needs at least two columns per head")
    shared = all(w == spec.within_head[0] for w in spec.within_head)
    while True:
        within = []
        moves = None
        for w in spec.within_head:
            if moves is None or not shared:
                n_move = max(2, int(round((1.0 - keep) * m)))
                pos = rng.choice(m, size=min(n_move, m), replace=False)
                moves = (pos, rng.permutation(pos))
            arr = np.array(w)
            arr[moves[0]] = arr[moves[1]]
            within.append(tuple(int(x) for x in arr))
        cand = PermutationSpec(spec.d, spec.n_heads, spec.head_order, tuple(within))
        if not np.array_equal(cand.perm, spec.perm):
            return cand


def count_permutations(d: int, n_heads: int, family: str = "heads_and_within") -> int:
    m = d // n_heads
    if family == "within_heads_only":
        return math.factorial(m) ** n_heads
    if family == "heads_and_within":
        return math.factorial(n_heads) * math.factorial(m) ** n_heads
    if family == "paper_counted":
        return math.factorial(n_heads) * math.factorial(m)
    raise ValueError(f"unknown permutation family {family!r}")


def enumerate_family(d: int, n_heads: int, family: str) -> Iterator[PermutationSpec]:
    m = d // n_heads
    head_orders = [tuple(range(n_heads))] if family == "within_heads_only" else list(itertools.permutations(range(n_heads)))
    block_perms = list(itertools.permutations(range(m)))
    if family == "paper_counted":
        withins = [tuple(w for _ in range(n_heads)) for w in block_perms]
    else:
        withins = list(itertools.product(block_perms, repeat=n_heads))
    for heads in head_orders:
        for within in withins:
            yield PermutationSpec(d, n_heads, heads, tuple(within))


def apply_features(Z, spec: PermutationSpec, direction: str = "forward"):
    """Reorder feature columns by P (``forward``) or P^T (``inverse``).

    Accepts numpy arrays or tensors with the feature axis last.
    """
    if Z.shape[-1] != spec.d:
        raise ShapeError(f"feature dimension {Z.shape[-1]} does not match permutation size {spec.d}")
    if direction == "forward":
        index = spec.perm
    elif direction == "inverse":
        index = spec.inverse_perm
    else:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    if isinstance(Z, Tensor):
        return take_columns(Z, index)
    return np.asarray(Z)[..., index]


def overlap(a: PermutationSpec, b: PermutationSpec) -> float:
    """Fraction of columns both specs send to the same place."""
    if a.d != b.d:
        raise ShapeError("overlap needs specs of equal size")
    return float(np.mean(a.perm == b.perm))


def cross_head_swap(d: int, n_heads: int, col_a: int = 0, col_b: int | None = None) -> np.ndarray:
    """A deliberately invalid column permutation swapping one column across heads."""
    m = d // n_heads
    if n_heads < 2:
        raise ValueError("cross-head swaps need at least two heads")
    if col_b is None:
        col_b = m
    perm = np.arange(d)
    perm[[col_a, col_b]] = perm[[col_b, col_a]]
    return perm


def _index(spec) -> np.ndarray:
    return spec.perm if isinstance(spec, PermutationSpec) else np.asarray(spec, dtype=np.int64)


def transport_array(name: str, arr: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Permute one backbone parameter given the inverse column index of P."""
    from .model import FEATURE_VECTORS, SQUARE_WEIGHTS

    short = name.split(".", 2)[-1]
    if short in SQUARE_WEIGHTS:
        return arr[inv][:, inv]          # P W P^-1
    if short == "w_1":
        return arr[:, inv]               # W P^-1
    if short == "w_2":
        return arr[inv, :]               # P W
    if short in FEATURE_VECTORS:
        return arr[inv]                  # b P^-1, gamma P^-1
    if short == "b_1":
        return arr
    raise KeyError(f"no transport rule for parameter {name!r}")


def transport_weights(weights, spec):
    """The permuted weight set P(theta); embedding tables are left untouched.

    ``spec`` may also be a raw column index array (used for negative controls
    with permutations that cross head boundaries).
    """
    from .model import TransformerWeights

    perm = _index(spec)
    if perm.shape != (weights.config.d,):
        raise ShapeError(f"permutation of size {perm.size} does not match d={weights.config.d}")
    inv = np.argsort(perm)
    params = {}
    for k, v in weights.params.items():
        data = transport_array(k, v.data, inv) if k.startswith("layers.") else v.data
        params[k] = Tensor(np.ascontiguousarray(data).copy(), requires_grad=v.requires_grad, name=k)
    return TransformerWeights(weights.config, params)


def transport_gradient(name: str, grad: np.ndarray, spec) -> np.ndarray:
    """Gradients move exactly like their weights under P."""
    inv = np.argsort(_index(spec))
    return transport_array(name, grad, inv)
