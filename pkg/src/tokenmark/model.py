"""A small encoder-only Transformer: embedding layer, backbone and task heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NumericFault(FloatingPointError):
    """Non-finite values appeared during a forward pass."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InputError(ValueError):
    """Token ids or sequence lengths outside the model's configured range."""


ACTIVATIONS = ("relu", "gelu")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d: int = 16
    n_heads: int = 2
    d_mlp: int = 32
    vocab_size: int = 64
    max_seq_len: int = 16
    activation: str = "relu"
    qkv_bias: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be at least 1")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if self.d_mlp < self.d:
            raise ValueError(f"d_mlp={self.d_mlp} must be >= d={self.d}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise ValueError("vocab_size and max_seq_len must be positive")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


# per-layer parameter names and their role under feature permutation
SQUARE_WEIGHTS = ("w_q", "w_k", "w_v", "w_a")
FEATURE_VECTORS = ("b_q", "b_k", "b_v", "b_a", "b_2", "ln1.gamma", "ln1.beta", "ln2.gamma", "ln2.beta")
LAYER_PARAM_ORDER = (
    "ln1.gamma", "ln1.beta",
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_a", "b_a",
    "ln2.gamma", "ln2.beta",
    "w_1", "b_1", "w_2", "b_2",
)


def layer_param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, h = cfg.d, cfg.d_mlp
    shapes = {
        "ln1.gamma": (d,), "ln1.beta": (d,),
        "w_q": (d, d), "b_q": (d,), "w_k": (d, d), "b_k": (d,),
        "w_v": (d, d), "b_v": (d,), "w_a": (d, d), "b_a": (d,),
        "ln2.gamma": (d,), "ln2.beta": (d,),
        "w_1": (h, d), "b_1": (h,), "w_2": (d, h), "b_2": (d,),
    }
    if not cfg.qkv_bias:
        for k in ("b_q", "b_k", "b_v"):
            del shapes[k]
    return shapes


@dataclass
class TransformerWeights:
    """Backbone weights per layer plus the embedding tables.

    ``params`` maps dotted names (``layers.0.w_q``, ``tok_emb`` ...) to tensors
    in a fixed order, which is also the serialisation order.
    """

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def layer(self, i: int, name: str) -> Tensor | None:
        return self.params.get(f"layers.{i}.{name}")

    def backbone_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("layers.")]

    def embedding_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("layers.")]

    def backbone_parameters(self) -> list[Tensor]:
        return [self.params[k] for k in self.backbone_names()]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self, requires_grad: bool | None = None) -> "TransformerWeights":
        out = {}
        for k, v in self.params.items():
            rg = v.requires_grad if requires_grad is None else requires_grad
            out[k] = Tensor(v.data.copy(), requires_grad=rg, name=k)
        return TransformerWeights(self.config, out)

    def set_trainable(self, backbone: bool = True, embedding: bool = False) -> "TransformerWeights":
        for k, v in self.params.items():
            flag = backbone if k.startswith("layers.") else embedding
            v.requires_grad = flag
            v.grad = np.zeros_like(v.data) if flag else None
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def equals(self, other: "TransformerWeights") -> bool:
        if self.params.keys() != other.params.keys():
            return False
        return all(np.array_equal(self.params[k].data, other.params[k].data) for k in self.params)

    def max_abs_diff(self, other: "TransformerWeights", names=None) -> float:
        names = names if names is not None else self.params.keys()
        return max(float(np.abs(self.params[k].data - other.params[k].data).max()) for k in names)


def init_weights(cfg: ModelConfig, rng: np.random.Generator, init_scale: float = 1.0) -> TransformerWeights:
    """Random initialisation: fan-in scaled Gaussians, unit LayerNorm gains, zero biases."""
    params: dict[str, Tensor] = {}
    for i in range(cfg.n_layers):
        for name, shape in layer_param_shapes(cfg).items():
            if name.endswith("gamma"):
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, init_scale / math.sqrt(shape[1]), size=shape)
            params[f"layers.{i}.{name}"] = Tensor(arr.astype(np.float32), name=f"layers.{i}.{name}")
    params["tok_emb"] = Tensor(rng.normal(0.0, 1.0, (cfg.vocab_size, cfg.d)).astype(np.float32), name="tok_emb")
    params["pos_emb"] = Tensor(rng.normal(0.0, 0.5, (cfg.max_seq_len, cfg.d)).astype(np.float32), name="pos_emb")
    return TransformerWeights(cfg, params)


def fresh_backbone(like: TransformerWeights, rng: np.random.Generator) -> TransformerWeights:
    """Randomly initialised backbone sharing ``like``'s embedding tables."""
    out = init_weights(like.config, rng)
    for k in like.embedding_names():
        out.params[k] = Tensor(like.params[k].data.copy(), name=k)
    return out


def embed(tokens, weights: TransformerWeights) -> Tensor:
    """Token plus absolute position embedding; returns (n, d) or (batch, n, d)."""
    cfg = weights.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token id outside vocabulary of size {cfg.vocab_size}")
    n = ids.shape[-1]
    if n > cfg.max_seq_len:
        raise InputError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    tok = T.embedding_lookup(weights["tok_emb"], ids)
    pos = T.getitem(weights["pos_emb"], slice(0, n))
    return tok + pos


def _activation(cfg: ModelConfig, x: Tensor) -> Tensor:
    return T.relu(x) if cfg.activation == "relu" else T.gelu(x)


def attention(x: Tensor, weights: TransformerWeights, i: int) -> Tensor:
    cfg = weights.config
    B, n, d = x.shape
    H, dh = cfg.n_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return T.transpose(t.reshape(B, n, H, dh), (0, 2, 1, 3))

    q = heads(T.linear(x, weights.layer(i, "w_q"), weights.layer(i, "b_q")))
    k = heads(T.linear(x, weights.layer(i, "w_k"), weights.layer(i, "b_k")))
    v = heads(T.linear(x, weights.layer(i, "w_v"), weights.layer(i, "b_v")))
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    att = T.softmax(scores, axis=-1)
    o = T.transpose(T.matmul(att, v), (0, 2, 1, 3)).reshape(B, n, d)
    return T.linear(o, weights.layer(i, "w_a"), weights.layer(i, "b_a"))


def mlp(x: Tensor, weights: TransformerWeights, i: int) -> Tensor:
    cfg = weights.config
    h = _activation(cfg, T.linear(x, weights.layer(i, "w_1"), weights.layer(i, "b_1")))
    return T.linear(h, weights.layer(i, "w_2"), weights.layer(i, "b_2"))


def forward_backbone(Z: Tensor, weights: TransformerWeights, dropout: float = 0.0,
                     rng: np.random.Generator | None = None, check_finite: bool = True) -> Tensor:
    """Stack of pre-LN encoder blocks; heads are contiguous feature blocks.

    ``Z`` is (n, d) or (batch, n, d).  Dropout, when enabled, is applied to the
    output of every block.
    """
    cfg = weights.config
    Z = Z if isinstance(Z, Tensor) else Tensor(Z)
    if Z.shape[-1] != cfg.d:
        raise T.ShapeError(f"input feature dim {Z.shape[-1]} != model d {cfg.d}")
    squeeze = Z.ndim == 2
    x = Z.reshape(1, *Z.shape) if squeeze else Z
    for i in range(cfg.n_layers):
        h = T.layernorm(x, weights.layer(i, "ln1.gamma"), weights.layer(i, "ln1.beta"))
        x = x + attention(h, weights, i)
        h = T.layernorm(x, weights.layer(i, "ln2.gamma"), weights.layer(i, "ln2.beta"))
        x = x + mlp(h, weights, i)
        if dropout > 0.0:
            x = T.dropout(x, dropout, rng)
    if check_finite and not np.all(np.isfinite(x.data)):
        bad = [k for k, v in weights.params.items() if not np.all(np.isfinite(v.data))]
        raise NumericFault("non-finite activation in backbone output",
                           {"nonfinite_params": bad, "input_finite": bool(np.all(np.isfinite(Z.data)))})
    return x.reshape(*x.shape[1:]) if squeeze else x


# heads -----------------------------------------------------------------------
HEAD_KINDS = ("downstream_classifier", "watermark_decoder", "identity")
REDUCTIONS = ("first_token", "mean_pool")


@dataclass
class TaskHead:
    """One or two linear layers (ReLU between) applied after token reduction."""

    kind: str
    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    reduction: str = "first_token"

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")

    @property
    def in_dim(self) -> int | None:
        return self.layers[0][0].shape[1] if self.layers else None

    @property
    def out_dim(self) -> int | None:
        return self.layers[-1][0].shape[0] if self.layers else None

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]

    def set_trainable(self, flag: bool) -> "TaskHead":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None
        return self

    def copy(self, requires_grad: bool | None = None) -> "TaskHead":
        layers = []
        for w, b in self.layers:
            rw = w.requires_grad if requires_grad is None else requires_grad
            layers.append((Tensor(w.data.copy(), requires_grad=rw), Tensor(b.data.copy(), requires_grad=rw)))
        return TaskHead(self.kind, layers, self.reduction)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for j, (w, b) in enumerate(self.layers):
            out[f"{j}.weight"] = w.data
            out[f"{j}.bias"] = b.data
        return out

    @classmethod
    def from_state(cls, kind: str, state: dict[str, np.ndarray], reduction: str = "first_token") -> "TaskHead":
        n = len(state) // 2
        layers = [(Tensor(np.array(state[f"{j}.weight"], dtype=np.float32)),
                   Tensor(np.array(state[f"{j}.bias"], dtype=np.float32))) for j in range(n)]
        return cls(kind, layers, reduction)


def linear_head(kind: str, in_dim: int, out_dim: int, rng: np.random.Generator,
                reduction: str = "first_token", scale: float | None = None) -> TaskHead:
    std = (1.0 / math.sqrt(in_dim)) if scale is None else scale
    w = Tensor(rng.normal(0.0, std, (out_dim, in_dim)).astype(np.float32))
    b = Tensor(np.zeros(out_dim, dtype=np.float32))
    return TaskHead(kind, [(w, b)], reduction)


def mlp_head(kind: str, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator,
             reduction: str = "first_token") -> TaskHead:
    w1 = Tensor(rng.normal(0.0, math.sqrt(2.0 / in_dim), (hidden, in_dim)).astype(np.float32))
    b1 = Tensor(np.zeros(hidden, dtype=np.float32))
    w2 = Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), (out_dim, hidden)).astype(np.float32))
    b2 = Tensor(np.zeros(out_dim, dtype=np.float32))
    return TaskHead(kind, [(w1, b1), (w2, b2)], reduction)


def identity_head(reduction: str = "first_token") -> TaskHead:
    return TaskHead("identity", [], reduction)


def reduce_tokens(features: Tensor, reduction: str) -> Tensor:
    if reduction == "first_token":
        return T.getitem(features, (Ellipsis, 0, slice(None)))
    return T.mean(features, axis=-2)


def forward_head(features: Tensor, head: TaskHead) -> Tensor:
    """Reduce over tokens, then run the head's layers (ReLU between layers)."""
    if head.in_dim is not None and features.shape[-1] != head.in_dim:
        raise T.ShapeError(f"head expects {head.in_dim} features, got {features.shape[-1]}")
    x = reduce_tokens(features, head.reduction)
    for j, (w, b) in enumerate(head.layers):
        x = T.linear(x, w, b)
        if j < len(head.layers) - 1:
            x = T.relu(x)
    return x


# losses ----------------------------------------------------------------------
def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over the batch."""
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    lp = T.log_softmax(logits if logits.ndim == 2 else logits.reshape(1, -1), axis=-1)
    if targets.min() < 0 or targets.max() >= lp.shape[-1]:
        raise ValueError("cross-entropy target outside the class range")
    onehot = np.zeros(lp.shape, dtype=lp.dtype)
    onehot[np.arange(len(targets)), targets] = 1.0
    return -(T.tsum(lp * Tensor(onehot)) * (1.0 / len(targets)))


class ZeroNormError(ArithmeticError):
    """Cosine similarity of a zero-norm vector."""


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Row-wise cosine similarity along the last axis."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = v if isinstance(v, Tensor) else Tensor(v)
    nu = T.l2_norm(u, axis=-1)
    nv = T.l2_norm(v, axis=-1)
    if np.any(nu.data == 0) or np.any(nv.data == 0):
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    return T.tsum(u * v, axis=-1) / (nu * nv)


def loss(kind: str, pred: Tensor, target) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy(pred, target)
    if kind == "cosine_similarity":
        return T.mean(cosine_similarity(pred, target))
    raise ValueError(f"unknown loss kind {kind!r}")
