"""Binary weight container and watermark bundle files.

Container layout (all little-endian):

    b"TKMK"  u32 version  u32 n_config  n_config x u32 config fields
    u32 n_tensors
    per tensor: u32 name_len, name (utf-8), u32 ndim, ndim x u32 shape, fp32 payload

Config fields, in order: n_layers, d, n_heads, d_mlp, vocab_size,
max_seq_len, activation index, qkv_bias.  Heads are stored in the same
container with a ``head.`` name prefix, so a bundle file is a JSON envelope
followed by one container holding the decoder.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .model import ACTIVATIONS, ModelConfig, TaskHead, TransformerWeights
from .permutation import PermutationSpec
from .tensor import Tensor

MAGIC = b"TKMK"
VERSION = 1
BUNDLE_MAGIC = b"TKWB"


class FormatError(ValueError):
    """Malformed or truncated container."""


def _config_fields(cfg: ModelConfig | None) -> list[int]:
    if cfg is None:
        return []
    return [cfg.n_layers, cfg.d, cfg.n_heads, cfg.d_mlp, cfg.vocab_size, cfg.max_seq_len,
            ACTIVATIONS.index(cfg.activation), int(cfg.qkv_bias)]


def _config_from_fields(vals: list[int]) -> ModelConfig | None:
    if not vals:
        return None
    if len(vals) != 8:
        raise FormatError(f"expected 8 config fields, found {len(vals)}")
    return ModelConfig(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], ACTIVATIONS[vals[6]], bool(vals[7]))


def write_container(tensors: dict[str, np.ndarray], cfg: ModelConfig | None = None) -> bytes:
    buf = io.BytesIO()
    fields = _config_fields(cfg)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(fields)))
    buf.write(struct.pack(f"<{len(fields)}I", *fields))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def read_container(blob: bytes) -> tuple[ModelConfig | None, dict[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("container truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic; not a weight container")
    version, n_fields = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    cfg = _config_from_fields(list(struct.unpack(f"<{n_fields}I", take(4 * n_fields))))
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(bytes(take(4 * count)), dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = arr
    if pos != len(view):
        raise FormatError("trailing bytes after container")
    return cfg, tensors


def weights_to_bytes(weights: TransformerWeights, head: TaskHead | None = None) -> bytes:
    tensors = dict(weights.state())
    if head is not None:
        tensors.update(head_tensors(head, "head"))
    return write_container(tensors, weights.config)


def weights_from_bytes(blob: bytes) -> tuple[TransformerWeights, TaskHead | None]:
    cfg, tensors = read_container(blob)
    if cfg is None:
        raise FormatError("container carries no model config")
    params = {k: Tensor(v, name=k) for k, v in tensors.items() if not k.startswith("head.")}
    head = tensors_to_head(tensors, "head")
    return TransformerWeights(cfg, params), head


def head_tensors(head: TaskHead, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in head.state().items()}


def tensors_to_head(tensors: dict[str, np.ndarray], prefix: str, kind: str = "downstream_classifier",
                    reduction: str = "first_token") -> TaskHead | None:
    sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    return TaskHead.from_state(kind, sub, reduction) if sub else None


def save_weights(path, weights: TransformerWeights, head: TaskHead | None = None) -> str:
    blob = weights_to_bytes(weights, head)
    Path(path).write_bytes(blob)
    return sha256(blob)


def load_weights(path) -> tuple[TransformerWeights, TaskHead | None]:
    return weights_from_bytes(Path(path).read_bytes())


def sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def file_sha256(path) -> str:
    return sha256(Path(path).read_bytes())


# bundles ----------------------------------------------------------------------
def bundle_to_bytes(bundle) -> bytes:
    """``TKWB`` + u32 JSON length + JSON envelope + decoder container."""
    env = json.dumps(bundle.envelope(), sort_keys=True).encode("utf-8")
    dec = write_container(head_tensors(bundle.decoder, "decoder"))
    return BUNDLE_MAGIC + struct.pack("<I", len(env)) + env + dec


def bundle_from_bytes(blob: bytes):
    from .watermark_b import EmbedConfigB, TriggerBaseline, WatermarkBundleB
    from .watermark_s import EmbedConfigS, WatermarkBundleS, decode_sk

    if blob[:4] != BUNDLE_MAGIC:
        raise FormatError("bad magic; not a watermark bundle")
    (n,) = struct.unpack("<I", blob[4:8])
    env = json.loads(blob[8:8 + n].decode("utf-8"))
    _, tensors = read_container(blob[8 + n:])
    decoder = tensors_to_head(tensors, "decoder", kind="watermark_decoder")
    if env["scheme"] == "trigger_baseline":
        return TriggerBaseline(tuple(env["pattern"]), int(env["y_t"]), decoder)
    spec = PermutationSpec.from_dict(env["spec"])
    if env["scheme"] == "B":
        return WatermarkBundleB(spec, int(env["y_t"]), decoder, int(env["seed_of_G"]), float(env["epsilon_wm"]),
                                EmbedConfigB(**env["embed_config"]), env.get("family", "heads_and_within"))
    if env["scheme"] == "S":
        return WatermarkBundleS(spec, decode_sk(env["sk"]), decoder, float(env["epsilon_wm"]), env["seeds"],
                                env.get("family", "heads_and_within"), EmbedConfigS(**env["embed_config"]))
    raise FormatError(f"unknown bundle scheme {env['scheme']!r}")


def save_bundle(path, bundle) -> str:
    blob = bundle_to_bytes(bundle)
    Path(path).write_bytes(blob)
    return sha256(blob)


def load_bundle(path):
    return bundle_from_bytes(Path(path).read_bytes())
