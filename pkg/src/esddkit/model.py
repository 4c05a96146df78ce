"""Compact convolutional backbone + three-layer MLP head, with freeze control.

Parameters live in plain numpy arrays inside :class:`ModelParams`; a forward
pass wraps them in :class:`~esddkit.autodiff.Tensor` leaves via :func:`bind`,
marking frozen groups as constants so they never enter the graph.
"""

from __future__ import annotations

import copy
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CorruptCheckpoint, NonFiniteValue, ShapeMismatch, UnknownGroup

GROUPS = ("backbone", "head", "asoftmax", "centers")
HEAD_HIDDEN = (128, 64)
CKPT_MAGIC = b"ESDDCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    """Conv blocks as (out_channels, kernel, stride, pool) plus the embedding size."""

    blocks: tuple[tuple[int, int, int, int], ...] = ((16, 3, 2, 2), (32, 3, 1, 2), (64, 3, 1, 2))
    embedding_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        if not self.blocks:
            raise ValueError("backbone needs at least one conv block")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        for block in self.blocks:
            if len(block) != 4 or min(block) < 1:
                raise ValueError(f"bad block {block}; expected positive (out, kernel, stride, pool)")

    def to_dict(self) -> dict:
        return {"blocks": [list(b) for b in self.blocks], "embedding_dim": self.embedding_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(blocks=tuple(tuple(b) for b in d["blocks"]), embedding_dim=d["embedding_dim"])


@dataclass
class ModelParams:
    config: BackboneConfig
    n_classes: int
    n_aux_classes: int
    params: dict[str, np.ndarray]
    groups: dict[str, list[str]]
    frozen: dict[str, bool] = field(default_factory=lambda: {g: False for g in GROUPS})
    seed: int = 0

    def group_of(self, name: str) -> str:
        for g, names in self.groups.items():
            if name in names:
                return g
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(cfg: BackboneConfig, n_classes: int = 2, seed: int = 0, n_aux_classes: int = 2) -> ModelParams:
    """Kaiming-uniform weights, zero biases, deterministic in ``seed``.

    ``n_aux_classes`` sizes the angular-margin class weights (bonafide plus one
    class per fake generator).
    """
    if n_classes < 2 or n_aux_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    groups: dict[str, list[str]] = {g: [] for g in GROUPS}

    def put(group, name, value):
        params[name] = value
        groups[group].append(name)

    cin = 1
    for i, (cout, k, _, _) in enumerate(cfg.blocks):
        put("backbone", f"conv{i}.weight", _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
        put("backbone", f"conv{i}.bias", np.zeros(cout))
        cin = cout
    put("backbone", "embed.weight", _kaiming_uniform(rng, (cin, cfg.embedding_dim), cin))
    put("backbone", "embed.bias", np.zeros(cfg.embedding_dim))

    sizes = (cfg.embedding_dim, *HEAD_HIDDEN, n_classes)
    for i in range(3):
        put("head", f"fc{i + 1}.weight", _kaiming_uniform(rng, (sizes[i], sizes[i + 1]), sizes[i]))
        put("head", f"fc{i + 1}.bias", np.zeros(sizes[i + 1]))

    put("asoftmax", "asoftmax.weight", _kaiming_uniform(rng, (n_aux_classes, cfg.embedding_dim), cfg.embedding_dim))
    put("centers", "centers.bonafide", np.zeros((1, cfg.embedding_dim)))
    return ModelParams(cfg, n_classes, n_aux_classes, params, groups, seed=seed)


def set_frozen(model: ModelParams, group: str, frozen: bool) -> ModelParams:
    """Return a shallow copy of ``model`` with ``group``'s freeze flag set."""
    if group not in model.groups:
        raise UnknownGroup(f"unknown parameter group {group!r}; expected one of {GROUPS}")
    out = copy.copy(model)
    out.frozen = dict(model.frozen)
    out.frozen[group] = bool(frozen)
    return out


def bind(model: ModelParams, trainable: set[str] | None = None) -> dict[str, ad.Tensor]:
    """Wrap parameters as leaf tensors.

    A parameter requires grad when its group is not frozen and, if given, is
    listed in ``trainable`` (a set of group names). Centers never require grad.
    """
    out = {}
    for group, names in model.groups.items():
        live = not model.frozen[group] and group != "centers"
        if trainable is not None:
            live = live and group in trainable
        for name in names:
            out[name] = ad.Tensor(model.params[name], requires_grad=live, name=name)
    return out


def _dense(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    y = ad.matmul(x, w)
    return ad.add(y, ad.expand(b, 0, y.shape[0]))


def forward_embedding(model: ModelParams, batch, tensors: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
    """Spectrogram batch (B, bands, frames) -> embeddings (B, embedding_dim)."""
    if tensors is None:
        tensors = bind(model)
    batch = ad.as_tensor(batch)
    if batch.data.ndim != 3:
        raise ShapeMismatch(f"expected a (B, bands, frames) batch, got shape {batch.shape}")
    # channels-last throughout: (B, bands, frames, C)
    h = ad.reshape(batch, (*batch.shape, 1))
    for i, (_, k, stride, pool) in enumerate(model.config.blocks):
        h = ad.conv2d(h, tensors[f"conv{i}.weight"], tensors[f"conv{i}.bias"], stride=stride,
                      padding=k // 2, layout="NHWC")
        # max-pool commutes with relu; pooling first makes relu 4x cheaper
        if pool > 1:
            h = ad.maxpool2d(h, pool, layout="NHWC")
        h = ad.relu(h)
    h = ad.global_avg_pool(h, layout="NHWC")
    return _dense(h, tensors["embed.weight"], tensors["embed.bias"])


def head_logits(model: ModelParams, emb: ad.Tensor, tensors: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
    """Three dense layers, relu after the first two, raw logits out."""
    if tensors is None:
        tensors = bind(model)
    emb = ad.as_tensor(emb)
    if emb.data.ndim != 2 or emb.shape[1] != model.embedding_dim:
        raise ShapeMismatch(f"head expects (B, {model.embedding_dim}) embeddings, got {emb.shape}")
    h = ad.relu(_dense(emb, tensors["fc1.weight"], tensors["fc1.bias"]))
    h = ad.relu(_dense(h, tensors["fc2.weight"], tensors["fc2.bias"]))
    return _dense(h, tensors["fc3.weight"], tensors["fc3.bias"])


def embed_all(model: ModelParams, features: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Inference-only embeddings for a stack of spectrograms."""
    tensors = bind(model, trainable=set())
    out = [forward_embedding(model, features[i : i + batch_size], tensors).data
           for i in range(0, len(features), batch_size)]
    return np.concatenate(out, axis=0)


def fake_probability(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def predict_scores(model: ModelParams, features: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """P(fake) per clip."""
    tensors = bind(model, trainable=set())
    emb = embed_all(model, features, batch_size)
    return fake_probability(head_logits(model, ad.Tensor(emb), tensors).data)


# checkpoints -------------------------------------------------------------------


def save_checkpoint(model: ModelParams) -> bytes:
    """Serialize to the ESDDCKPT format (little-endian, CRC32 trailer)."""
    for name, value in model.params.items():
        if not np.all(np.isfinite(value)):
            raise NonFiniteValue(f"parameter {name} is not finite")
    meta = {
        "config": model.config.to_dict(),
        "n_classes": model.n_classes,
        "n_aux_classes": model.n_aux_classes,
        "groups": model.groups,
        "frozen": model.frozen,
        "seed": model.seed,
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(meta_blob)), meta_blob]
    parts.append(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        value = np.ascontiguousarray(model.params[name], dtype="<f8")
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def load_checkpoint(data: bytes) -> ModelParams:
    if len(data) < 8 + 2 + 4 + 4 or data[:8] != CKPT_MAGIC:
        raise CorruptCheckpoint("bad magic or truncated header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("CRC32 mismatch (truncated or corrupted)")
    try:
        pos = 8
        (version,) = struct.unpack_from("<H", body, pos)
        pos += 2
        if version != CKPT_VERSION:
            raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos : pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + name_len].decode()
            pos += name_len
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 8 * n > len(body):
                raise CorruptCheckpoint(f"record {name} truncated")
            params[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
        if pos != len(body):
            raise CorruptCheckpoint("trailing bytes after last record")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CorruptCheckpoint(f"unreadable checkpoint: {exc}") from exc

    model = ModelParams(
        config=BackboneConfig.from_dict(meta["config"]),
        n_classes=meta["n_classes"],
        n_aux_classes=meta["n_aux_classes"],
        params=params,
        groups={g: list(v) for g, v in meta["groups"].items()},
        frozen={g: bool(v) for g, v in meta["frozen"].items()},
        seed=meta["seed"],
    )
    _check_consistency(model)
    return model


def _check_consistency(model: ModelParams) -> None:
    listed = {n for names in model.groups.values() for n in names}
    if listed != set(model.params):
        raise CorruptCheckpoint("group listing does not match stored records")
    head_out = model.params.get("fc3.weight")
    if head_out is None or head_out.shape[1] != model.n_classes:
        raise CorruptCheckpoint(
            f"declared n_classes={model.n_classes} but head output shape is "
            f"{None if head_out is None else head_out.shape}"
        )
    aux = model.params.get("asoftmax.weight")
    if aux is None or aux.shape != (model.n_aux_classes, model.embedding_dim):
        raise CorruptCheckpoint("angular-margin weights inconsistent with declared classes")
    if model.params["fc1.weight"].shape[0] != model.embedding_dim:
        raise CorruptCheckpoint("head input size does not match embedding_dim")
