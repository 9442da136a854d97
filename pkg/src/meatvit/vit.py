"""
A small pre-norm Vision Transformer whose attention and FFN blocks take
per-task masks as forward-pass inputs.

Token masks act on attention *keys*: an isolated image token is still a
query and still flows through the residual and FFN paths, but no token
attends to it. The class token is always an active key. FFN masks multiply
``W1`` and ``W2`` elementwise; biases are never masked.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, fields
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, FormatError, ShapeError, UnknownTaskError

CHECKPOINT_MAGIC = b"MEATVIT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    heads: int = 4
    layers: int = 4
    ffn_hidden: int = 128

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"model.{f.name} must be a positive integer, got {value!r}",
                                  key=f"model.{f.name}")
        if self.embed_dim % self.heads:
            raise ConfigError("model.embed_dim must be divisible by model.heads", key="model.heads")
        if self.image_size % self.patch_size:
            raise ConfigError("model.image_size must be divisible by model.patch_size",
                              key="model.patch_size")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        """Number of image tokens ``n`` (the class token is extra)."""
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def to_bytes(self) -> bytes:
        return struct.pack("<7I", *(getattr(self, f.name) for f in fields(self)))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ViTConfig":
        return cls(*struct.unpack("<7I", raw))

    def digest(self) -> bytes:
        """SHA-256 of the packed config block; binds mask files to an architecture."""
        return hashlib.sha256(CHECKPOINT_MAGIC + self.to_bytes()).digest()


@dataclass
class LayerMaskView:
    """Masks one encoder layer sees during a forward pass.

    ``token_weights`` has length ``n`` and excludes the class token. Values may
    be relaxed (in ``[0, 1]``) or binary; either numpy arrays or tensors.
    """

    token_weights: Union[Tensor, np.ndarray]
    ffn1_mask: Union[Tensor, np.ndarray]
    ffn2_mask: Union[Tensor, np.ndarray]


def all_ones_masks(config: ViTConfig) -> List[LayerMaskView]:
    n, d, h = config.num_tokens, config.embed_dim, config.ffn_hidden
    return [LayerMaskView(np.ones(n), np.ones((d, h)), np.ones((h, d)))
            for _ in range(config.layers)]


def patchify(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, n, C*p*p]``; tokens in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    expected = (config.channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ConfigError(f"image shape {images.shape[1:]} does not match config {expected}",
                          key="model.image_size")
    b, c = images.shape[:2]
    g, p = config.grid, config.patch_size
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * p * p)


def _layer_names(l: int) -> List[str]:
    pre = f"layers.{l}."
    return [pre + s for s in (
        "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
        "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.gain", "ln2.bias",
        "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")]


class ViTModel:
    """Backbone parameters plus a map of task-id -> classifier head.

    ``params`` holds the backbone only; heads live in ``heads`` as
    ``(weight [d, C], bias [C])`` tensor pairs and do not count toward the
    backbone checksum.
    """

    def __init__(self, config: ViTConfig, params: Optional[Dict[str, Tensor]] = None):
        self.config = config
        self.params: Dict[str, Tensor] = params if params is not None else {}
        self.heads: Dict[int, Tuple[Tensor, Tensor]] = {}
        self.frozen = False

    # ------------------------------------------------------------ construction

    @classmethod
    def init(cls, config: ViTConfig, seed: int) -> "ViTModel":
        rng = np.random.default_rng(seed)
        d, h, n = config.embed_dim, config.ffn_hidden, config.num_tokens

        def trunc_normal(*shape, std=0.02):
            return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)

        def linear(fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        p: Dict[str, np.ndarray] = {
            "patch.weight": linear(config.patch_dim, d),
            "patch.bias": np.zeros(d),
            "cls_token": trunc_normal(1, d),
            "pos_embed": trunc_normal(n + 1, d),
        }
        for l in range(config.layers):
            pre = f"layers.{l}."
            p[pre + "ln1.gain"] = np.ones(d)
            p[pre + "ln1.bias"] = np.zeros(d)
            for w in ("q", "k", "v", "o"):
                p[pre + f"attn.w{w}"] = linear(d, d)
                p[pre + f"attn.b{w}"] = np.zeros(d)
            p[pre + "ln2.gain"] = np.ones(d)
            p[pre + "ln2.bias"] = np.zeros(d)
            p[pre + "ffn.w1"] = linear(d, h)
            p[pre + "ffn.b1"] = np.zeros(h)
            p[pre + "ffn.w2"] = linear(h, d)
            p[pre + "ffn.b2"] = np.zeros(d)
        p["norm.gain"] = np.ones(d)
        p["norm.bias"] = np.zeros(d)
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
        return cls(config, params)

    @staticmethod
    def param_names(config: ViTConfig) -> List[str]:
        names = ["patch.weight", "patch.bias", "cls_token", "pos_embed"]
        for l in range(config.layers):
            names += _layer_names(l)
        return names + ["norm.gain", "norm.bias"]

    def add_head(self, task_id: int, num_classes: int, seed: int) -> Tuple[Tensor, Tensor]:
        """Register a fresh linear head ``d -> num_classes`` for ``task_id``."""
        if num_classes < 1:
            raise ConfigError("num_classes must be >= 1", key="tasks[].num_classes")
        head = new_head(self.config.embed_dim, num_classes, seed)
        self.heads[task_id] = head
        return head

    def backbone_parameters(self) -> List[Tensor]:
        return [self.params[k] for k in self.param_names(self.config)]

    def freeze(self) -> str:
        """Stop gradient tracking on the backbone and return its checksum."""
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self.checksum()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.param_names(self.config):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f8").tobytes())
        return h.hexdigest()

    def backbone_bytes(self) -> int:
        return 8 * sum(t.size for t in self.backbone_parameters())

    # ------------------------------------------------------------ blocks

    def patch_embed(self, images: np.ndarray) -> Tensor:
        """``[B, C, H, W]`` (or a single ``[C, H, W]``) -> ``[B, n+1, d]``."""
        patches = Tensor(patchify(images, self.config))
        p = self.params
        tokens = ag.matmul(patches, p["patch.weight"]) + p["patch.bias"]
        b = patches.shape[0]
        cls = ag.broadcast_to(ag.reshape(p["cls_token"], (1, 1, self.config.embed_dim)),
                              (b, 1, self.config.embed_dim))
        return ag.concat([cls, tokens], axis=1) + p["pos_embed"]

    def mhsa_forward(self, x: Tensor, layer: int, token_weights=None,
                     return_attention: bool = False):
        """Multi-head self-attention with key-side token weights shared by all heads.

        ``x`` is ``[B, n+1, d]``. ``token_weights`` has length ``n``; ``None``
        gives plain softmax attention. With ``return_attention`` the attention
        probabilities ``[B, H, n+1, n+1]`` are returned as well.
        """
        cfg = self.config
        n, heads, dk = cfg.num_tokens, cfg.heads, cfg.head_dim
        pre = f"layers.{layer}.attn."
        p = self.params
        b, t, d = x.shape

        def split(z):
            return ag.transpose(ag.reshape(z, (b, t, heads, dk)), (0, 2, 1, 3))

        q = split(ag.matmul(x, p[pre + "wq"]) + p[pre + "bq"])
        k = split(ag.matmul(x, p[pre + "wk"]) + p[pre + "bk"])
        v = split(ag.matmul(x, p[pre + "wv"]) + p[pre + "bv"])
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
        if token_weights is None:
            attn = ag.softmax_row(scores)
        else:
            token_weights = ag.as_tensor(token_weights)
            if token_weights.shape != (n,):
                raise ContractError(f"token_weights must have shape ({n},), got {token_weights.shape}")
            key_weights = ag.concat([Tensor(np.ones(1)), token_weights], axis=0)
            attn = ag.masked_softmax_row(scores, key_weights)
        heads_out = ag.matmul(attn, v)
        merged = ag.reshape(ag.transpose(heads_out, (0, 2, 1, 3)), (b, t, d))
        out = ag.matmul(merged, p[pre + "wo"]) + p[pre + "bo"]
        if return_attention:
            return out, attn
        return out

    def ffn_forward(self, x: Tensor, layer: int, w1_mask=None, w2_mask=None) -> Tensor:
        """``gelu(x (m1*W1) + b1) (m2*W2) + b2``; ``None`` masks mean unmasked."""
        pre = f"layers.{layer}.ffn."
        p = self.params
        w1, w2 = p[pre + "w1"], p[pre + "w2"]
        if w1_mask is not None:
            w1_mask = ag.as_tensor(w1_mask)
            if w1_mask.shape != w1.shape:
                raise ContractError(f"w1_mask shape {w1_mask.shape} != W1 shape {w1.shape}")
            w1 = ag.mul(w1_mask, w1)
        if w2_mask is not None:
            w2_mask = ag.as_tensor(w2_mask)
            if w2_mask.shape != w2.shape:
                raise ContractError(f"w2_mask shape {w2_mask.shape} != W2 shape {w2.shape}")
            w2 = ag.mul(w2_mask, w2)
        hidden = ag.gelu(ag.matmul(x, w1) + p[pre + "b1"])
        return ag.matmul(hidden, w2) + p[pre + "b2"]

    def encode(self, images: np.ndarray, masks: Optional[Sequence[LayerMaskView]] = None) -> Tensor:
        """Class-token feature ``[B, d]`` after the full encoder and final norm."""
        cfg = self.config
        if masks is None:
            masks = all_ones_masks(cfg)
        if len(masks) != cfg.layers:
            raise ContractError(f"masks cover {len(masks)} layers, model has {cfg.layers}")
        p = self.params
        x = self.patch_embed(images)
        for l, view in enumerate(masks):
            if view is None:
                raise ContractError(f"missing mask for layer {l}")
            pre = f"layers.{l}."
            h = ag.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            x = x + self.mhsa_forward(h, l, view.token_weights)
            h = ag.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            x = x + self.ffn_forward(h, l, view.ffn1_mask, view.ffn2_mask)
        x = ag.layer_norm(x, p["norm.gain"], p["norm.bias"])
        return x[:, 0, :]

    def forward(self, images: np.ndarray, task_id: int,
                masks: Optional[Sequence[LayerMaskView]] = None,
                head: Optional[Tuple[Tensor, Tensor]] = None) -> Tensor:
        """Logits ``[B, C_task]`` for ``task_id``.

        ``masks=None`` is the standard all-ones interaction pattern (always the
        case for task 0). ``head`` overrides the registered head.
        """
        if head is None:
            if task_id not in self.heads:
                raise UnknownTaskError(f"no classifier head registered for task {task_id}")
            head = self.heads[task_id]
        feature = self.encode(images, masks)
        return apply_head(feature, head)


def new_head(embed_dim: int, num_classes: int, seed: int) -> Tuple[Tensor, Tensor]:
    rng = np.random.default_rng(seed)
    w = np.clip(rng.normal(0.0, 0.02, size=(embed_dim, num_classes)), -0.04, 0.04)
    return (Tensor(w, requires_grad=True, name="head.weight"),
            Tensor(np.zeros(num_classes), requires_grad=True, name="head.bias"))


def apply_head(feature: Tensor, head: Tuple[Tensor, Tensor]) -> Tensor:
    weight, bias = head
    if feature.shape[-1] != weight.shape[0]:
        raise ShapeError(f"feature {feature.shape} does not fit head {weight.shape}")
    return ag.matmul(feature, weight) + bias


# ---------------------------------------------------------------- checkpoint I/O
#
# Layout (little-endian):
#   magic "MEATVIT1" | u8 version | config block (7 x u32) | u32 tensor count |
#   per tensor: u16 name length, utf-8 name, u8 ndim, ndim x u32 dims, f64 data
# Heads are stored as "head.<task>.weight" / "head.<task>.bias".


def _write_tensor(buf: io.BytesIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", array.ndim))
    buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
    buf.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def serialize_model(model: ViTModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    buf.write(model.config.to_bytes())
    entries: List[Tuple[str, np.ndarray]] = [
        (name, model.params[name].data) for name in ViTModel.param_names(model.config)]
    for task_id in sorted(model.heads):
        w, b = model.heads[task_id]
        entries.append((f"head.{task_id}.weight", w.data))
        entries.append((f"head.{task_id}.bias", b.data))
    buf.write(struct.pack("<I", len(entries)))
    for name, array in entries:
        _write_tensor(buf, name, array)
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, count: int, field: str) -> bytes:
        if self.pos + count > len(self.raw):
            raise FormatError("truncated file", field=field, offset=self.pos)
        chunk = self.raw[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def deserialize_model(raw: bytes) -> ViTModel:
    r = _Reader(raw)
    if r.take(8, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", field="magic", offset=0)
    (version,) = r.unpack("<B", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", field="version", offset=8)
    cfg_offset = r.pos
    try:
        config = ViTConfig.from_bytes(r.take(28, "config"))
    except ConfigError as exc:
        raise FormatError(f"invalid config block: {exc}", field="config", offset=cfg_offset) from exc
    (count,) = r.unpack("<I", "tensor_count")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name_length")
        name = r.take(name_len, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name}.ndim")
        shape = r.unpack(f"<{ndim}I", f"{name}.shape")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * size, f"{name}.data"), dtype="<f8")
        arrays[name] = data.astype(np.float64).reshape(shape)
    if r.pos != len(raw):
        raise FormatError("trailing bytes after last tensor", field="eof", offset=r.pos)

    expected = ViTModel.param_names(config)
    missing = [k for k in expected if k not in arrays]
    if missing:
        raise FormatError(f"checkpoint is missing tensors {missing[:3]}", field=missing[0])
    model = ViTModel(config, {k: Tensor(arrays[k], name=k) for k in expected})
    model.frozen = True
    for name in arrays:
        if name.startswith("head.") and name.endswith(".weight"):
            task_id = int(name.split(".")[1])
            bias_name = f"head.{task_id}.bias"
            if bias_name not in arrays:
                raise FormatError("head weight without bias", field=bias_name)
            model.heads[task_id] = (Tensor(arrays[name], name="head.weight"),
                                    Tensor(arrays[bias_name], name="head.bias"))
        elif name not in expected and not name.startswith("head."):
            raise FormatError(f"unexpected tensor {name!r}", field=name)
    return model


def save_model(model: ViTModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path) -> ViTModel:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
