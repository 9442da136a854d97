"""
Per-task binary masks over image tokens and FFN weights.

Each maskable entry owns a pair of logits ``(active, isolated)``. Training
draws a relaxed value in (0, 1) with the two-way Gumbel-softmax; inference
keeps the argmax. Logits are stored directly and initialised
Uniform(-gamma, gamma).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, FormatError
from .vit import LayerMaskView, ViTConfig, _Reader

MASK_MAGIC = b"MEATMSK1"
MASK_VERSION = 1

# default hyper-parameters (init range, drop-control weight and target, temperature)
DEFAULT_GAMMA = 4.0
DEFAULT_ALPHA = 2.0
DEFAULT_LAMBDA = 0.9
DEFAULT_TAU = 1.0

ACTIVE, ISOLATED = 0, 1

_TINY = np.finfo(np.float64).tiny


class GumbelSampler:
    """Seeded stream of standard Gumbel noise, ``-log(-log(u))``.

    ``pinned`` replaces every draw with a constant (a test hook).
    """

    def __init__(self, seed=0, pinned: Optional[float] = None):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.pinned = pinned

    def sample(self, shape) -> np.ndarray:
        if self.pinned is not None:
            return np.full(shape, float(self.pinned))
        u = self.rng.random(shape)
        u = np.clip(u, _TINY, 1.0 - 1e-16)
        return -np.log(-np.log(u))


def _check_tau(tau: float) -> None:
    if not tau > 0.0:
        raise ConfigError(f"temperature tau must be > 0, got {tau}", key="meat.tau")


def relaxed_from_logits(logits: Tensor, tau: float, noise: np.ndarray) -> Tensor:
    """Active-component of ``softmax((logits + noise) / tau)`` over the last axis."""
    _check_tau(tau)
    perturbed = ag.scale(ag.add(logits, Tensor(noise)), 1.0 / tau)
    return ag.softmax_row(perturbed)[..., ACTIVE]


def sample_relaxed_mask(logits, tau: float, sampler: GumbelSampler) -> Tensor:
    """Draw one relaxed mask value (or an array of them) from ``[..., 2]`` logits.

    The noise is a constant of the sample, so the result is differentiable
    with respect to ``logits``.
    """
    _check_tau(tau)
    logits = ag.as_tensor(logits)
    if logits.shape[-1] != 2:
        raise ContractError(f"mask logits need a trailing axis of 2, got {logits.shape}")
    return relaxed_from_logits(logits, tau, sampler.sample(logits.shape))


def binarize_logits(logits: np.ndarray) -> np.ndarray:
    """1 where the active logit wins; ties go to active."""
    logits = np.asarray(logits)
    return logits[..., ACTIVE] >= logits[..., ISOLATED]


@dataclass
class MaskParams:
    """Trainable mask logits for every layer of one task."""

    config: ViTConfig
    token_logits: List[Tensor]
    ffn1_logits: List[Tensor]
    ffn2_logits: List[Tensor]
    tau: float = DEFAULT_TAU
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        _check_tau(self.tau)

    def tensors(self) -> List[Tensor]:
        return [*self.token_logits, *self.ffn1_logits, *self.ffn2_logits]

    def relaxed(self, sampler: GumbelSampler, tau: Optional[float] = None,
                token_masks: bool = True, ffn_masks: bool = True) -> List[LayerMaskView]:
        """One fresh relaxed draw per mask entry, shared by the whole batch.

        Disabled mask kinds are replaced by constant ones (and draw no noise).
        """
        tau = self.tau if tau is None else tau
        cfg = self.config
        views = []
        for l in range(cfg.layers):
            tok = (sample_relaxed_mask(self.token_logits[l], tau, sampler)
                   if token_masks else np.ones(cfg.num_tokens))
            if ffn_masks:
                f1 = sample_relaxed_mask(self.ffn1_logits[l], tau, sampler)
                f2 = sample_relaxed_mask(self.ffn2_logits[l], tau, sampler)
            else:
                f1 = np.ones((cfg.embed_dim, cfg.ffn_hidden))
                f2 = np.ones((cfg.ffn_hidden, cfg.embed_dim))
            views.append(LayerMaskView(tok, f1, f2))
        return views


def init_mask_params(config: ViTConfig, gamma: float = DEFAULT_GAMMA, seed=0,
                     tau: float = DEFAULT_TAU) -> MaskParams:
    """Every logit i.i.d. Uniform(-gamma, gamma) from one seeded stream.

    Draw order: for each layer, token logits then FFN1 then FFN2.
    """
    if not gamma > 0.0:
        raise ConfigError(f"gamma must be > 0, got {gamma}", key="meat.gamma")
    rng = np.random.default_rng(seed)
    n, d, h = config.num_tokens, config.embed_dim, config.ffn_hidden
    tok, f1, f2 = [], [], []
    for l in range(config.layers):
        tok.append(Tensor(rng.uniform(-gamma, gamma, (n, 2)), requires_grad=True,
                          name=f"mask.{l}.token"))
        f1.append(Tensor(rng.uniform(-gamma, gamma, (d, h, 2)), requires_grad=True,
                         name=f"mask.{l}.ffn1"))
        f2.append(Tensor(rng.uniform(-gamma, gamma, (h, d, 2)), requires_grad=True,
                         name=f"mask.{l}.ffn2"))
    return MaskParams(config, tok, f1, f2, tau=tau, gamma=gamma)


def drop_control_loss(relaxed_token_masks: Sequence, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """Mean over layers of ``(lam - mean_i m_l^i)^2``."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}", key="meat.lambda")
    if len(relaxed_token_masks) == 0:
        raise ContractError("drop_control_loss needs at least one layer")
    terms = [ag.square(ag.sub(lam, ag.mean(ag.as_tensor(m)))) for m in relaxed_token_masks]
    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    return ag.scale(total, 1.0 / len(terms))


def total_loss(logits: Tensor, labels, relaxed_token_masks: Sequence,
               alpha: float = DEFAULT_ALPHA, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """Cross-entropy plus ``alpha`` times the drop-control term."""
    if alpha < 0.0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}", key="meat.alpha")
    ce = ag.cross_entropy(logits, labels)
    if alpha == 0.0:
        return ce
    return ag.add(ce, ag.scale(drop_control_loss(relaxed_token_masks, lam), alpha))


# ---------------------------------------------------------------- binarised masks


@dataclass
class TaskMaskSet:
    """Binary masks and classifier head for one task; the unit of storage."""

    task_id: int
    config: ViTConfig
    token_bits: List[np.ndarray]
    ffn1_bits: List[np.ndarray]
    ffn2_bits: List[np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    seed: int = 0
    epochs: int = 0

    def __post_init__(self):
        cfg = self.config
        n, d, h = cfg.num_tokens, cfg.embed_dim, cfg.ffn_hidden
        if not (len(self.token_bits) == len(self.ffn1_bits) == len(self.ffn2_bits) == cfg.layers):
            raise ContractError("mask set must cover every layer")
        for l in range(cfg.layers):
            self.token_bits[l] = np.asarray(self.token_bits[l], dtype=bool).reshape(n)
            self.ffn1_bits[l] = np.asarray(self.ffn1_bits[l], dtype=bool).reshape(d, h)
            self.ffn2_bits[l] = np.asarray(self.ffn2_bits[l], dtype=bool).reshape(h, d)
        self.head_weight = np.asarray(self.head_weight, dtype=np.float64)
        self.head_bias = np.asarray(self.head_bias, dtype=np.float64)
        if self.head_weight.ndim != 2 or self.head_weight.shape[0] != d:
            raise ContractError(f"head weight must be [{d}, C], got {self.head_weight.shape}")
        if self.head_bias.shape != (self.head_weight.shape[1],):
            raise ContractError("head bias must have one entry per class")

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[1]

    def views(self) -> List[LayerMaskView]:
        return [LayerMaskView(t.astype(np.float64), a.astype(np.float64), b.astype(np.float64))
                for t, a, b in zip(self.token_bits, self.ffn1_bits, self.ffn2_bits)]

    def head(self):
        return (Tensor(self.head_weight), Tensor(self.head_bias))

    def activation_ratios(self) -> Dict[str, List[float]]:
        """Per-layer fraction of active bits for tokens, FFN1 and FFN2."""
        return {
            "token": [float(b.mean()) for b in self.token_bits],
            "ffn1": [float(b.mean()) for b in self.ffn1_bits],
            "ffn2": [float(b.mean()) for b in self.ffn2_bits],
        }


def binarize(params: MaskParams, task_id: int, head, seed: int = 0,
             epochs: int = 0) -> TaskMaskSet:
    """Argmax each logit pair and freeze the result with a copy of ``head``."""
    weight, bias = head
    return TaskMaskSet(
        task_id=task_id,
        config=params.config,
        token_bits=[binarize_logits(t.data) for t in params.token_logits],
        ffn1_bits=[binarize_logits(t.data) for t in params.ffn1_logits],
        ffn2_bits=[binarize_logits(t.data) for t in params.ffn2_logits],
        head_weight=np.array(getattr(weight, "data", weight), dtype=np.float64),
        head_bias=np.array(getattr(bias, "data", bias), dtype=np.float64),
        seed=seed,
        epochs=epochs,
    )


# ---------------------------------------------------------------- MEATMSK1 format
#
# Layout (little-endian):
#   magic "MEATMSK1" | u8 version | u32 task_id | 32-byte config digest |
#   u64 seed | u32 epochs | u16 layers | u32 n | u32 d | u32 d' | u32 classes |
#   per layer: token bits, ffn1 bits, ffn2 bits (each packed LSB-first, padded
#   to a whole byte with zero bits) | head weight f64 [d, C] | head bias f64 [C]

_HEADER = struct.Struct("<8sBI32sQIHIIII")
HEADER_BYTES = _HEADER.size


def _packed_len(bits: int) -> int:
    return (bits + 7) // 8


def _pack(bits: np.ndarray) -> bytes:
    return np.packbits(bits.reshape(-1).astype(np.uint8), bitorder="little").tobytes()


def _unpack(chunk: bytes, count: int, field: str, offset: int) -> np.ndarray:
    arr = np.unpackbits(np.frombuffer(chunk, dtype=np.uint8), bitorder="little")
    if arr[count:].any():
        raise FormatError("non-zero padding bits", field=field, offset=offset)
    return arr[:count].astype(bool)


def serialize_masks(mask_set: TaskMaskSet) -> bytes:
    cfg = mask_set.config
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MASK_MAGIC, MASK_VERSION, mask_set.task_id, cfg.digest(),
                           mask_set.seed, mask_set.epochs, cfg.layers, cfg.num_tokens,
                           cfg.embed_dim, cfg.ffn_hidden, mask_set.num_classes))
    for l in range(cfg.layers):
        buf.write(_pack(mask_set.token_bits[l]))
        buf.write(_pack(mask_set.ffn1_bits[l]))
        buf.write(_pack(mask_set.ffn2_bits[l]))
    buf.write(np.ascontiguousarray(mask_set.head_weight, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(mask_set.head_bias, dtype="<f8").tobytes())
    return buf.getvalue()


def read_mask_header(raw: bytes) -> dict:
    if len(raw) < 8 or raw[:8] != MASK_MAGIC:
        raise FormatError("bad mask-file magic", field="magic", offset=0)
    if len(raw) < HEADER_BYTES:
        raise FormatError("truncated header", field="header", offset=len(raw))
    (_, version, task_id, digest, seed, epochs, layers, n, d, h, classes) = \
        _HEADER.unpack(raw[:HEADER_BYTES])
    if version != MASK_VERSION:
        raise FormatError(f"unsupported mask-file version {version}", field="version", offset=8)
    return dict(task_id=task_id, digest=digest, seed=seed, epochs=epochs, layers=layers,
                num_tokens=n, embed_dim=d, ffn_hidden=h, num_classes=classes)


def deserialize_masks(raw: bytes, config: ViTConfig) -> TaskMaskSet:
    """Decode a mask file for the backbone described by ``config``.

    Raises :class:`FormatError` on a bad magic, a digest that does not match
    ``config``, truncation, or trailing bytes. Nothing is returned on error.
    """
    head = read_mask_header(raw)
    if head["digest"] != config.digest():
        raise FormatError("config digest mismatch: masks belong to a different backbone",
                          field="config_digest", offset=13)
    dims = (head["layers"], head["num_tokens"], head["embed_dim"], head["ffn_hidden"])
    if dims != (config.layers, config.num_tokens, config.embed_dim, config.ffn_hidden):
        raise FormatError("dimension header disagrees with config", field="dims", offset=57)
    n, d, h, c = config.num_tokens, config.embed_dim, config.ffn_hidden, head["num_classes"]
    if c < 1:
        raise FormatError("mask file declares zero classes", field="classes", offset=HEADER_BYTES - 4)
    r = _Reader(raw)
    r.pos = HEADER_BYTES
    tok, f1, f2 = [], [], []
    for l in range(config.layers):
        for dest, count, kind in ((tok, n, "token"), (f1, d * h, "ffn1"), (f2, h * d, "ffn2")):
            offset = r.pos
            chunk = r.take(_packed_len(count), f"layer{l}.{kind}")
            dest.append(_unpack(chunk, count, f"layer{l}.{kind}", offset))
    weight = np.frombuffer(r.take(8 * d * c, "head.weight"), dtype="<f8").reshape(d, c)
    bias = np.frombuffer(r.take(8 * c, "head.bias"), dtype="<f8")
    if r.pos != len(raw):
        raise FormatError("trailing bytes after head", field="eof", offset=r.pos)
    return TaskMaskSet(head["task_id"], config, tok, f1, f2,
                       weight.astype(np.float64), bias.astype(np.float64),
                       seed=head["seed"], epochs=head["epochs"])


def save_masks(mask_set: TaskMaskSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_masks(mask_set))


def load_masks(path, config: ViTConfig) -> TaskMaskSet:
    with open(path, "rb") as fh:
        return deserialize_masks(fh.read(), config)


# ---------------------------------------------------------------- overhead accounting


@dataclass
class OverheadReport:
    num_tasks: int
    backbone_bytes: int
    mask_bits_per_task: int
    mask_payload_bytes_per_task: int
    head_bytes: List[int] = field(default_factory=list)
    mask_file_bytes: List[int] = field(default_factory=list)

    @property
    def meat_total_bytes(self) -> int:
        """Backbone plus every task's mask file."""
        return self.backbone_bytes + sum(self.mask_file_bytes)

    @property
    def classifier_total_bytes(self) -> int:
        return self.backbone_bytes + sum(self.head_bytes)

    @property
    def individual_total_bytes(self) -> int:
        return (1 + self.num_tasks) * self.backbone_bytes + sum(self.head_bytes)

    @property
    def meat_multiplier(self) -> float:
        return self.meat_total_bytes / self.classifier_total_bytes

    @property
    def individual_multiplier(self) -> float:
        return self.individual_total_bytes / self.classifier_total_bytes

    def as_dict(self) -> dict:
        return {
            "num_tasks": self.num_tasks,
            "backbone_bytes": self.backbone_bytes,
            "mask_bits_per_task": self.mask_bits_per_task,
            "mask_payload_bytes_per_task": self.mask_payload_bytes_per_task,
            "head_bytes": list(self.head_bytes),
            "mask_file_bytes": list(self.mask_file_bytes),
            "meat_total_bytes": self.meat_total_bytes,
            "classifier_total_bytes": self.classifier_total_bytes,
            "individual_total_bytes": self.individual_total_bytes,
            "meat_multiplier": self.meat_multiplier,
            "individual_multiplier": self.individual_multiplier,
        }


def backbone_param_count(config: ViTConfig) -> int:
    d, h, n, c = config.embed_dim, config.ffn_hidden, config.num_tokens, config.patch_dim
    per_layer = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    return c * d + d + d + (n + 1) * d + config.layers * per_layer + 2 * d


def overhead_report(config: ViTConfig, num_tasks: int,
                    classes_per_task: Optional[Sequence[int]] = None) -> OverheadReport:
    """Predicted storage for ``num_tasks`` new tasks on top of one backbone.

    ``classes_per_task`` sizes the heads (default 10 classes each). Mask file
    sizes are exact predictions of :func:`serialize_masks` output.
    """
    if classes_per_task is None:
        classes_per_task = [10] * num_tasks
    if len(classes_per_task) != num_tasks:
        raise ContractError("classes_per_task must list one entry per task")
    n, d, h, L = config.num_tokens, config.embed_dim, config.ffn_hidden, config.layers
    bits = L * (n + d * h + h * d)
    payload = L * (_packed_len(n) + 2 * _packed_len(d * h))
    heads = [8 * (d * c + c) for c in classes_per_task]
    files = [HEADER_BYTES + payload + hb for hb in heads]
    return OverheadReport(
        num_tasks=num_tasks,
        backbone_bytes=8 * backbone_param_count(config),
        mask_bits_per_task=bits if num_tasks else 0,
        mask_payload_bytes_per_task=payload if num_tasks else 0,
        head_bytes=heads,
        mask_file_bytes=files,
    )

