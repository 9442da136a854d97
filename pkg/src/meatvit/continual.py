"""
Task-continual training and evaluation protocol.

A base task trains the whole backbone, which is then frozen. Every later task
trains only its own mask logits and classifier head. Two reference methods
are provided for comparison: ``classifier`` (head only, no masks) and
``individual`` (a fresh full model per task).
"""

from __future__ import annotations

import csv
import io
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, TaskFamily, batch_iter, generate_task, load_raw_dataset, resize_nearest
from .errors import ConfigError, ContractError, DivergenceError, NumericDomainError, UnknownTaskError
from .meat import (
    DEFAULT_ALPHA,
    DEFAULT_GAMMA,
    DEFAULT_LAMBDA,
    DEFAULT_TAU,
    GumbelSampler,
    TaskMaskSet,
    backbone_param_count,
    binarize,
    init_mask_params,
    overhead_report,
    serialize_masks,
    total_loss,
)
from .vit import ViTConfig, ViTModel, apply_head, new_head, save_model

logger = logging.getLogger(__name__)

METHODS = ("meat", "classifier", "individual")

# seed streams, combined as SeedSequence([run_seed, task_seed, stream, ...])
_MASK_INIT, _HEAD_INIT, _GUMBEL, _BATCHES, _MODEL_INIT = range(5)


def _seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) for p in parts])


def _int_seed(*parts: int) -> int:
    return int(_seed(*parts).generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------- specs


@dataclass
class MeatHyper:
    gamma: float = DEFAULT_GAMMA
    alpha: float = DEFAULT_ALPHA
    lam: float = DEFAULT_LAMBDA
    tau: float = DEFAULT_TAU
    tau_final: Optional[float] = None   # linear anneal target; None keeps tau constant
    token_masks: bool = True
    ffn_masks: bool = True

    def tau_at(self, step: int, total: int) -> float:
        if self.tau_final is None or total <= 1:
            return self.tau
        frac = step / (total - 1)
        return self.tau + frac * (self.tau_final - self.tau)


@dataclass
class TaskSpec:
    """One task of an experiment.

    The learning-rate fields are per-1024-sample base rates; the effective
    rate is ``batch_size / 1024 * base``.
    """

    task_id: int
    family: Optional[TaskFamily] = None
    dataset_path: Optional[str] = None
    test_path: Optional[str] = None
    num_classes: int = 10
    epochs: int = 30
    batch_size: int = 64
    n_train: int = 500
    n_test: int = 200
    seed: int = 0
    classifier_base_lr: float = 5e-4
    mask_base_lr: float = 0.1
    backbone_base_lr: float = 1e-2

    def __post_init__(self):
        for name in ("classifier_base_lr", "mask_base_lr", "backbone_base_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0", key=f"tasks[].{name}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="tasks[].epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="tasks[].batch_size")
        if self.family is None and self.dataset_path is None:
            raise ConfigError(f"task {self.task_id} needs a generator kind or a dataset path",
                              key="tasks[].kind")

    @property
    def classifier_lr(self) -> float:
        return self.batch_size / 1024 * self.classifier_base_lr

    @property
    def mask_lr(self) -> float:
        return self.batch_size / 1024 * self.mask_base_lr

    @property
    def backbone_lr(self) -> float:
        return self.batch_size / 1024 * self.backbone_base_lr

    def load(self, image_size: int) -> Tuple[Dataset, Dataset]:
        if self.family is not None:
            return generate_task(self.family, self.n_train, self.n_test)
        train = resize_nearest(load_raw_dataset(self.dataset_path, "train"), image_size)
        if self.test_path is None:
            raise ConfigError(f"task {self.task_id} has dataset_path but no test_path",
                              key="tasks[].test_path")
        test = resize_nearest(load_raw_dataset(self.test_path, "test"), image_size)
        return train, test


@dataclass
class ExperimentPlan:
    model: ViTConfig
    base: TaskSpec
    tasks: List[TaskSpec]
    orders: List[List[int]] = field(default_factory=list)
    seeds: List[int] = field(default_factory=lambda: [0])
    methods: List[str] = field(default_factory=lambda: ["meat"])
    meat: MeatHyper = field(default_factory=MeatHyper)
    optimizer: str = "adam"

    def __post_init__(self):
        ids = [self.base.task_id] + [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError("task ids must be unique", key="tasks[].id")
        if self.base.task_id != 0:
            raise ConfigError("the base task must have id 0", key="tasks[].id")
        new_ids = sorted(t.task_id for t in self.tasks)
        if not self.orders:
            self.orders = [[t.task_id for t in self.tasks]]
        for order in self.orders:
            if sorted(order) != new_ids:
                raise ConfigError(f"order {order} is not a permutation of {new_ids}",
                                  key="train.orders")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected {METHODS}", key="train.methods")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", key="train.optimizer")
        if not self.seeds:
            raise ConfigError("at least one seed is required", key="train.seeds")

    def task(self, task_id: int) -> TaskSpec:
        for t in [self.base, *self.tasks]:
            if t.task_id == task_id:
                return t
        raise UnknownTaskError(f"task {task_id} is not part of the plan")


# ---------------------------------------------------------------- optimizers


class SGD:
    """Plain gradient descent over parameter groups ``[(tensors, lr), ...]``."""

    def __init__(self, groups):
        self.groups = [(list(ts), float(lr)) for ts, lr in groups]

    def step(self) -> None:
        for tensors, lr in self.groups:
            for t in tensors:
                if t.grad is not None:
                    t.data -= lr * t.grad

    def zero_grad(self) -> None:
        for tensors, _ in self.groups:
            for t in tensors:
                t.grad = None


class Adam(SGD):
    """Adam without weight decay."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(groups)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(t): np.zeros_like(t.data) for ts, _ in self.groups for t in ts}
        self.v = {id(t): np.zeros_like(t.data) for ts, _ in self.groups for t in ts}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for tensors, lr in self.groups:
            for t in tensors:
                if t.grad is None:
                    continue
                m, v = self.m[id(t)], self.v[id(t)]
                m *= self.b1
                m += (1.0 - self.b1) * t.grad
                v *= self.b2
                v += (1.0 - self.b2) * t.grad * t.grad
                t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, groups):
    if name == "adam":
        return Adam(groups)
    if name == "sgd":
        return SGD(groups)
    raise ConfigError(f"unknown optimizer {name!r}", key="train.optimizer")


# ---------------------------------------------------------------- training


@dataclass
class TrainLog:
    epoch_losses: List[float] = field(default_factory=list)
    steps: int = 0
    mask_params: Optional[object] = None   # final MaskParams of a MEAT task


def _check_finite(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data):
        raise DivergenceError(f"non-finite loss at step {step}", step=step)


@contextmanager
def _divergence_guard(log: "TrainLog"):
    """Report overflowed parameters as divergence at the current step."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            yield
    except NumericDomainError as exc:
        raise DivergenceError(f"non-finite values at step {log.steps}: {exc}", step=log.steps) from exc


def _fit_full_model(model: ViTModel, task_id: int, spec: TaskSpec, train: Dataset,
                    run_seed: int, optimizer: str) -> TrainLog:
    params = model.backbone_parameters() + list(model.heads[task_id])
    opt = make_optimizer(optimizer, [(params, spec.backbone_lr)])
    log = TrainLog()
    with _divergence_guard(log):
        for epoch in range(spec.epochs):
            total, count = 0.0, 0
            for x, y in batch_iter(train, spec.batch_size, _seed(run_seed, spec.seed, _BATCHES, epoch)):
                loss = ag.cross_entropy(model.forward(x, task_id), y)
                _check_finite(loss, log.steps)
                opt.zero_grad()
                ag.backward(loss)
                opt.step()
                log.steps += 1
                total += float(loss.data) * len(y)
                count += len(y)
            log.epoch_losses.append(total / count)
            logger.debug("task %d epoch %d loss %.4f", task_id, epoch, log.epoch_losses[-1])
    return log


def train_base(model: ViTModel, spec: TaskSpec, train: Dataset, run_seed: int = 0,
               optimizer: str = "adam") -> Tuple[str, TrainLog]:
    """Train backbone and task-0 head with cross-entropy, then freeze.

    Returns the backbone checksum taken at freezing time and the loss log.
    """
    if model.frozen:
        raise ContractError("train_base needs a fresh, unfrozen model")
    if spec.task_id != 0:
        raise ContractError("the base task must have id 0")
    model.add_head(0, train.num_classes, _int_seed(run_seed, spec.seed, _HEAD_INIT))
    log = _fit_full_model(model, 0, spec, train, run_seed, optimizer)
    checksum = model.freeze()
    for t in model.heads[0]:
        t.requires_grad = False
        t.grad = None
    logger.info("base task trained: final loss %.4f, checksum %s", log.epoch_losses[-1], checksum[:12])
    return checksum, log


def train_task(model: ViTModel, spec: TaskSpec, train: Dataset,
               hyper: Optional[MeatHyper] = None, run_seed: int = 0,
               optimizer: str = "adam") -> Tuple[TaskMaskSet, TrainLog]:
    """Learn binary masks and a head for a new task on a frozen backbone.

    Everything random (mask init, head init, Gumbel noise, batch order) is
    drawn from streams keyed by ``(run_seed, spec.seed)`` only, so the result
    does not depend on which tasks were trained before.
    """
    hyper = hyper or MeatHyper()
    if spec.task_id == 0:
        raise ContractError("task 0 uses the standard all-ones pattern and has no masks")
    if not model.frozen:
        raise ContractError("train_task needs a frozen backbone")
    if spec.task_id in model.heads:
        raise ContractError(f"task {spec.task_id} already has a head on this model")
    cfg = model.config
    params = init_mask_params(cfg, hyper.gamma, _seed(run_seed, spec.seed, _MASK_INIT), hyper.tau)
    head = new_head(cfg.embed_dim, train.num_classes, _int_seed(run_seed, spec.seed, _HEAD_INIT))
    sampler = GumbelSampler(_seed(run_seed, spec.seed, _GUMBEL))
    mask_tensors = []
    if hyper.token_masks:
        mask_tensors += params.token_logits
    if hyper.ffn_masks:
        mask_tensors += params.ffn1_logits + params.ffn2_logits
    groups = [(list(head), spec.classifier_lr)]
    if mask_tensors:
        groups.append((mask_tensors, spec.mask_lr))
    opt = make_optimizer(optimizer, groups)

    steps_per_epoch = -(-len(train) // spec.batch_size)
    total_steps = steps_per_epoch * spec.epochs
    log = TrainLog()
    with _divergence_guard(log):
        for epoch in range(spec.epochs):
            total, count = 0.0, 0
            for x, y in batch_iter(train, spec.batch_size, _seed(run_seed, spec.seed, _BATCHES, epoch)):
                tau = hyper.tau_at(log.steps, total_steps)
                views = params.relaxed(sampler, tau, hyper.token_masks, hyper.ffn_masks)
                logits = model.forward(x, spec.task_id, views, head=head)
                alpha = hyper.alpha if hyper.token_masks else 0.0
                loss = total_loss(logits, y, [v.token_weights for v in views], alpha, hyper.lam)
                _check_finite(loss, log.steps)
                opt.zero_grad()
                ag.backward(loss)
                opt.step()
                log.steps += 1
                total += float(loss.data) * len(y)
                count += len(y)
            log.epoch_losses.append(total / count)
            logger.debug("task %d epoch %d loss %.4f", spec.task_id, epoch, log.epoch_losses[-1])
    if not hyper.token_masks:
        for t in params.token_logits:
            t.data[..., 0], t.data[..., 1] = 1.0, 0.0
    if not hyper.ffn_masks:
        for t in params.ffn1_logits + params.ffn2_logits:
            t.data[..., 0], t.data[..., 1] = 1.0, 0.0
    log.mask_params = params
    return binarize(params, spec.task_id, head, seed=spec.seed, epochs=spec.epochs), log


def train_classifier_only(model: ViTModel, spec: TaskSpec, train: Dataset, run_seed: int = 0,
                          optimizer: str = "adam") -> Tuple[Tuple[Tensor, Tensor], TrainLog]:
    """Fit only a linear head on frozen class-token features (no masks)."""
    if not model.frozen:
        raise ContractError("classifier-only training needs a frozen backbone")
    features = encode_dataset(model, train)
    head = new_head(model.config.embed_dim, train.num_classes,
                    _int_seed(run_seed, spec.seed, _HEAD_INIT))
    opt = make_optimizer(optimizer, [(list(head), spec.classifier_lr)])
    log = TrainLog()
    n = len(train)
    with _divergence_guard(log):
        for epoch in range(spec.epochs):
            total = 0.0
            order = np.random.default_rng(_seed(run_seed, spec.seed, _BATCHES, epoch)).permutation(n)
            for start in range(0, n, spec.batch_size):
                idx = order[start:start + spec.batch_size]
                loss = ag.cross_entropy(apply_head(Tensor(features[idx]), head), train.labels[idx])
                _check_finite(loss, log.steps)
                opt.zero_grad()
                ag.backward(loss)
                opt.step()
                log.steps += 1
                total += float(loss.data) * len(idx)
            log.epoch_losses.append(total / n)
    for t in head:
        t.requires_grad = False
    return head, log


def train_individual(config: ViTConfig, spec: TaskSpec, train: Dataset, run_seed: int = 0,
                     optimizer: str = "adam") -> Tuple[ViTModel, TrainLog]:
    """Train an independent full model for one task (the upper-bound reference)."""
    model = ViTModel.init(config, _int_seed(run_seed, spec.seed, _MODEL_INIT))
    model.add_head(spec.task_id, train.num_classes, _int_seed(run_seed, spec.seed, _HEAD_INIT))
    log = _fit_full_model(model, spec.task_id, spec, train, run_seed, optimizer)
    model.freeze()
    return model, log


# ---------------------------------------------------------------- evaluation


def encode_dataset(model: ViTModel, dataset: Dataset, masks=None, batch_size: int = 256) -> np.ndarray:
    feats = [model.encode(dataset.images[i:i + batch_size], masks).data
             for i in range(0, len(dataset), batch_size)]
    return np.concatenate(feats, axis=0)


def predict_logits(model: ViTModel, task_id: int, mask_store: Dict[int, TaskMaskSet],
                   dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Deterministic per-example logits with hard binary masks (no Gumbel noise).

    Task 0 uses the all-ones pattern and the model's own head; every other
    task needs an entry in ``mask_store``.
    """
    if task_id == 0:
        if 0 not in model.heads:
            raise UnknownTaskError("model has no base-task head")
        masks, head = None, model.heads[0]
    else:
        if task_id not in mask_store:
            raise UnknownTaskError(f"no mask set stored for task {task_id}")
        mask_set = mask_store[task_id]
        masks, head = mask_set.views(), mask_set.head()
    out = [model.forward(dataset.images[i:i + batch_size], task_id, masks, head=head).data
           for i in range(0, len(dataset), batch_size)]
    return np.concatenate(out, axis=0)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: ViTModel, task_id: int, mask_store: Dict[int, TaskMaskSet],
             dataset: Dataset) -> float:
    """Top-1 accuracy of ``task_id`` on ``dataset``."""
    return accuracy_from_logits(predict_logits(model, task_id, mask_store, dataset), dataset.labels)


# ---------------------------------------------------------------- experiment runner


CSV_COLUMNS = ["seed", "order", "method", "task_id", "position", "accuracy",
               "base_accuracy", "forgetting", "old_logits_identical",
               "token_activation", "ffn_activation", "stored_bytes"]
CSV_HEADER_DOC = """\
# seed                 run seed
# order                index into train.orders (-1: method is order-independent)
# method               meat | classifier | individual
# task_id              task the row describes
# position             0-based position of the task in the order
# accuracy             top-1 test accuracy of the task right after it was learned
# base_accuracy        task-0 test accuracy after this task was learned
# forgetting           base_accuracy minus task-0 accuracy right after base training
# old_logits_identical 1 if every earlier task's test logits were bit-identical after this task
# token_activation     mean active fraction of token mask bits (per layer, ';'-separated)
# ffn_activation       mean active fraction of FFN mask bits (per layer, ';'-separated)
# stored_bytes         bytes this task adds to storage (mask file, head, or full model)
"""


@dataclass
class Metrics:
    rows: List[dict] = field(default_factory=list)
    base_accuracy: Dict[int, float] = field(default_factory=dict)
    checksums: Dict[int, Tuple[str, str]] = field(default_factory=dict)
    mask_bytes: Dict[Tuple[int, int, int], bytes] = field(default_factory=dict)
    overhead: dict = field(default_factory=dict)
    measured: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        self.rows.append({c: row.get(c, "") for c in CSV_COLUMNS})

    def select(self, method: str) -> List[dict]:
        return [r for r in self.rows if r["method"] == method]

    def mean_accuracy(self, method: str, task_id: Optional[int] = None) -> float:
        accs = [r["accuracy"] for r in self.select(method)
                if task_id is None or r["task_id"] == task_id]
        return float(np.mean(accs)) if accs else float("nan")

    def per_task(self, method: str) -> Dict[int, Tuple[float, float]]:
        out = {}
        for task_id in sorted({r["task_id"] for r in self.select(method)}):
            accs = [r["accuracy"] for r in self.select(method) if r["task_id"] == task_id]
            out[task_id] = (float(np.mean(accs)), float(np.std(accs)))
        return out

    def max_forgetting(self, method: str) -> float:
        vals = [abs(r["forgetting"]) for r in self.select(method) if r["forgetting"] != ""]
        return max(vals) if vals else 0.0

    def all_logits_identical(self) -> bool:
        return all(r["old_logits_identical"] in ("", 1) for r in self.rows)

    def order_invariant(self) -> bool:
        """Each (seed, task) produced identical mask bytes under every order."""
        groups: Dict[Tuple[int, int], set] = {}
        for (seed, _order, task), raw in self.mask_bytes.items():
            groups.setdefault((seed, task), set()).add(raw)
        return all(len(v) == 1 for v in groups.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER_DOC)
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        for seed in sorted(self.base_accuracy):
            lines.append(f"seed {seed} base_accuracy {self.base_accuracy[seed]:.4f}")
            before, after = self.checksums.get(seed, ("", ""))
            lines.append(f"seed {seed} backbone_checksum_frozen {before}")
            lines.append(f"seed {seed} backbone_checksum_final {after}")
        for method in METHODS:
            rows = self.select(method)
            if not rows:
                continue
            lines.append(f"method {method} mean_accuracy {self.mean_accuracy(method):.4f}")
            for task_id, (mu, sd) in self.per_task(method).items():
                lines.append(f"method {method} task {task_id} accuracy_mean {mu:.4f} std {sd:.4f}")
            lines.append(f"method {method} max_base_forgetting {self.max_forgetting(method):.4f}")
        lines.append(f"zero_forgetting_logits {int(self.all_logits_identical())}")
        if self.mask_bytes:
            lines.append(f"order_invariant_masks {int(self.order_invariant())}")
        for k, v in self.overhead.items():
            lines.append(f"overhead {k} {_fmt(v)}")
        for k, v in self.measured.items():
            lines.append(f"measured {k} {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str) -> None:
        _atomic_write(os.path.join(out_dir, "metrics.csv"), self.to_csv().encode())
        _atomic_write(os.path.join(out_dir, "summary.txt"), self.to_text().encode())


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def prepare_data(plan: ExperimentPlan) -> Dict[int, Tuple[Dataset, Dataset]]:
    """Load every task and normalise all of them with base-task channel statistics."""
    raw = {t.task_id: t.load(plan.model.image_size) for t in [plan.base, *plan.tasks]}
    mean, std = raw[0][0].channel_stats()
    return {k: (tr.normalize(mean, std), te.normalize(mean, std)) for k, (tr, te) in raw.items()}


def init_model(plan: ExperimentPlan, seed: int) -> ViTModel:
    """Untrained backbone for run seed ``seed``; shared by the runner and the CLI."""
    return ViTModel.init(plan.model, _int_seed(seed, plan.base.seed, _MODEL_INIT))


def run_experiment(plan: ExperimentPlan, out_dir: Optional[str] = None,
                   data: Optional[Dict[int, Tuple[Dataset, Dataset]]] = None) -> Metrics:
    """Run every method of ``plan`` for every seed (and, for MEAT, every order).

    With ``out_dir`` each seed writes ``seed_<s>/model.meatvit`` and
    ``seed_<s>/masks/task_<id>.meatmsk``; ``metrics.csv`` and ``summary.txt``
    are rewritten after every task so a crash leaves partial results behind.
    """
    data = data if data is not None else prepare_data(plan)
    metrics = Metrics()
    try:
        for seed in plan.seeds:
            _run_seed(plan, seed, data, metrics, out_dir)
    finally:
        if out_dir is not None:
            metrics.write(out_dir)
    _account_storage(plan, metrics, out_dir)
    if out_dir is not None:
        metrics.write(out_dir)
    return metrics


def _run_seed(plan, seed, data, metrics, out_dir) -> None:
    cfg = plan.model
    seed_dir = None
    if out_dir is not None:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        os.makedirs(os.path.join(seed_dir, "masks"), exist_ok=True)
    model = init_model(plan, seed)
    checksum, _ = train_base(model, plan.base, data[0][0], seed, plan.optimizer)
    base_logits = predict_logits(model, 0, {}, data[0][1])
    base_acc = accuracy_from_logits(base_logits, data[0][1].labels)
    metrics.base_accuracy[seed] = base_acc
    if seed_dir is not None:
        save_model(model, os.path.join(seed_dir, "model.meatvit"))

    if "meat" in plan.methods:
        for order_idx, order in enumerate(plan.orders):
            store: Dict[int, TaskMaskSet] = {}
            reference = {0: base_logits}
            for position, task_id in enumerate(order):
                spec = plan.task(task_id)
                train, test = data[task_id]
                mask_set, _ = train_task(model, spec, train, plan.meat, seed, plan.optimizer)
                raw = serialize_masks(mask_set)
                metrics.mask_bytes[(seed, order_idx, task_id)] = raw
                store[task_id] = mask_set
                identical = all(
                    np.array_equal(predict_logits(model, old, store, data[old][1]), logits)
                    for old, logits in reference.items())
                logits = predict_logits(model, task_id, store, test)
                reference[task_id] = logits
                now_base = accuracy_from_logits(reference[0], data[0][1].labels) if identical \
                    else evaluate(model, 0, store, data[0][1])
                ratios = mask_set.activation_ratios()
                ffn = [(a + b) / 2 for a, b in zip(ratios["ffn1"], ratios["ffn2"])]
                metrics.add(seed=seed, order=order_idx, method="meat", task_id=task_id,
                            position=position, accuracy=accuracy_from_logits(logits, test.labels),
                            base_accuracy=now_base, forgetting=now_base - base_acc,
                            old_logits_identical=int(identical),
                            token_activation=ratios["token"], ffn_activation=ffn,
                            stored_bytes=len(raw))
                if seed_dir is not None and order_idx == 0:
                    _atomic_write(os.path.join(seed_dir, "masks", f"task_{task_id}.meatmsk"), raw)
                if out_dir is not None:
                    metrics.write(out_dir)
                logger.info("seed %d order %d task %d meat acc %.4f", seed, order_idx, task_id,
                            metrics.rows[-1]["accuracy"])

    if "classifier" in plan.methods:
        # head-only training never touches shared state, so one pass covers every order
        for position, task_id in enumerate(plan.orders[0]):
            spec = plan.task(task_id)
            train, test = data[task_id]
            head, _ = train_classifier_only(model, spec, train, seed, plan.optimizer)
            logits = apply_head(Tensor(encode_dataset(model, test)), head).data
            now_base = evaluate(model, 0, {}, data[0][1])
            metrics.add(seed=seed, order=-1, method="classifier", task_id=task_id,
                        position=position, accuracy=accuracy_from_logits(logits, test.labels),
                        base_accuracy=now_base, forgetting=now_base - base_acc,
                        stored_bytes=8 * (head[0].size + head[1].size))
            if out_dir is not None:
                metrics.write(out_dir)

    if "individual" in plan.methods:
        for position, task_id in enumerate(plan.orders[0]):
            spec = plan.task(task_id)
            train, test = data[task_id]
            ind, _ = train_individual(cfg, spec, train, seed, plan.optimizer)
            logits = predict_logits_head(ind, task_id, test)
            w, b = ind.heads[task_id]
            metrics.add(seed=seed, order=-1, method="individual", task_id=task_id,
                        position=position, accuracy=accuracy_from_logits(logits, test.labels),
                        base_accuracy=base_acc, forgetting=0.0,
                        stored_bytes=ind.backbone_bytes() + 8 * (w.size + b.size))
            if out_dir is not None:
                metrics.write(out_dir)

    metrics.checksums[seed] = (checksum, model.checksum())


def predict_logits_head(model: ViTModel, task_id: int, dataset: Dataset,
                        batch_size: int = 256) -> np.ndarray:
    out = [model.forward(dataset.images[i:i + batch_size], task_id).data
           for i in range(0, len(dataset), batch_size)]
    return np.concatenate(out, axis=0)


def _account_storage(plan: ExperimentPlan, metrics: Metrics, out_dir: Optional[str]) -> None:
    """Compare predicted storage with what was actually produced."""
    cfg = plan.model
    classes = [plan.task(t).num_classes for t in plan.orders[0]]
    report = overhead_report(cfg, len(plan.tasks), classes)
    metrics.overhead = report.as_dict()
    seed = plan.seeds[0]
    backbone = 8 * backbone_param_count(cfg)
    measured = {"backbone_bytes": backbone}
    if "meat" in plan.methods:
        files = [len(metrics.mask_bytes[(seed, 0, t)]) for t in plan.orders[0]]
        measured["mask_file_bytes"] = files
        measured["meat_total_bytes"] = backbone + sum(files)
        if out_dir is not None:
            on_disk = [os.path.getsize(os.path.join(out_dir, f"seed_{seed}", "masks",
                                                    f"task_{t}.meatmsk")) for t in plan.orders[0]]
            measured["mask_file_bytes_on_disk"] = on_disk
    if "individual" in plan.methods:
        ind = [r["stored_bytes"] for r in metrics.select("individual") if r["seed"] == seed]
        measured["individual_total_bytes"] = backbone + sum(ind)
    if "classifier" in plan.methods:
        heads = [r["stored_bytes"] for r in metrics.select("classifier") if r["seed"] == seed]
        measured["classifier_total_bytes"] = backbone + sum(heads)
    metrics.measured = measured
