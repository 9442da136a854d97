"""
Experiment plan files (YAML).

Key set::

    model.{image_size, patch_size, channels, embed_dim, heads, layers, ffn_hidden}
    meat.{gamma, alpha, lambda, tau, tau_final, token_masks, ffn_masks}
    train.{epochs, batch_size, optimizer, n_train, n_test, seeds, orders, methods,
           classifier_base_lr, mask_base_lr, backbone_base_lr}
    tasks[].{id, seed, kind, num_classes, palette, rotation, noise, family_seed,
             dataset, test_dataset, epochs, batch_size, n_train, n_test,
             classifier_base_lr, mask_base_lr, backbone_base_lr}

The task with ``id: 0`` is the base task. ``train.*`` values are defaults that
individual tasks may override. ``meat.*`` defaults to gamma 4, alpha 2,
lambda 0.9, tau 1.
"""

from __future__ import annotations

import os
from typing import Any, Optional

import yaml

from .continual import ExperimentPlan, MeatHyper, TaskSpec
from .data import TaskFamily
from .errors import ConfigError
from .meat import DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_LAMBDA, DEFAULT_TAU
from .vit import ViTConfig

REQUIRED_MODEL_KEYS = ("image_size", "patch_size", "embed_dim", "heads", "layers", "ffn_hidden")
REQUIRED_TRAIN_KEYS = ("epochs", "batch_size")


class _LineDict(dict):
    """Mapping that remembers the source line of each key (1-based)."""

    line: Optional[int] = None
    key_lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    mapping = _LineDict(loader.construct_mapping(node, deep=True))
    mapping.line = node.start_mark.line + 1
    mapping.key_lines = {k.value: k.start_mark.line + 1 for k, _ in node.value
                         if isinstance(k, yaml.ScalarNode)}
    return mapping


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _section(doc: dict, name: str, required: bool = True) -> dict:
    if name not in doc:
        if required:
            raise ConfigError(f"missing config key '{name}'", key=name, line=getattr(doc, "line", None))
        return _LineDict()
    value = doc[name]
    if not isinstance(value, dict):
        raise ConfigError(f"'{name}' must be a mapping", key=name, line=_line(doc, name))
    return value


def _line(mapping, key) -> Optional[int]:
    lines = getattr(mapping, "key_lines", None) or {}
    return lines.get(key, getattr(mapping, "line", None))


def _get(mapping: dict, key: str, path: str, kind, default: Any = ...):
    if key not in mapping:
        if default is ...:
            raise ConfigError(f"missing config key '{path}'", key=path, line=getattr(mapping, "line", None))
        return default
    value = mapping[key]
    if value is None and default is not ... and default is None:
        return None
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int and (isinstance(value, bool) or float(value) != int(value)):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{path}' has invalid value {value!r}",
                          key=path, line=_line(mapping, key)) from None


def parse_plan(doc: Any, base_dir: str = ".") -> ExperimentPlan:
    if not isinstance(doc, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    model_doc = _section(doc, "model")
    model_kwargs = {k: _get(model_doc, k, f"model.{k}", int) for k in REQUIRED_MODEL_KEYS}
    model_kwargs["channels"] = _get(model_doc, "channels", "model.channels", int, 3)
    try:
        model = ViTConfig(**model_kwargs)
    except ConfigError as exc:
        exc.line = exc.line or _line(model_doc, (exc.key or "").split(".")[-1])
        raise

    meat_doc = _section(doc, "meat", required=False)
    meat = MeatHyper(
        gamma=_get(meat_doc, "gamma", "meat.gamma", float, DEFAULT_GAMMA),
        alpha=_get(meat_doc, "alpha", "meat.alpha", float, DEFAULT_ALPHA),
        lam=_get(meat_doc, "lambda", "meat.lambda", float, DEFAULT_LAMBDA),
        tau=_get(meat_doc, "tau", "meat.tau", float, DEFAULT_TAU),
        tau_final=_get(meat_doc, "tau_final", "meat.tau_final", float, None),
        token_masks=_get(meat_doc, "token_masks", "meat.token_masks", bool, True),
        ffn_masks=_get(meat_doc, "ffn_masks", "meat.ffn_masks", bool, True),
    )
    if not meat.gamma > 0:
        raise ConfigError("meat.gamma must be > 0", key="meat.gamma", line=_line(meat_doc, "gamma"))
    if not meat.tau > 0 or (meat.tau_final is not None and not meat.tau_final > 0):
        raise ConfigError("meat.tau must be > 0", key="meat.tau", line=_line(meat_doc, "tau"))
    if not 0.0 <= meat.lam <= 1.0:
        raise ConfigError("meat.lambda must lie in [0, 1]", key="meat.lambda",
                          line=_line(meat_doc, "lambda"))
    if meat.alpha < 0:
        raise ConfigError("meat.alpha must be >= 0", key="meat.alpha", line=_line(meat_doc, "alpha"))

    train = _section(doc, "train")
    defaults = {
        "epochs": _get(train, "epochs", "train.epochs", int),
        "batch_size": _get(train, "batch_size", "train.batch_size", int),
        "n_train": _get(train, "n_train", "train.n_train", int, 500),
        "n_test": _get(train, "n_test", "train.n_test", int, 200),
        "classifier_base_lr": _get(train, "classifier_base_lr", "train.classifier_base_lr", float, 5e-4),
        "mask_base_lr": _get(train, "mask_base_lr", "train.mask_base_lr", float, 0.1),
        "backbone_base_lr": _get(train, "backbone_base_lr", "train.backbone_base_lr", float, 1e-2),
    }
    seeds = train.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("train.seeds must be a list of integers", key="train.seeds",
                          line=_line(train, "seeds"))
    methods = train.get("methods", ["meat"])
    if isinstance(methods, str):
        methods = [methods]
    orders = train.get("orders", [])
    if not isinstance(orders, list) or not all(isinstance(o, list) for o in orders):
        raise ConfigError("train.orders must be a list of task-id lists", key="train.orders",
                          line=_line(train, "orders"))

    tasks_doc = doc.get("tasks")
    if tasks_doc is None:
        raise ConfigError("missing config key 'tasks'", key="tasks", line=getattr(doc, "line", None))
    if not isinstance(tasks_doc, list) or not tasks_doc:
        raise ConfigError("'tasks' must be a non-empty list", key="tasks", line=_line(doc, "tasks"))
    specs = [_parse_task(t, i, defaults, model, base_dir) for i, t in enumerate(tasks_doc)]
    bases = [s for s in specs if s.task_id == 0]
    if len(bases) != 1:
        raise ConfigError("exactly one task must have id 0 (the base task)", key="tasks[].id",
                          line=_line(doc, "tasks"))
    try:
        return ExperimentPlan(
            model=model,
            base=bases[0],
            tasks=[s for s in specs if s.task_id != 0],
            orders=[[int(x) for x in o] for o in orders],
            seeds=list(seeds),
            methods=list(methods),
            meat=meat,
            optimizer=_get(train, "optimizer", "train.optimizer", str, "adam"),
        )
    except ConfigError as exc:
        if exc.key and exc.key.startswith("train."):
            exc.line = exc.line or _line(train, exc.key.split(".", 1)[1])
        raise


def _parse_task(doc, index: int, defaults: dict, model: ViTConfig, base_dir: str) -> TaskSpec:
    path = f"tasks[{index}]"
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must be a mapping", key=path)
    task_id = _get(doc, "id", f"{path}.id", int)
    seed = _get(doc, "seed", f"{path}.seed", int)
    common = {k: _get(doc, k, f"{path}.{k}", type(v), v) for k, v in defaults.items()}
    dataset = doc.get("dataset")
    try:
        if dataset is not None:
            test = doc.get("test_dataset")
            if test is None:
                raise ConfigError(f"missing config key '{path}.test_dataset'",
                                  key=f"{path}.test_dataset", line=doc.line)
            classes = _get(doc, "num_classes", f"{path}.num_classes", int)
            return TaskSpec(task_id=task_id, dataset_path=os.path.join(base_dir, dataset),
                            test_path=os.path.join(base_dir, test), num_classes=classes,
                            seed=seed, **common)
        kind = _get(doc, "kind", f"{path}.kind", str)
        classes = _get(doc, "num_classes", f"{path}.num_classes", int)
        family = TaskFamily(
            kind=kind,
            num_classes=classes,
            palette=_get(doc, "palette", f"{path}.palette", str, "gray"),
            rotation=_get(doc, "rotation", f"{path}.rotation", float, 0.0),
            noise=_get(doc, "noise", f"{path}.noise", float, 0.05),
            seed=_get(doc, "family_seed", f"{path}.family_seed", int, seed),
            image_size=model.image_size,
            channels=model.channels,
        )
        return TaskSpec(task_id=task_id, family=family, num_classes=classes, seed=seed, **common)
    except ConfigError as exc:
        if exc.key and exc.key.startswith("tasks[]."):
            field = exc.key.split(".", 1)[1]
            exc.key = f"{path}.{field}"
            exc.line = exc.line or _line(doc, field)
        raise


def load_plan(path: str) -> ExperimentPlan:
    """Read and validate a plan file; errors carry key and line where possible."""
    try:
        with open(path) as fh:
            doc = yaml.load(fh, Loader=_Loader)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"YAML parse error: {exc.problem}",
                          line=mark.line + 1 if mark else None) from None
    return parse_plan(doc, os.path.dirname(os.path.abspath(path)))
