"""Experiment configs: a YAML file with a fixed schema.

Every scientific knob has to be written out; only bookkeeping keys have
defaults.  Errors carry the file and line of the offending key.

    name: slot_recall
    task:   {n_slots, n_values, history_len, noise_fraction, update_rate}
    train:  {G, J, K, eps_norm, eps_clip, lambda_len, learning_rate,
             updates_per_rollout, reward_scheme, task_weight, seeds,
             [momentum], [tie_params], [responder_max_len], [answer_metric]}
    policy: {init, prior_strength, skip_margin}
    run:    {steps, eval_cadence, eval_tasks, output_dir,
             [eval_seed], [checkpoint_every], [stop_at]}

Bracketed keys are optional.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import yaml

from .env import ConfigError, TaskConfig
from .optim import TrainConfig

REQUIRED = object()

INT, FLOAT, STR, BOOL, INT_LIST, OPT_FLOAT = "int", "float", "str", "bool", "list[int]", "float|null"

SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "task": {
        "n_slots": (INT, REQUIRED),
        "n_values": (INT, REQUIRED),
        "history_len": (INT, REQUIRED),
        "noise_fraction": (FLOAT, REQUIRED),
        "update_rate": (FLOAT, REQUIRED),
    },
    "train": {
        "G": (INT, REQUIRED),
        "J": (INT, REQUIRED),
        "K": (INT, REQUIRED),
        "eps_norm": (FLOAT, REQUIRED),
        "eps_clip": (FLOAT, REQUIRED),
        "lambda_len": (FLOAT, REQUIRED),
        "learning_rate": (FLOAT, REQUIRED),
        "updates_per_rollout": (INT, REQUIRED),
        "reward_scheme": (STR, REQUIRED),
        "task_weight": (FLOAT, REQUIRED),
        "seeds": (INT_LIST, REQUIRED),
        "momentum": (FLOAT, 0.0),
        "tie_params": (BOOL, False),
        "responder_max_len": (INT, 1),
        "answer_metric": (STR, "exact"),
    },
    "policy": {
        "init": (STR, REQUIRED),
        "prior_strength": (FLOAT, REQUIRED),
        "skip_margin": (FLOAT, REQUIRED),
    },
    "run": {
        "steps": (INT, REQUIRED),
        "eval_cadence": (INT, REQUIRED),
        "eval_tasks": (INT, REQUIRED),
        "output_dir": (STR, REQUIRED),
        "eval_seed": (INT, 1_000_000),
        "checkpoint_every": (INT, 0),
        "stop_at": (OPT_FLOAT, None),
    },
}

POLICY_INITS = ("prior", "prior_writers", "zero")


@dataclass(frozen=True)
class PolicyInit:
    init: str = "prior"
    prior_strength: float = 12.0
    skip_margin: float = 1.0

    def validate(self) -> None:
        if self.init not in POLICY_INITS:
            raise ConfigError(f"policy init must be one of {POLICY_INITS}, got {self.init!r}", key="init")
        if self.prior_strength < 0:
            raise ConfigError("prior_strength must be >= 0", key="prior_strength")


@dataclass(frozen=True)
class RunSettings:
    steps: int
    eval_cadence: int
    eval_tasks: int
    output_dir: str
    eval_seed: int = 1_000_000
    checkpoint_every: int = 0
    stop_at: float | None = None

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0", key="steps")
        if self.eval_cadence < 1:
            raise ConfigError("eval_cadence must be >= 1", key="eval_cadence")
        if self.eval_tasks < 1:
            raise ConfigError("eval_tasks must be >= 1", key="eval_tasks")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0 (0 = final checkpoint only)", key="checkpoint_every")
        if self.stop_at is not None and not 0.0 < self.stop_at <= 1.0:
            raise ConfigError("stop_at must lie in (0, 1]", key="stop_at")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    task: TaskConfig
    train: TrainConfig
    policy: PolicyInit
    run: RunSettings
    source: str = "<memory>"
    lines: dict | None = None

    def validate(self) -> None:
        for section in ("task", "train", "policy", "run"):
            try:
                getattr(self, section).validate()
            except ConfigError as err:
                raise self._located(err, section) from None
        if not self.train.seeds:
            raise self._located(ConfigError("seeds must list at least one seed", key="seeds"), "train")
        if self.train.answer_metric not in ("exact", "token_f1"):
            raise self._located(ConfigError("answer_metric must be exact or token_f1", key="answer_metric"), "train")
        if self.train.responder_max_len < 1:
            raise self._located(ConfigError("responder_max_len must be >= 1", key="responder_max_len"), "train")
        if "/" in self.name or not self.name:
            raise self._located(ConfigError("name must be a non-empty single path component", key="name"), None)

    def _located(self, err: ConfigError, section: str | None) -> ConfigError:
        path = err.key if section is None or err.key is None else f"{section}.{err.key}"
        line = (self.lines or {}).get(path) or (self.lines or {}).get(section)
        where = f"{self.source}:{line}" if line else self.source
        return ConfigError(f"{where}: {path or section}: {err}", key=err.key)

    def training_dict(self) -> dict:
        """Everything that influences training, excluding seeds and bookkeeping."""
        train = asdict(self.train)
        train["reward_scheme"] = self.train.reward_scheme.value
        train.pop("seeds")
        return {"task": asdict(self.task), "train": train, "policy": asdict(self.policy)}

    def seed_hash(self, seed: int) -> str:
        blob = json.dumps({**self.training_dict(), "seed": seed}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, section: str, **changes) -> "ExperimentConfig":
        return replace(self, **{section: replace(getattr(self, section), **changes)})

    def to_dict(self) -> dict:
        out = {"name": self.name, **self.training_dict(), "run": asdict(self.run)}
        out["train"]["seeds"] = list(self.train.seeds)
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _line_map(node, prefix="", out=None) -> dict[str, int]:
    """Dotted key path -> 1-based line, rejecting duplicate keys."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for key_node, value_node in node.value:
            key = key_node.value
            path = f"{prefix}.{key}" if prefix else key
            if key in seen:
                raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate key {path!r}")
            seen.add(key)
            out[path] = key_node.start_mark.line + 1
            _line_map(value_node, path, out)
    return out


def _coerce(kind: str, value, where: str):
    if kind == INT and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind in (FLOAT, OPT_FLOAT) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind == OPT_FLOAT and value is None:
        return None
    if kind == STR and isinstance(value, str):
        return value
    if kind == BOOL and isinstance(value, bool):
        return value
    if kind == INT_LIST and isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        return tuple(value)
    raise ConfigError(f"{where}: expected {kind}, got {value!r}")


def parse_config(text: str, source: str = "<memory>") -> ExperimentConfig:
    try:
        lines = _line_map(yaml.compose(text))
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as err:
        mark = err.problem_mark
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: YAML syntax error: {err.problem}") from None
    except ConfigError as err:
        raise ConfigError(f"{source}: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")

    def at(path):
        line = lines.get(path)
        return f"{source}:{line}" if line else source

    for key in raw:
        if key != "name" and key not in SCHEMA:
            raise ConfigError(f"{at(key)}: unknown section {key!r}")
    if "name" not in raw:
        raise ConfigError(f"{source}: missing required key 'name'")
    if not isinstance(raw["name"], str):
        raise ConfigError(f"{at('name')}: name must be a string")

    sections = {}
    for section, schema in SCHEMA.items():
        body = raw.get(section)
        if body is None:
            raise ConfigError(f"{source}: missing required section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{at(section)}: section {section!r} must be a mapping")
        for key in body:
            if key not in schema:
                raise ConfigError(f"{at(section + '.' + key)}: unknown key {section}.{key}")
        values = {}
        for key, (kind, default) in schema.items():
            path = f"{section}.{key}"
            if key not in body:
                if default is REQUIRED:
                    raise ConfigError(f"{at(section)}: missing required key {path}")
                values[key] = default
            else:
                values[key] = _coerce(kind, body[key], f"{at(path)}: {path}")
        sections[section] = values

    try:
        train = TrainConfig(**sections["train"])
    except ConfigError as err:
        raise ConfigError(f"{at('train.' + (err.key or ''))}: train.{err.key}: {err}") from None
    cfg = ExperimentConfig(
        name=raw["name"],
        task=TaskConfig(**sections["task"]),
        train=train,
        policy=PolicyInit(**sections["policy"]),
        run=RunSettings(**sections["run"]),
        source=source,
        lines=lines,
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config ({err.strerror})") from None
    return parse_config(text, str(path))
