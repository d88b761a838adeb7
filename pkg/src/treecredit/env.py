"""Synthetic slot-recall tasks and the exact-match evaluator.

A history is a list of records ``(slot, value, time, is_noise)``.  Fact records
update a slot's value (latest write wins); noise records reuse real slots but
carry the noise flag and must be ignored.  The query asks for the current
value of one slot.

Token layout of the flat shared vocabulary, for ``n_slots`` and ``n_values``::

    [0, n_slots)                      slot tokens
    [n_slots, n_slots + n_values)     value tokens
    n_slots + n_values                FACT flag
    n_slots + n_values + 1            NOISE flag

Each record serializes to exactly three tokens ``(slot, value, flag)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for parameter combinations that cannot produce a valid run.

    ``key`` names the offending config field when there is one, so callers can
    point at the line that set it.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class TaskConfig:
    n_slots: int = 8
    n_values: int = 4
    history_len: int = 20
    noise_fraction: float = 0.5
    update_rate: float = 0.5

    def validate(self) -> None:
        if self.n_slots < 1:
            raise ConfigError(f"n_slots must be >= 1, got {self.n_slots}", key="n_slots")
        if self.n_values < 2:
            raise ConfigError(f"n_values must be >= 2, got {self.n_values}", key="n_values")
        if self.history_len < 1:
            raise ConfigError(f"history_len must be >= 1, got {self.history_len}", key="history_len")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ConfigError(f"noise_fraction must lie in [0, 1), got {self.noise_fraction}", key="noise_fraction")
        if not 0.0 <= self.update_rate <= 1.0:
            raise ConfigError(f"update_rate must lie in [0, 1], got {self.update_rate}", key="update_rate")
        if n_fact_records(self) < 1:
            raise ConfigError("configuration leaves no fact record, so no gold answer exists", key="noise_fraction")

    @property
    def vocab_size(self) -> int:
        return self.n_slots + self.n_values + 2


def n_fact_records(cfg: TaskConfig) -> int:
    return math.ceil(cfg.history_len * (1.0 - cfg.noise_fraction))


@dataclass(frozen=True)
class Record:
    slot: int
    value: int
    time: int
    is_noise: bool


@dataclass(frozen=True)
class Task:
    history: tuple[Record, ...]
    query_slot: int
    gold_answer: int
    history_token_len: int
    n_slots: int
    n_values: int
    seed: int = -1

    @property
    def vocab_size(self) -> int:
        return self.n_slots + self.n_values + 2

    @property
    def query_token(self) -> int:
        return slot_token(self.query_slot)


def slot_token(slot: int) -> int:
    return slot


def value_token(value: int, n_slots: int) -> int:
    return n_slots + value


def flag_token(is_noise: bool, n_slots: int, n_values: int) -> int:
    return n_slots + n_values + int(is_noise)


def latest_fact_value(records: Iterable[Record], slot: int) -> int | None:
    answer = None
    for rec in records:
        if rec.slot == slot and not rec.is_noise:
            answer = rec.value
    return answer


def generate_task(seed: int, cfg: TaskConfig) -> Task:
    """Draw one task; a pure function of ``(seed, cfg)``.

    Exactly ``ceil(history_len * (1 - noise_fraction))`` records are facts and
    the rest are noise, at random positions.  A fact for a slot that already
    holds a value switches to a different value with probability
    ``update_rate`` and otherwise restates the current value.  A noise record
    picks a slot that already holds a fact and a value different from the
    current one (uniform slot and value if nothing has been written yet).
    The query slot is uniform over slots that received at least one fact.
    """
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A5C]))
    n_fact = n_fact_records(cfg)
    is_noise = np.ones(cfg.history_len, dtype=bool)
    is_noise[rng.choice(cfg.history_len, size=n_fact, replace=False)] = False

    gaps = rng.integers(1, 4, size=cfg.history_len)
    times = np.cumsum(gaps)
    current: dict[int, int] = {}
    records = []
    for pos in range(cfg.history_len):
        if is_noise[pos] and current:
            # distractor: a slot that already holds a fact, with a wrong value
            slot = sorted(current)[int(rng.integers(len(current)))]
            value = int(rng.integers(cfg.n_values - 1))
            value += value >= current[slot]
        elif is_noise[pos]:
            slot = int(rng.integers(cfg.n_slots))
            value = int(rng.integers(cfg.n_values))
        elif (slot := int(rng.integers(cfg.n_slots))) in current and rng.random() >= cfg.update_rate:
            value = current[slot]
        elif slot in current:
            value = int(rng.integers(cfg.n_values - 1))
            value += value >= current[slot]
        else:
            value = int(rng.integers(cfg.n_values))
        if not is_noise[pos]:
            current[slot] = value
        records.append(Record(slot, value, int(times[pos]), bool(is_noise[pos])))

    written = sorted(current)
    query_slot = written[int(rng.integers(len(written)))]
    return Task(
        history=tuple(records),
        query_slot=query_slot,
        gold_answer=current[query_slot],
        history_token_len=3 * len(records),
        n_slots=cfg.n_slots,
        n_values=cfg.n_values,
        seed=seed,
    )


def serialize_records(records: Sequence[Record], n_slots: int, n_values: int) -> list[int]:
    tokens = []
    for rec in records:
        tokens += [
            slot_token(rec.slot),
            value_token(rec.value, n_slots),
            flag_token(rec.is_noise, n_slots, n_values),
        ]
    return tokens


def serialize_history(task: Task) -> list[int]:
    """Three tokens per record: slot, value, flag."""
    return serialize_records(task.history, task.n_slots, task.n_values)


def deserialize_history(tokens: Sequence[int], n_slots: int, n_values: int) -> list[Record]:
    """Inverse of :func:`serialize_history`; times are restored as turn indices."""
    if len(tokens) % 3:
        raise ValueError(f"token count {len(tokens)} is not a multiple of 3")
    fact_flag = n_slots + n_values
    records = []
    for r in range(len(tokens) // 3):
        s, v, f = tokens[3 * r : 3 * r + 3]
        if not (0 <= s < n_slots and n_slots <= v < fact_flag and f in (fact_flag, fact_flag + 1)):
            raise ValueError(f"malformed record tokens {(s, v, f)} at record {r}")
        records.append(Record(s, v - n_slots, r, f == fact_flag + 1))
    return records


def evaluate(answer_token: int, task: Task) -> float:
    """Exact match of a single answer token; out-of-vocabulary answers score 0."""
    if not 0 <= answer_token < task.n_values:
        return 0.0
    return 1.0 if answer_token == task.gold_answer else 0.0


def token_f1(answer: Sequence[int], gold: Sequence[int]) -> float:
    """Bag-of-tokens F1 for multi-token answers."""
    if not answer or not gold:
        return float(list(answer) == list(gold))
    common = 0
    remaining = list(gold)
    for tok in answer:
        if tok in remaining:
            remaining.remove(tok)
            common += 1
    if common == 0:
        return 0.0
    precision = common / len(answer)
    recall = common / len(gold)
    return 2 * precision * recall / (precision + recall)


def evaluate_sequence(answer: Sequence[int], task: Task, metric: str = "exact") -> float:
    """Score a responder output under ``metric`` ("exact" or "token_f1")."""
    if metric == "exact":
        return evaluate(answer[0], task) if len(answer) else 0.0
    if metric == "token_f1":
        valid = [a for a in answer if 0 <= a < task.n_values]
        return token_f1(valid, [task.gold_answer]) if len(valid) == len(answer) else 0.0
    raise ConfigError(f"unknown answer metric {metric!r}")


def task_to_json(task: Task) -> str:
    return json.dumps(
        {
            "seed": task.seed,
            "n_slots": task.n_slots,
            "n_values": task.n_values,
            "records": [
                {"slot": r.slot, "value": r.value, "time": r.time, "noise": r.is_noise}
                for r in task.history
            ],
            "query_slot": task.query_slot,
            "gold_answer": task.gold_answer,
        },
        sort_keys=True,
    )


def task_from_json(line: str) -> Task:
    obj = json.loads(line)
    records = tuple(Record(r["slot"], r["value"], r["time"], bool(r["noise"])) for r in obj["records"])
    return Task(
        history=records,
        query_slot=obj["query_slot"],
        gold_answer=obj["gold_answer"],
        history_token_len=3 * len(records),
        n_slots=obj["n_slots"],
        n_values=obj["n_values"],
        seed=obj["seed"],
    )


def dump_tasks(tasks: Iterable[Task], path) -> None:
    with open(path, "w") as fh:
        for task in tasks:
            fh.write(task_to_json(task) + "\n")


def load_tasks(path) -> list[Task]:
    with open(path) as fh:
        return [task_from_json(line) for line in fh if line.strip()]


def task_config_dict(cfg: TaskConfig) -> dict:
    return asdict(cfg)
