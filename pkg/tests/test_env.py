import math

import pytest
from hypothesis import given, strategies as st

from treecredit.env import (
    ConfigError,
    Record,
    Task,
    TaskConfig,
    deserialize_history,
    dump_tasks,
    evaluate,
    evaluate_sequence,
    generate_task,
    load_tasks,
    serialize_history,
    task_from_json,
    task_to_json,
    token_f1,
)


def scan_gold(records, slot):
    gold = None
    for r in records:
        if r.slot == slot and not r.is_noise:
            gold = r.value
    return gold


task_configs = st.builds(
    TaskConfig,
    n_slots=st.integers(1, 6),
    n_values=st.integers(2, 6),
    history_len=st.integers(1, 30),
    noise_fraction=st.floats(0.0, 0.9),
    update_rate=st.floats(0.0, 1.0),
)


def test_single_record_history_forces_the_answer():
    cfg = TaskConfig(n_slots=1, n_values=2, history_len=1, noise_fraction=0.0, update_rate=1.0)
    task = generate_task(7, cfg)
    assert len(task.history) == 1 and not task.history[0].is_noise
    assert task.gold_answer == task.history[0].value


def test_gold_is_last_fact_for_query_slot():
    cfg = TaskConfig(n_slots=2, n_values=4, history_len=20, noise_fraction=0.5, update_rate=0.5)
    task = generate_task(0, cfg)
    assert task.gold_answer == scan_gold(task.history, task.query_slot)


def test_same_seed_same_bytes():
    cfg = TaskConfig()
    assert task_to_json(generate_task(3, cfg)) == task_to_json(generate_task(3, cfg))


def test_thousand_regenerations_identical():
    cfg = TaskConfig()
    ref = task_to_json(generate_task(11, cfg))
    assert all(task_to_json(generate_task(11, cfg)) == ref for _ in range(1000))


@given(task_configs, st.integers(0, 2**31))
def test_generated_tasks_satisfy_invariants(cfg, seed):
    task = generate_task(seed, cfg)
    facts = [r for r in task.history if not r.is_noise]
    assert len(task.history) == cfg.history_len
    assert len(facts) >= math.ceil(cfg.history_len * (1 - cfg.noise_fraction))
    assert all(0 <= r.slot < cfg.n_slots and 0 <= r.value < cfg.n_values for r in task.history)
    times = [r.time for r in task.history]
    assert all(a < b for a, b in zip(times, times[1:]))
    assert any(r.slot == task.query_slot for r in facts)
    assert task.gold_answer == scan_gold(task.history, task.query_slot)
    assert evaluate(task.gold_answer, task) == 1.0
    assert task.history_token_len == len(serialize_history(task))


def test_slots_get_updated_over_time():
    cfg = TaskConfig(n_slots=2, n_values=4, history_len=30, noise_fraction=0.0, update_rate=1.0)
    task = generate_task(5, cfg)
    values = {}
    for r in task.history:
        values.setdefault(r.slot, []).append(r.value)
    # with update_rate 1 every rewrite switches value
    for seq in values.values():
        assert all(a != b for a, b in zip(seq, seq[1:]))
    assert max(len(v) for v in values.values()) > 1


def test_update_rate_zero_restates_values():
    cfg = TaskConfig(n_slots=3, n_values=4, history_len=30, noise_fraction=0.0, update_rate=0.0)
    task = generate_task(5, cfg)
    first = {}
    for r in task.history:
        assert first.setdefault(r.slot, r.value) == r.value


def test_noise_records_carry_wrong_values():
    cfg = TaskConfig(n_slots=4, n_values=4, history_len=30, noise_fraction=0.5, update_rate=0.5)
    task = generate_task(2, cfg)
    current = {}
    for r in task.history:
        if r.is_noise and current:
            assert r.slot in current and r.value != current[r.slot]
        if not r.is_noise:
            current[r.slot] = r.value


@pytest.mark.parametrize(
    "kwargs, key",
    [
        (dict(n_slots=0), "n_slots"),
        (dict(n_values=1), "n_values"),
        (dict(history_len=0), "history_len"),
        (dict(noise_fraction=1.0), "noise_fraction"),
        (dict(update_rate=1.5), "update_rate"),
    ],
)
def test_invalid_configs_rejected(kwargs, key):
    with pytest.raises(ConfigError) as info:
        generate_task(0, TaskConfig(**kwargs))
    assert info.value.key == key


def test_serialization_lengths():
    cfg = TaskConfig(n_slots=3, n_values=3, history_len=5, noise_fraction=0.4, update_rate=0.5)
    assert len(serialize_history(generate_task(1, cfg))) == 15
    one = Task((Record(0, 1, 0, False),), 0, 1, 3, 2, 2)
    assert len(serialize_history(one)) == 3


def test_token_layout():
    task = Task((Record(1, 2, 0, False), Record(0, 0, 1, True)), 1, 2, 6, n_slots=2, n_values=3)
    # slots 0-1, values 2-4, FACT 5, NOISE 6
    assert serialize_history(task) == [1, 4, 5, 0, 2, 6]


@given(task_configs, st.integers(0, 10**6))
def test_round_trip(cfg, seed):
    task = generate_task(seed, cfg)
    back = deserialize_history(serialize_history(task), cfg.n_slots, cfg.n_values)
    assert [(r.slot, r.value, r.is_noise) for r in back] == [(r.slot, r.value, r.is_noise) for r in task.history]


def test_deserialize_rejects_garbage():
    with pytest.raises(ValueError):
        deserialize_history([0, 1], 2, 2)
    with pytest.raises(ValueError):
        deserialize_history([0, 0, 0], 2, 2)


def test_evaluate_examples():
    task = generate_task(4, TaskConfig())
    gold = task.gold_answer
    assert evaluate(gold, task) == 1.0
    assert evaluate((gold + 1) % task.n_values, task) == 0.0
    assert evaluate(999, task) == 0.0
    assert evaluate(-1, task) == 0.0


def test_token_f1_metric():
    assert token_f1([1, 2], [1, 2]) == 1.0
    assert token_f1([1, 3], [1, 2]) == pytest.approx(0.5)
    assert token_f1([3], [1]) == 0.0
    task = generate_task(4, TaskConfig())
    assert evaluate_sequence([task.gold_answer], task, "token_f1") == 1.0
    assert evaluate_sequence([], task) == 0.0
    with pytest.raises(ConfigError):
        evaluate_sequence([0], task, "bleu")


def test_jsonl_dump_and_load(tmp_path):
    cfg = TaskConfig()
    tasks = [generate_task(s, cfg) for s in range(5)]
    path = tmp_path / "tasks.jsonl"
    dump_tasks(tasks, path)
    assert load_tasks(path) == tasks
    assert task_from_json(task_to_json(tasks[0])) == tasks[0]
