import numpy as np
import pytest
from hypothesis import settings

from treecredit.env import Task, TaskConfig
from treecredit.policy import PolicyParams, Role, SampledSequence, role_specs
from treecredit.rollout import RolloutTree, TreeNode

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def small_cfg():
    return TaskConfig(n_slots=3, n_values=3, history_len=6, noise_fraction=0.5, update_rate=0.5)


def random_policies(rng, specs, scale=1.0):
    return {r: PolicyParams(r, rng.normal(0.0, scale, (s.feature_dim, s.n_out)), s) for r, s in specs.items()}


def hand_tree(rewards, memory_lens, history_len, eos=None):
    """A scored tree with given leaf rewards (G, J, K) and builder memory lengths.

    Node actions are placeholders; only shapes, rewards and lengths matter.
    """
    rewards = np.asarray(rewards, dtype=float)
    G, J, K = rewards.shape
    task = Task(history=(), query_slot=0, gold_answer=0, history_token_len=history_len, n_slots=1, n_values=2)
    builders = []
    for i in range(G):
        mem = tuple([0] * memory_lens[i])
        b = TreeNode(Role.BUILDER, (i,), (), SampledSequence(mem, (0.0,) * len(mem)))
        for j in range(J):
            s = TreeNode(Role.SUMMARIZER, (i, j), mem, SampledSequence((), ()), parent=b)
            b.children.append(s)
            for k in range(K):
                r = TreeNode(Role.RESPONDER, (i, j, k), (0,) + mem, SampledSequence((0,), (0.0,)), parent=s)
                r.leaf_reward = float(rewards[i, j, k])
                s.children.append(r)
        builders.append(b)
    return RolloutTree(task, builders, (G, J, K), 0)


@pytest.fixture
def specs_3x3():
    return role_specs(3, 3)


# Acceptance verdicts, echoed in the terminal summary so they survive output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
