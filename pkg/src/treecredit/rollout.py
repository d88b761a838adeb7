"""Tree-structured rollouts of the builder -> summarizer -> responder pipeline.

For one task the builder draws ``G`` memories; each memory is summarized ``J``
times; each (memory, summary) pair is answered ``K`` times.  Every node draws
from its own generator seeded by ``(root_seed, level, i, j, k)`` so results do
not depend on the order in which branches are expanded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .env import ConfigError, Task, evaluate_sequence, serialize_history
from .policy import Context, PolicyParams, Role, SampledSequence, sample

Policies = Mapping[Role, PolicyParams]


@dataclass(eq=False)
class TreeNode:
    level: Role
    index: tuple[int, ...]
    context: tuple[int, ...]
    action: SampledSequence
    children: list["TreeNode"] = field(default_factory=list)
    parent: "TreeNode | None" = field(default=None, repr=False)
    leaf_reward: float | None = None
    ends_with_eos: bool = False

    @property
    def memory(self) -> tuple[int, ...]:
        """Emitted tokens with a trailing EOS removed."""
        return self.action.tokens[:-1] if self.ends_with_eos else self.action.tokens


@dataclass(eq=False)
class RolloutTree:
    task: Task
    builder_nodes: list[TreeNode]
    branching: tuple[int, int, int]
    root_seed: int

    def nodes(self):
        for b in self.builder_nodes:
            yield b
            for s in b.children:
                yield s
                yield from s.children

    def leaves(self):
        for b in self.builder_nodes:
            for s in b.children:
                yield from s.children

    def rewards(self) -> np.ndarray:
        G, J, K = self.branching
        out = np.empty((G, J, K))
        for leaf in self.leaves():
            if leaf.leaf_reward is None:
                raise ValueError(f"leaf {leaf.index} has not been scored")
            out[leaf.index] = leaf.leaf_reward
        return out


@dataclass(frozen=True)
class Trajectory:
    builder_action: SampledSequence
    summarizer_action: SampledSequence
    responder_action: SampledSequence
    indices: tuple[int, int, int]
    contexts: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]
    builder_memory: tuple[int, ...]
    summarizer_memory: tuple[int, ...]
    reward: float | None = None

    def action(self, role: Role) -> SampledSequence:
        return (self.builder_action, self.summarizer_action, self.responder_action)[role - 1]

    def context(self, role: Role) -> Context:
        return Context(role, self.contexts[role - 1])


def node_rng(root_seed: int, level: int, i: int, j: int = 0, k: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([root_seed, level, i, j, k]))


def _new_node(policies: Policies, role: Role, ctx: tuple[int, ...], index, seed: int, max_len: int, greedy: bool):
    params = policies[role]
    action = sample(params, Context(role, ctx), node_rng(seed, int(role), *index), max_len, greedy=greedy)
    eos = params.spec.eos
    ends = eos is not None and len(action.tokens) > 0 and action.tokens[-1] == eos
    return TreeNode(role, tuple(index), ctx, action, ends_with_eos=ends)


def expand(
    policies: Policies,
    task: Task,
    branching: tuple[int, int, int],
    seed: int,
    greedy: bool = False,
    responder_max_len: int = 1,
    builder_max_len: int | None = None,
) -> RolloutTree:
    """Build the tree without the training-time ``G >= 2`` check.

    ``branching=(1, 1, 1)`` is plain pipeline inference.  The builder may write
    up to ``|H|`` tokens unless ``builder_max_len`` is smaller.
    """
    G, J, K = branching
    if min(G, J, K) < 1:
        raise ConfigError(f"branching factors must be >= 1, got {branching}")
    if task.history_token_len <= 0:
        raise ConfigError("empty history")
    history = tuple(serialize_history(task))
    q = task.query_token
    b_len = task.history_token_len if builder_max_len is None else min(builder_max_len, task.history_token_len)
    builders = []
    for i in range(G):
        b = _new_node(policies, Role.BUILDER, history, (i,), seed, b_len, greedy)
        a1 = b.memory
        for j in range(J):
            s = _new_node(policies, Role.SUMMARIZER, a1, (i, j), seed, max(1, len(a1)), greedy)
            s.parent = b
            b.children.append(s)
            resp_ctx = (q,) + a1 + s.memory
            for k in range(K):
                r = _new_node(policies, Role.RESPONDER, resp_ctx, (i, j, k), seed, responder_max_len, greedy)
                r.parent = s
                s.children.append(r)
        builders.append(b)
    return RolloutTree(task, builders, (G, J, K), seed)


def rollout_tree(
    policies: Policies,
    task: Task,
    branching: tuple[int, int, int],
    rng: np.random.Generator | int,
    responder_max_len: int = 1,
) -> RolloutTree:
    """Sample the ``G x J x K`` training tree; leaves are unscored."""
    if branching[0] < 2:
        raise ConfigError(f"group size G must be >= 2 for group normalization, got {branching[0]}")
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2**63))
    return expand(policies, task, branching, int(seed), responder_max_len=responder_max_len)


def infer(policies: Policies, task: Task, seed: int = 0, greedy: bool = True, responder_max_len: int = 1) -> Trajectory:
    """Deployment-mode pipeline: one builder, one summarizer, one responder."""
    tree = score_leaves(expand(policies, task, (1, 1, 1), seed, greedy=greedy, responder_max_len=responder_max_len))
    return enumerate_paths(tree)[0]


def score_leaves(tree: RolloutTree, metric: str = "exact") -> RolloutTree:
    """Return a copy of ``tree`` whose responder leaves carry rewards."""
    builders = []
    for b in tree.builder_nodes:
        nb = replace(b, children=[], parent=None)
        for s in b.children:
            ns = replace(s, children=[], parent=nb)
            for r in s.children:
                nr = replace(r, children=[], parent=ns)
                nr.leaf_reward = evaluate_sequence(r.action.tokens, tree.task, metric)
                ns.children.append(nr)
            nb.children.append(ns)
        builders.append(nb)
    return RolloutTree(tree.task, builders, tree.branching, tree.root_seed)


def enumerate_paths(tree: RolloutTree) -> list[Trajectory]:
    """All root-to-leaf trajectories in lexicographic ``(i, j, k)`` order."""
    out = []
    for b in tree.builder_nodes:
        for s in b.children:
            for r in s.children:
                out.append(path_through(b, s, r))
    return out


def path_through(b: TreeNode, s: TreeNode, r: TreeNode) -> Trajectory:
    return Trajectory(
        builder_action=b.action,
        summarizer_action=s.action,
        responder_action=r.action,
        indices=r.index,
        contexts=(b.context, s.context, r.context),
        builder_memory=b.memory,
        summarizer_memory=s.memory,
        reward=r.leaf_reward,
    )


def count_nodes(tree: RolloutTree) -> tuple[int, int, int]:
    nb = len(tree.builder_nodes)
    ns = sum(len(b.children) for b in tree.builder_nodes)
    nr = sum(len(s.children) for b in tree.builder_nodes for s in b.children)
    return nb, ns, nr


def tree_to_jsonl(tree: RolloutTree) -> str:
    lines = []
    for node in tree.nodes():
        idx = list(node.index) + [None] * (3 - len(node.index))
        rec = {
            "level": int(node.level),
            "i": idx[0],
            "j": idx[1],
            "k": idx[2],
            "tokens": list(node.action.tokens),
            "logprobs": list(node.action.logprobs_old),
        }
        if node.leaf_reward is not None:
            rec["reward"] = node.leaf_reward
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"
