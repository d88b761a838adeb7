"""Per-agent clipped group-relative objective, updates and reward schemes."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .credit import (
    AdvantageSet,
    TrajectoryGroup,
    assign_credit,
    builder_length_ratios,
    select_group,
    standardize,
)
from .env import ConfigError, Task, serialize_history
from .policy import PolicyDivergence, PolicyParams, Role, weighted_score
from .rollout import RolloutTree, rollout_tree, score_leaves

ROLES = (Role.BUILDER, Role.SUMMARIZER, Role.RESPONDER)


class RewardScheme(str, enum.Enum):
    TREE_CREDIT = "tree_credit"
    FINAL_ONLY = "final_only"
    TASK_SPECIFIC = "task_specific"
    COMBINED = "combined"


@dataclass(frozen=True)
class TrainConfig:
    G: int = 8
    J: int = 2
    K: int = 2
    eps_norm: float = 1e-6
    eps_clip: float = 0.2
    lambda_len: float = -1.0
    learning_rate: float = 0.5
    updates_per_rollout: int = 1
    reward_scheme: RewardScheme = RewardScheme.TREE_CREDIT
    task_weight: float = 0.5
    seeds: tuple[int, ...] = (0,)
    momentum: float = 0.0
    tie_params: bool = False
    responder_max_len: int = 1
    answer_metric: str = "exact"

    def __post_init__(self):
        try:
            scheme = RewardScheme(self.reward_scheme)
        except ValueError:
            raise ConfigError(f"unknown reward scheme {self.reward_scheme!r}", key="reward_scheme") from None
        object.__setattr__(self, "reward_scheme", scheme)
        object.__setattr__(self, "seeds", tuple(self.seeds))

    def validate(self) -> None:
        if self.G < 2:
            raise ConfigError(f"G must be >= 2, got {self.G}", key="G")
        if self.J < 1 or self.K < 1:
            raise ConfigError(f"J and K must be >= 1, got J={self.J}, K={self.K}", key="J" if self.J < 1 else "K")
        if not 0.0 < self.eps_clip < 1.0:
            raise ConfigError(f"eps_clip must lie in (0, 1), got {self.eps_clip}", key="eps_clip")
        if self.eps_norm <= 0:
            raise ConfigError(f"eps_norm must be positive, got {self.eps_norm}", key="eps_norm")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}", key="learning_rate")
        if self.updates_per_rollout < 1:
            raise ConfigError(f"updates_per_rollout must be >= 1, got {self.updates_per_rollout}", key="updates_per_rollout")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}", key="momentum")

    @property
    def branching(self) -> tuple[int, int, int]:
        return (self.G, self.J, self.K)


def _token_coeffs(lps: np.ndarray, old: np.ndarray, adv: float, eps_clip: float, scale: float):
    """Objective terms and d(term)/d(logprob) for one action."""
    ratio = np.exp(lps - old)
    if not np.all(np.isfinite(ratio)):
        raise PolicyDivergence(f"non-finite importance ratio (old logprobs {old})")
    clipped = np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip)
    terms = np.minimum(ratio * adv, clipped * adv)
    # the unclipped branch is active unless the ratio left the band in the
    # direction the advantage rewards
    if adv > 0:
        active = ratio <= 1.0 + eps_clip
    elif adv < 0:
        active = ratio >= 1.0 - eps_clip
    else:
        active = np.zeros_like(ratio, dtype=bool)
    coeffs = np.where(active, ratio * adv * scale, 0.0)
    return terms, coeffs


def grpo_objective(
    group: TrajectoryGroup,
    adv: AdvantageSet,
    policies: Mapping[Role, PolicyParams],
    eps_clip: float,
) -> tuple[dict[Role, float], dict[Role, np.ndarray]]:
    """Length-normalized clipped surrogate per agent and its exact gradient.

    ``J_n = 1/G sum_i 1/|o_i| sum_t min(rho * A_i, clip(rho) * A_i)`` with
    ``rho = pi / pi_old`` per token.
    """
    G = group.size
    objectives: dict[Role, float] = {}
    grads: dict[Role, np.ndarray] = {}
    for role in ROLES:
        params = policies[role]
        advantages = adv[role]
        total = 0.0
        grad = np.zeros_like(params.weights)
        for i, traj in enumerate(group.trajectories):
            action = traj.action(role)
            n = len(action.tokens)
            old = np.asarray(action.logprobs_old, dtype=np.float64)
            if not np.all(np.isfinite(old)):
                raise PolicyDivergence(f"non-finite old logprob for {role.name} trajectory {i}")
            a = float(advantages[i])
            scale = 1.0 / (G * n)
            box = {}

            def coeffs_fn(lps, old=old, a=a, scale=scale, box=box):
                terms, coeffs = _token_coeffs(lps, old, a, eps_clip, scale)
                box["terms"] = terms
                return coeffs

            _, g = weighted_score(params, traj.context(role), action.tokens, coeffs_fn)
            total += box["terms"].sum() * scale
            grad += g
        objectives[role] = float(total)
        grads[role] = grad
    return objectives, grads


def surrogate_value(group, adv, policies, eps_clip) -> dict[Role, float]:
    return grpo_objective(group, adv, policies, eps_clip)[0]


def apply_update(
    policies: Mapping[Role, PolicyParams],
    grads: Mapping[Role, np.ndarray],
    learning_rate: float,
) -> dict[Role, PolicyParams]:
    """Gradient ascent: ``W + lr * grad`` for every role; inputs are untouched."""
    out = {}
    for role, params in policies.items():
        g = grads.get(role)
        if g is None:
            out[role] = params
            continue
        if g.shape != params.weights.shape:
            raise ValueError(f"gradient shape {g.shape} != weights shape {params.weights.shape} for {role.name}")
        new = params.weights + learning_rate * g
        if not np.all(np.isfinite(new)):
            raise PolicyDivergence(f"update produced non-finite weights for {role.name}")
        out[role] = params.with_weights(new)
    return out


# --- reward schemes -------------------------------------------------------
#
# Task-specific proxies (constants of this package, not derived from data):
#   builder    evidence coverage: best aligned match of the gold record's three
#              tokens (slot, value, FACT) anywhere in the builder memory, / 3.
#   summarizer compression fidelity: fraction of the fact (slot, value) bigrams
#              of the builder memory that reappear as bigrams in the summary,
#              divided by the summary/memory length ratio, capped at 1.
#   responder  the leaf reward.


def evidence_coverage(memory: tuple[int, ...], task: Task) -> float:
    gold = None
    for r in task.history:
        if r.slot == task.query_slot and not r.is_noise:
            gold = r
    rec = serialize_history(Task((gold,), task.query_slot, task.gold_answer, 3, task.n_slots, task.n_values))
    best = 0
    for p in range(len(memory)):
        hits = sum(1 for d in range(3) if p + d < len(memory) and memory[p + d] == rec[d])
        best = max(best, hits)
    return best / 3.0


def _fact_pairs(tokens: tuple[int, ...], task: Task) -> set[tuple[int, int]]:
    facts = {(r.slot, task.n_slots + r.value) for r in task.history if not r.is_noise}
    return {(a, b) for a, b in zip(tokens, tokens[1:]) if (a, b) in facts}


def compression_fidelity(memory: tuple[int, ...], summary: tuple[int, ...], task: Task) -> float:
    source = _fact_pairs(memory, task)
    if not source:
        coverage = 1.0
    else:
        kept = {(a, b) for a, b in zip(summary, summary[1:])}
        coverage = len(source & kept) / len(source)
    ratio = max(len(summary), 1) / max(len(memory), 1)
    return min(1.0, coverage / ratio)


def task_specific_credits(tree: RolloutTree, group: TrajectoryGroup) -> dict[Role, np.ndarray]:
    task = tree.task
    b = [evidence_coverage(t.builder_memory, task) for t in group.trajectories]
    s = [compression_fidelity(t.builder_memory, t.summarizer_memory, task) for t in group.trajectories]
    r = [t.reward for t in group.trajectories]
    return {Role.BUILDER: np.array(b), Role.SUMMARIZER: np.array(s), Role.RESPONDER: np.array(r, dtype=float)}


def baseline_credits(
    scheme: RewardScheme | str,
    tree: RolloutTree,
    group: TrajectoryGroup,
    task_weight: float = 0.5,
) -> dict[Role, np.ndarray]:
    """Per-agent credits for the selected group under a non-tree scheme.

    ``tree_credit`` returns the group's own (tree-derived) credits.
    """
    try:
        scheme = RewardScheme(scheme)
    except ValueError:
        raise ConfigError(f"unknown reward scheme {scheme!r}", key="reward_scheme") from None
    final = np.array([t.reward for t in group.trajectories], dtype=float)
    if scheme is RewardScheme.TREE_CREDIT:
        return dict(group.credits)
    if scheme is RewardScheme.FINAL_ONLY:
        return {role: final.copy() for role in ROLES}
    task = task_specific_credits(tree, group)
    if scheme is RewardScheme.TASK_SPECIFIC:
        return task
    return {role: final + task_weight * task[role] for role in ROLES}


# --- training step --------------------------------------------------------


@dataclass
class MomentumState:
    velocity: dict[Role, np.ndarray] = field(default_factory=dict)


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def tie_gradients(grads: dict[Role, np.ndarray]) -> dict[Role, np.ndarray]:
    """Builder and summarizer share one matrix when tied; their gradients add."""
    shared = grads[Role.BUILDER] + grads[Role.SUMMARIZER]
    return {**grads, Role.BUILDER: shared, Role.SUMMARIZER: shared}


def train_step(
    policies: Mapping[Role, PolicyParams],
    task: Task,
    cfg: TrainConfig,
    rng: int | np.random.Generator,
    momentum: MomentumState | None = None,
) -> tuple[dict[Role, PolicyParams], dict]:
    """One rollout, credit assignment and ``updates_per_rollout`` ascent steps."""
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2**62))
    tree = score_leaves(
        rollout_tree(policies, task, cfg.branching, _derive_seed(int(seed), 1), cfg.responder_max_len),
        cfg.answer_metric,
    )
    credit_map = assign_credit(tree, cfg.lambda_len)
    group = select_group(tree, credit_map, np.random.default_rng(_derive_seed(int(seed), 2)))
    credits = baseline_credits(cfg.reward_scheme, tree, group, cfg.task_weight)
    adv = AdvantageSet(
        a1=standardize(credits[Role.BUILDER], cfg.eps_norm),
        a2=standardize(credits[Role.SUMMARIZER], cfg.eps_norm),
        a3=standardize(credits[Role.RESPONDER], cfg.eps_norm),
        eps_norm=cfg.eps_norm,
    )

    current = dict(policies)
    first = None
    for _ in range(cfg.updates_per_rollout):
        obj, grads = grpo_objective(group, adv, current, cfg.eps_clip)
        if first is None:
            first = (obj, {r: float(np.linalg.norm(g)) for r, g in grads.items()})
        if cfg.tie_params:
            grads = tie_gradients(grads)
        if cfg.momentum > 0.0:
            if momentum is None:
                raise ConfigError("momentum > 0 requires a MomentumState")
            for role in ROLES:
                v = momentum.velocity.get(role, np.zeros_like(grads[role]))
                momentum.velocity[role] = cfg.momentum * v + grads[role]
            grads = dict(momentum.velocity)
        current = apply_update(current, grads, cfg.learning_rate)

    obj, norms = first
    metrics = {
        "mean_reward": float(tree.rewards().mean()),
        "obj_builder": obj[Role.BUILDER],
        "obj_summarizer": obj[Role.SUMMARIZER],
        "obj_responder": obj[Role.RESPONDER],
        "grad_norms": {r.name.lower(): norms[r] for r in ROLES},
        "builder_len_ratio": float(builder_length_ratios(tree).mean()),
    }
    return current, metrics
