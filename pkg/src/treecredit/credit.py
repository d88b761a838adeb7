"""Monte Carlo credit over the rollout tree, group selection and advantages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import ConfigError
from .policy import Role
from .rollout import RolloutTree, Trajectory, path_through


@dataclass(frozen=True)
class CreditMap:
    q1: np.ndarray  # (G,)
    q2: np.ndarray  # (G, J)
    q3: np.ndarray  # (G, J, K)
    length_penalty_coeff: float


@dataclass(frozen=True)
class TrajectoryGroup:
    trajectories: list[Trajectory]
    credits: dict[Role, np.ndarray]
    selected_indices: list[tuple[int, int]]

    @property
    def size(self) -> int:
        return len(self.trajectories)


@dataclass(frozen=True)
class AdvantageSet:
    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    eps_norm: float

    def __getitem__(self, role: Role) -> np.ndarray:
        return (self.a1, self.a2, self.a3)[role - 1]


def builder_length_ratios(tree: RolloutTree) -> np.ndarray:
    H = tree.task.history_token_len
    if H <= 0:
        raise ConfigError("history has zero tokens; the length ratio is undefined")
    return np.array([len(b.memory) / H for b in tree.builder_nodes])


def assign_credit(tree: RolloutTree, length_coeff: float = -1.0) -> CreditMap:
    """Responder credit is its reward, summarizer credit the mean over its
    ``K`` answers, builder credit the mean over its ``J*K`` leaves plus
    ``length_coeff * |memory| / |history|`` (negative = penalty)."""
    ratios = builder_length_ratios(tree)
    q3 = tree.rewards()
    G, J, K = q3.shape
    q2 = q3.sum(axis=2) / K
    q1 = q3.reshape(G, J * K).sum(axis=1) / (J * K) + length_coeff * ratios
    return CreditMap(q1=q1, q2=q2, q3=q3, length_penalty_coeff=length_coeff)


def select_group(tree: RolloutTree, credits: CreditMap, rng: np.random.Generator) -> TrajectoryGroup:
    """Pick one leaf uniformly from each builder subtree."""
    G, J, K = tree.branching
    trajectories, picks = [], []
    q1, q2, q3 = [], [], []
    for i, b in enumerate(tree.builder_nodes):
        j = int(rng.integers(J))
        k = int(rng.integers(K))
        s = b.children[j]
        trajectories.append(path_through(b, s, s.children[k]))
        picks.append((j, k))
        q1.append(credits.q1[i])
        q2.append(credits.q2[i, j])
        q3.append(credits.q3[i, j, k])
    return TrajectoryGroup(
        trajectories=trajectories,
        credits={Role.BUILDER: np.array(q1), Role.SUMMARIZER: np.array(q2), Role.RESPONDER: np.array(q3)},
        selected_indices=picks,
    )


def standardize(values: np.ndarray, eps: float) -> np.ndarray:
    """``(x - mean) / (std + eps)`` with the population standard deviation."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ConfigError("group normalization needs at least two entries")
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if np.all(values == values[0]):
        return np.zeros_like(values)
    centered = values - values.mean()
    return centered / (values.std() + eps)


def normalize_advantages(group: TrajectoryGroup, eps: float = 1e-6) -> AdvantageSet:
    return AdvantageSet(
        a1=standardize(group.credits[Role.BUILDER], eps),
        a2=standardize(group.credits[Role.SUMMARIZER], eps),
        a3=standardize(group.credits[Role.RESPONDER], eps),
        eps_norm=eps,
    )
