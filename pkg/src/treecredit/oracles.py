"""Self-checks against independent references.

Each ``check_*`` returns ``(ok, detail)``.  Sizes are arguments so the
acceptance suite can run them at full scale while ``treecredit verify`` uses a
quicker setting.
"""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from .credit import AdvantageSet, assign_credit, select_group, standardize
from .env import Task, TaskConfig, evaluate, generate_task, latest_fact_value, serialize_history
from .optim import ROLES, TrainConfig, grpo_objective, train_step
from .policy import (
    Context,
    FeatureSpec,
    PolicyParams,
    Role,
    features,
    grad_logprob,
    logprob,
    role_specs,
    sample,
)
from .rollout import expand, rollout_tree, score_leaves

CheckResult = tuple[bool, str]


def random_policies(rng: np.random.Generator, specs: dict[Role, FeatureSpec], scale: float = 1.0):
    return {r: PolicyParams(r, rng.normal(0.0, scale, (s.feature_dim, s.n_out)), s) for r, s in specs.items()}


def _small_task_cfg(history_len: int = 6) -> TaskConfig:
    return TaskConfig(n_slots=3, n_values=3, history_len=history_len, noise_fraction=0.5, update_rate=0.5)


# --- env ------------------------------------------------------------------


def check_generator(n_tasks: int = 300) -> CheckResult:
    """Gold answer equals an independent last-write-wins scan; regeneration is identical."""
    cfg = TaskConfig(n_slots=4, n_values=4, history_len=20, noise_fraction=0.5, update_rate=0.5)
    for seed in range(n_tasks):
        task = generate_task(seed, cfg)
        latest = {}
        for rec in task.history:
            if not rec.is_noise:
                latest[rec.slot] = rec.value
        if latest.get(task.query_slot) != task.gold_answer or latest_fact_value(task.history, task.query_slot) != task.gold_answer:
            return False, f"seed {seed}: gold answer disagrees with the scan"
        if generate_task(seed, cfg) != task or evaluate(task.gold_answer, task) != 1.0:
            return False, f"seed {seed}: regeneration or self-evaluation failed"
    return True, f"{n_tasks} tasks"


# --- policy ---------------------------------------------------------------


def _random_context(rng, role: Role, spec: FeatureSpec, length: int) -> Context:
    return Context(role, tuple(int(x) for x in rng.integers(spec.n_in, size=length)))


def check_normalization(n_cases: int = 200) -> CheckResult:
    rng = np.random.default_rng(11)
    specs = role_specs(3, 3)
    worst = 0.0
    for _ in range(n_cases):
        role = Role(int(rng.integers(1, 4)))
        spec = specs[role]
        params = random_policies(rng, {role: spec}, 2.0)[role]
        ctx = _random_context(rng, role, spec, int(rng.integers(1, 12)))
        prefix = tuple(int(x) for x in rng.integers(spec.n_out if spec.eos is None else spec.eos, size=int(rng.integers(0, 4))))
        total = sum(np.exp(logprob(params, ctx, prefix + (y,))[-1]) for y in range(spec.n_out))
        worst = max(worst, abs(total - 1.0))
    return worst <= 1e-10, f"max |sum p - 1| = {worst:.2e}"


def check_score_identity(n_cases: int = 200) -> CheckResult:
    """Exact expectation of the score over the vocabulary is zero."""
    rng = np.random.default_rng(12)
    specs = role_specs(3, 3)
    worst = 0.0
    for _ in range(n_cases):
        role = Role(int(rng.integers(1, 4)))
        spec = specs[role]
        params = random_policies(rng, {role: spec}, 2.0)[role]
        ctx = _random_context(rng, role, spec, int(rng.integers(1, 12)))
        expected = np.zeros((spec.feature_dim, spec.n_out))
        for y in range(spec.n_out):
            p = np.exp(logprob(params, ctx, (y,))[0])
            expected += p * grad_logprob(params, ctx, (y,))[0]
        worst = max(worst, float(np.abs(expected).max()))
    return worst <= 1e-10, f"max |E[score]| = {worst:.2e}"


def check_sample_logprob(n_cases: int = 1000) -> CheckResult:
    rng = np.random.default_rng(13)
    specs = role_specs(3, 3)
    for n in range(n_cases):
        role = Role(int(rng.integers(1, 4)))
        spec = specs[role]
        params = random_policies(rng, {role: spec}, 1.0)[role]
        ctx = _random_context(rng, role, spec, int(rng.integers(1, 12)))
        s = sample(params, ctx, np.random.default_rng(n), max_len=int(rng.integers(1, 8)))
        if not np.array_equal(logprob(params, ctx, s.tokens), np.array(s.logprobs_old)):
            return False, f"case {n}: logprob differs from the sampled logprobs"
    return True, f"{n_cases} cases, bitwise equal"


def check_grad_logprob(n_cases: int = 20, h: float = 1e-5) -> CheckResult:
    """Per-token analytic gradient against central differences on every active entry."""
    rng = np.random.default_rng(14)
    specs = role_specs(2, 2)
    worst = 0.0
    for _ in range(n_cases):
        role = Role(int(rng.integers(1, 4)))
        spec = specs[role]
        params = random_policies(rng, {role: spec}, 1.0)[role]
        ctx = _random_context(rng, role, spec, int(rng.integers(1, 8)))
        s = sample(params, ctx, rng, max_len=3)
        grads = grad_logprob(params, ctx, s.tokens)
        for t in range(len(s.tokens)):
            rows = np.flatnonzero(features(params, ctx, s.tokens[:t]))
            for r, c in itertools.product(rows, range(spec.n_out)):
                w = params.weights.copy()
                w[r, c] += h
                up = logprob(params.with_weights(w), ctx, s.tokens)[t]
                w[r, c] -= 2 * h
                down = logprob(params.with_weights(w), ctx, s.tokens)[t]
                fd = (up - down) / (2 * h)
                a = grads[t][r, c]
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-3))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


# --- rollout --------------------------------------------------------------


def _check_tree(tree, task: Task) -> str | None:
    G, J, K = tree.branching
    history = tuple(serialize_history(task))
    if len(tree.builder_nodes) != G:
        return "wrong number of builder nodes"
    n_leaves = 0
    for i, b in enumerate(tree.builder_nodes):
        if b.context != history or b.index != (i,) or len(b.children) != J:
            return f"builder {i} malformed"
        for j, s in enumerate(b.children):
            if s.parent is not b or s.context != b.memory or s.index != (i, j) or len(s.children) != K:
                return f"summarizer {(i, j)} malformed"
            for k, r in enumerate(s.children):
                if r.parent is not s or r.index != (i, j, k) or r.children:
                    return f"responder {(i, j, k)} malformed"
                if r.context != (task.query_token,) + b.memory + s.memory:
                    return f"responder {(i, j, k)} context mismatch"
                n_leaves += 1
    if n_leaves != G * J * K:
        return f"{n_leaves} leaves, expected {G * J * K}"
    return None


def check_structure(grid=(2, 4, 8), branches=(1, 2, 4)) -> CheckResult:
    cfg = _small_task_cfg(8)
    specs = role_specs(cfg.n_slots, cfg.n_values)
    rng = np.random.default_rng(21)
    n = 0
    for G, J, K in itertools.product(grid, branches, branches):
        task = generate_task(n, cfg)
        policies = random_policies(rng, specs, 0.5)
        tree = rollout_tree(policies, task, (G, J, K), n)
        if (problem := _check_tree(tree, task)) is not None:
            return False, f"(G, J, K) = {(G, J, K)}: {problem}"
        n += 1
    return True, f"{n} trees"


# --- credit ---------------------------------------------------------------


def check_tower(n_trees: int = 500) -> CheckResult:
    """q2 is the mean of its leaves and q1 (no length term) the mean of its q2."""
    cfg = _small_task_cfg(4)
    specs = role_specs(cfg.n_slots, cfg.n_values)
    rng = np.random.default_rng(31)
    worst = 0.0
    for n in range(n_trees):
        G, J, K = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        policies = random_policies(rng, specs, 1.0)
        tree = score_leaves(rollout_tree(policies, generate_task(n, cfg), (G, J, K), n))
        credits = assign_credit(tree, 0.0)
        for i, b in enumerate(tree.builder_nodes):
            for j, s in enumerate(b.children):
                leaf_mean = sum(r.leaf_reward for r in s.children) / K
                worst = max(worst, abs(credits.q2[i, j] - leaf_mean))
            worst = max(worst, abs(credits.q1[i] - sum(credits.q2[i]) / J))
    return worst <= 1e-12, f"{n_trees} trees, max deviation {worst:.1e}"


def tiny_pipeline_specs() -> dict[Role, FeatureSpec]:
    """One slot, two values: writers emit {slot, value0, value1, EOS}, the responder {value0, value1}."""
    n_in = 1 + 2 + 2
    writer = FeatureSpec(n_in=n_in, n_out=4, eos=3, out_offset=0, n_slots=1)
    return {Role.BUILDER: writer, Role.SUMMARIZER: writer, Role.RESPONDER: role_specs(1, 2)[Role.RESPONDER]}


def _writer_outputs(spec: FeatureSpec, max_len: int):
    """Every sequence the writer can emit: EOS-terminated, or ``max_len`` long."""
    body = [y for y in range(spec.n_out) if y != spec.eos]
    for n in range(max_len + 1):
        for seq in itertools.product(body, repeat=n):
            if n < max_len:
                yield seq + (spec.eos,)
            else:
                yield seq


def exact_subtree_value(policies, task: Task, memory: tuple[int, ...]) -> tuple[float, float, float]:
    """``E[R | builder memory]`` by enumeration, plus the variance of one
    summarizer branch's success probability and the mean Bernoulli variance."""
    s_spec = policies[Role.SUMMARIZER].spec
    probs, succ = [], []
    for out in _writer_outputs(s_spec, max(1, len(memory))):
        p = float(np.exp(logprob(policies[Role.SUMMARIZER], Context(Role.SUMMARIZER, memory), out).sum()))
        summary = out[:-1] if out and out[-1] == s_spec.eos else out
        ctx = Context(Role.RESPONDER, (task.query_token,) + memory + summary)
        answers = np.exp(logprob(policies[Role.RESPONDER], ctx, (task.gold_answer,)))
        probs.append(p)
        succ.append(float(answers[0]))
    probs, succ = np.array(probs), np.array(succ)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise AssertionError(f"summarizer outputs do not sum to one ({probs.sum()})")
    mean = float(probs @ succ)
    between = float(probs @ (succ - mean) ** 2)
    within = float(probs @ (succ * (1 - succ)))
    return mean, between, within


def check_monte_carlo(n_seeds: int = 100, J: int = 512, K: int = 8, pass_rate: float = 0.95) -> CheckResult:
    """Empirical builder credit (no length term) against the enumerated expectation."""
    specs = tiny_pipeline_specs()
    cfg = TaskConfig(n_slots=1, n_values=2, history_len=1, noise_fraction=0.0, update_rate=1.0)
    inside = 0
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        policies = random_policies(rng, specs, 1.0)
        task = generate_task(seed, cfg)
        tree = score_leaves(expand(policies, task, (1, J, K), seed, builder_max_len=2))
        q1 = assign_credit(tree, 0.0).q1[0]
        mean, between, within = exact_subtree_value(policies, task, tree.builder_nodes[0].memory)
        se = np.sqrt((between + within / K) / J)
        inside += abs(q1 - mean) <= 3 * se
    return inside >= pass_rate * n_seeds, f"{inside}/{n_seeds} seeds within 3 standard errors"


def check_advantages(n_groups: int = 1000, eps: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(41)
    checked = 0
    for n in range(n_groups):
        G = int(rng.integers(2, 33))
        if n % 3 == 0:
            x = rng.choice([0.0, 0.5, 1.0], size=G)
        elif n % 3 == 1:
            x = rng.normal(rng.normal(), rng.uniform(1e-3, 5.0), size=G)
        else:
            x = np.full(G, rng.normal())
        a = standardize(x, eps)
        s = x.std()
        if np.all(x == x[0]):
            if np.any(a != 0.0):
                return False, f"group {n}: zero-variance group gave nonzero advantages"
            continue
        if s <= 1e-3:
            continue
        checked += 1
        if abs(a.mean()) > 1e-9:
            return False, f"group {n}: advantage mean {a.mean():.2e}"
        if abs(a.std() - s / (s + eps)) > 1e-6:
            return False, f"group {n}: advantage std {a.std()} vs {s / (s + eps)}"
    return True, f"{checked} groups with spread, all zero-variance groups exact zeros"


# --- optim ----------------------------------------------------------------


def _token_states(group, policies, role: Role, eps_clip: float):
    """Ratio of every token of ``role`` in the group, concatenated."""
    out = []
    for traj in group.trajectories:
        action = traj.action(role)
        lps = logprob(policies[role], traj.context(role), action.tokens)
        out.append(np.exp(lps - np.array(action.logprobs_old)))
    return np.concatenate(out)


def _clip_side(ratio: np.ndarray, eps_clip: float) -> np.ndarray:
    return np.digitize(ratio, [1.0 - eps_clip, 1.0 + eps_clip])


def random_off_policy_point(seed: int, delta: float):
    """A sampled group with random advantages and ``theta = theta_old + N(0, delta)``."""
    rng = np.random.default_rng(seed)
    cfg = _small_task_cfg(4)
    specs = role_specs(cfg.n_slots, cfg.n_values)
    old = random_policies(rng, specs, 0.7)
    tree = score_leaves(rollout_tree(old, generate_task(seed, cfg), (4, 2, 2), seed))
    group = select_group(tree, assign_credit(tree), rng)
    adv = AdvantageSet(*(standardize(rng.normal(size=4), 1e-6) for _ in range(3)), eps_norm=1e-6)
    current = {r: p.with_weights(p.weights + rng.normal(0.0, delta, p.weights.shape)) for r, p in old.items()}
    return group, adv, current, rng


def check_objective_gradient(
    n_points: int = 50,
    h: float = 1e-5,
    eps_clip: float = 0.2,
    n_entries: int = 12,
    n_directions: int = 3,
    rtol: float = 1e-4,
) -> CheckResult:
    """Analytic gradient of the clipped objective against central differences.

    Probes are single weight entries (half of them on features the group
    actually touches) and random unit directions.  A probe is skipped when a
    token ratio sits within 1e-6 of a clip boundary or the difference stencil
    straddles one, since the objective has a kink there.
    """
    worst, probes, skipped = 0.0, 0, 0
    for n in range(n_points):
        delta = 1e-2 if n % 2 == 0 else 1e-1
        group, adv, current, rng = random_off_policy_point(500 + n, delta)
        _, grads = grpo_objective(group, adv, current, eps_clip)
        for role in ROLES:
            params = current[role]
            base_ratio = _token_states(group, current, role, eps_clip)
            near = np.min(np.abs(base_ratio[:, None] - np.array([1 - eps_clip, 1 + eps_clip])))
            active = np.flatnonzero(grads[role].ravel())
            idx = list(rng.choice(active, size=min(n_entries // 2, active.size), replace=False)) if active.size else []
            idx += list(rng.choice(params.weights.size, size=n_entries - len(idx), replace=False))
            directions = [np.eye(1, params.weights.size, int(i)).reshape(params.weights.shape) for i in idx]
            for _ in range(n_directions):
                d = rng.normal(size=params.weights.shape)
                directions.append(d / np.linalg.norm(d))

            for d in directions:
                probes += 1
                plus = {**current, role: params.with_weights(params.weights + h * d)}
                minus = {**current, role: params.with_weights(params.weights - h * d)}
                sides = [_clip_side(_token_states(group, p, role, eps_clip), eps_clip) for p in (plus, minus)]
                if near < 1e-6 or not np.array_equal(sides[0], sides[1]):
                    skipped += 1
                    continue
                fd = (grpo_objective(group, adv, plus, eps_clip)[0][role] - grpo_objective(group, adv, minus, eps_clip)[0][role]) / (2 * h)
                a = float(np.sum(grads[role] * d))
                err = abs(a - fd)
                if err > rtol * max(abs(a), abs(fd)) + 1e-9:
                    return False, f"point {n} {role.name}: analytic {a:.6e} vs fd {fd:.6e}"
                if max(abs(a), abs(fd)) > 1e-6:
                    worst = max(worst, err / max(abs(a), abs(fd)))
    return True, f"{probes} probes ({skipped} skipped at clip kinks), max relative error {worst:.1e}"


def check_degenerate_equivalence(n_seeds: int = 5) -> CheckResult:
    """J = K = 1 and no length term: tree credit and final-only updates coincide bitwise."""
    cfg = _small_task_cfg(6)
    specs = role_specs(cfg.n_slots, cfg.n_values)
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        policies = random_policies(rng, specs, 0.5)
        task = generate_task(seed, cfg)
        out = {}
        for scheme in ("tree_credit", "final_only"):
            tc = TrainConfig(G=8, J=1, K=1, lambda_len=0.0, learning_rate=0.5, reward_scheme=scheme)
            out[scheme], _ = train_step(policies, task, tc, seed)
        for role in ROLES:
            if out["tree_credit"][role].weights.tobytes() != out["final_only"][role].weights.tobytes():
                return False, f"seed {seed}: {role.name} updates differ"
    return True, f"{n_seeds} seeds, bitwise equal"


QUICK: list[tuple[str, Callable[[], CheckResult]]] = [
    ("generator gold answer", lambda: check_generator(200)),
    ("softmax normalization", lambda: check_normalization(100)),
    ("score identity", lambda: check_score_identity(100)),
    ("sample/logprob agreement", lambda: check_sample_logprob(300)),
    ("log-prob gradient vs finite differences", lambda: check_grad_logprob(5)),
    ("tree structure", lambda: check_structure()),
    ("credit tower property", lambda: check_tower(100)),
    ("Monte Carlo credit vs enumeration", lambda: check_monte_carlo(20, 256, 4, pass_rate=0.9)),
    ("advantage normalization", lambda: check_advantages(300)),
    ("objective gradient vs finite differences", lambda: check_objective_gradient(6)),
    ("degenerate tree equals final-only", lambda: check_degenerate_equivalence(3)),
]


def run_all(checks=None) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in checks or QUICK:
        try:
            ok, detail = fn()
        except Exception as err:  # a crash is a failed check, not a crashed verifier
            ok, detail = False, f"raised {type(err).__name__}: {err}"
        results.append((name, bool(ok), detail))
    return results
