"""Tree-structured credit assignment for a builder -> summarizer -> responder
memory pipeline, with linear-softmax sequence policies on a synthetic
slot-recall task."""

from .credit import AdvantageSet, CreditMap, TrajectoryGroup, assign_credit, normalize_advantages, select_group
from .env import ConfigError, Record, Task, TaskConfig, evaluate, generate_task, serialize_history
from .optim import RewardScheme, TrainConfig, apply_update, baseline_credits, grpo_objective, train_step
from .policy import Context, PolicyParams, Role, SampledSequence, grad_logprob, logprob, sample
from .rollout import RolloutTree, TreeNode, Trajectory, enumerate_paths, infer, rollout_tree, score_leaves

__version__ = "0.1.0"
