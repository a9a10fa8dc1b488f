"""Tabular policy-gradient kernel over functional-token trees.

A toy softmax policy over the eight tokens, masked to the legal actions of
each state, drives token-guided search. The clipped surrogate loss, batch
advantage normalization, analytic gradients, a central-difference audit,
and the iteration driver live here; nothing touches a neural network.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .grading import Verdict, grade_answer
from .mcts import (
    MctsConfig,
    ProcessScorer,
    SearchAbortedError,
    StepGenerator,
    backpropagate,
)
from .rewards import kl_term, rm_score, uct_score
from .tree import FunctionalToken, ReasoningTree, TerminalNodeError, canonical_sort

logger = logging.getLogger(__name__)

TOKENS = list(FunctionalToken)
_TOKEN_INDEX = {t: i for i, t in enumerate(TOKENS)}

# State feature: (last functional token or "ROOT", depth bucket of width 3).
Feature = tuple[str, int]

DEPTH_BUCKET_WIDTH = 3


def state_feature(tree: ReasoningTree, node_id: int) -> Feature:
    node = tree.node(node_id)
    last = "ROOT" if node.action is None else node.action.value
    return (last, node.depth // DEPTH_BUCKET_WIDTH)


def all_features(max_depth: int = 15) -> list[Feature]:
    names = ["ROOT"] + [t.value for t in TOKENS]
    buckets = range(max_depth // DEPTH_BUCKET_WIDTH + 1)
    return [(name, b) for name in names for b in buckets]


class ToyPolicy:
    """Eight logits per state feature; probabilities are softmax over the
    allowed-action mask only. Disallowed actions get exactly zero."""

    def __init__(self, max_depth: int = 15):
        self.max_depth = max_depth
        self.weights: dict[Feature, np.ndarray] = {
            f: np.zeros(len(TOKENS)) for f in all_features(max_depth)
        }

    def _row(self, feature: Feature) -> np.ndarray:
        if feature not in self.weights:
            raise KeyError(f"no weight row for state feature {feature!r}")
        return self.weights[feature]

    def masked_probs(
        self, feature: Feature, allowed: Sequence[FunctionalToken]
    ) -> np.ndarray:
        if not allowed:
            raise ValueError("allowed action set must be non-empty")
        row = self._row(feature)
        idx = [_TOKEN_INDEX[a] for a in allowed]
        z = row[idx]
        z = z - z.max()
        ez = np.exp(z)
        probs = np.zeros(len(TOKENS))
        probs[idx] = ez / ez.sum()
        return probs

    def logp(
        self,
        feature: Feature,
        allowed: Sequence[FunctionalToken],
        action: FunctionalToken,
    ) -> float:
        if action not in allowed:
            raise ValueError(f"{action.value} is not in the allowed set")
        row = self._row(feature)
        idx = [_TOKEN_INDEX[a] for a in allowed]
        z = row[idx]
        m = z.max()
        lse = m + math.log(np.exp(z - m).sum())
        return float(row[_TOKEN_INDEX[action]] - lse)

    def snapshot(self, role: str = "behavior") -> "PolicySnapshot":
        frozen = {f: tuple(float(x) for x in row) for f, row in self.weights.items()}
        return PolicySnapshot(weights=frozen, role=role, max_depth=self.max_depth)

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "weights": {
                f"{name}|{bucket}": [float(x) for x in row]
                for (name, bucket), row in sorted(self.weights.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToyPolicy":
        policy = cls(max_depth=data["max_depth"])
        for key, row in data["weights"].items():
            name, bucket = key.rsplit("|", 1)
            policy.weights[(name, int(bucket))] = np.asarray(row, dtype=float)
        return policy


@dataclass(frozen=True)
class PolicySnapshot:
    """Immutable weight capture serving as reference or behavior policy."""

    weights: dict[Feature, tuple[float, ...]]
    role: str
    max_depth: int

    def logp(
        self,
        feature: Feature,
        allowed: Sequence[FunctionalToken],
        action: FunctionalToken,
    ) -> float:
        row = np.asarray(self.weights[feature])
        idx = [_TOKEN_INDEX[a] for a in allowed]
        z = row[idx]
        m = z.max()
        lse = m + math.log(np.exp(z - m).sum())
        return float(row[_TOKEN_INDEX[action]] - lse)


def select_functional_token(
    policy: ToyPolicy,
    tree: ReasoningTree,
    node_id: int,
    c: float = 1.0,
    sample: bool = False,
    rng: Optional[random.Random] = None,
) -> FunctionalToken:
    """Token-guided action choice: policy argmax over untried actions when
    any exist, otherwise the action of the best-UCT child.

    Ties go to canonical token order. sample=True draws the untried action
    from the masked distribution instead of taking the argmax.
    """
    if tree.is_terminal(node_id):
        raise TerminalNodeError(f"node {node_id} is terminal")
    allowed = canonical_sort(tree.allowed_actions(node_id))
    untried = canonical_sort(tree.unexplored_actions(node_id))
    feature = state_feature(tree, node_id)
    if untried:
        probs = policy.masked_probs(feature, allowed)
        if sample:
            rng = rng or random.Random(0)
            weights = [probs[_TOKEN_INDEX[a]] for a in untried]
            total = sum(weights)
            if total <= 0:
                return untried[0]
            return rng.choices(untried, weights=weights, k=1)[0]
        return max(untried, key=lambda a: (probs[_TOKEN_INDEX[a]], -a.ordinal))
    node = tree.node(node_id)
    best, best_key = None, None
    for cid in node.children:
        child = tree.node(cid)
        score = (
            float("inf")
            if child.visits == 0
            else uct_score(child.value_sum, child.visits, node.visits, c)
        )
        key = (score, -child.action.ordinal)
        if best_key is None or key > best_key:
            best, best_key = child.action, key
    assert best is not None
    return best


@dataclass
class Transition:
    feature: Feature
    action: FunctionalToken
    allowed: tuple[FunctionalToken, ...]
    logp_current: float
    logp_old: float
    logp_ref: float
    reward: float


@dataclass
class RlBatch:
    transitions: list[Transition]
    rewards_to_go: list[float] = field(default_factory=list)
    advantages: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass(frozen=True)
class RlConfig:
    clip_eps: float = 0.2
    beta: float = 0.01
    # Full-scale trainers run near 5e-7; the tabular toy needs a visible
    # step size to move in tens of iterations.
    learning_rate: float = 0.5
    batch_questions: int = 16
    paths_per_question: int = 16
    std_guard: float = 1e-8
    sigma: float = 0.0
    sample_unexplored: bool = False

    def __post_init__(self):
        if not (0 < self.clip_eps < 1):
            raise ValueError("clip_eps must be in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_questions < 1 or self.paths_per_question < 1:
            raise ValueError("batch_questions and paths_per_question must be >= 1")
        if self.std_guard <= 0:
            raise ValueError("std_guard must be > 0")
        if not (0 <= self.sigma < 1):
            raise ValueError("sigma must be in [0, 1)")


def normalize_advantages(
    rewards_to_go: Sequence[float], std_guard: float = 1e-8
) -> list[float]:
    """Whole-batch z-score with population std; constant input gives zeros."""
    if not rewards_to_go:
        raise ValueError("rewards_to_go must be non-empty")
    x = np.asarray(rewards_to_go, dtype=float)
    mean = x.mean()
    std = x.std()
    return list((x - mean) / max(std, std_guard))


def _ratios(batch: RlBatch) -> np.ndarray:
    r = np.exp(
        np.asarray([t.logp_current for t in batch.transitions])
        - np.asarray([t.logp_old for t in batch.transitions])
    )
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite importance ratio in batch")
    return r


def reinforce_pp_loss(batch: RlBatch, clip_eps: float) -> float:
    """Negated clipped surrogate: -mean(min(r*A, clip(r, 1-eps, 1+eps)*A))."""
    if len(batch.advantages) != len(batch.transitions):
        raise ValueError("advantages not filled")
    r = _ratios(batch)
    adv = np.asarray(batch.advantages)
    clipped = np.clip(r, 1 - clip_eps, 1 + clip_eps)
    return float(-np.mean(np.minimum(r * adv, clipped * adv)))


def loss_gradient(
    policy: ToyPolicy, batch: RlBatch, clip_eps: float
) -> dict[Feature, np.ndarray]:
    """Analytic d loss / d theta.

    A transition contributes gradient only when the unclipped branch is the
    active min (r*A <= clip(r)*A); the clipped branch is constant in theta.
    Per active transition the contribution is -r*A*(onehot - p)/T on the
    masked entries of its feature row.
    """
    if len(batch.advantages) != len(batch.transitions):
        raise ValueError("advantages not filled")
    grads: dict[Feature, np.ndarray] = {}
    n = len(batch.transitions)
    for t, adv in zip(batch.transitions, batch.advantages):
        logp_cur = policy.logp(t.feature, t.allowed, t.action)
        ratio = math.exp(logp_cur - t.logp_old)
        if not math.isfinite(ratio):
            raise ValueError("non-finite importance ratio in batch")
        clipped = min(max(ratio, 1 - clip_eps), 1 + clip_eps)
        if ratio * adv > clipped * adv:
            continue
        probs = policy.masked_probs(t.feature, t.allowed)
        onehot = np.zeros(len(TOKENS))
        onehot[_TOKEN_INDEX[t.action]] = 1.0
        mask = np.zeros(len(TOKENS))
        mask[[_TOKEN_INDEX[a] for a in t.allowed]] = 1.0
        dlogp = (onehot - probs) * mask
        g = grads.setdefault(t.feature, np.zeros(len(TOKENS)))
        g -= ratio * adv * dlogp / n
    return grads


def policy_update_step(
    policy: ToyPolicy, batch: RlBatch, cfg: RlConfig
) -> tuple[ToyPolicy, dict[str, float]]:
    """One analytic gradient descent step on the clipped surrogate.

    Returns the (mutated) policy and scalar metrics for the batch.
    """
    loss = reinforce_pp_loss(batch, cfg.clip_eps)
    grads = loss_gradient(policy, batch, cfg.clip_eps)
    for feature, g in grads.items():
        policy.weights[feature] -= cfg.learning_rate * g
    kl_values = [kl_term(t.logp_old, t.logp_ref) for t in batch.transitions]
    metrics = {
        "loss": loss,
        "mean_reward": float(np.mean([t.reward for t in batch.transitions])),
        "mean_kl": float(np.mean(kl_values)) if cfg.beta > 0 else 0.0,
        "mean_abs_advantage": float(np.mean(np.abs(batch.advantages))),
    }
    return policy, metrics


@dataclass
class AuditResult:
    max_rel_error: float
    at_clip_boundary: bool


def finite_difference_audit(
    policy: ToyPolicy,
    batch: RlBatch,
    h: float = 1e-5,
    clip_eps: float = 0.2,
) -> AuditResult:
    """Central differences over every touched weight vs the analytic
    gradient; returns the max relative error (guarded denominator).

    Weights of features absent from the batch do not enter the loss, so
    both derivatives vanish there and they are skipped exactly.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ValueError("h must be in [1e-6, 1e-3]")
    analytic = loss_gradient(policy, batch, clip_eps)
    touched = {t.feature for t in batch.transitions}

    ratios = _ratios(batch)
    boundary = bool(
        np.any(np.abs(ratios - (1 - clip_eps)) < 1e-9)
        or np.any(np.abs(ratios - (1 + clip_eps)) < 1e-9)
    )

    def loss_with(feature: Feature, j: int, delta: float) -> float:
        original = policy.weights[feature][j]
        policy.weights[feature][j] = original + delta
        try:
            adv = batch.advantages
            total = 0.0
            for t, a in zip(batch.transitions, adv):
                lp = policy.logp(t.feature, t.allowed, t.action)
                r = math.exp(lp - t.logp_old)
                clipped = min(max(r, 1 - clip_eps), 1 + clip_eps)
                total += min(r * a, clipped * a)
            return -total / len(batch.transitions)
        finally:
            policy.weights[feature][j] = original

    max_err = 0.0
    for feature in sorted(touched):
        arow = analytic.get(feature, np.zeros(len(TOKENS)))
        for j in range(len(TOKENS)):
            fd = (loss_with(feature, j, h) - loss_with(feature, j, -h)) / (2 * h)
            denom = max(abs(fd), abs(arow[j]), 1e-8)
            max_err = max(max_err, abs(fd - arow[j]) / denom)
    return AuditResult(max_rel_error=max_err, at_clip_boundary=boundary)


def collect_batch(
    trees: Sequence[ReasoningTree],
    policy: ToyPolicy,
    behavior: PolicySnapshot,
    reference: PolicySnapshot,
    cfg: RlConfig,
) -> tuple[RlBatch, dict[str, float]]:
    """Transitions from every extracted trajectory of the searched trees.

    Per-step reward is sigma for intermediate steps and the graded outcome
    at the terminal, minus beta times the per-step KL term; rewards-to-go
    are undiscounted suffix sums.
    """
    transitions: list[Transition] = []
    rtg: list[float] = []
    outcomes: list[Verdict] = []
    lengths: list[int] = []
    returns: list[float] = []

    for tree in trees:
        for traj in tree.extract_trajectories():
            verdict = grade_answer(traj.steps[-1].text, tree.gold_answer)
            outcomes.append(verdict)
            lengths.append(len(traj) - 1)
            step_rewards: list[float] = []
            traj_transitions: list[Transition] = []
            for parent_step, child_step in zip(traj.steps, traj.steps[1:]):
                parent_id = parent_step.node_id
                feature = state_feature(tree, parent_id)
                allowed = tuple(canonical_sort(tree.allowed_actions(parent_id)))
                action = child_step.action
                logp_cur = policy.logp(feature, allowed, action)
                logp_old = behavior.logp(feature, allowed, action)
                logp_ref = reference.logp(feature, allowed, action)
                is_last = child_step.node_id == traj.terminal_id
                rm = (
                    rm_score(verdict, cfg.sigma)
                    if is_last
                    else rm_score(Verdict.NULL, cfg.sigma)
                )
                reward = rm - cfg.beta * kl_term(logp_old, logp_ref)
                step_rewards.append(reward)
                traj_transitions.append(
                    Transition(
                        feature=feature,
                        action=action,
                        allowed=allowed,
                        logp_current=logp_cur,
                        logp_old=logp_old,
                        logp_ref=logp_ref,
                        reward=reward,
                    )
                )
            suffix = 0.0
            suffixes = []
            for r in reversed(step_rewards):
                suffix += r
                suffixes.append(suffix)
            suffixes.reverse()
            transitions.extend(traj_transitions)
            rtg.extend(suffixes)
            returns.append(suffixes[0] if suffixes else 0.0)

    batch = RlBatch(transitions=transitions, rewards_to_go=rtg)
    batch.advantages = normalize_advantages(rtg, cfg.std_guard) if rtg else []
    stats = {
        "accuracy": (
            sum(v is Verdict.CORRECT for v in outcomes) / len(outcomes)
            if outcomes
            else 0.0
        ),
        "mean_return": float(np.mean(returns)) if returns else 0.0,
        "mean_length": float(np.mean(lengths)) if lengths else 0.0,
        "trajectories": float(len(outcomes)),
    }
    return batch, stats


def policy_action_chooser(
    policy: ToyPolicy, cfg: RlConfig, rng: random.Random
) -> Callable[..., FunctionalToken]:
    """Bind the policy's untried-action rule for the search engine: argmax
    of the masked distribution over the untried set (or a draw from it)."""

    def choose(
        untried: Sequence[FunctionalToken],
        tree: Optional[ReasoningTree] = None,
        node_id: Optional[int] = None,
    ) -> FunctionalToken:
        assert tree is not None and node_id is not None
        feature = state_feature(tree, node_id)
        allowed = canonical_sort(tree.allowed_actions(node_id))
        probs = policy.masked_probs(feature, allowed)
        pool = canonical_sort(untried)
        if cfg.sample_unexplored:
            weights = [max(probs[_TOKEN_INDEX[a]], 0.0) for a in pool]
            total = sum(weights)
            if total <= 0:
                return pool[0]
            return rng.choices(pool, weights=weights, k=1)[0]
        return max(pool, key=lambda a: (probs[_TOKEN_INDEX[a]], -a.ordinal))

    return choose


def token_guided_search(
    question: str,
    gold: Optional[str],
    generator: StepGenerator,
    policy: ToyPolicy,
    rollouts: int,
    mcts_cfg: MctsConfig,
    sigma: float = 0.0,
    sample: bool = False,
    rng: Optional[random.Random] = None,
    prm: Optional[ProcessScorer] = None,
) -> ReasoningTree:
    """A searched tree whose every action is policy-chosen.

    Each rollout walks root to terminal with select_functional_token
    deciding the token at every node (untried: policy argmax or draw;
    fully expanded: best-UCT child), then backpropagates the graded
    outcome. Unlike the generic engine there is no uniform simulation
    phase, so the harvested trajectories are on-policy end to end.
    """
    tree = ReasoningTree(
        question,
        gold_answer=gold,
        max_depth=mcts_cfg.max_depth,
        allow_root_output=mcts_cfg.allow_root_output,
    )
    for _ in range(rollouts):
        node = 0
        while not tree.is_terminal(node):
            action = select_functional_token(
                policy, tree, node, c=mcts_cfg.c, sample=sample, rng=rng
            )
            existing = {tree.node(c).action: c for c in tree.node(node).children}
            if action in existing:
                node = existing[action]
                continue
            prior = [
                (tree.node(i).action, tree.node(i).text)
                for i in tree.path_to_root(node)[1:]
            ]
            text = generator(question, prior, action, extras=None)
            node = tree.add_child(node, action, text)
        verdict = grade_answer(tree.node(node).text, gold)
        if prm is not None:
            path = tree.path_to_root(node)
            texts = [tree.node(i).text for i in path[1:]]
            for nid, score in zip(path[1:], prm.score_steps(question, texts)):
                tree.node(nid).prm_score = float(score)
        backpropagate(tree, node, rm_score(verdict, sigma), mcts_cfg.q_update)
    return tree


@dataclass
class RlStepRecord:
    step: int
    accuracy: float
    mean_reward: float
    mean_kl: float
    mean_length: float
    loss: float


def run_rl_iteration(
    questions: Sequence[tuple[str, str]],
    policy: ToyPolicy,
    generator: StepGenerator,
    cfg: RlConfig,
    steps: int = 50,
    mcts_cfg: Optional[MctsConfig] = None,
    prm: Optional[ProcessScorer] = None,
    seed: int = 0,
) -> list[RlStepRecord]:
    """Token-guided search, batch assembly, and one update per step.

    questions are (text, gold) pairs; the initial policy is frozen as the
    reference. Every action on every rollout is policy-chosen (see
    token_guided_search). Questions whose generation fails are skipped
    with a log line.
    """
    if not questions:
        raise ValueError("questions must be non-empty")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    base = mcts_cfg or MctsConfig()
    reference = policy.snapshot("reference")
    rng = random.Random(seed)
    history: list[RlStepRecord] = []

    for step in range(steps):
        behavior = policy.snapshot("behavior")
        k = min(cfg.batch_questions, len(questions))
        chosen = rng.sample(range(len(questions)), k)
        trees: list[ReasoningTree] = []
        for qi in chosen:
            question, gold = questions[qi]
            try:
                tree = token_guided_search(
                    question,
                    gold,
                    generator,
                    policy,
                    rollouts=cfg.paths_per_question,
                    mcts_cfg=base,
                    sigma=cfg.sigma,
                    sample=cfg.sample_unexplored,
                    rng=rng,
                    prm=prm,
                )
            except SearchAbortedError as exc:
                logger.warning("question %r skipped: %s", question[:40], exc)
                continue
            trees.append(tree)
        if not trees:
            logger.warning("step %d produced no trees; skipping update", step)
            continue
        batch, stats = collect_batch(trees, policy, behavior, reference, cfg)
        if not batch.transitions:
            continue
        _, metrics = policy_update_step(policy, batch, cfg)
        history.append(
            RlStepRecord(
                step=step,
                accuracy=stats["accuracy"],
                mean_reward=stats["mean_return"],
                mean_kl=metrics["mean_kl"],
                mean_length=stats["mean_length"],
                loss=metrics["loss"],
            )
        )
    return history
