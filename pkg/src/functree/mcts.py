"""Four-phase tree search over a pluggable step generator.

Selection walks UCT down to an expandable node, expansion generates one or
all untried actions, simulation plays random legal steps to a terminal,
and backpropagation feeds the graded outcome back up the path. Simulated
steps are materialized as ordinary tree nodes.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

from .grading import Verdict, grade_answer
from .rewards import rm_score, uct_score
from .tree import FunctionalToken, ReasoningTree, TreeError, canonical_sort

logger = logging.getLogger(__name__)

StepGenerator = Callable[..., str]
# Called as chooser(untried, tree=..., node_id=...); the context lets
# policy-guided choosers look at the node being expanded.
ActionChooser = Callable[..., FunctionalToken]


class ProcessScorer(Protocol):
    def score_steps(self, question: str, steps: Sequence[str]) -> Sequence[float]: ...


class SearchExhaustedError(TreeError):
    """Every path in the tree is terminal; nothing left to expand."""


class SearchAbortedError(TreeError):
    """Generator kept failing; carries the partial tree."""

    def __init__(self, message: str, tree: ReasoningTree, rollouts_completed: int):
        super().__init__(message)
        self.tree = tree
        self.rollouts_completed = rollouts_completed


@dataclass(frozen=True)
class MctsConfig:
    c: float = 1.0
    rollouts: int = 16
    max_depth: int = 15
    expansion_mode: str = "single_child"
    simulation_policy: str = "uniform_random"
    seed: int = 0
    sigma: float = 0.0
    q_update: str = "sum"
    backprop_prm_mean: bool = False
    allow_root_output: bool = False

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("c must be > 0")
        if self.rollouts < 1:
            raise ValueError("rollouts must be >= 1")
        if self.max_depth < 3:
            raise ValueError("max_depth must be >= 3")
        if self.expansion_mode not in ("single_child", "full_fanout"):
            raise ValueError(f"unknown expansion_mode: {self.expansion_mode!r}")
        if self.simulation_policy not in ("uniform_random", "greedy_direct_answer"):
            raise ValueError(f"unknown simulation_policy: {self.simulation_policy!r}")
        if not (0 <= self.sigma < 1):
            raise ValueError("sigma must be in [0, 1)")
        if self.q_update not in ("sum", "appendix"):
            raise ValueError(f"unknown q_update: {self.q_update!r}")


@dataclass
class SimulationOutcome:
    terminal_node: int
    terminal_reward: float
    verdict: Verdict


def _is_exhausted(tree: ReasoningTree, node_id: int) -> bool:
    """Terminal, or fully expanded with every child subtree exhausted."""
    if tree.is_terminal(node_id):
        return True
    if tree.unexplored_actions(node_id):
        return False
    return all(_is_exhausted(tree, c) for c in tree.node(node_id).children)


def select_leaf(tree: ReasoningTree, cfg: MctsConfig) -> int:
    """Descend by UCT to a node with an untried allowed action.

    Fully exhausted subtrees are skipped so the rollout is never wasted on
    a path with nothing left to try; an exhausted root means the search is
    over.
    """
    if _is_exhausted(tree, 0):
        raise SearchExhaustedError("every path is terminal; the tree is exhausted")
    current = 0
    while True:
        if tree.unexplored_actions(current):
            return current
        candidates = [c for c in tree.node(current).children if not _is_exhausted(tree, c)]
        # A non-exhausted, fully expanded node has a non-exhausted child.
        best = None
        best_score = -float("inf")
        parent_n = tree.node(current).visits
        for cid in candidates:
            child = tree.node(cid)
            score = (
                float("inf")
                if child.visits == 0
                else uct_score(child.value_sum, child.visits, parent_n, cfg.c)
            )
            if score > best_score:
                best, best_score = cid, score
        assert best is not None
        current = best


def expand(
    tree: ReasoningTree,
    node_id: int,
    generator: StepGenerator,
    cfg: MctsConfig,
    action_chooser: ActionChooser,
) -> list[int]:
    """Create children for untried actions; returns new ids, chosen first.

    single_child mode generates exactly the action picked by
    action_chooser; full_fanout generates one child per untried action.
    """
    untried = canonical_sort(tree.unexplored_actions(node_id))
    if not untried:
        raise ValueError(f"node {node_id} has no unexplored actions")
    chosen = action_chooser(untried, tree=tree, node_id=node_id)
    if chosen not in untried:
        raise ValueError(f"action_chooser returned {chosen!r}, not an untried action")
    actions = [chosen] if cfg.expansion_mode == "single_child" else (
        [chosen] + [a for a in untried if a is not chosen]
    )
    prior = _steps_above(tree, node_id)
    new_ids = []
    for action in actions:
        text = generator(tree.question, prior, action, extras=None)
        new_ids.append(tree.add_child(node_id, action, text))
    return new_ids


def _steps_above(tree: ReasoningTree, node_id: int) -> list[tuple[FunctionalToken, str]]:
    path = tree.path_to_root(node_id)
    return [(tree.node(i).action, tree.node(i).text) for i in path[1:]]


def simulate(
    tree: ReasoningTree,
    node_id: int,
    generator: StepGenerator,
    cfg: MctsConfig,
    rng: Optional[random.Random] = None,
) -> SimulationOutcome:
    """Play legal actions from node_id until a terminal, then grade it.

    Picks uniformly among allowed actions, or rushes direct_answer/output
    under the greedy policy. A step whose action already exists as a child
    descends into that child instead of duplicating it.
    """
    rng = rng or random.Random(cfg.seed)
    current = node_id
    while not tree.is_terminal(current):
        allowed = canonical_sort(tree.allowed_actions(current))
        if cfg.simulation_policy == "greedy_direct_answer":
            if FunctionalToken.DIRECT_ANSWER in allowed:
                action = FunctionalToken.DIRECT_ANSWER
            elif FunctionalToken.OUTPUT in allowed:
                action = FunctionalToken.OUTPUT
            else:
                action = rng.choice(allowed)
        else:
            action = rng.choice(allowed)
        existing = {tree.node(c).action: c for c in tree.node(current).children}
        if action in existing:
            current = existing[action]
            continue
        text = generator(tree.question, _steps_above(tree, current), action, extras=None)
        current = tree.add_child(current, action, text)

    # Depth-capped terminals usually carry no boxed answer and grade Null,
    # but the text decides either way.
    terminal = tree.node(current)
    verdict = grade_answer(terminal.text, tree.gold_answer)
    reward = rm_score(verdict, cfg.sigma)
    return SimulationOutcome(terminal_node=current, terminal_reward=reward, verdict=verdict)


def backpropagate(
    tree: ReasoningTree, terminal_node_id: int, r: float, q_update: str = "sum"
) -> None:
    """Credit every node on the root path: N += 1 and W += r.

    The appendix variant instead stores the self-normalizing update
    W <- (W + r) / N with N already incremented.
    """
    for nid in tree.path_to_root(terminal_node_id):
        node = tree.node(nid)
        node.visits += 1
        if q_update == "appendix":
            node.value_sum = (node.value_sum + r) / node.visits
        else:
            node.value_sum += r


def uniform_chooser(rng: random.Random) -> ActionChooser:
    return lambda untried, tree=None, node_id=None: rng.choice(list(untried))


def run_search(
    question: str,
    gold: Optional[str],
    generator: StepGenerator,
    cfg: MctsConfig,
    prm: Optional[ProcessScorer] = None,
    action_chooser: Optional[ActionChooser] = None,
) -> ReasoningTree:
    """Run cfg.rollouts select/expand/simulate/backpropagate cycles.

    Deterministic for a fixed seed and deterministic generator. With a
    process scorer, every step on each rollout's path is scored into
    prm_score. Persistent generator failure aborts with the partial tree
    attached; an exhausted tree just ends the search early.
    """
    tree = ReasoningTree(
        question,
        gold_answer=gold,
        max_depth=cfg.max_depth,
        allow_root_output=cfg.allow_root_output,
    )
    rng = random.Random(cfg.seed)
    chooser = action_chooser or uniform_chooser(rng)
    completed = 0
    for rollout in range(cfg.rollouts):
        try:
            leaf = select_leaf(tree, cfg)
        except SearchExhaustedError:
            logger.info("tree exhausted after %d rollouts", completed)
            break
        try:
            new_ids = expand(tree, leaf, generator, cfg, chooser)
            outcome = simulate(tree, new_ids[0], generator, cfg, rng)
        except (TreeError, ValueError):
            raise
        except Exception as exc:
            raise SearchAbortedError(
                f"generator failed on rollout {rollout + 1}: {exc}", tree, completed
            ) from exc

        reward = outcome.terminal_reward
        if prm is not None:
            path = tree.path_to_root(outcome.terminal_node)
            texts = [tree.node(i).text for i in path[1:]]
            scores = prm.score_steps(question, texts)
            for nid, score in zip(path[1:], scores):
                tree.node(nid).prm_score = float(score)
            if cfg.backprop_prm_mean and texts:
                path_mean = sum(scores) / len(scores)
                reward = 0.5 * (reward + path_mean)
        backpropagate(tree, outcome.terminal_node, reward, cfg.q_update)
        completed += 1
    return tree


def best_trajectory_id(tree: ReasoningTree) -> Optional[int]:
    """Terminal with the most visits, then highest mean value, then lowest id."""
    terminals = tree.terminal_ids()
    if not terminals:
        return None

    def key(nid: int):
        n = tree.node(nid)
        mean = n.value_sum / n.visits if n.visits else 0.0
        return (-n.visits, -mean, nid)

    return min(terminals, key=key)
