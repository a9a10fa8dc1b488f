"""Reasoning-tree data model.

Functional-token alphabet, the action dependency graph, the node arena,
and trajectory extraction / set algebra used by search and data synthesis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional


class FunctionalToken(str, Enum):
    """The eight-element action alphabet. Values are the canonical tag names."""

    CLARIFY = "clarify"
    ANALYSIS = "analysis"
    SUBQUESTION = "subquestion"
    NEXT_STEP = "next_step"
    DIRECT_ANSWER = "direct_answer"
    VERIFY = "verify"
    REFINE = "refine"
    OUTPUT = "output"

    @property
    def ordinal(self) -> int:
        """1-based position in the canonical a1..a8 order."""
        return _ORDINALS[self]

    @classmethod
    def from_tag(cls, tag: str) -> "FunctionalToken":
        try:
            return cls(tag)
        except ValueError:
            raise ValueError(f"unknown functional token tag: {tag!r}") from None


_ORDINALS = {tok: i + 1 for i, tok in enumerate(FunctionalToken)}

# Shorthand used throughout this module.
_T = FunctionalToken


def canonical_sort(tokens: Iterable[FunctionalToken]) -> list[FunctionalToken]:
    """Sort tokens in a1 < a2 < ... < a8 order."""
    return sorted(tokens, key=lambda t: t.ordinal)


# Allowed successors per previous action. clarify appears only in the root
# row; output is terminal and has no successors.
DEPENDENCY_TABLE: dict[FunctionalToken, frozenset[FunctionalToken]] = {
    _T.CLARIFY: frozenset({_T.ANALYSIS, _T.SUBQUESTION, _T.NEXT_STEP, _T.DIRECT_ANSWER}),
    _T.ANALYSIS: frozenset({_T.SUBQUESTION, _T.NEXT_STEP, _T.DIRECT_ANSWER}),
    _T.SUBQUESTION: frozenset({_T.NEXT_STEP}),
    _T.NEXT_STEP: frozenset({_T.SUBQUESTION, _T.NEXT_STEP, _T.DIRECT_ANSWER, _T.VERIFY, _T.OUTPUT}),
    _T.DIRECT_ANSWER: frozenset({_T.VERIFY, _T.OUTPUT}),
    _T.VERIFY: frozenset({_T.SUBQUESTION, _T.NEXT_STEP, _T.DIRECT_ANSWER, _T.VERIFY, _T.REFINE, _T.OUTPUT}),
    _T.REFINE: frozenset({_T.SUBQUESTION, _T.NEXT_STEP, _T.DIRECT_ANSWER, _T.VERIFY, _T.OUTPUT}),
    _T.OUTPUT: frozenset(),
}

ROOT_ACTIONS: frozenset[FunctionalToken] = frozenset(
    {_T.CLARIFY, _T.ANALYSIS, _T.SUBQUESTION, _T.NEXT_STEP, _T.DIRECT_ANSWER}
)

# Two-stage forced termination near the depth cap: one step before the
# penultimate level only closing moves are allowed, then output alone.
_FORCE_PENULTIMATE = frozenset({_T.DIRECT_ANSWER, _T.OUTPUT})
_FORCE_LAST = frozenset({_T.OUTPUT})


def _forced(allowed: set[FunctionalToken], depth: int, max_depth: int) -> set[FunctionalToken]:
    """Apply the depth forcing for expansion from a node at `depth`."""
    if depth >= max_depth:
        return set()
    if depth == max_depth - 1:
        return allowed & _FORCE_LAST
    if depth == max_depth - 2:
        return allowed & _FORCE_PENULTIMATE
    return allowed


def successors(action: Optional[FunctionalToken], allow_root_output: bool = False) -> frozenset[FunctionalToken]:
    """Allowed next tokens after `action` (None means the root question)."""
    if action is None:
        if allow_root_output:
            return ROOT_ACTIONS | {_T.OUTPUT}
        return ROOT_ACTIONS
    return DEPENDENCY_TABLE[action]


class TreeError(Exception):
    """Base class for reasoning-tree errors."""


class UnknownNodeError(TreeError):
    pass


class TerminalNodeError(TreeError):
    pass


class DependencyViolationError(TreeError):
    pass


class TrajectoryMismatchError(TreeError):
    pass


class DegenerateSplitError(TreeError):
    pass


@dataclass
class TreeNode:
    """One step in the arena. visits/value_sum are mutated only by backpropagation."""

    id: int
    parent: Optional[int]
    action: Optional[FunctionalToken]  # None only for the root
    text: str
    depth: int
    visits: int = 0
    value_sum: float = 0.0
    prm_score: Optional[float] = None
    children: list[int] = field(default_factory=list)

    @property
    def is_output(self) -> bool:
        return self.action is _T.OUTPUT


@dataclass
class Step:
    """One trajectory element: (node id, token-or-None-for-root, text)."""

    node_id: int
    action: Optional[FunctionalToken]
    text: str


@dataclass
class Trajectory:
    """Root-to-terminal step sequence extracted from a tree."""

    steps: list[Step]
    terminal_kind: str  # "answered" | "depth_capped"

    def __post_init__(self):
        if not self.steps or self.steps[0].action is not None:
            raise TreeError("trajectory must start at the root")
        outputs = [i for i, s in enumerate(self.steps) if s.action is _T.OUTPUT]
        if len(outputs) > 1 or (outputs and outputs[0] != len(self.steps) - 1):
            raise TreeError("at most one output step, and it must be last")

    @property
    def root_id(self) -> int:
        return self.steps[0].node_id

    @property
    def terminal_id(self) -> int:
        return self.steps[-1].node_id

    @property
    def node_ids(self) -> list[int]:
        return [s.node_id for s in self.steps]

    def texts(self) -> list[str]:
        """Step texts excluding the root question."""
        return [s.text for s in self.steps[1:]]

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class TrajectorySet:
    """Trajectories sharing one root."""

    trajectories: list[Trajectory]

    def __post_init__(self):
        roots = {t.root_id for t in self.trajectories}
        if len(roots) > 1:
            raise TrajectoryMismatchError("trajectories do not share a root")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self.trajectories[i]


class ReasoningTree:
    """Arena of reasoning steps for one question.

    Node ids are indices into the arena; the root is node 0. Every edge
    respects the action dependency table, with a two-stage forced
    termination as depth approaches max_depth.
    """

    def __init__(
        self,
        question: str,
        gold_answer: Optional[str] = None,
        max_depth: int = 15,
        allow_root_output: bool = False,
    ):
        if not question:
            raise ValueError("question must be non-empty")
        if max_depth < 3:
            raise ValueError("max_depth must be >= 3")
        self.question = question
        self.gold_answer = gold_answer
        self.max_depth = max_depth
        self.allow_root_output = allow_root_output
        self.nodes: list[TreeNode] = [
            TreeNode(id=0, parent=None, action=None, text=question, depth=0)
        ]
        self._viability: dict[tuple[FunctionalToken, int], Optional[bool]] = {}

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    def node(self, node_id: int) -> TreeNode:
        if not (0 <= node_id < len(self.nodes)):
            raise UnknownNodeError(f"no node with id {node_id}")
        return self.nodes[node_id]

    def __len__(self) -> int:
        return len(self.nodes)

    def _viable(self, action: FunctionalToken, depth: int) -> bool:
        """Can a node tagged `action` at `depth` still reach an output?"""
        key = (action, depth)
        cached = self._viability.get(key)
        if cached is not None:
            return cached
        if action is _T.OUTPUT:
            result = True
        else:
            nxt = _forced(set(successors(action)), depth, self.max_depth)
            result = any(self._viable(b, depth + 1) for b in nxt)
        self._viability[key] = result
        return result

    def allowed_actions(self, node_id: int) -> set[FunctionalToken]:
        """Legal expansion tokens at a node: the dependency row, narrowed by
        depth forcing, minus actions that could never reach an output before
        the depth cap (so no path is ever forced into a dead end)."""
        n = self.node(node_id)
        if n.is_output:
            raise TerminalNodeError(f"node {node_id} is output-tagged and cannot expand")
        allowed = _forced(
            set(successors(n.action, self.allow_root_output)), n.depth, self.max_depth
        )
        return {a for a in allowed if self._viable(a, n.depth + 1)}

    def is_terminal(self, node_id: int) -> bool:
        """Output-tagged, or no legal continuation (depth-capped dead end)."""
        n = self.node(node_id)
        return n.is_output or not self.allowed_actions(node_id)

    def child_actions(self, node_id: int) -> set[FunctionalToken]:
        n = self.node(node_id)
        return {self.nodes[c].action for c in n.children}

    def unexplored_actions(self, node_id: int) -> set[FunctionalToken]:
        if self.node(node_id).is_output:
            return set()
        return self.allowed_actions(node_id) - self.child_actions(node_id)

    def add_child(self, parent_id: int, action: FunctionalToken, text: str) -> int:
        parent = self.node(parent_id)
        if parent.is_output:
            raise TerminalNodeError(f"node {parent_id} is terminal (output)")
        if action not in self.allowed_actions(parent_id):
            raise DependencyViolationError(
                f"{action.value} may not follow "
                f"{'root' if parent.action is None else parent.action.value} "
                f"at depth {parent.depth}"
            )
        child = TreeNode(
            id=len(self.nodes),
            parent=parent_id,
            action=action,
            text=text,
            depth=parent.depth + 1,
        )
        self.nodes.append(child)
        parent.children.append(child.id)
        return child.id

    def path_to_root(self, node_id: int) -> list[int]:
        """Node ids from root down to node_id inclusive."""
        path = []
        cur: Optional[int] = node_id
        while cur is not None:
            path.append(cur)
            cur = self.node(cur).parent
        return list(reversed(path))

    def trajectory_for(self, terminal_id: int) -> Trajectory:
        ids = self.path_to_root(terminal_id)
        steps = [Step(i, self.nodes[i].action, self.nodes[i].text) for i in ids]
        kind = "answered" if self.nodes[terminal_id].is_output else "depth_capped"
        return Trajectory(steps=steps, terminal_kind=kind)

    def terminal_ids(self) -> list[int]:
        return [n.id for n in self.nodes if self.is_terminal(n.id) if n.id != 0]

    def extract_trajectories(self) -> TrajectorySet:
        """One trajectory per terminal node, ordered by node id."""
        return TrajectorySet([self.trajectory_for(t) for t in self.terminal_ids()])

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "gold_answer": self.gold_answer,
            "max_depth": self.max_depth,
            "allow_root_output": self.allow_root_output,
            "nodes": [
                {
                    "id": n.id,
                    "parent": n.parent,
                    "action": None if n.action is None else n.action.value,
                    "text": n.text,
                    "visits": n.visits,
                    "value_sum": n.value_sum,
                    "prm_score": n.prm_score,
                    "depth": n.depth,
                }
                for n in self.nodes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReasoningTree":
        tree = cls(
            question=data["question"],
            gold_answer=data.get("gold_answer"),
            max_depth=data["max_depth"],
            allow_root_output=data.get("allow_root_output", False),
        )
        rows = sorted(data["nodes"], key=lambda r: r["id"])
        tree.nodes = []
        for row in rows:
            action = None if row["action"] is None else FunctionalToken.from_tag(row["action"])
            tree.nodes.append(
                TreeNode(
                    id=row["id"],
                    parent=row["parent"],
                    action=action,
                    text=row["text"],
                    depth=row["depth"],
                    visits=row["visits"],
                    value_sum=row["value_sum"],
                    prm_score=row["prm_score"],
                )
            )
        for n in tree.nodes:
            if n.parent is not None:
                tree.nodes[n.parent].children.append(n.id)
        return tree

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ReasoningTree":
        return cls.from_dict(json.loads(text))


def trajectory_distance(a: Trajectory, b: Trajectory) -> int:
    """Symmetric difference of non-root node-id sets."""
    if a.root_id != b.root_id or a.steps[0].text != b.steps[0].text:
        raise TrajectoryMismatchError("trajectories have different roots")
    sa = set(a.node_ids[1:])
    sb = set(b.node_ids[1:])
    return len(sa ^ sb)


def split_by_intersection(
    correct: Trajectory, wrong: Trajectory
) -> tuple[list[Step], list[Step], list[Step]]:
    """Split two trajectories into (shared prefix, wrong tail, correct tail).

    The shared prefix is maximal by node id; concatenating it with either
    tail reconstructs the respective trajectory.
    """
    if correct.root_id != wrong.root_id:
        raise TrajectoryMismatchError("trajectories have different roots")
    if correct.node_ids == wrong.node_ids:
        raise DegenerateSplitError("trajectories are identical; nothing to split")
    k = 0
    for sc, sw in zip(correct.steps, wrong.steps):
        if sc.node_id != sw.node_id:
            break
        k += 1
    shared = list(correct.steps[:k])
    wrong_tail = list(wrong.steps[k:])
    correct_tail = list(correct.steps[k:])
    return shared, wrong_tail, correct_tail
