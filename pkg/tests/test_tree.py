"""Tree data model: token alphabet, dependency edges, trajectories."""

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_chain
from functree.tree import (
    DegenerateSplitError,
    DependencyViolationError,
    FunctionalToken as T,
    ReasoningTree,
    Step,
    TerminalNodeError,
    Trajectory,
    TrajectoryMismatchError,
    UnknownNodeError,
    canonical_sort,
    split_by_intersection,
    successors,
    trajectory_distance,
)

# Re-typed from the dependency table, as ordinal sets, to cross-check the
# implementation against an independent statement of the same rows.
ORACLE_ROWS = {
    1: {2, 3, 4, 5},
    2: {3, 4, 5},
    3: {4},
    4: {3, 4, 5, 6, 8},
    5: {6, 8},
    6: {3, 4, 5, 6, 7, 8},
    7: {3, 4, 5, 6, 8},
    8: set(),
}
ORACLE_ROOT = {1, 2, 3, 4, 5}

BY_ORDINAL = {t.ordinal: t for t in T}


class TestAlphabet:
    def test_eight_tokens_in_canonical_order(self):
        assert [t.value for t in T] == [
            "clarify",
            "analysis",
            "subquestion",
            "next_step",
            "direct_answer",
            "verify",
            "refine",
            "output",
        ]
        assert [t.ordinal for t in T] == list(range(1, 9))

    def test_from_tag_round_trip_and_unknown(self):
        for t in T:
            assert T.from_tag(t.value) is t
        with pytest.raises(ValueError):
            T.from_tag("bogus")

    def test_canonical_sort(self):
        shuffled = [T.OUTPUT, T.CLARIFY, T.VERIFY, T.ANALYSIS]
        assert canonical_sort(shuffled) == [T.CLARIFY, T.ANALYSIS, T.VERIFY, T.OUTPUT]


class TestDependencyTable:
    def test_every_row_matches_oracle(self):
        for ordinal, succ in ORACLE_ROWS.items():
            got = successors(BY_ORDINAL[ordinal])
            assert {t.ordinal for t in got} == succ, f"row a{ordinal}"

    def test_root_row(self):
        assert {t.ordinal for t in successors(None)} == ORACLE_ROOT
        assert {t.ordinal for t in successors(None, allow_root_output=True)} == (
            ORACLE_ROOT | {8}
        )

    def test_clarify_only_from_root(self):
        rows_with_clarify = [o for o, s in ORACLE_ROWS.items() if 1 in s]
        assert rows_with_clarify == []
        assert T.CLARIFY in successors(None)

    def test_output_terminal(self):
        assert successors(T.OUTPUT) == frozenset()


class TestTreeConstruction:
    def test_root_only(self):
        tree = ReasoningTree("q?")
        assert len(tree) == 1 and tree.root.depth == 0 and tree.root.action is None

    def test_rejects_empty_question_and_tiny_depth(self):
        with pytest.raises(ValueError):
            ReasoningTree("")
        with pytest.raises(ValueError):
            ReasoningTree("q?", max_depth=2)

    def test_add_child_root_clarify(self):
        tree = ReasoningTree("q?")
        cid = tree.add_child(0, T.CLARIFY, "We are given...")
        assert tree.node(cid).depth == 1
        assert tree.node(cid).parent == 0
        assert tree.root.children == [cid]

    def test_add_child_dependency_violation(self):
        tree = ReasoningTree("q?")
        sq = tree.add_child(0, T.SUBQUESTION, "Let's find x now")
        with pytest.raises(DependencyViolationError):
            tree.add_child(sq, T.VERIFY, "check")

    def test_add_child_to_output_is_terminal_error(self):
        tree = make_chain([T.NEXT_STEP, T.OUTPUT])
        out = tree.nodes[-1].id
        with pytest.raises(TerminalNodeError):
            tree.add_child(out, T.NEXT_STEP, "more")

    def test_unknown_node(self):
        tree = ReasoningTree("q?")
        with pytest.raises(UnknownNodeError):
            tree.node(5)

    def test_counts_start_at_zero(self):
        tree = ReasoningTree("q?")
        cid = tree.add_child(0, T.NEXT_STEP, "step")
        assert tree.node(cid).visits == 0 and tree.node(cid).value_sum == 0.0


class TestDepthForcing:
    def test_penultimate_level_restricts_to_closers(self):
        # Depth 13 of 15: only direct_answer or output.
        tree = make_chain([T.NEXT_STEP] * 13, max_depth=15)
        leaf = tree.nodes[-1].id
        assert tree.node(leaf).depth == 13
        assert tree.allowed_actions(leaf) == {T.DIRECT_ANSWER, T.OUTPUT}

    def test_last_level_forces_output(self):
        tree = make_chain([T.NEXT_STEP] * 13 + [T.DIRECT_ANSWER], max_depth=15)
        leaf = tree.nodes[-1].id
        assert tree.node(leaf).depth == 14
        assert tree.allowed_actions(leaf) == {T.OUTPUT}

    def test_no_action_offered_that_dead_ends(self):
        # At depth 12 of 15 a subquestion child would reach depth 13 where
        # its only successor (next_step) is forced away, so it is not offered.
        tree = make_chain([T.NEXT_STEP] * 12, max_depth=15)
        leaf = tree.nodes[-1].id
        allowed = tree.allowed_actions(leaf)
        assert T.SUBQUESTION not in allowed
        assert allowed == {T.NEXT_STEP, T.DIRECT_ANSWER, T.VERIFY, T.OUTPUT}

    def test_every_reachable_node_can_close(self):
        rng = random.Random(5)
        for _ in range(50):
            tree = ReasoningTree("q?", max_depth=7)
            node = 0
            while not tree.is_terminal(node):
                allowed = tree.allowed_actions(node)
                assert allowed, "non-terminal node with nothing to expand"
                node = tree.add_child(
                    node, rng.choice(canonical_sort(allowed)), "t"
                )
            assert tree.node(node).is_output
            assert tree.node(node).depth <= 7


class TestTrajectories:
    def test_extraction_ordered_by_terminal_id(self):
        tree = ReasoningTree("q?")
        a = tree.add_child(0, T.NEXT_STEP, "a")
        out1 = tree.add_child(a, T.OUTPUT, "o1")
        b = tree.add_child(0, T.DIRECT_ANSWER, "b")
        out2 = tree.add_child(b, T.OUTPUT, "o2")
        trajs = tree.extract_trajectories()
        assert [t.terminal_id for t in trajs] == sorted([out1, out2])

    def test_trajectory_shape_invariants(self):
        with pytest.raises(Exception):
            Trajectory(steps=[Step(1, T.NEXT_STEP, "no root")], terminal_kind="answered")
        with pytest.raises(Exception):
            Trajectory(
                steps=[
                    Step(0, None, "q"),
                    Step(1, T.OUTPUT, "o"),
                    Step(2, T.NEXT_STEP, "late"),
                ],
                terminal_kind="answered",
            )

    def test_texts_exclude_root(self):
        tree = make_chain([T.NEXT_STEP, T.OUTPUT])
        traj = tree.extract_trajectories()[0]
        assert traj.texts() == ["s0:next_step", "s1:output"]


class TestTrajectoryDistance:
    def _pair(self):
        tree = ReasoningTree("q?")
        s1 = tree.add_child(0, T.NEXT_STEP, "s1")
        s2 = tree.add_child(s1, T.NEXT_STEP, "s2")
        s3 = tree.add_child(s2, T.OUTPUT, "s3")
        w2 = tree.add_child(s1, T.DIRECT_ANSWER, "w2")
        w3 = tree.add_child(w2, T.VERIFY, "w3")
        w4 = tree.add_child(w3, T.OUTPUT, "w4")
        return tree.trajectory_for(s3), tree.trajectory_for(w4)

    def test_disjoint_suffixes_two_and_three(self):
        a, b = self._pair()
        assert trajectory_distance(a, b) == 5

    def test_identity_and_symmetry(self):
        a, b = self._pair()
        assert trajectory_distance(a, a) == 0
        assert trajectory_distance(a, b) == trajectory_distance(b, a)

    def test_different_roots_rejected(self):
        t1 = make_chain([T.NEXT_STEP, T.OUTPUT])
        t2 = make_chain([T.NEXT_STEP, T.OUTPUT], question="other?")
        with pytest.raises(TrajectoryMismatchError):
            trajectory_distance(
                t1.extract_trajectories()[0], t2.extract_trajectories()[0]
            )

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_triangle_inequality_on_random_triples(self, seed):
        rng = random.Random(seed)
        tree = ReasoningTree("q?", max_depth=9)
        # Grow a bushy tree, then sample three terminals.
        for _ in range(40):
            node = 0
            while not tree.is_terminal(node):
                allowed = canonical_sort(
                    a for a in tree.allowed_actions(node)
                )
                action = rng.choice(allowed)
                existing = {
                    tree.node(c).action: c for c in tree.node(node).children
                }
                node = existing.get(action) or tree.add_child(node, action, "t")
        terminals = tree.terminal_ids()
        if len(terminals) < 3:
            return
        x, y, z = (tree.trajectory_for(t) for t in rng.sample(terminals, 3))
        assert trajectory_distance(x, z) <= (
            trajectory_distance(x, y) + trajectory_distance(y, z)
        )


class TestSplitByIntersection:
    def test_shared_prefix_and_divergent_tails(self):
        tree = ReasoningTree("x")
        s1 = tree.add_child(0, T.NEXT_STEP, "s1")
        s2 = tree.add_child(s1, T.NEXT_STEP, "s2")
        s3 = tree.add_child(s2, T.OUTPUT, "s3")
        w2 = tree.add_child(s1, T.DIRECT_ANSWER, "w2")
        correct = tree.trajectory_for(s3)
        wrong = tree.trajectory_for(w2)
        shared, wrong_tail, correct_tail = split_by_intersection(correct, wrong)
        assert [s.node_id for s in shared] == [0, s1]
        assert [s.node_id for s in wrong_tail] == [w2]
        assert [s.node_id for s in correct_tail] == [s2, s3]

    def test_round_trip_reconstruction(self):
        tree = ReasoningTree("x")
        s1 = tree.add_child(0, T.ANALYSIS, "s1")
        s2 = tree.add_child(s1, T.NEXT_STEP, "s2")
        s3 = tree.add_child(s2, T.OUTPUT, "s3")
        w2 = tree.add_child(s1, T.NEXT_STEP, "w2")
        w3 = tree.add_child(w2, T.OUTPUT, "w3")
        correct = tree.trajectory_for(s3)
        wrong = tree.trajectory_for(w3)
        shared, wrong_tail, correct_tail = split_by_intersection(correct, wrong)
        assert [s.node_id for s in shared + correct_tail] == correct.node_ids
        assert [s.node_id for s in shared + wrong_tail] == wrong.node_ids

    def test_root_always_shared(self):
        tree = ReasoningTree("x")
        a = tree.add_child(0, T.NEXT_STEP, "a")
        ao = tree.add_child(a, T.OUTPUT, "ao")
        b = tree.add_child(0, T.DIRECT_ANSWER, "b")
        bo = tree.add_child(b, T.OUTPUT, "bo")
        shared, _, _ = split_by_intersection(
            tree.trajectory_for(ao), tree.trajectory_for(bo)
        )
        assert [s.node_id for s in shared] == [0]

    def test_identical_degenerate(self):
        tree = make_chain([T.NEXT_STEP, T.OUTPUT])
        traj = tree.extract_trajectories()[0]
        with pytest.raises(DegenerateSplitError):
            split_by_intersection(traj, traj)


class TestSerialization:
    def test_json_round_trip_byte_exact(self):
        tree = make_chain([T.CLARIFY, T.NEXT_STEP, T.VERIFY, T.OUTPUT])
        tree.node(1).visits = 3
        tree.node(1).value_sum = 2.2
        tree.node(2).prm_score = 0.75
        dump = tree.to_json()
        again = ReasoningTree.from_json(dump)
        assert again.to_json() == dump
        assert again.node(2).prm_score == 0.75
        assert again.node(1).children == tree.node(1).children

    def test_dump_is_flat_node_table(self):
        tree = make_chain([T.NEXT_STEP, T.OUTPUT])
        data = json.loads(tree.to_json())
        assert set(data) == {
            "question",
            "gold_answer",
            "max_depth",
            "allow_root_output",
            "nodes",
        }
        assert {row["id"] for row in data["nodes"]} == {0, 1, 2}
        assert set(data["nodes"][0]) == {
            "id",
            "parent",
            "action",
            "text",
            "visits",
            "value_sum",
            "prm_score",
            "depth",
        }
