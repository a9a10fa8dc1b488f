"""Training-record synthesis from searched trees.

Picks the strongest correct trajectory and a near-miss wrong one, asks the
generator to explain where the wrong branch derails, splices
wrong-branch + verification + corrected continuation into one path, and
serializes it as a flat tagged body that parses back exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .grading import Verdict, grade_answer
from .mcts import ProcessScorer, StepGenerator
from .prompts import tag_wrap
from .rewards import average_process_reward
from .tree import (
    DependencyViolationError,
    FunctionalToken,
    ReasoningTree,
    Step,
    Trajectory,
    TrajectorySet,
    TreeError,
    split_by_intersection,
    successors,
    trajectory_distance,
)

logger = logging.getLogger(__name__)

TaggedStep = tuple[FunctionalToken, str]


class NoCorrectPathError(TreeError):
    """The tree contains no trajectory grading correct."""


class SftParseError(ValueError):
    """Malformed record body; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ForgeConfig:
    alpha: int = 2
    fallback_plain: bool = True
    retag_refine: bool = True

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")


@dataclass
class SftRecord:
    question: str
    body: str
    steps: list[TaggedStep]
    provenance: tuple[str, int, Optional[int]]  # (tree id, correct terminal, wrong terminal)

    def to_json(self) -> str:
        return json.dumps(
            {
                "question": self.question,
                "body": self.body,
                "steps": [[a.value, t] for a, t in self.steps],
                "provenance": list(self.provenance),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "SftRecord":
        data = json.loads(line)
        prov = data["provenance"]
        return cls(
            question=data["question"],
            body=data["body"],
            steps=[(FunctionalToken.from_tag(a), t) for a, t in data["steps"]],
            provenance=(prov[0], prov[1], prov[2]),
        )


def trajectory_verdict(traj: Trajectory, gold: Optional[str]) -> Verdict:
    return grade_answer(traj.steps[-1].text, gold)


def _mean_prm(question: str, traj: Trajectory, prm: ProcessScorer) -> float:
    scores = list(prm.score_steps(question, traj.texts()))
    return average_process_reward(scores).mean


def select_trajectory_pair(
    trajectories: TrajectorySet,
    gold: str,
    prm: ProcessScorer,
    cfg: ForgeConfig = ForgeConfig(),
) -> tuple[Trajectory, Optional[Trajectory]]:
    """Best correct trajectory by mean process score, and the weakest
    near-miss wrong one within distance alpha (None when none qualifies).

    Ties go to the lower trajectory index.
    """
    if not len(trajectories):
        raise ValueError("trajectory set is empty")
    question = trajectories[0].steps[0].text
    means = [_mean_prm(question, t, prm) for t in trajectories]
    verdicts = [trajectory_verdict(t, gold) for t in trajectories]

    correct = [i for i, v in enumerate(verdicts) if v is Verdict.CORRECT]
    if not correct:
        raise NoCorrectPathError("no trajectory grades correct")
    best = max(correct, key=lambda i: (means[i], -i))
    tau_c = trajectories[best]

    wrong = [
        i
        for i, v in enumerate(verdicts)
        if v is Verdict.WRONG_PARSED
        and trajectory_distance(trajectories[i], tau_c) < cfg.alpha
    ]
    if not wrong:
        return tau_c, None
    worst = min(wrong, key=lambda i: (means[i], i))
    return tau_c, trajectories[worst]


def _texts_block(steps: Sequence[Step]) -> str:
    return "\n".join(s.text for s in steps)


def synthesize_verification(
    tau_c: Trajectory,
    tau_w: Trajectory,
    generator: StepGenerator,
) -> str:
    """Generate the review step contrasting the wrong tail with the correct
    one; prior context is the shared prefix."""
    shared, wrong_tail, correct_tail = split_by_intersection(tau_c, tau_w)
    if not wrong_tail:
        raise ValueError("wrong trajectory has no divergent steps to verify")
    prior = [(s.action, s.text) for s in shared[1:]]
    extras = (_texts_block(correct_tail), _texts_block(wrong_tail))
    return generator(
        tau_c.steps[0].text, prior, FunctionalToken.VERIFY, extras=extras
    )


def validate_tag_sequence(steps: Sequence[TaggedStep]) -> None:
    """Check a root-less tag sequence against the action dependency table
    (no depth forcing); raises on the first illegal adjacency."""
    prev: Optional[FunctionalToken] = None
    for action, _ in steps:
        if action not in successors(prev):
            prev_name = "root" if prev is None else prev.value
            raise DependencyViolationError(
                f"{action.value} may not follow {prev_name}"
            )
        prev = action


def merge_branches(
    tau_plus: Sequence[Step],
    tau_w_minus: Sequence[Step],
    s_v: str,
    tau_c_minus: Sequence[Step],
    retag_refine: bool = True,
) -> list[TaggedStep]:
    """Concatenate shared prefix, wrong tail, verification, and corrected
    continuation into one tagged path.

    The first corrected step is re-tagged refine when a wrong tail is
    present (and retagging is on); the merged tag sequence must be legal.
    """
    if not tau_plus or tau_plus[0].action is not None:
        raise ValueError("tau_plus must start at the root")
    if not tau_c_minus:
        raise ValueError("tau_c_minus must be non-empty")
    ids = [s.node_id for seg in (tau_plus, tau_w_minus, tau_c_minus) for s in seg]
    if len(ids) != len(set(ids)):
        raise ValueError("segments must be pairwise disjoint by node id")

    merged: list[TaggedStep] = [(s.action, s.text) for s in tau_plus[1:]]
    merged += [(s.action, s.text) for s in tau_w_minus]
    if tau_w_minus:
        merged.append((FunctionalToken.VERIFY, s_v))
        first, *rest = tau_c_minus
        corrected = FunctionalToken.REFINE if retag_refine else first.action
        merged.append((corrected, first.text))
        merged += [(s.action, s.text) for s in rest]
    else:
        merged += [(s.action, s.text) for s in tau_c_minus]
    validate_tag_sequence(merged)
    return merged


def serialize_sft_record(
    question: str,
    steps: Sequence[TaggedStep],
    provenance: tuple[str, int, Optional[int]] = ("", -1, None),
) -> SftRecord:
    """Flat `<tag>text</tag>` concatenation; the question stays separate.

    The body is round-trip checked at construction.
    """
    if not steps:
        raise ValueError("cannot serialize an empty step list")
    if steps[-1][0] is not FunctionalToken.OUTPUT:
        raise ValueError("last step must be output-tagged")
    body = "".join(tag_wrap(a, t) for a, t in steps)
    parsed = parse_sft_record(body)
    if parsed != list(steps):
        raise ValueError("body does not round-trip; step text breaks the tag format")
    return SftRecord(
        question=question, body=body, steps=list(steps), provenance=provenance
    )


def parse_sft_record(body: str) -> list[TaggedStep]:
    """Inverse of serialization; rejects unknown, unclosed, or mismatched
    tags with the byte offset of the fault."""
    steps: list[TaggedStep] = []
    pos = 0
    n = len(body)
    while pos < n:
        if body[pos] != "<":
            raise SftParseError("expected an open tag", pos)
        end = body.find(">", pos)
        if end == -1:
            raise SftParseError("unterminated open tag", pos)
        tag = body[pos + 1 : end]
        try:
            action = FunctionalToken(tag)
        except ValueError:
            raise SftParseError(f"unknown tag {tag!r}", pos) from None
        text_start = end + 1
        close_at = body.find("</", text_start)
        if close_at == -1:
            raise SftParseError(f"missing close tag for {tag!r}", text_start)
        close_end = body.find(">", close_at)
        if close_end == -1:
            raise SftParseError("unterminated close tag", close_at)
        close_tag = body[close_at + 2 : close_end]
        if close_tag != tag:
            raise SftParseError(
                f"close tag {close_tag!r} does not match open tag {tag!r}", close_at
            )
        steps.append((action, body[text_start:close_at]))
        pos = close_end + 1
    if not steps:
        raise SftParseError("empty body", 0)
    return steps


@dataclass
class ForgeReport:
    """Counts from one forging pass."""

    questions: int = 0
    records: int = 0
    merged: int = 0
    plain: int = 0
    skipped_no_correct: int = 0
    skipped_error: int = 0
    skipped_reasons: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "questions": self.questions,
            "records": self.records,
            "merged": self.merged,
            "plain": self.plain,
            "skipped_no_correct": self.skipped_no_correct,
            "skipped_error": self.skipped_error,
            "skipped_reasons": sorted(self.skipped_reasons),
        }


def _trim_trailing_output(steps: list[Step]) -> list[Step]:
    if steps and steps[-1].action is FunctionalToken.OUTPUT:
        return steps[:-1]
    return steps


def forge_record(
    tree: ReasoningTree,
    tree_id: str,
    generator: StepGenerator,
    prm: ProcessScorer,
    cfg: ForgeConfig = ForgeConfig(),
) -> Optional[SftRecord]:
    """One record for one searched tree, or None when nothing is usable.

    A merged self-correction record when a near-miss wrong branch exists;
    otherwise (or if merging is illegal) the plain correct path, subject to
    fallback_plain.
    """
    if tree.gold_answer is None:
        raise ValueError("cannot forge without a gold answer")
    trajectories = tree.extract_trajectories()
    tau_c, tau_w = select_trajectory_pair(trajectories, tree.gold_answer, prm, cfg)

    def plain() -> Optional[SftRecord]:
        if not cfg.fallback_plain:
            return None
        if tau_c.steps[-1].action is not FunctionalToken.OUTPUT:
            return None
        steps = [(s.action, s.text) for s in tau_c.steps[1:]]
        return serialize_sft_record(
            tree.question, steps, (tree_id, tau_c.terminal_id, None)
        )

    if tau_w is None:
        return plain()

    shared, wrong_tail, correct_tail = split_by_intersection(tau_c, tau_w)
    # The wrong branch's own final answer is dropped: the merged path must
    # keep a single output step, the corrected one.
    wrong_core = _trim_trailing_output(wrong_tail)
    if not wrong_core:
        return plain()
    if len(correct_tail) == 1:
        # Only the final output diverges; there is no correction step to
        # re-tag refine, so a merged record cannot be formed.
        return plain()
    try:
        s_v = synthesize_verification(tau_c, tau_w, generator)
        merged = merge_branches(shared, wrong_core, s_v, correct_tail, cfg.retag_refine)
        return serialize_sft_record(
            tree.question, merged, (tree_id, tau_c.terminal_id, tau_w.terminal_id)
        )
    except (TreeError, ValueError) as exc:
        logger.warning("merge failed for %s, falling back to plain: %s", tree_id, exc)
        return plain()


def forge_corpus(
    trees: Sequence[tuple[str, ReasoningTree]],
    generator: StepGenerator,
    prm: ProcessScorer,
    cfg: ForgeConfig = ForgeConfig(),
) -> tuple[list[SftRecord], ForgeReport]:
    """Forge every (id, tree) pair, collecting records and tallies."""
    report = ForgeReport()
    records = []
    for tree_id, tree in trees:
        report.questions += 1
        try:
            record = forge_record(tree, tree_id, generator, prm, cfg)
        except NoCorrectPathError:
            report.skipped_no_correct += 1
            report.skipped_reasons.append(f"{tree_id}: no correct trajectory")
            continue
        except (TreeError, ValueError) as exc:
            report.skipped_error += 1
            report.skipped_reasons.append(f"{tree_id}: {exc}")
            continue
        if record is None:
            report.skipped_error += 1
            report.skipped_reasons.append(f"{tree_id}: nothing serializable")
            continue
        records.append(record)
        report.records += 1
        if record.provenance[2] is not None:
            report.merged += 1
        else:
            report.plain += 1
    return records, report


def preview_record(record: SftRecord) -> str:
    """Human-readable layout: question then one tag-labelled block per step."""
    lines = [f"Question: {record.question}", ""]
    for action, text in record.steps:
        lines.append(f"<{action.value}>")
        lines.append(text)
        lines.append(f"</{action.value}>")
    return "\n".join(lines)
