"""Deterministic toy world for offline runs and tests.

A hash-chain generator stands in for the language model: every step text is
a pure function of (seed, question, action path), so trees, searches, and
CLI artifacts are reproducible byte for byte. Solution quality is simulated
by a poison bit that risky content steps may set and refine steps clear;
the final answer is the gold value iff the chain ends clean.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from typing import Optional, Sequence

from .prompts import StepPair
from .tree import FunctionalToken

# Steps that do real solution work and can go wrong.
_RISKY = frozenset({FunctionalToken.NEXT_STEP, FunctionalToken.DIRECT_ANSWER})


def _chain_root(seed: int, question: str) -> bytes:
    return hashlib.sha256(f"{seed}|{question}".encode()).digest()


def _advance(state: bytes, index: int, action: FunctionalToken) -> bytes:
    return hashlib.sha256(state + f"|{index}|{action.value}".encode()).digest()


def _unit(state: bytes) -> float:
    """Map a digest to [0, 1)."""
    return int.from_bytes(state[:8], "big") / 2**64


@dataclass
class _ChainPoint:
    state: bytes
    poisoned: bool


class ToyMathWorld:
    """Deterministic generator + process scorer + dataset, sharing one seed.

    error_rate is the per-risky-step chance (hash-derived, not sampled) of
    poisoning the solution; refine always cures.
    """

    def __init__(self, seed: int = 0, error_rate: float = 0.3):
        if not (0 <= error_rate <= 1):
            raise ValueError("error_rate must be in [0, 1]")
        self.seed = seed
        self.error_rate = error_rate
        self._gold: dict[str, str] = {}

    def register(self, question: str, answer: str) -> None:
        """Teach the world the gold answer for an external question."""
        self._gold[question] = answer

    # -- chain reconstruction ---------------------------------------------

    def _walk(self, question: str, actions: Sequence[FunctionalToken]) -> _ChainPoint:
        state = _chain_root(self.seed, question)
        poisoned = False
        for i, action in enumerate(actions, start=1):
            state = _advance(state, i, action)
            if action in _RISKY and _unit(state) < self.error_rate:
                poisoned = True
            elif action is FunctionalToken.REFINE:
                poisoned = False
        return _ChainPoint(state=state, poisoned=poisoned)

    def _corrupt(self, gold: str, state: bytes) -> str:
        try:
            return str(int(gold) + 1 + int.from_bytes(state[8:16], "big") % 7)
        except ValueError:
            return gold + "0"

    def gold_answer(self, question: str) -> Optional[str]:
        """Gold for registered or toy_dataset questions; None otherwise."""
        return self._gold.get(question) or _TOY_GOLD.get(question)

    # -- generator protocol -------------------------------------------------

    def generate(
        self,
        question: str,
        prior_steps: Sequence[StepPair],
        action: FunctionalToken,
        extras: Optional[tuple[str, str]] = None,
    ) -> str:
        actions = [a for a, _ in prior_steps] + [action]
        point = self._walk(question, actions)
        index = len(actions)
        stamp = point.state[:4].hex()

        if action is FunctionalToken.OUTPUT:
            gold = self.gold_answer(question) or "0"
            answer = gold if not point.poisoned else self._corrupt(gold, point.state)
            return f"[output] step {index} {stamp} The answer is \\boxed{{{answer}}}"
        if action is FunctionalToken.VERIFY and extras is not None:
            _, wrong_solution = extras
            first_wrong = wrong_solution.splitlines()[0] if wrong_solution else ""
            return (
                f"[verify] step {index} {stamp} "
                f"the earlier branch goes wrong at: {first_wrong}"
            )
        return f"[{action.value}] step {index} {stamp} work on {question.split()[0]}"

    __call__ = generate

    # -- process scoring ----------------------------------------------------

    def score_steps(self, question: str, steps: Sequence[str]) -> list[float]:
        """Per-step quality in [0, 1], rebuilt from the text tags alone."""
        actions: list[FunctionalToken] = []
        for text in steps:
            actions.append(_parse_action(text) or FunctionalToken.NEXT_STEP)
        scores = []
        state = _chain_root(self.seed, question)
        poisoned = False
        for i, action in enumerate(actions, start=1):
            state = _advance(state, i, action)
            if action in _RISKY and _unit(state) < self.error_rate:
                poisoned = True
            elif action is FunctionalToken.REFINE:
                poisoned = False
            u = _unit(hashlib.sha256(state + b"|prm").digest())
            scores.append(round(0.1 + 0.2 * u if poisoned else 0.75 + 0.2 * u, 6))
        return scores


def _parse_action(text: str) -> Optional[FunctionalToken]:
    if text.startswith("["):
        end = text.find("]")
        if end > 0:
            try:
                return FunctionalToken(text[1:end])
            except ValueError:
                return None
    return None


# Questions generated by toy_dataset, mapped to their gold answers. The
# registry is module-level so independently constructed worlds agree.
_TOY_GOLD: dict[str, str] = {}


@dataclass
class ToyProblem:
    qid: str
    question: str
    answer: str


def toy_dataset(n: int = 32, seed: int = 7) -> list[ToyProblem]:
    """n small arithmetic problems with deterministic ids and golds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    problems = []
    for i in range(1, n + 1):
        a = rng.randint(2, 12)
        b = rng.randint(2, 12)
        c = rng.randint(1, 50)
        question = f"Evaluate the expression E{i} = {a} * {b} + {c}."
        answer = str(a * b + c)
        _TOY_GOLD[question] = answer
        problems.append(ToyProblem(qid=f"q{i:04d}", question=question, answer=answer))
    return problems
