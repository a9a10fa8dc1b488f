"""Reward arithmetic shared by search and the RL loop.

Covers the UCT selection score, the three-level outcome reward, the
per-action log-ratio penalty against a frozen reference, their combination
into the shaped step reward, and trajectory-level process-score averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .grading import Verdict


def uct_score(w: float, n: int, parent_n: int, c: float) -> float:
    """Mean value plus exploration bonus: W/N + c * sqrt(ln(parent N) / N).

    Callers rank unvisited nodes as infinitely urgent themselves; N of 0
    here is a division guard error.
    """
    if n == 0:
        raise ValueError("uct_score undefined at N=0; unvisited nodes outrank all")
    if n < 0 or parent_n < n:
        raise ValueError("need parent_N >= N >= 1")
    if c < 0:
        raise ValueError("exploration weight c must be >= 0")
    return w / n + c * math.sqrt(math.log(parent_n) / n)


@dataclass(frozen=True)
class RewardConfig:
    beta: float = 0.01
    sigma: float = 0.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not (0 <= self.sigma < 1):
            raise ValueError("sigma must be in [0, 1)")


def rm_score(verdict: Verdict, sigma: float = 0.0) -> float:
    """Outcome reward: 1.0 correct, 0.1 parsed-but-wrong, sigma unparsed."""
    if not (0 <= sigma < 1):
        raise ValueError("sigma must be in [0, 1)")
    if verdict is Verdict.CORRECT:
        return 1.0
    if verdict is Verdict.WRONG_PARSED:
        return 0.1
    return sigma


def kl_term(logp_policy: float, logp_ref: float) -> float:
    """Per-action log-ratio log pi_theta(a|s) - log pi_ref(a|s)."""
    if not (math.isfinite(logp_policy) and math.isfinite(logp_ref)):
        raise ValueError("log-probabilities must be finite")
    return logp_policy - logp_ref


def step_reward(rm: float, kl: float, beta: float) -> float:
    """Shaped reward: RM minus beta times the KL term."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return rm - beta * kl


@dataclass(frozen=True)
class PrmScore:
    """Per-step process scores plus their arithmetic mean."""

    per_step: tuple[float, ...]
    mean: float


def average_process_reward(scores: Sequence[float]) -> PrmScore:
    if not scores:
        raise ValueError("scores must be non-empty")
    for s in scores:
        if not (0 <= s <= 1):
            raise ValueError(f"process score {s} outside [0, 1]")
    return PrmScore(per_step=tuple(scores), mean=sum(scores) / len(scores))
