"""Shared helpers: hand-built trees and searched mock-world trees."""

from __future__ import annotations

import random

import pytest

from functree.mcts import MctsConfig, run_search
from functree.mockworld import ToyMathWorld, toy_dataset
from functree.tree import FunctionalToken as T
from functree.tree import ReasoningTree


@pytest.fixture
def world():
    w = ToyMathWorld(seed=11, error_rate=0.3)
    for p in toy_dataset(8, seed=7):
        w.register(p.question, p.answer)
    return w


def make_chain(actions, question="What is 2 + 2?", gold="4", max_depth=15):
    """A single-path tree following `actions` from the root."""
    tree = ReasoningTree(question, gold_answer=gold, max_depth=max_depth)
    parent = 0
    for i, action in enumerate(actions):
        parent = tree.add_child(parent, action, f"s{i}:{action.value}")
    return tree


def searched_tree(seed=0, rollouts=16, error_rate=0.3, qindex=0, prm=False):
    """One mock-world searched tree, deterministic in its arguments."""
    probs = toy_dataset(max(qindex + 1, 4), seed=7)
    p = probs[qindex]
    w = ToyMathWorld(seed=seed, error_rate=error_rate)
    w.register(p.question, p.answer)
    cfg = MctsConfig(rollouts=rollouts, seed=seed)
    return run_search(p.question, p.answer, w.generate, cfg, prm=w if prm else None)


def random_legal_actions(rng: random.Random, max_depth=15):
    """A random legal root-to-output action sequence under depth forcing."""
    tree = ReasoningTree("q?", gold_answer="1", max_depth=max_depth)
    node = 0
    actions = []
    while not tree.is_terminal(node):
        choices = sorted(tree.allowed_actions(node), key=lambda a: a.ordinal)
        action = rng.choice(choices)
        node = tree.add_child(node, action, action.value)
        actions.append(action)
    return actions


ALL_TOKENS = list(T)
