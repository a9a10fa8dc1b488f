"""Acceptance gate: one test per shipping criterion, stated tolerances.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS/FAIL line
per criterion with its measured margin.
"""

import hashlib
import math
import random
import time

import numpy as np
import pytest

from functree.forge import (
    ForgeConfig,
    NoCorrectPathError,
    forge_record,
    parse_sft_record,
    select_trajectory_pair,
    validate_tag_sequence,
)
from functree.grading import Verdict, extract_boxed, grade_answer
from functree.mcts import MctsConfig, best_trajectory_id, run_search
from functree.mockworld import ToyMathWorld, toy_dataset
from functree.rewards import rm_score, step_reward, uct_score
from functree.rl import (
    RlBatch,
    RlConfig,
    ToyPolicy,
    Transition,
    finite_difference_audit,
    normalize_advantages,
    reinforce_pp_loss,
    run_rl_iteration,
)
from functree.tree import FunctionalToken as T
from functree.tree import successors, trajectory_distance

# Dependency rows re-typed by ordinal, independent of the implementation.
LEGAL = {
    0: {1, 2, 3, 4, 5},  # 0 stands for the root
    1: {2, 3, 4, 5},
    2: {3, 4, 5},
    3: {4},
    4: {3, 4, 5, 6, 8},
    5: {6, 8},
    6: {3, 4, 5, 6, 7, 8},
    7: {3, 4, 5, 6, 8},
    8: set(),
}


def report(ok: bool, name: str, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line)
    assert ok, line


def test_c01_selection_score_oracle():
    rng = random.Random(101)
    t0 = time.perf_counter()
    max_err = 0.0
    for _ in range(10_000):
        n = rng.randint(1, 1_000_000)
        parent_n = n + rng.randint(0, 1_000_000)
        w = rng.uniform(-10.0, 10.0)
        c = rng.uniform(0.0, 10.0)
        got = uct_score(w, n, parent_n, c)
        want = w / n + c * math.sqrt(math.log(parent_n) / n)
        max_err = max(max_err, abs(got - want) / max(1.0, abs(want)))
    elapsed = time.perf_counter() - t0
    report(
        max_err <= 1e-12 and elapsed < 1.0,
        "C1 selection score",
        f"10000 tuples, max rel err {max_err:.2e} (tol 1e-12), {elapsed:.2f}s (<1s)",
    )


def test_c02_fuzzed_rollout_legality_and_bookkeeping():
    probs = toy_dataset(32, seed=7)
    violations = 0
    bookkeeping = 0
    rollout_total = 0
    for k in range(50):
        p = probs[k % 32]
        world = ToyMathWorld(seed=k, error_rate=0.2 + (k % 4) * 0.1)
        world.register(p.question, p.answer)
        cfg = MctsConfig(rollouts=20, seed=1_000 + k)
        tree = run_search(p.question, p.answer, world.generate, cfg)
        rollout_total += tree.root.visits
        if tree.root.visits != 20:
            bookkeeping += 1
        terminal_visits = 0
        for node in tree.nodes:
            if node.id != 0:
                parent = tree.node(node.parent)
                row = LEGAL[0 if parent.action is None else parent.action.ordinal]
                if node.action.ordinal not in row:
                    violations += 1
                if node.depth != parent.depth + 1:
                    bookkeeping += 1
            child_actions = [tree.node(c).action for c in node.children]
            if len(child_actions) != len(set(child_actions)):
                bookkeeping += 1
            if tree.is_terminal(node.id):
                terminal_visits += node.visits
            elif node.visits != sum(tree.node(c).visits for c in node.children):
                bookkeeping += 1
            if not (-1e-12 <= node.value_sum <= node.visits + 1e-12):
                bookkeeping += 1
        if terminal_visits != tree.root.visits:
            bookkeeping += 1
    report(
        violations == 0 and bookkeeping == 0 and rollout_total == 1000,
        "C2 rollout legality",
        f"{rollout_total} rollouts over 50 trees, "
        f"{violations} dependency violations, {bookkeeping} bookkeeping faults",
    )


def test_c03_outcome_reward_and_kl_slope():
    exact = True
    for sigma in (0.0, 0.3, 0.5):
        exact &= rm_score(Verdict.CORRECT, sigma) == 1.0
        exact &= rm_score(Verdict.WRONG_PARSED, sigma) == 0.1
        exact &= rm_score(Verdict.NULL, sigma) == sigma
    rng = random.Random(303)
    max_err = 0.0
    for _ in range(1000):
        rm = rng.choice([1.0, 0.1, 0.0, 0.3, 0.5])
        kl = rng.uniform(-5.0, 5.0)
        beta = rng.uniform(0.0, 1.0)
        slope = step_reward(rm, kl + 1.0, beta) - step_reward(rm, kl, beta)
        max_err = max(max_err, abs(slope - (-beta)))
    report(
        exact and max_err <= 1e-12,
        "C3 outcome reward",
        f"verdict values exact for sigma in {{0, 0.3, 0.5}}; "
        f"KL slope err {max_err:.2e} over 1000 triples (tol 1e-12)",
    )


def _clean_ratio_delta(rng) -> float:
    while True:
        delta = rng.uniform(-0.45, 0.45)
        ratio = math.exp(delta)
        if abs(ratio - 0.8) > 2e-3 and abs(ratio - 1.2) > 2e-3:
            return delta


def test_c04_loss_hand_cases_and_gradient_audit():
    allowed = (T.CLARIFY, T.ANALYSIS, T.NEXT_STEP, T.DIRECT_ANSWER)
    uniform = -math.log(len(allowed))

    def one(advantage, logp_current, logp_old):
        b = RlBatch(
            transitions=[
                Transition(
                    ("ROOT", 0), T.CLARIFY, allowed,
                    logp_current, logp_old, logp_old, advantage,
                )
            ],
            rewards_to_go=[advantage],
        )
        b.advantages = [advantage]
        return b

    hand_err = 0.0
    # Ratio 1: loss is -mean(advantage).
    b = RlBatch(
        transitions=[
            Transition(("ROOT", 0), T.CLARIFY, allowed, uniform, uniform, uniform, a)
            for a in (0.3, -0.7, 1.1)
        ],
        rewards_to_go=[0.3, -0.7, 1.1],
    )
    b.advantages = [0.3, -0.7, 1.1]
    hand_err = max(hand_err, abs(reinforce_pp_loss(b, 0.2) - (-(0.3 - 0.7 + 1.1) / 3)))
    # Ratio 1.3, advantage +1: clipped at 1.2.
    hand_err = max(
        hand_err, abs(reinforce_pp_loss(one(1.0, math.log(1.3), 0.0), 0.2) - (-1.2))
    )
    # Ratio 0.5, advantage -1: clipped branch -0.8 is the min.
    hand_err = max(
        hand_err, abs(reinforce_pp_loss(one(-1.0, math.log(0.5), 0.0), 0.2) - 0.8)
    )

    t0 = time.perf_counter()
    worst = 0.0
    boundary_hits = 0
    for k in range(100):
        rng = random.Random(4_000 + k)
        policy = ToyPolicy()
        for f in policy.weights:
            policy.weights[f] = np.asarray(
                [rng.uniform(-0.5, 0.5) for _ in range(8)]
            )
        transitions, rtg = [], []
        for _ in range(6):
            action = rng.choice(list(allowed))
            lp = policy.logp(("ROOT", 0), allowed, action)
            delta = _clean_ratio_delta(rng)
            transitions.append(
                Transition(("ROOT", 0), action, allowed, lp, lp - delta, lp - delta, 0.0)
            )
            rtg.append(rng.uniform(-1.0, 1.0))
        batch = RlBatch(transitions=transitions, rewards_to_go=rtg)
        batch.advantages = normalize_advantages(rtg)
        audit = finite_difference_audit(policy, batch, h=1e-5, clip_eps=0.2)
        boundary_hits += audit.at_clip_boundary
        worst = max(worst, audit.max_rel_error)
    elapsed = time.perf_counter() - t0
    report(
        hand_err <= 1e-12 and worst <= 1e-5 and boundary_hits == 0 and elapsed < 30,
        "C4 surrogate loss",
        f"hand-case err {hand_err:.2e} (tol 1e-12); gradient audit worst rel err "
        f"{worst:.2e} over 100 batches (tol 1e-5), {elapsed:.1f}s (<30s)",
    )


def test_c05_advantage_normalization():
    rng = random.Random(505)
    worst_mean = 0.0
    worst_std = 0.0
    for _ in range(200):
        n = rng.randint(2, 64)
        xs = [rng.uniform(-10, 10) for _ in range(n)]
        adv = np.asarray(normalize_advantages(xs))
        worst_mean = max(worst_mean, abs(float(adv.mean())))
        if np.std(xs) > 1e-6:
            worst_std = max(worst_std, abs(float(adv.std()) - 1.0))
    constant_ok = normalize_advantages([0.7] * 9) == [0.0] * 9
    report(
        worst_mean <= 1e-9 and worst_std <= 1e-9 and constant_ok,
        "C5 advantage normalization",
        f"|mean| <= {worst_mean:.2e}, |std-1| <= {worst_std:.2e} over 200 batches "
        f"(tol 1e-9); constant batch -> zeros: {constant_ok}",
    )


def _grow_answer_tree(rng):
    from functree.tree import ReasoningTree

    tree = ReasoningTree("What is 6 * 7?", gold_answer="42", max_depth=8)
    for _ in range(6):
        node = 0
        while not tree.is_terminal(node):
            allowed = sorted(tree.allowed_actions(node), key=lambda a: a.ordinal)
            action = rng.choice(allowed)
            existing = {tree.node(c).action: c for c in tree.node(node).children}
            if action in existing:
                node = existing[action]
                continue
            if action is T.OUTPUT:
                text = rng.choice(
                    [
                        "The answer is \\boxed{42}",
                        "The answer is \\boxed{41}",
                        "no boxed answer",
                        "The answer is \\boxed{42}",
                    ]
                )
            else:
                text = f"{action.value} #{len(tree)}"
            node = tree.add_child(node, action, text)
    return tree


def _brute_force_pair(trajectories, gold, prm, alpha):
    question = trajectories[0].steps[0].text
    means = []
    for t in trajectories:
        scores = prm.score_steps(question, t.texts())
        means.append(sum(scores) / len(scores))
    verdicts = [grade_answer(t.steps[-1].text, gold) for t in trajectories]
    correct = [(means[i], -i) for i, v in enumerate(verdicts) if v is Verdict.CORRECT]
    if not correct:
        return None
    best_i = -max(correct)[1]
    wrong = [
        (means[i], i)
        for i, v in enumerate(verdicts)
        if v is Verdict.WRONG_PARSED
        and trajectory_distance(trajectories[i], trajectories[best_i]) < alpha
    ]
    return best_i, (min(wrong)[1] if wrong else None)


class _HashPrm:
    def score_steps(self, question, steps):
        out = []
        for text in steps:
            h = hashlib.sha256(f"{question}|{text}".encode()).digest()
            out.append(int.from_bytes(h[:4], "big") / 2**32)
        return out


def test_c06_record_forging_on_mock_trees():
    probs = toy_dataset(32, seed=7)
    cfg = ForgeConfig(alpha=6)
    records = 0
    merged = 0
    faults = []
    for k in range(200):
        p = probs[k % 32]
        world = ToyMathWorld(seed=k, error_rate=0.35)
        world.register(p.question, p.answer)
        tree = run_search(
            p.question, p.answer, world.generate, MctsConfig(rollouts=12, seed=k)
        )
        try:
            record = forge_record(tree, f"t{k}", world.generate, world, cfg)
        except NoCorrectPathError:
            continue
        if record is None:
            continue
        records += 1
        tags = [a for a, _ in record.steps]
        if parse_sft_record(record.body) != record.steps:
            faults.append(f"t{k}: body does not round-trip")
        try:
            validate_tag_sequence(record.steps)
        except Exception as exc:
            faults.append(f"t{k}: illegal tags: {exc}")
        if tags[-1] is not T.OUTPUT or tags.count(T.OUTPUT) != 1:
            faults.append(f"t{k}: output step malformed")
        if record.provenance[2] is not None:
            merged += 1
            pairs = list(zip(tags, tags[1:]))
            if not any(a is T.VERIFY and b is T.REFINE for a, b in pairs):
                faults.append(f"t{k}: merged record lacks verify->refine")

    agree = 0
    total = 0
    for k in range(1000):
        rng = random.Random(60_000 + k)
        tree = _grow_answer_tree(rng)
        trajs = list(tree.extract_trajectories())[:6]
        if not trajs:
            continue
        total += 1
        alpha = rng.randint(1, 8)
        prm = _HashPrm()
        want = _brute_force_pair(trajs, "42", prm, alpha)
        try:
            tau_c, tau_w = select_trajectory_pair(
                trajs, "42", prm, ForgeConfig(alpha=alpha)
            )
            got = (
                tau_c.terminal_id,
                None if tau_w is None else tau_w.terminal_id,
            )
        except NoCorrectPathError:
            got = None
        if want is None:
            agree += got is None
        else:
            want_ids = (
                trajs[want[0]].terminal_id,
                None if want[1] is None else trajs[want[1]].terminal_id,
            )
            agree += got == want_ids
    report(
        not faults and records > 0 and merged > 0 and agree == total,
        "C6 record forging",
        f"{records} records from 200 trees ({merged} merged), {len(faults)} faults; "
        f"pair selection agrees with brute force on {agree}/{total} sets",
    )


def test_c07_boxed_extraction():
    cases = [
        ("The answer is \\boxed{432}.", "432"),
        ("\\boxed{\\frac{\\sqrt{21}}{5}}", "\\frac{\\sqrt{21}}{5}"),
        ("therefore \\boxed{2}", "2"),
    ]
    exact = all(extract_boxed(text) == want for text, want in cases)
    rng = random.Random(707)
    alphabet = "\\boxed{}frac123 xy$}{"
    crashes = 0
    t0 = time.perf_counter()
    for _ in range(100_000):
        s = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 40)))
        try:
            extract_boxed(s)
        except Exception:
            crashes += 1
    elapsed = time.perf_counter() - t0
    report(
        exact and crashes == 0,
        "C7 boxed extraction",
        f"reference cases exact: {exact}; 100000 fuzzed strings, "
        f"{crashes} crashes, {elapsed:.1f}s",
    )


def _qseed(seed: int, qid: str, budget: int) -> int:
    d = hashlib.sha256(f"{seed}|{qid}|{budget}".encode()).digest()
    return int.from_bytes(d[:4], "big")


def test_c08_solve_rate_scales_with_rollout_budget():
    t0 = time.perf_counter()
    budgets = [1, 2, 4, 8, 16]
    probs = toy_dataset(32, seed=7)
    means = {}
    for budget in budgets:
        rates = []
        for seed in range(20):
            world = ToyMathWorld(seed=seed, error_rate=0.3)
            correct = 0
            for p in probs:
                world.register(p.question, p.answer)
                cfg = MctsConfig(rollouts=budget, seed=_qseed(seed, p.qid, budget))
                tree = run_search(p.question, p.answer, world.generate, cfg)
                best = best_trajectory_id(tree)
                text = tree.node(best).text if best is not None else ""
                correct += grade_answer(text, p.answer) is Verdict.CORRECT
            rates.append(correct / len(probs))
        means[budget] = sum(rates) / len(rates)
    elapsed = time.perf_counter() - t0
    monotone = all(means[a] <= means[b] for a, b in zip(budgets, budgets[1:]))
    gain_pp = 100 * (means[16] - means[1])
    shown = ", ".join(f"{b}: {means[b]:.3f}" for b in budgets)
    report(
        monotone and gain_pp >= 10.0 and elapsed < 120,
        "C8 rollout scaling",
        f"mean solve rate over 20 seeds {{{shown}}}, non-decreasing: {monotone}, "
        f"gain 1->16 {gain_pp:.1f}pp (need >=10), {elapsed:.0f}s (<120s)",
    )


def test_c09_learning_curves_improve():
    t0 = time.perf_counter()
    wins = 0
    deltas = []
    max_abs_kl = 0.0
    kl_finite = True
    for seed in range(20):
        world = ToyMathWorld(seed=seed, error_rate=0.3)
        questions = []
        for p in toy_dataset(32, seed=7):
            world.register(p.question, p.answer)
            questions.append((p.question, p.answer))
        history = run_rl_iteration(
            questions, ToyPolicy(), world.generate, RlConfig(), steps=50, seed=seed
        )
        rewards = [h.mean_reward for h in history]
        first = sum(rewards[:10]) / 10
        last = sum(rewards[-10:]) / 10
        deltas.append(last - first)
        wins += last > first
        for h in history:
            if not math.isfinite(h.mean_kl):
                kl_finite = False
            max_abs_kl = max(max_abs_kl, abs(h.mean_kl))
    elapsed = time.perf_counter() - t0
    report(
        wins >= 18 and kl_finite and max_abs_kl <= 1.0 and elapsed < 300,
        "C9 learning curves",
        f"window-10 reward improves on {wins}/20 seeds (need >=18), "
        f"min delta {min(deltas):+.4f}, max |KL| {max_abs_kl:.4f} (<=1), "
        f"{elapsed:.0f}s (<300s)",
    )


def test_c10_byte_identical_artifacts(tmp_path):
    import json

    from functree.cli import EXIT_OK, main

    data = tmp_path / "data.jsonl"
    rows = [
        {"id": f"q{i}", "question": p.question, "answer": p.answer}
        for i, p in enumerate(toy_dataset(6, seed=7))
    ]
    data.write_text("\n".join(json.dumps(r) for r in rows) + "\n")

    def run_all(base):
        search_out = base / "search"
        assert main([
            "search", "--mock", "--dataset", str(data), "--out", str(search_out),
            "--rollouts", "8", "--seed", "5", "--error-rate", "0.35",
        ]) == EXIT_OK
        assert main([
            "forge", "--mock", "--trees", str(search_out / "trees"),
            "--out", str(base / "forge"), "--alpha", "6", "--seed", "5",
            "--error-rate", "0.35",
        ]) == EXIT_OK
        assert main([
            "rl-sim", "--mock", "--out", str(base / "rl"), "--steps", "2",
            "--batch-questions", "3", "--paths-per-question", "3", "--seed", "5",
        ]) == EXIT_OK
        assert main([
            "eval", "--mock", "--dataset", str(data), "--out", str(base / "eval"),
            "--rollouts", "4", "--seed", "5",
        ]) == EXIT_OK

    run_all(tmp_path / "a")
    run_all(tmp_path / "b")
    a_files = sorted(
        p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()
    )
    b_files = sorted(
        p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file()
    )
    same_names = a_files == b_files
    diffs = [
        str(rel)
        for rel in a_files
        if (tmp_path / "a" / rel).read_bytes() != (tmp_path / "b" / rel).read_bytes()
    ]
    report(
        same_names and not diffs and len(a_files) >= 8,
        "C10 reproducible artifacts",
        f"{len(a_files)} files from 4 commands, byte-identical across reruns: "
        f"{not diffs}" + (f" (differs: {', '.join(diffs[:3])})" if diffs else ""),
    )
