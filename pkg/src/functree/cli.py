"""Command-line surface: search, forge, rl-sim, and eval.

Configuration resolves as flags > environment > config file > defaults.
With --mock everything runs against the deterministic toy world, and all
artifacts are byte-stable for a fixed seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .forge import ForgeConfig, forge_corpus, preview_record
from .gateway import HttpCompletionBackend, make_step_generator
from .grading import Verdict, grade_answer
from .mcts import MctsConfig, SearchAbortedError, best_trajectory_id, run_search
from .mockworld import ToyMathWorld, toy_dataset
from .rl import RlConfig, ToyPolicy, run_rl_iteration, select_functional_token
from .tree import ReasoningTree

logger = logging.getLogger(__name__)

ENV_ENDPOINT = "FUNCTREE_ENDPOINT"
ENV_MODEL = "FUNCTREE_MODEL"
ENV_API_KEY = "FUNCTREE_API_KEY"
ENV_TIMEOUT = "FUNCTREE_TIMEOUT"

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


@dataclass
class QuestionRecord:
    id: str
    question: str
    answer: Optional[str] = None
    difficulty: Optional[str] = None


class ConfigError(Exception):
    pass


def load_dataset(path: str) -> list[QuestionRecord]:
    """JSONL rows {id, question, answer?, difficulty?} with unique ids."""
    records = []
    seen = set()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"dataset not found: {path}")
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if "id" not in row or "question" not in row:
            raise ConfigError(f"{path}:{lineno}: rows need at least id and question")
        qid = str(row["id"])
        if qid in seen:
            raise ConfigError(f"{path}:{lineno}: duplicate id {qid!r}")
        seen.add(qid)
        answer = row.get("answer")
        records.append(
            QuestionRecord(
                id=qid,
                question=str(row["question"]),
                answer=None if answer is None else str(answer),
                difficulty=row.get("difficulty"),
            )
        )
    return records


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a flat JSON object")
    return data


def _resolve(flag_value, env_name: Optional[str], file_cfg: dict, key: str, default):
    """flags > environment > file > default."""
    if flag_value is not None:
        return flag_value
    if env_name and os.environ.get(env_name):
        return os.environ[env_name]
    if key in file_cfg:
        return file_cfg[key]
    return default


def _question_seed(base_seed: int, qid: str) -> int:
    digest = hashlib.sha256(f"{base_seed}|{qid}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="functree",
        description=(
            "Functional-token tree search, self-correction data synthesis, "
            "and a toy policy-gradient simulator"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, dataset_required: bool = True):
        p.add_argument("--dataset", required=False, help="JSONL with {id, question, answer}")
        p.add_argument("--out", default=None, help="output directory (default ./out)")
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mock", action="store_true", help="use the deterministic toy world")
        p.add_argument("--error-rate", type=float, default=None,
                       help="mock world per-risky-step error chance (default 0.3)")
        p.add_argument("--backend", choices=["mock", "http"], default=None)
        p.add_argument("--endpoint", default=None)
        p.add_argument("--model", default=None)
        p.add_argument("--timeout", type=float, default=None)
        p.add_argument("--temperature", type=float, default=None)
        p.add_argument("--top-p", dest="top_p", type=float, default=None)
        p.add_argument("--max-tokens", dest="max_tokens", type=int, default=None)
        p.add_argument("--concurrency", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")

    ps = sub.add_parser("search", help="build one searched tree per question")
    add_common(ps)
    ps.add_argument("--rollouts", type=int, default=None)
    ps.add_argument("--max-depth", dest="max_depth", type=int, default=None)
    ps.add_argument("--exploration-c", dest="c", type=float, default=None)
    ps.add_argument("--expansion-mode", choices=["single_child", "full_fanout"], default=None)
    ps.add_argument("--simulation-policy", choices=["uniform_random", "greedy_direct_answer"],
                    default=None)
    ps.add_argument("--sigma", type=float, default=None)
    ps.add_argument("--use-prm", action="store_true", help="score steps with the process scorer")

    pf = sub.add_parser("forge", help="synthesize tagged training records from tree dumps")
    add_common(pf)
    pf.add_argument("--trees", required=True, help="directory of tree dump JSON files")
    pf.add_argument("--alpha", type=int, default=None)
    pf.add_argument("--no-fallback-plain", action="store_true")
    pf.add_argument("--no-retag-refine", action="store_true")
    pf.add_argument("--preview-count", type=int, default=None)

    pr = sub.add_parser("rl-sim", help="toy token-guided RL simulation")
    add_common(pr)
    pr.add_argument("--steps", type=int, default=None)
    pr.add_argument("--beta", type=float, default=None)
    pr.add_argument("--clip-eps", dest="clip_eps", type=float, default=None)
    pr.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    pr.add_argument("--batch-questions", dest="batch_questions", type=int, default=None)
    pr.add_argument("--paths-per-question", dest="paths_per_question", type=int, default=None)
    pr.add_argument("--sigma", type=float, default=None)
    pr.add_argument("--max-depth", dest="max_depth", type=int, default=None)
    pr.add_argument("--sample-unexplored", action="store_true")

    pe = sub.add_parser("eval", help="grade one answer per question")
    add_common(pe)
    pe.add_argument("--rollouts", type=int, default=None,
                    help="tree-search budget; omit for one greedy trajectory")
    pe.add_argument("--max-depth", dest="max_depth", type=int, default=None)
    pe.add_argument("--checkpoint", default=None, help="policy weights JSON for token-guided eval")
    pe.add_argument("--sigma", type=float, default=None)
    return parser


# ---------------------------------------------------------------------------
# shared construction


@dataclass
class Runtime:
    file_cfg: dict
    seed: int
    out_dir: Path
    mock: bool
    world: Optional[ToyMathWorld]
    generator: object
    concurrency: int
    backend_name: str
    error_rate: float


def _build_runtime(args) -> Runtime:
    file_cfg = _load_config_file(args.config)
    seed = int(_resolve(args.seed, None, file_cfg, "seed", 0))
    out_dir = Path(_resolve(args.out, None, file_cfg, "out", "out"))
    concurrency = int(_resolve(args.concurrency, None, file_cfg, "concurrency", 4))
    if concurrency < 1:
        raise ConfigError("concurrency must be >= 1")
    error_rate = float(_resolve(args.error_rate, None, file_cfg, "error_rate", 0.3))

    backend = _resolve(args.backend, None, file_cfg, "backend", None)
    if args.mock:
        backend = "mock"
    if backend is None:
        backend = "mock"
    if backend == "mock":
        world = ToyMathWorld(seed=seed, error_rate=error_rate)
        generator = world.generate
    else:
        endpoint = _resolve(args.endpoint, ENV_ENDPOINT, file_cfg, "endpoint", None)
        if not endpoint:
            raise ConfigError(
                f"http backend needs an endpoint: pass --endpoint or set {ENV_ENDPOINT}"
            )
        model = _resolve(args.model, ENV_MODEL, file_cfg, "model", "default")
        api_key = _resolve(None, ENV_API_KEY, file_cfg, "api_key", None)
        timeout = float(_resolve(args.timeout, ENV_TIMEOUT, file_cfg, "timeout", 60.0))
        temperature = float(_resolve(args.temperature, None, file_cfg, "temperature", 0.9))
        top_p = float(_resolve(args.top_p, None, file_cfg, "top_p", 0.8))
        max_tokens = int(_resolve(args.max_tokens, None, file_cfg, "max_tokens", 1024))
        http = HttpCompletionBackend(
            endpoint=endpoint,
            model=model,
            api_key=api_key,
            timeout=timeout,
            max_in_flight=concurrency,
        )
        world = None
        generator = make_step_generator(
            http, temperature=temperature, top_p=top_p, max_tokens=max_tokens
        )
    return Runtime(
        file_cfg=file_cfg,
        seed=seed,
        out_dir=out_dir,
        mock=backend == "mock",
        world=world,
        generator=generator,
        concurrency=concurrency,
        backend_name=backend,
        error_rate=error_rate,
    )


def _mcts_config(args, rt: Runtime, seed: int, rollouts_default: int = 16) -> MctsConfig:
    fc = rt.file_cfg
    rollouts = int(_resolve(getattr(args, "rollouts", None), None, fc, "rollouts", rollouts_default))
    max_depth = int(_resolve(getattr(args, "max_depth", None), None, fc, "max_depth", 15))
    c = float(_resolve(getattr(args, "c", None), None, fc, "c", 1.0))
    sigma = float(_resolve(getattr(args, "sigma", None), None, fc, "sigma", 0.0))
    expansion = _resolve(getattr(args, "expansion_mode", None), None, fc,
                         "expansion_mode", "single_child")
    simulation = _resolve(getattr(args, "simulation_policy", None), None, fc,
                          "simulation_policy", "uniform_random")
    try:
        return MctsConfig(
            c=c,
            rollouts=rollouts,
            max_depth=max_depth,
            expansion_mode=expansion,
            simulation_policy=simulation,
            seed=seed,
            sigma=sigma,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_questions(args, rt: Runtime, need_gold: bool) -> list[QuestionRecord]:
    if args.dataset:
        records = load_dataset(args.dataset)
    elif rt.mock:
        records = [
            QuestionRecord(id=p.qid, question=p.question, answer=p.answer)
            for p in toy_dataset(32, seed=7)
        ]
    else:
        raise ConfigError("--dataset is required unless running --mock")
    if need_gold:
        missing = [r.id for r in records if r.answer is None]
        if missing:
            raise ConfigError(f"gold answers missing for: {', '.join(missing[:5])}")
    if rt.world is not None:
        for r in records:
            if r.answer is not None:
                rt.world.register(r.question, r.answer)
    return records


# ---------------------------------------------------------------------------
# commands


def cmd_search(args) -> int:
    rt = _build_runtime(args)
    records = _load_questions(args, rt, need_gold=False)
    if not records:
        raise ConfigError("dataset is empty")
    cfg_probe = _mcts_config(args, rt, seed=rt.seed)  # validates shared fields
    prm = rt.world if (getattr(args, "use_prm", False) and rt.world is not None) else None

    trees_dir = rt.out_dir / "trees"
    trees_dir.mkdir(parents=True, exist_ok=True)

    def search_one(record: QuestionRecord):
        cfg = _mcts_config(args, rt, seed=_question_seed(rt.seed, record.id))
        return run_search(record.question, record.answer, rt.generator, cfg, prm)

    results: dict[str, ReasoningTree] = {}
    failures: dict[str, str] = {}
    with ThreadPoolExecutor(max_workers=rt.concurrency) as pool:
        futures = {r.id: pool.submit(search_one, r) for r in records}
        for r in records:
            try:
                results[r.id] = futures[r.id].result()
            except SearchAbortedError as exc:
                failures[r.id] = str(exc)
                logger.error("search failed for %s: %s", r.id, exc)

    for r in records:
        if r.id in results:
            (trees_dir / f"{r.id}.json").write_text(results[r.id].to_json() + "\n")

    manifest = {
        "command": "search",
        "backend": rt.backend_name,
        "seed": rt.seed,
        "rollouts": cfg_probe.rollouts,
        "max_depth": cfg_probe.max_depth,
        "exploration_c": cfg_probe.c,
        "expansion_mode": cfg_probe.expansion_mode,
        "simulation_policy": cfg_probe.simulation_policy,
        "sigma": cfg_probe.sigma,
        "error_rate": rt.error_rate if rt.mock else None,
        "questions": len(records),
        "succeeded": len(results),
        "failed": sorted(failures),
    }
    _write_json(rt.out_dir / "search_manifest.json", manifest)
    print(f"search: {len(results)}/{len(records)} questions -> {trees_dir}")
    return EXIT_OK if not failures else EXIT_PARTIAL


def cmd_forge(args) -> int:
    rt = _build_runtime(args)
    fc = rt.file_cfg
    alpha = int(_resolve(args.alpha, None, fc, "alpha", 2))
    preview_count = int(_resolve(args.preview_count, None, fc, "preview_count", 5))
    try:
        cfg = ForgeConfig(
            alpha=alpha,
            fallback_plain=not args.no_fallback_plain,
            retag_refine=not args.no_retag_refine,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    trees_dir = Path(args.trees)
    if not trees_dir.is_dir():
        raise ConfigError(f"tree dump directory not found: {args.trees}")
    dumps = sorted(trees_dir.glob("*.json"))
    if not dumps:
        raise ConfigError(f"no tree dumps in {args.trees}")
    trees = []
    for path in dumps:
        try:
            tree = ReasoningTree.from_json(path.read_text())
        except Exception as exc:
            raise ConfigError(f"malformed tree dump {path}: {exc}") from exc
        trees.append((path.stem, tree))

    if rt.world is None:
        raise ConfigError("forge currently requires the mock world (--mock)")
    for _, tree in trees:
        if tree.gold_answer is not None:
            rt.world.register(tree.question, tree.gold_answer)

    records, report = forge_corpus(trees, rt.generator, rt.world, cfg)

    rt.out_dir.mkdir(parents=True, exist_ok=True)
    sft_path = rt.out_dir / "sft.jsonl"
    sft_path.write_text("".join(r.to_json() + "\n" for r in records))
    payload = report.to_dict()
    payload.update({"command": "forge", "alpha": alpha, "seed": rt.seed})
    _write_json(rt.out_dir / "forge_report.json", payload)
    preview = "\n\n========\n\n".join(preview_record(r) for r in records[:preview_count])
    (rt.out_dir / "sft_preview.txt").write_text(preview + ("\n" if preview else ""))

    print(
        f"forge: {report.records} records ({report.merged} merged, {report.plain} plain) "
        f"from {report.questions} trees -> {sft_path}"
    )
    return EXIT_OK if report.records > 0 or report.questions == 0 else EXIT_PARTIAL


def cmd_rl_sim(args) -> int:
    rt = _build_runtime(args)
    fc = rt.file_cfg
    steps = int(_resolve(args.steps, None, fc, "steps", 50))
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    max_depth = int(_resolve(args.max_depth, None, fc, "max_depth", 15))
    try:
        cfg = RlConfig(
            clip_eps=float(_resolve(args.clip_eps, None, fc, "clip_eps", 0.2)),
            beta=float(_resolve(args.beta, None, fc, "beta", 0.01)),
            learning_rate=float(_resolve(args.learning_rate, None, fc, "learning_rate", 0.5)),
            batch_questions=int(_resolve(args.batch_questions, None, fc, "batch_questions", 16)),
            paths_per_question=int(
                _resolve(args.paths_per_question, None, fc, "paths_per_question", 16)
            ),
            sigma=float(_resolve(args.sigma, None, fc, "sigma", 0.0)),
            sample_unexplored=bool(args.sample_unexplored),
        )
        mcts_cfg = MctsConfig(max_depth=max_depth, seed=rt.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not rt.mock:
        raise ConfigError("rl-sim currently requires the mock world (--mock)")

    records = _load_questions(args, rt, need_gold=True)
    questions = [(r.question, r.answer) for r in records]
    policy = ToyPolicy(max_depth=max_depth)
    history = run_rl_iteration(
        questions, policy, rt.generator, cfg, steps=steps, mcts_cfg=mcts_cfg, seed=rt.seed
    )

    rt.out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["step,accuracy,mean_reward,mean_kl,mean_length"]
    for row in history:
        lines.append(
            f"{row.step},{row.accuracy:.6f},{row.mean_reward:.6f},"
            f"{row.mean_kl:.6f},{row.mean_length:.6f}"
        )
    (rt.out_dir / "metrics.csv").write_text("\n".join(lines) + "\n")
    _write_json(rt.out_dir / "checkpoint.json", policy.to_dict())
    manifest = {
        "command": "rl-sim",
        "seed": rt.seed,
        "steps": steps,
        "beta": cfg.beta,
        "clip_eps": cfg.clip_eps,
        "learning_rate": cfg.learning_rate,
        "batch_questions": cfg.batch_questions,
        "paths_per_question": cfg.paths_per_question,
        "trajectories_per_step": cfg.batch_questions * cfg.paths_per_question,
        "sigma": cfg.sigma,
        "max_depth": max_depth,
        "questions": len(questions),
        "updates_recorded": len(history),
        "error_rate": rt.error_rate,
    }
    _write_json(rt.out_dir / "rl_manifest.json", manifest)
    if history:
        print(
            f"rl-sim: {len(history)} updates, accuracy {history[0].accuracy:.3f} -> "
            f"{history[-1].accuracy:.3f}, mean reward {history[0].mean_reward:.3f} -> "
            f"{history[-1].mean_reward:.3f}"
        )
    else:
        print("rl-sim: no updates recorded")
    return EXIT_OK


def cmd_eval(args) -> int:
    rt = _build_runtime(args)
    records = _load_questions(args, rt, need_gold=True)
    rt.out_dir.mkdir(parents=True, exist_ok=True)
    if not records:
        _write_json(
            rt.out_dir / "eval_report.json",
            {"command": "eval", "questions": 0, "accuracy": None, "verdicts": []},
        )
        print("eval: empty dataset, nothing to grade")
        return EXIT_OK

    rollouts = getattr(args, "rollouts", None)
    max_depth = int(_resolve(args.max_depth, None, rt.file_cfg, "max_depth", 15))
    policy = ToyPolicy(max_depth=max_depth)
    if args.checkpoint:
        cp = Path(args.checkpoint)
        if not cp.exists():
            raise ConfigError(f"checkpoint not found: {args.checkpoint}")
        policy = ToyPolicy.from_dict(json.loads(cp.read_text()))

    verdicts = []
    correct = 0
    failures = 0
    for r in records:
        try:
            if rollouts:
                cfg = _mcts_config(args, rt, seed=_question_seed(rt.seed, r.id))
                tree = run_search(r.question, r.answer, rt.generator, cfg)
                best = best_trajectory_id(tree)
                final_text = tree.node(best).text if best is not None else ""
            else:
                final_text = _greedy_trajectory(r, rt, policy, max_depth)
        except SearchAbortedError as exc:
            failures += 1
            verdicts.append({"id": r.id, "verdict": "error", "detail": str(exc)})
            continue
        verdict = grade_answer(final_text, r.answer)
        if verdict is Verdict.CORRECT:
            correct += 1
        verdicts.append({"id": r.id, "verdict": verdict.value})

    graded = len(records) - failures
    accuracy = correct / graded if graded else None
    report = {
        "command": "eval",
        "seed": rt.seed,
        "mode": f"search[{rollouts}]" if rollouts else "greedy",
        "questions": len(records),
        "graded": graded,
        "correct": correct,
        "accuracy": accuracy,
        "verdicts": verdicts,
    }
    _write_json(rt.out_dir / "eval_report.json", report)
    shown = "n/a" if accuracy is None else f"{accuracy:.4f}"
    print(f"eval: accuracy {shown} on {graded} questions")
    return EXIT_OK if failures == 0 else EXIT_PARTIAL


def _greedy_trajectory(
    record: QuestionRecord, rt: Runtime, policy: ToyPolicy, max_depth: int
) -> str:
    """One token-guided path: policy picks each action, generator writes
    each step; returns the terminal text."""
    tree = ReasoningTree(record.question, gold_answer=record.answer, max_depth=max_depth)
    current = 0
    while not tree.is_terminal(current):
        action = select_functional_token(policy, tree, current)
        prior = [
            (tree.node(i).action, tree.node(i).text)
            for i in tree.path_to_root(current)[1:]
        ]
        text = rt.generator(record.question, prior, action, extras=None)
        current = tree.add_child(current, action, text)
    return tree.node(current).text


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    handlers = {
        "search": cmd_search,
        "forge": cmd_forge,
        "rl-sim": cmd_rl_sim,
        "eval": cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
