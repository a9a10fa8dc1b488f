"""Functional-token tree search, self-correction data synthesis, and a toy
policy-gradient kernel."""

from .forge import (
    ForgeConfig,
    SftRecord,
    forge_corpus,
    forge_record,
    merge_branches,
    parse_sft_record,
    select_trajectory_pair,
    serialize_sft_record,
    synthesize_verification,
)
from .grading import Verdict, answers_match, extract_boxed, grade_answer, normalize_answer
from .mcts import (
    MctsConfig,
    SearchAbortedError,
    SearchExhaustedError,
    SimulationOutcome,
    backpropagate,
    best_trajectory_id,
    expand,
    run_search,
    select_leaf,
    simulate,
)
from .mockworld import ToyMathWorld, ToyProblem, toy_dataset
from .rewards import (
    PrmScore,
    RewardConfig,
    average_process_reward,
    kl_term,
    rm_score,
    step_reward,
    uct_score,
)
from .rl import (
    RlBatch,
    RlConfig,
    ToyPolicy,
    Transition,
    finite_difference_audit,
    normalize_advantages,
    policy_update_step,
    reinforce_pp_loss,
    run_rl_iteration,
    token_guided_search,
    select_functional_token,
)
from .tree import (
    DependencyViolationError,
    FunctionalToken,
    ReasoningTree,
    Step,
    Trajectory,
    TrajectorySet,
    TreeNode,
    split_by_intersection,
    trajectory_distance,
)

__version__ = "0.1.0"
