"""Prompt rendering for both generator modes.

prompt_guided mode renders a per-action instruction template plus the
solution-so-far; token_guided mode renders the bare tagged context ending
with the open tag of the next action, leaving continuation to the model.
"""

from __future__ import annotations

from typing import Optional, Sequence

from .tree import FunctionalToken

StepPair = tuple[FunctionalToken, str]

# Question asked of the generator when cross-examining a wrong branch
# against the correct one.
VERIFY_QUESTION = (
    "Compared to similar correct steps before, where does the current step go wrong?"
)

_CLARIFY_TEMPLATE = """\
You are an AI assistant to help me clarify questions by restating the original question and task in a clear and comprehensive manner. In your clarified version, ensure that all information from the original question is fully expressed. Following are some useful examples.

Original Question: Increasing the radius of a cylinder by $6$ units increased the volume by $y$ cubic units. Increasing the height of the cylinder by $6$ units also increases the volume by $y$ cubic units. If the original height is $2$, then what is the original radius?

Clarified Question: We are given a problem involving a cylinder where increasing the radius by 6 units and increasing the height by 6 units each results in an increase in volume by \\( y \\) cubic units. Our goal is to find the original radius of the cylinder, given that the original height is 2.

Original Question: A wooden model of a square pyramid has a base edge of 12 cm and an altitude of 8 cm. A cut is made parallel to the base of the pyramid that separates it into two pieces: a smaller pyramid and a frustum. Each base edge of the smaller pyramid is 6 cm and its altitude is 4 cm. How many cubic centimeters are in the volume of the frustum?

Clarified Question: Let's understand what is being asked. Given a wooden model of a square pyramid has a base edge of 12 cm and an altitude of 8 cm. Also given a cut parallel to the base creates a smaller pyramid and a frustum. Note that the smaller pyramid has a base edge of 6 cm and an altitude of 4 cm. We need to find the volume of the frustum.

Question: {question}"""

_ANALYSIS_TEMPLATE = """\
Given a math problem and an existing incomplete solution, your task is to provide a brief insight for the following problem. Note that it's not required to provide any specific solution process or calculation, but give a general guidance of sovling this problem. Usually one or two sentences are enough.

Question: {question}"""

_SUBQUESTION_TEMPLATE = """\
Given a math problem and an existing incomplete solution, please propose a sub-problem that can be solved independently based on my current progress. The output format is limited to: "Let's ... now". Where ... indicates the omitted sub-problem that you should fill in. Note that do not propose sub-problems that have already been solved in previous steps.

Here is the input, please follow the restricted output format.

Question: {question}"""

_NEXT_STEP_TEMPLATE = """\
Given a math problem and an existing incomplete solution, your task is to propose one next step in a smooth and proper way.

If no existing steps are provided, you need to briefly analyse the problem from scratch and then output the first step. Otherwise, you need to output the correct next step of the existing solution, following the ideas of the existing steps.

Your output should be a single reasoning step that may include reasoning, detailed calculations process, choosing answers, etc.

Question: {question}"""

_DIRECT_ANSWER_TEMPLATE = """\
Given a math problem and an existing incomplete solution, your task is to complete the remaining solution in a smooth and proper way. You need to give step-by-step solutions to the problem following the ideas of the existing steps, and do not repeat any existing steps.

Question: {question}"""

_VERIFY_TEMPLATE = """\
Given a problem and its previous solution steps, there is a correct subsequent solution and your subsequent solution. Please meticulously review your subsequent solution step by step and identify if any mistakes occur.

# Correct solution
{correct_solution}

# Your subsequent solution
{solution}

Question: {question}"""

# In-search verify has no paired correct branch to show, so it reduces to a
# plain self-review of the steps so far.
_VERIFY_SEARCH_TEMPLATE = """\
Given a problem and its previous solution steps, please meticulously review your solution step by step and identify if any mistakes occur.

Question: {question}"""

_REFINE_TEMPLATE = """\
Given a math problem, an existing incomplete solution, and a review pointing out a mistake, your task is to correct the mistake and continue the solution in a smooth and proper way.

Question: {question}"""

_OUTPUT_TEMPLATE = """\
Given a math problem and an existing solution, your task is to state the final answer concisely. Put the final answer inside \\boxed{{}}.

Question: {question}"""

_TEMPLATES: dict[FunctionalToken, str] = {
    FunctionalToken.CLARIFY: _CLARIFY_TEMPLATE,
    FunctionalToken.ANALYSIS: _ANALYSIS_TEMPLATE,
    FunctionalToken.SUBQUESTION: _SUBQUESTION_TEMPLATE,
    FunctionalToken.NEXT_STEP: _NEXT_STEP_TEMPLATE,
    FunctionalToken.DIRECT_ANSWER: _DIRECT_ANSWER_TEMPLATE,
    FunctionalToken.VERIFY: _VERIFY_SEARCH_TEMPLATE,
    FunctionalToken.REFINE: _REFINE_TEMPLATE,
    FunctionalToken.OUTPUT: _OUTPUT_TEMPLATE,
}


def tag_wrap(action: FunctionalToken, text: str) -> str:
    return f"<{action.value}>{text}</{action.value}>"


def render_steps(prior_steps: Sequence[StepPair]) -> str:
    return "".join(tag_wrap(a, t) for a, t in prior_steps)


def render_prompt(
    action: FunctionalToken,
    question: str,
    prior_steps: Sequence[StepPair] = (),
    extras: Optional[tuple[str, str]] = None,
    mode: str = "prompt_guided",
) -> str:
    """Full prompt string for generating one step.

    extras, only meaningful for verify, is (correct subsequent solution,
    wrong subsequent solution); supplying it switches verify to the paired
    cross-examination form and appends the fixed probe question.
    """
    if mode == "token_guided":
        ctx = render_steps(prior_steps)
        return f"{question}{ctx}<{action.value}>"
    if mode != "prompt_guided":
        raise ValueError(f"unknown prompt mode: {mode!r}")

    if action is FunctionalToken.VERIFY and extras is not None:
        correct_solution, wrong_solution = extras
        body = _VERIFY_TEMPLATE.format(
            question=question,
            correct_solution=correct_solution,
            solution=wrong_solution,
        )
        body = f"{body}\n\n{VERIFY_QUESTION}"
    else:
        body = _TEMPLATES[action].format(question=question)

    if prior_steps:
        shown = "\n".join(f"<{a.value}> {t}" for a, t in prior_steps)
        body = f"{body}\n\nExisting steps:\n{shown}"
    return body
