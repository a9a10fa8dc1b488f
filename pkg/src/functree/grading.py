"""Answer extraction and grading.

Pulls the final boxed answer out of generated text and compares it to a
gold answer with light LaTeX normalization plus a numeric fallback.
"""

from __future__ import annotations

import math
import re
from enum import Enum
from typing import Optional


class Verdict(str, Enum):
    CORRECT = "correct"
    WRONG_PARSED = "wrong_parsed"
    NULL = "null"


def extract_boxed(text: str) -> Optional[str]:
    """Content of the last balanced \\boxed{...} in `text`, or None.

    Never raises: unbalanced braces or a missing marker give None.
    """
    marker = r"\boxed{"
    start = text.rfind(marker)
    if start == -1:
        return None
    i = start + len(marker)
    depth = 1
    out = []
    while i < len(text):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return "".join(out)
        out.append(ch)
        i += 1
    return None  # ran off the end with braces still open


_WHITESPACE = re.compile(r"\s+")


def normalize_answer(ans: str) -> str:
    """Canonical string form: no whitespace, no \\left/\\right, no outer $,
    \\dfrac folded into \\frac."""
    s = _WHITESPACE.sub("", ans)
    s = s.replace(r"\left", "").replace(r"\right", "")
    while len(s) >= 2 and s[0] == "$" and s[-1] == "$":
        s = s[1:-1]
    s = s.replace(r"\dfrac", r"\frac")
    return s


_FRAC = re.compile(r"^\\frac\{([^{}]+)\}\{([^{}]+)\}$")


def _as_number(s: str) -> Optional[float]:
    """Parse a normalized answer as a number when possible."""
    m = _FRAC.match(s)
    if m:
        num = _as_number(m.group(1))
        den = _as_number(m.group(2))
        if num is None or den is None or den == 0:
            return None
        return num / den
    if "/" in s:
        parts = s.split("/")
        if len(parts) == 2:
            num = _as_number(parts[0])
            den = _as_number(parts[1])
            if num is not None and den is not None and den != 0:
                return num / den
        return None
    try:
        return float(s.replace(",", ""))
    except ValueError:
        return None


def answers_match(predicted: str, gold: str) -> bool:
    """Equivalent after normalization, or numerically within 1e-6 relative."""
    p = normalize_answer(predicted)
    g = normalize_answer(gold)
    if p == g:
        return True
    pn = _as_number(p)
    gn = _as_number(g)
    if pn is not None and gn is not None:
        return math.isclose(pn, gn, rel_tol=1e-6, abs_tol=1e-12)
    return False


def grade_answer(text: str, gold: Optional[str]) -> Verdict:
    """Verdict for a final-step text against the gold answer.

    No parseable boxed answer gives NULL; with no gold available everything
    grades NULL as well.
    """
    boxed = extract_boxed(text)
    if boxed is None or gold is None:
        return Verdict.NULL
    return Verdict.CORRECT if answers_match(boxed, gold) else Verdict.WRONG_PARSED
