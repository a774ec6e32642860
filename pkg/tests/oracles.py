"""Independent oracle implementations used to cross-check the library.

Everything here is deliberately written from the definitions rather than
by importing the production code paths it validates.
"""

from __future__ import annotations

import json


# --- quality flag truth table -------------------------------------------------

SUPPORT = "support"
SOMEWHAT = "somewhat_support"
REJECT = "reject"
INSUFFICIENT = "insufficient_information"
ASSESSMENTS = (SUPPORT, SOMEWHAT, REJECT, INSUFFICIENT)


def flag_oracle(criteria: list[tuple[str, str]]) -> str:
    """Direct transcription of the flag mapping rules as an ordered table."""
    if not criteria:
        raise ValueError("empty criteria")
    assessments = [a for _, a in criteria]
    if set(assessments) == {SUPPORT}:
        return "perfect"
    if len(criteria) == 1:
        return "partial" if assessments[0] == SOMEWHAT else "no"
    for ctype, assessment in criteria:
        if assessment in (SUPPORT, SOMEWHAT) and ctype != "time":
            return "partial"
    return "no"


# --- longest-contiguous-block matching (independent of difflib) ---------------


def _longest_block(a, b, alo, ahi, blo, bhi):
    """Largest common contiguous block; ties to smallest a-start, then b-start."""
    best_i, best_j, best_size = alo, blo, 0
    j2len: dict[int, int] = {}
    for i in range(alo, ahi):
        new: dict[int, int] = {}
        for j in range(blo, bhi):
            if a[i] == b[j]:
                k = j2len.get(j - 1, 0) + 1
                new[j] = k
                if k > best_size:
                    best_i, best_j, best_size = i - k + 1, j - k + 1, k
        j2len = new
    return best_i, best_j, best_size


def matched_token_count(a: list[str], b: list[str]) -> int:
    """Total tokens covered by the recursive longest-block decomposition."""
    stack = [(0, len(a), 0, len(b))]
    total = 0
    while stack:
        alo, ahi, blo, bhi = stack.pop()
        i, j, k = _longest_block(a, b, alo, ahi, blo, bhi)
        if k:
            total += k
            stack.append((alo, i, blo, j))
            stack.append((i + k, ahi, j + k, bhi))
    return total


def brute_force_coverage(anchor: list[str], doc: list[str]) -> float:
    """Best coverage over every window of the anchor's own length."""
    m, n = len(anchor), len(doc)
    if m == 0 or n == 0:
        return 0.0
    if n <= m:
        starts = [0]
        length = n
    else:
        starts = range(n - m + 1)
        length = m
    best = 0
    for s in starts:
        best = max(best, matched_token_count(anchor, doc[s : s + length]))
        if best == m:
            break
    return best / m


# --- truncation-repair oracle ---------------------------------------------------

_CLOSERS = {"{": "}", "[": "]"}


def truncation_repairs(base: str) -> list:
    """Every value a strict parser accepts for some suffix-trimmed candidate."""
    values = []
    in_string = False
    escape = False
    stack: list[str] = []
    states = []
    for ch in base:
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
        else:
            if ch == '"':
                in_string = True
            elif ch in "{[":
                stack.append(ch)
            elif ch in "}]" and stack and _CLOSERS[stack[-1]] == ch:
                stack.pop()
        states.append((in_string, escape, tuple(stack)))
    for i in range(len(base), 0, -1):
        s_in, s_esc, s_stack = states[i - 1]
        if s_esc:
            continue
        closers = "".join(_CLOSERS[c] for c in reversed(s_stack))
        if s_in:
            candidates = [base[:i] + '"' + closers]
        else:
            prefix = base[:i].rstrip()
            candidates = [prefix + closers]
            if prefix.endswith(",") or prefix.endswith(":"):
                candidates.append(prefix[:-1].rstrip() + closers)
        for cand in candidates:
            try:
                values.append(json.loads(cand))
            except json.JSONDecodeError:
                continue
    return values
