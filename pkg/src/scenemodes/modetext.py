"""Deterministic text rendering of scene modes and its exact inverse.

One line per factor: lane assignments first (agents in order), then pair
relations in canonical (i < j) order. Optional per-factor probabilities are
appended in parentheses and ignored by the parser.
"""

from __future__ import annotations

import re
from typing import Optional

import numpy as np

from .modes import HomotopyClass, SceneMode
from .sampling import MarginalDist
from .scene import Scene, iter_pairs, num_pairs, pair_index

__all__ = ["sm_to_text", "text_to_sm", "ParseError", "IncompleteMode"]


class ParseError(ValueError):
    pass


class IncompleteMode(ParseError):
    pass


_CLASS_WORD = {
    HomotopyClass.CW: "passes clockwise of",
    HomotopyClass.S: "stays put relative to",
    HomotopyClass.CCW: "passes counterclockwise of",
}
_WORD_CLASS = {w: c for c, w in _CLASS_WORD.items()}

_A2L_RE = re.compile(
    r"^agent (\d+) (?:drives on lane (\d+)|is on no lane)(?: \(p=[0-9.eE+-]+\))?$"
)
_A2A_RE = re.compile(
    r"^agent (\d+) (passes clockwise of|stays put relative to|passes counterclockwise of)"
    r" agent (\d+)(?: \(p=[0-9.eE+-]+\))?$"
)


def sm_to_text(sm: SceneMode, scene: Scene, probs: Optional[MarginalDist] = None) -> str:
    """Fixed-grammar rendering of a scene mode, one factor per line."""
    n = scene.num_agents
    if sm.num_agents != n:
        raise ValueError(f"mode has {sm.num_agents} agents, scene has {n}")
    if any(l > scene.num_lanes for l in sm.a2l):
        raise ValueError("mode references a lane the scene does not have")
    lines = []
    for i, lane in enumerate(sm.a2l):
        body = f"agent {i} drives on lane {lane}" if lane else f"agent {i} is on no lane"
        if probs is not None:
            body += f" (p={np.exp(probs.a2l_logp[i, lane]):.4f})"
        lines.append(body)
    for p, (i, j) in enumerate(iter_pairs(n)):
        body = f"agent {i} {_CLASS_WORD[sm.a2a[p]]} agent {j}"
        if probs is not None:
            body += f" (p={np.exp(probs.a2a_logp[p, int(sm.a2a[p])]):.4f})"
        lines.append(body)
    return "\n".join(lines) + "\n"


def text_to_sm(text: str, scene: Scene) -> SceneMode:
    """Exact inverse of sm_to_text; rejects unknown lines, missing or
    conflicting factors. Swapped pair order parses to the canonical pair."""
    n, m = scene.num_agents, scene.num_lanes
    a2l: dict[int, int] = {}
    a2a: dict[int, HomotopyClass] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if match := _A2L_RE.match(line):
            agent = int(match.group(1))
            lane = int(match.group(2)) if match.group(2) is not None else 0
            if agent >= n:
                raise ParseError(f"line {lineno}: agent {agent} out of range (scene has {n})")
            if match.group(2) is not None and not 1 <= lane <= m:
                raise ParseError(f"line {lineno}: lane {lane} out of range (scene has {m})")
            if agent in a2l and a2l[agent] != lane:
                raise ParseError(f"line {lineno}: conflicting lane for agent {agent}")
            a2l[agent] = lane
        elif match := _A2A_RE.match(line):
            i, j = int(match.group(1)), int(match.group(3))
            cls = _WORD_CLASS[match.group(2)]
            if i == j or max(i, j) >= n:
                raise ParseError(f"line {lineno}: bad agent pair ({i}, {j})")
            p = pair_index(min(i, j), max(i, j), n)
            if p in a2a and a2a[p] != cls:
                raise ParseError(f"line {lineno}: conflicting relation for pair ({i}, {j})")
            a2a[p] = cls
        else:
            raise ParseError(f"line {lineno}: unrecognized: {raw!r}")
    missing_agents = [i for i in range(n) if i not in a2l]
    missing_pairs = [pair for pair in iter_pairs(n) if pair_index(*pair, n) not in a2a]
    if missing_agents or missing_pairs:
        raise IncompleteMode(
            f"missing lane lines for agents {missing_agents}, pair lines for {missing_pairs}"
        )
    return SceneMode(
        tuple(a2l[i] for i in range(n)),
        tuple(a2a[p] for p in range(num_pairs(n))),
    )
