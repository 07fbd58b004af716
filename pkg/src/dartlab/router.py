"""Rule-based token role labeling over the special-token segment grammar.

Every token gets exactly one of three roles: ``reasoning`` (default, plus
<think>/<answer> spans), ``tool`` (<search> spans), or ``env``
(<information> spans, which never contribute to any loss).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

ROLE_REASONING = "reasoning"
ROLE_TOOL = "tool"
ROLE_ENV = "env"
ROLES = (ROLE_REASONING, ROLE_TOOL, ROLE_ENV)

MASK_REAS = "reas"
MASK_TOOL = "tool"
MASK_UNIFIED = "unified"

# span kind -> role carried by the span (opener and closer included)
_SPAN_ROLE = {
    "think": ROLE_REASONING,
    "search": ROLE_TOOL,
    "information": ROLE_ENV,
    "answer": ROLE_REASONING,
}


@dataclass(frozen=True)
class SegmentGrammar:
    """Reserved token ids for the span markers."""

    think: int
    think_end: int
    search: int
    search_end: int
    information: int
    information_end: int
    answer: int
    answer_end: int

    def __post_init__(self):
        ids = self.ids()
        if len(set(ids)) != len(ids):
            raise ValueError(f"grammar token ids must be pairwise distinct: {ids}")

    def ids(self) -> tuple[int, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def to_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, int]) -> "SegmentGrammar":
        return cls(**{k: int(v) for k, v in d.items()})

    def openers(self) -> dict[int, str]:
        return {self.think: "think", self.search: "search",
                self.information: "information", self.answer: "answer"}

    def closers(self) -> dict[int, str]:
        return {self.think_end: "think", self.search_end: "search",
                self.information_end: "information", self.answer_end: "answer"}


class RouterState:
    """Incremental role labeler; feed tokens one at a time.

    Malformed nesting never fails: a new opener inside an open span wins
    (the old span is abandoned) and an unmatched closer resets to the default
    state; both bump ``anomalies``.
    """

    def __init__(self, grammar: SegmentGrammar):
        self.grammar = grammar
        self._openers = grammar.openers()
        self._closers = grammar.closers()
        self.open_span: str | None = None
        self.anomalies = 0

    def label(self, token: int) -> str:
        kind = self._openers.get(token)
        if kind is not None:
            if self.open_span is not None:
                self.anomalies += 1  # last opener wins
            self.open_span = kind
            return _SPAN_ROLE[kind]
        kind = self._closers.get(token)
        if kind is not None:
            if self.open_span != kind:
                self.anomalies += 1
            self.open_span = None
            return _SPAN_ROLE[kind]
        if self.open_span is not None:
            return _SPAN_ROLE[self.open_span]
        return ROLE_REASONING

    @property
    def active_role(self) -> str:
        """Which capability generates the next token: tool inside an open
        search span, reasoning everywhere else."""
        return ROLE_TOOL if self.open_span == "search" else ROLE_REASONING


def label_tokens(tokens: Sequence[int], grammar: SegmentGrammar) -> list[str]:
    state = RouterState(grammar)
    return [state.label(t) for t in tokens]


def build_mask(roles: Sequence[str], variant: str) -> list[int]:
    """{0,1} loss gate per position for one training variant; env is always 0."""
    if variant == MASK_REAS:
        return [1 if r == ROLE_REASONING else 0 for r in roles]
    if variant == MASK_TOOL:
        return [1 if r == ROLE_TOOL else 0 for r in roles]
    if variant == MASK_UNIFIED:
        return [0 if r == ROLE_ENV else 1 for r in roles]
    raise ValueError(f"unknown mask variant: {variant!r}")
