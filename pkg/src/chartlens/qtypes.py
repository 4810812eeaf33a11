"""Question parsing and answer-candidate spaces for the three task families."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from chartlens.scheduler import Belief

NUMBER_QA = "NumberQA"
VALUE_COMPARE = "ValueCompare"
CHART_TO_TABLE = "ChartToTable"
TASKS = (NUMBER_QA, VALUE_COMPARE, CHART_TO_TABLE)
ORDERINGS = ("greater", "less", "equal")


class UnclassifiableQuestion(ValueError):
    pass


@dataclass(frozen=True)
class AnswerCandidate:
    kind: str  # numeric | ordering | table | label
    value: Any

    def __post_init__(self) -> None:
        if self.kind == "numeric":
            v = float(self.value)
            if not math.isfinite(v):
                raise ValueError("numeric candidates must be finite")
            object.__setattr__(self, "value", v)
        elif self.kind == "ordering":
            if self.value not in ORDERINGS:
                raise ValueError(f"ordering must be one of {ORDERINGS}")
        elif self.kind == "label":
            if not isinstance(self.value, (str, int)):
                raise ValueError("label candidates must be strings or integers")
        elif self.kind != "table":
            raise ValueError(f"unknown candidate kind {self.kind!r}")

    def sort_key(self) -> tuple:
        return (self.kind, self.value if self.kind == "numeric" else 0.0, str(self.value))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerCandidate":
        return cls(d["kind"], d["value"])

    def __str__(self) -> str:
        if self.kind == "numeric":
            return f"{self.value:.6g}"
        return str(self.value)


@dataclass(frozen=True)
class Question:
    raw: str
    task: str
    referents: tuple[str, ...] = ()
    measure: str | None = None  # e.g. the series named in "the SALES of FORD"
    flagged: bool = False

    def to_dict(self) -> dict:
        return {
            "raw": self.raw,
            "task": self.task,
            "referents": list(self.referents),
            "measure": self.measure,
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Question":
        return cls(d["raw"], d["task"], tuple(d.get("referents", ())), d.get("measure"), d.get("flagged", False))


_TABLE_RE = re.compile(r"\b(table|tabular|convert|extract (all|the) (data|values)|csv|json)\b", re.I)
_COMPARATIVE = r"(greater|larger|higher|bigger|more|less|smaller|lower|fewer)"
_COMPARE_RE = re.compile(
    rf"^\s*(?:is|are|was|does|do)\s+(?:the\s+)?(?:value\s+(?:of|for)\s+)?(.+?)\s+(?:\w+\s+)?{_COMPARATIVE}\s+than\s+(?:that\s+of\s+|the\s+value\s+of\s+)?(.+?)\s*\??\s*$",
    re.I,
)
_TRAILING_MEASURE = re.compile(r"^(.+?)\s+(?:in|for)\s+(?:the\s+)?(.+)$", re.I)
_COMPARE_LOOSE = re.compile(rf"\b(compare|{_COMPARATIVE}\s+than)\b", re.I)
_QUOTED = re.compile(r"[\"“']([^\"”']+)[\"”']")
_NUMBER_RE = re.compile(r"\b(what|how\s+(much|many)|value|share|percentage|proportion|number|amount)\b", re.I)
_LEAD_RE = re.compile(r"^\s*(?:what\s+is|what's|what\s+was|how\s+(?:much|many)(?:\s+is)?|give|report)\s+(?:the\s+)?", re.I)
_SPLIT_RE = re.compile(r"\s+(?:of|for|in)\s+(?:the\s+)?", re.I)
_GENERIC = {"value", "share", "percentage", "proportion", "number", "amount"}


def _clean(s: str) -> str:
    return s.strip().strip("\"'“”").strip()


def parse_question(text: str) -> Question:
    """Rule-based task routing and referent extraction; total over strings."""
    raw = text
    t = (text or "").strip()
    quoted = tuple(_clean(q) for q in _QUOTED.findall(t))
    if _TABLE_RE.search(t):
        return Question(raw, CHART_TO_TABLE, quoted)
    m = _COMPARE_RE.match(t)
    if m:
        a, b = _clean(m.group(1)), _clean(m.group(3))
        measure = None
        mm = _TRAILING_MEASURE.match(b)
        if mm:
            b, measure = _clean(mm.group(1)), _clean(mm.group(2))
        return Question(raw, VALUE_COMPARE, quoted if len(quoted) >= 2 else (a, b), measure)
    if _COMPARE_LOOSE.search(t):
        return Question(raw, VALUE_COMPARE, quoted, flagged=len(quoted) < 2)
    if _NUMBER_RE.search(t):
        if quoted:
            return Question(raw, NUMBER_QA, quoted)
        body = _LEAD_RE.sub("", t).rstrip(" ?")
        parts = list(_SPLIT_RE.finditer(body))
        if parts:
            # the last 'of'/'for' names the referent, the rest is the measure
            last = parts[-1]
            ref = _clean(body[last.end() :])
            measure = _clean(body[: last.start()]) or None
            if measure is not None and measure.lower() in _GENERIC:
                measure = None
            if ref:
                return Question(raw, NUMBER_QA, (ref,), measure)
        measure = None
        return Question(raw, NUMBER_QA, (), measure, flagged=True)
    return Question(raw, NUMBER_QA, quoted, flagged=True)


def seed_candidates(question: Question, chart_type: str | None = None) -> tuple[list[AnswerCandidate], "Belief"]:
    """Initial candidate set and prior belief for ``question``.

    Orderings are exhaustive, so ValueCompare starts uniform over the three
    relations with no residual. NumberQA starts empty with all mass on the
    residual. ChartToTable carries one evolving table candidate.
    """
    from chartlens.scheduler import Belief

    if question.task == VALUE_COMPARE:
        cands = [AnswerCandidate("ordering", o) for o in ORDERINGS]
        return cands, Belief(tuple(cands), (1 / 3, 1 / 3, 1 / 3), 0.0)
    if question.task == CHART_TO_TABLE:
        cands = [AnswerCandidate("table", "table")]
        return cands, Belief(tuple(cands), (0.5,), 0.5)
    return [], Belief((), (), 1.0)
