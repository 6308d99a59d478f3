"""
Post-hoc trace analytics: reflection/branching marking with a forward
window, token-savings attribution between a baseline and a treated run,
step-level state allocation, length-limit failure counting and
outcome-conditioned savings.

All functions are pure over already-loaded traces and trivially parallel
across files. Cue matching is case-insensitive substring matching on raw
step text, with one shared cue list across everything being compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import ThinkingState
from .trace import StepRecord, TraceDocument

__all__ = [
    "CueConfig",
    "MarkedTrace",
    "AttributionReport",
    "LengthMismatch",
    "TooShort",
    "UnpairedSamples",
    "MissingGrades",
    "EmptyInput",
    "mark_steps",
    "pearson",
    "token_savings_attribution",
    "state_allocation",
    "length_limit_failures",
    "outcome_conditioned_savings",
    "replay_states",
]

DEFAULT_REFLECTION_CUES = ("check", "verify", "wait", "actually")
DEFAULT_BRANCHING_CUES = ("case", "alternative", "another way",
                          "another approach", "on the other hand")


class LengthMismatch(ValueError):
    pass


class TooShort(ValueError):
    pass


class UnpairedSamples(ValueError):
    pass


class MissingGrades(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class CueConfig:
    reflection_cues: tuple[str, ...] = DEFAULT_REFLECTION_CUES
    branching_cues: tuple[str, ...] = DEFAULT_BRANCHING_CUES
    window: int = 2      # cue hit at step i marks steps i..i+window

    def __post_init__(self):
        if self.window < 0:
            raise ValueError("window must be >= 0")


@dataclass
class MarkedTrace:
    reflect_marked: list[bool]
    branch_marked: list[bool]
    reflect_steps: int
    branch_steps: int
    reflect_tokens: int
    branch_tokens: int


def _mark(steps: list[StepRecord], cues: tuple[str, ...], window: int) -> list[bool]:
    marked = [False] * len(steps)
    lowered = [s.text.lower() for s in steps]
    for i, text in enumerate(lowered):
        if any(cue in text for cue in cues):
            for j in range(i, min(i + window, len(steps) - 1) + 1):
                marked[j] = True
    return marked


def mark_steps(steps: list[StepRecord], cues: CueConfig) -> MarkedTrace:
    """Flag reflection and branching segments with forward window expansion.

    A cue hit at step i marks steps i through i+window (clipped at the end
    of the trace); marks from multiple hits union."""
    reflect = _mark(steps, cues.reflection_cues, cues.window)
    branch = _mark(steps, cues.branching_cues, cues.window)
    return MarkedTrace(
        reflect_marked=reflect,
        branch_marked=branch,
        reflect_steps=sum(reflect),
        branch_steps=sum(branch),
        reflect_tokens=sum(s.token_count for s, m in zip(steps, reflect) if m),
        branch_tokens=sum(s.token_count for s, m in zip(steps, branch) if m),
    )


def pearson(x: list[float], y: list[float]) -> float:
    """Sample Pearson correlation; 0 by convention when either side has
    (numerically) zero variance."""
    if len(x) != len(y):
        raise LengthMismatch(f"got lengths {len(x)} and {len(y)}")
    if len(x) < 2:
        raise TooShort("need at least 2 points")
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    var_x = sum(d * d for d in dx)
    var_y = sum(d * d for d in dy)
    if var_x < 1e-12 or var_y < 1e-12:
        return 0.0
    cov = sum(a * b for a, b in zip(dx, dy))
    return cov / math.sqrt(var_x * var_y)


@dataclass
class AttributionReport:
    window: int
    per_sample_savings: list[float]
    reflect_ratio: float
    branch_ratio: float
    reflect_pearson: float
    branch_pearson: float
    per_sample_reflect_savings: list[float] = field(default_factory=list)
    per_sample_branch_savings: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "reflect_ratio": self.reflect_ratio,
            "branch_ratio": self.branch_ratio,
            "reflect_pearson": self.reflect_pearson,
            "branch_pearson": self.branch_pearson,
            "per_sample_savings": self.per_sample_savings,
            "per_sample_reflect_savings": self.per_sample_reflect_savings,
            "per_sample_branch_savings": self.per_sample_branch_savings,
        }


def _pair_by_id(baseline: list[TraceDocument],
                treated: list[TraceDocument]) -> list[tuple[TraceDocument, TraceDocument]]:
    def index(traces, side):
        out = {}
        for i, t in enumerate(traces):
            key = t.question_id if t.question_id is not None else f"#{i}"
            if key in out:
                raise UnpairedSamples(f"duplicate question id {key!r} in {side} traces")
            out[key] = t
        return out

    base = index(baseline, "baseline")
    treat = index(treated, "treated")
    if set(base) != set(treat):
        missing = sorted(set(base) ^ set(treat))
        raise UnpairedSamples(f"unpaired question ids: {missing[:10]}")
    return [(base[k], treat[k]) for k in sorted(base)]


def token_savings_attribution(baseline: list[TraceDocument],
                              treated: list[TraceDocument],
                              cues: CueConfig) -> AttributionReport:
    """Decompose token savings into reflection and branching components.

    Per-sample savings are floored at zero before aggregation so regressed
    samples cannot cancel saved ones, and a component can never explain
    more than the sample's own saving. Ratios are the component share of
    the summed savings; Pearson runs over the per-sample pairs. Token
    counts cover generated tokens only (injected tags are prompt text and
    were never counted).
    """
    pairs = _pair_by_id(baseline, treated)
    if not pairs:
        raise EmptyInput("no trace pairs")
    totals: list[float] = []
    reflects: list[float] = []
    branches: list[float] = []
    for base, treat in pairs:
        marked_base = mark_steps(base.steps, cues)
        marked_treat = mark_steps(treat.steps, cues)
        saving = max(0.0, float(base.total_tokens - treat.total_tokens))
        reflect = max(0.0, float(marked_base.reflect_tokens - marked_treat.reflect_tokens))
        branch = max(0.0, float(marked_base.branch_tokens - marked_treat.branch_tokens))
        totals.append(saving)
        reflects.append(min(reflect, saving))
        branches.append(min(branch, saving))
    grand_total = sum(totals)
    reflect_ratio = sum(reflects) / grand_total if grand_total > 0 else 0.0
    branch_ratio = sum(branches) / grand_total if grand_total > 0 else 0.0
    if len(pairs) >= 2:
        reflect_r = pearson(totals, reflects)
        branch_r = pearson(totals, branches)
    else:
        reflect_r = branch_r = 0.0
    return AttributionReport(
        window=cues.window,
        per_sample_savings=totals,
        reflect_ratio=reflect_ratio,
        branch_ratio=branch_ratio,
        reflect_pearson=reflect_r,
        branch_pearson=branch_r,
        per_sample_reflect_savings=reflects,
        per_sample_branch_savings=branches,
    )


def state_allocation(traces: list[TraceDocument]) -> dict[ThinkingState, float]:
    """Share of steps sitting in each thinking mode, INIT and END excluded;
    the returned ratios sum to 1."""
    counts: dict[ThinkingState, int] = {}
    total = 0
    for trace in traces:
        for step in trace.steps:
            state = step.state_after
            if state in (ThinkingState.INIT, ThinkingState.END):
                continue
            counts[state] = counts.get(state, 0) + 1
            total += 1
    if total == 0:
        raise EmptyInput("no countable steps in the given traces")
    return {state: n / total for state, n in counts.items()}


def _lookup_grade(grades: dict, trace: TraceDocument) -> dict:
    qid = trace.question_id
    if qid is None or qid not in grades:
        raise MissingGrades(f"no grade entry for question id {qid!r}")
    return grades[qid]


def length_limit_failures(traces: list[TraceDocument], grades: dict) -> int:
    """Count sessions that hit the generation budget and answered wrong.

    grades maps question id to {"gold": ..., "correct": bool}."""
    count = 0
    for trace in traces:
        entry = _lookup_grade(grades, trace)
        if trace.truncated and not entry["correct"]:
            count += 1
    return count


def outcome_conditioned_savings(baseline: list[TraceDocument],
                                treated: list[TraceDocument],
                                grades: dict) -> dict[str, float | None]:
    """Mean relative token saving, split by whether the treated run was
    graded correct. A stratum with no samples reports None."""
    pairs = _pair_by_id(baseline, treated)
    strata: dict[bool, list[float]] = {True: [], False: []}
    for base, treat in pairs:
        entry = _lookup_grade(grades, treat)
        if base.total_tokens <= 0:
            continue
        rel = (base.total_tokens - treat.total_tokens) / base.total_tokens
        strata[bool(entry["correct"])].append(rel)
    return {
        "correct_saving_pct": 100.0 * sum(strata[True]) / len(strata[True])
        if strata[True] else None,
        "incorrect_saving_pct": 100.0 * sum(strata[False]) / len(strata[False])
        if strata[False] else None,
    }


def replay_states(trace: TraceDocument) -> bool:
    """Cross-module consistency audit: re-run the transition rules over the
    recorded difficulty sequence and compare against the recorded states."""
    from .fsm import ControllerState, transition

    ctrl = ControllerState.initial(trace.fsm_config)
    for step in trace.steps:
        if step.state_before is not ctrl.state:
            return False
        got = transition(ctrl, step.difficulty, False, trace.fsm_config)
        if got is not step.state_after:
            return False
    return True
