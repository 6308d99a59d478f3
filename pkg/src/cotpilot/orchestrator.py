"""
Full reasoning sessions: drive a generation backend one step at a time,
score each completed step, advance the controller state and steer the
next step by appending the state's control tag to the context.

One session is strictly sequential; independent sessions may run
concurrently and share the pilot model, the embedding provider and the
configs read-only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import (ControlTag, FsmConfig, SamplingConfig, render_tag,
                     validate_config, validate_sampling_config)
from .features import UNC_DIM, TokenFeatureTracker, from_parts, pool_step
from .fsm import ControllerState, tag_for_state, transition
from .pilot import difficulty
from .segmenter import THINK_END_MARKER, StepEvent, StepEventKind, StepSegmenter, TokenMeta
from .trace import StepRecord, TraceDocument

__all__ = [
    "MATH_SYSTEM_PROMPT",
    "BackendFailure",
    "assemble_context",
    "run_session",
    "extract_answer",
]

# Steering prompt prepended to every session; {question} is substituted
# verbatim, so questions containing braces are safe.
MATH_SYSTEM_PROMPT = (
    "Please reason step by step, and put your final answer within \\boxed{}.\n"
    "\n"
    "During your thinking, you may see the following tags:\n"
    "- [Fast_Step] means the current step seems easy; keep your reasoning "
    "brief and avoid unnecessary details.\n"
    "- [Slow_Step] means the current step seems difficult; please perform "
    "detailed reasoning.\n"
    "- [Normal_Step] means the current step has moderate difficulty; please "
    "resume normal step-by-step reasoning.\n"
    "- [Skip_Step] means this step is too difficult and further detailed "
    "expansion is not very helpful, please summarize the existing reasoning, "
    "make a reasonable guess for the conclusion, and then quickly output the "
    "final answer.\n"
    "\n"
    "{question}"
)


class BackendFailure(RuntimeError):
    """Backend error, carrying whatever trace was recorded before it."""

    def __init__(self, message: str, trace: TraceDocument | None = None):
        super().__init__(message)
        self.trace = trace


class _BackendRaised(Exception):
    def __init__(self, cause: Exception):
        self.cause = cause


def assemble_context(question: str, prior_steps: list[str],
                     tag: ControlTag | None = None,
                     prompt_template: str = MATH_SYSTEM_PROMPT) -> str:
    """Prompt plus question, prior step texts joined by newlines, and the
    pending control tag on a fresh line when one is due."""
    ctx = prompt_template.replace("{question}", question)
    for step in prior_steps:
        ctx += "\n" + step
    if tag is not None:
        ctx += "\n" + render_tag(tag)
    return ctx


def extract_answer(text: str) -> str | None:
    """Content of the last balanced-brace \\boxed{...} occurrence, if any."""
    marker = "\\boxed{"
    pos = len(text)
    while True:
        start = text.rfind(marker, 0, pos)
        if start == -1:
            return None
        i = start + len(marker)
        depth = 1
        for j in range(i, len(text)):
            c = text[j]
            if c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    return text[i:j]
        pos = start   # unbalanced, try an earlier occurrence


@dataclass
class _SessionState:
    steps: list[StepRecord] = field(default_factory=list)
    overheads: list[float] = field(default_factory=list)
    total_tokens: int = 0
    answer_tokens: int = 0
    answer_text: str = ""
    truncated: bool = False
    ended: bool = False


def _fenced(backend, context: str, sampling: SamplingConfig, max_tokens: int):
    """Stream one backend call, fencing backend exceptions off from
    controller exceptions so tokens seen before a failure stay processed."""
    stream = iter(backend.generate_until_newline(context, sampling, max_tokens))
    while True:
        try:
            tok = next(stream)
        except StopIteration:
            return
        except Exception as e:
            raise _BackendRaised(e) from e
        yield tok


def _score_step(event: StepEvent, index: int, tracker: TokenFeatureTracker,
                provider, pilot_session, ctrl: ControllerState,
                cfg: FsmConfig) -> tuple[StepRecord, float]:
    """Featurize one completed step, score it and advance the controller.

    Returns the record plus the controller wall-clock time, which excludes
    the embedding call (external, not part of the controller budget).
    """
    t0 = time.perf_counter()
    feats = [tracker.push(tok) for tok in event.tokens]
    # A step can carry no tokens only when one token spanned several
    # newlines; neutral zeros keep the pipeline total in that corner.
    h_unc = pool_step(feats) if feats else np.zeros(UNC_DIM)
    t1 = time.perf_counter()

    h_sem = provider.embed(event.text)

    t2 = time.perf_counter()
    fv = from_parts(h_unc, h_sem)
    r = difficulty(pilot_session.step(fv))
    state_before = ctrl.state
    state_after = transition(ctrl, r, False, cfg)
    t3 = time.perf_counter()

    record = StepRecord(
        index=index,
        text=event.text,
        token_count=len(event.tokens),
        difficulty=r,
        state_before=state_before,
        state_after=state_after,
        tag_injected=tag_for_state(state_after),
        tokens=list(event.tokens),
        features=fv,
    )
    return record, (t1 - t0) + (t3 - t2)


def run_session(question: str, backend, pilot, provider,
                fsm_cfg: FsmConfig, sampling_cfg: SamplingConfig,
                question_id: str | None = None) -> TraceDocument:
    """Run one full reasoning session and return its trace.

    Terminates when the end-of-thought marker fires (the answer phase then
    runs tag-free until end of sequence), when the backend reaches end of
    sequence, or when the total token budget runs out. Budget exhaustion
    yields a truncated trace, not an error; backend exceptions surface as
    BackendFailure with the partial trace attached.
    """
    validate_config(fsm_cfg)
    validate_sampling_config(sampling_cfg)

    ctrl = ControllerState.initial(fsm_cfg)
    seg = StepSegmenter()
    tracker = TokenFeatureTracker()
    pilot_session = pilot.new_session()
    s = _SessionState()
    pending_tag: ControlTag | None = None
    prompt = assemble_context(question, [])
    budget = sampling_cfg.max_total_tokens

    def build_trace() -> TraceDocument:
        body = "\n".join(rec.text for rec in s.steps)
        answer = extract_answer(body + "\n" + s.answer_text)
        return TraceDocument(
            question=question,
            question_id=question_id,
            system_prompt=prompt,
            steps=s.steps,
            answer=answer,
            total_tokens=s.total_tokens,
            answer_tokens=s.answer_tokens,
            truncated=s.truncated,
            fsm_config=fsm_cfg,
            sampling_config=sampling_cfg,
            backend=getattr(backend, "identity", lambda: type(backend).__name__)(),
            controller_overhead_s=s.overheads,
        )

    def score(event: StepEvent) -> None:
        rec, overhead = _score_step(event, len(s.steps), tracker, provider,
                                    pilot_session, ctrl, fsm_cfg)
        s.steps.append(rec)
        s.overheads.append(overhead)

    try:
        # Thought phase: one backend call per step boundary.
        while not s.ended:
            remaining = budget - s.total_tokens
            if remaining <= 0:
                s.truncated = True
                break
            context = assemble_context(question, [rec.text for rec in s.steps],
                                       pending_tag)
            toks = _drain(backend, context, sampling_cfg, remaining)
            if not toks:
                break    # end of sequence before the marker: session is over
            chunk = "".join(t.text for t in toks)
            for tok in toks:
                s.total_tokens += 1
                if s.ended:
                    # Tokens arriving after the marker belong to the answer.
                    s.answer_tokens += 1
                    s.answer_text += tok.text
                    continue
                for ev in seg.feed_token(tok):
                    if ev.kind is StepEventKind.STEP_COMPLETE:
                        score(ev)
                    elif ev.kind is StepEventKind.THINK_END:
                        s.answer_tokens += len(ev.tokens)
                        s.answer_text += ev.text
                        transition(ctrl, 0.0, True, fsm_cfg)
                        s.ended = True
            if s.ended:
                pending_tag = None
                break
            if s.total_tokens >= budget:
                s.truncated = True
                break
            if not chunk.endswith("\n"):
                break    # stream stopped mid-line without budget pressure: EOS
            pending_tag = tag_for_state(ctrl.state)

        # Pending partial step at truncation or end of sequence.
        if not s.ended:
            ev = seg.flush()
            if ev is not None:
                score(ev)

        # Answer phase: free-running, no tags, until end of sequence.
        while s.ended and s.total_tokens < budget:
            context = (assemble_context(question, [rec.text for rec in s.steps])
                       + "\n" + THINK_END_MARKER + "\n" + s.answer_text)
            remaining = budget - s.total_tokens
            toks = _drain(backend, context, sampling_cfg, remaining)
            if not toks:
                break
            chunk = "".join(t.text for t in toks)
            s.total_tokens += len(toks)
            s.answer_tokens += len(toks)
            s.answer_text += chunk
            if len(toks) < remaining and not chunk.endswith("\n"):
                break    # end of sequence mid-line
    except _BackendRaised as e:
        raise BackendFailure(f"backend failed mid-session: {e.cause}",
                             trace=build_trace()) from e.cause

    return build_trace()
