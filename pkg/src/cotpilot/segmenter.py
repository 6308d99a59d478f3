"""
Streaming segmentation of a token stream into newline-delimited reasoning
steps, with detection of the end-of-thought marker.

The marker is matched on the accumulated character buffer rather than on
individual tokens, because tokenizers are free to split it across tokens.
A token whose text embeds a newline is split: the part before the newline
closes the current step, the part after seeds the next buffer. Lines that
are empty after trimming spaces and tabs are dropped; their tokens roll
forward into the next emitted step so that every token stays accounted for.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

THINK_END_MARKER = "</think>"

__all__ = [
    "TokenMeta",
    "StepEventKind",
    "StepEvent",
    "StepSegmenter",
    "FedAfterEnd",
    "THINK_END_MARKER",
]


@dataclass(frozen=True)
class TokenMeta:
    """One sampled token with its local distribution summary.

    top_k holds (token text, logprob) pairs sorted by descending logprob,
    covering at least the configured top_k_logprobs candidates.
    """

    text: str
    logprob: float            # natural log prob of the sampled token, <= 0
    rank: int                 # 1-based rank of the sampled token
    top_k: tuple[tuple[str, float], ...]

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "logprob": self.logprob,
            "rank": self.rank,
            "top_k": [[t, lp] for t, lp in self.top_k],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenMeta":
        return cls(
            text=d["text"],
            logprob=d["logprob"],
            rank=d["rank"],
            top_k=tuple((t, lp) for t, lp in d["top_k"]),
        )


class StepEventKind(Enum):
    STEP_COMPLETE = "step_complete"
    THINK_END = "think_end"
    PENDING = "pending"


@dataclass
class StepEvent:
    kind: StepEventKind
    text: str = ""                                # step text; for THINK_END, the post-marker remainder
    tokens: list[TokenMeta] = field(default_factory=list)


class FedAfterEnd(RuntimeError):
    """feed_token was called after the end-of-thought marker fired."""


def _blank(text: str) -> bool:
    return text.strip(" \t") == ""


class StepSegmenter:
    """One segmenter per session; not safe to share between threads."""

    def __init__(self):
        self._buf = ""
        self._tokens: list[TokenMeta] = []
        self._ended = False
        # Delimiters never need rescanning more than the marker length back.
        self._scan_from = 0

    @property
    def ended(self) -> bool:
        return self._ended

    @property
    def pending_text(self) -> str:
        return self._buf

    @property
    def pending_tokens(self) -> list[TokenMeta]:
        return list(self._tokens)

    def pending_event(self) -> StepEvent:
        return StepEvent(StepEventKind.PENDING, self._buf, list(self._tokens))

    def feed_token(self, tok: TokenMeta) -> list[StepEvent]:
        """Consume one token, returning any step events it completes."""
        if self._ended:
            raise FedAfterEnd("segmenter already saw the end-of-thought marker")
        self._tokens.append(tok)
        self._buf += tok.text
        return self._drain()

    def _drain(self) -> list[StepEvent]:
        events: list[StepEvent] = []
        while True:
            start = max(0, self._scan_from - len(THINK_END_MARKER) + 1)
            i_nl = self._buf.find("\n", start)
            i_mk = self._buf.find(THINK_END_MARKER, start)
            if i_mk != -1 and (i_nl == -1 or i_mk < i_nl):
                before = self._buf[:i_mk]
                remainder = self._buf[i_mk + len(THINK_END_MARKER):]
                if not _blank(before):
                    events.append(StepEvent(StepEventKind.STEP_COMPLETE, before, self._tokens))
                    self._tokens = []
                # Leftover tokens (the marker itself plus any spillover) ride
                # on the THINK_END event so no token goes unaccounted.
                events.append(StepEvent(StepEventKind.THINK_END, remainder, self._tokens))
                self._tokens = []
                self._buf = ""
                self._scan_from = 0
                self._ended = True
                return events
            if i_nl == -1:
                self._scan_from = len(self._buf)
                return events
            segment = self._buf[:i_nl]
            self._buf = self._buf[i_nl + 1:]
            self._scan_from = 0
            if not _blank(segment):
                events.append(StepEvent(StepEventKind.STEP_COMPLETE, segment, self._tokens))
                self._tokens = []
            # blank segment: drop the text, roll its tokens into the next step

    def flush(self) -> StepEvent | None:
        """Emit the pending buffer as a final step, used at budget truncation."""
        if _blank(self._buf):
            return None
        event = StepEvent(StepEventKind.STEP_COMPLETE, self._buf, self._tokens)
        self._buf = ""
        self._tokens = []
        self._scan_from = 0
        return event
