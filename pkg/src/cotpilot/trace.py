"""
Session transcripts: one StepRecord per reasoning step plus session-level
metadata, persisted as one JSON object per line.

Schema (format_version 1):

    {
      "format_version": 1,
      "question_id": str | null,
      "question": str,
      "system_prompt": str,
      "steps": [
        {
          "index": int,
          "text": str,
          "token_count": int,
          "difficulty": float,
          "state_before": "NORMAL",
          "state_after": "FAST",
          "tag_injected": "[Fast_Step]" | null,
          "tokens": [{"text", "logprob", "rank", "top_k"}] | null,
          "features": {"h_unc": [...], "h_sem": [...]} | null
        }, ...
      ],
      "answer": str | null,
      "total_tokens": int,
      "answer_tokens": int,
      "truncated": bool,
      "config": {"fsm": {...}, "sampling": {...}},
      "backend": str,
      "controller_overhead_s": [float, ...] | null
    }

total_tokens counts every generated token. answer_tokens covers the tokens
consumed after the end-of-thought marker fired, including the tokens that
carried the marker itself. Injected control tags are prompt text, never
counted as generated tokens.

controller_overhead_s is wall-clock and therefore varies between runs;
serialization drops it by default so traces from seeded deterministic
backends stay byte-identical across runs. Pass include_timing=True to
keep it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .config import (ControlTag, FsmConfig, SamplingConfig, ThinkingState,
                     parse_tag)
from .features import StepFeatureVector
from .segmenter import TokenMeta

TRACE_FORMAT_VERSION = 1

__all__ = [
    "StepRecord",
    "TraceDocument",
    "TRACE_FORMAT_VERSION",
    "write_traces",
    "append_trace",
    "read_traces",
]


@dataclass
class StepRecord:
    index: int
    text: str
    token_count: int
    difficulty: float
    state_before: ThinkingState
    state_after: ThinkingState
    tag_injected: ControlTag | None = None   # tag appended after this step
    tokens: list[TokenMeta] | None = None    # None in slimmed traces
    features: StepFeatureVector | None = None

    def __post_init__(self):
        if self.tokens is not None and self.token_count != len(self.tokens):
            raise ValueError("token_count disagrees with the token list")
        if not (0.0 <= self.difficulty <= 1.0):
            raise ValueError(f"difficulty {self.difficulty} outside [0, 1]")

    def to_dict(self, include_tokens: bool = True,
                include_features: bool = True) -> dict:
        d = {
            "index": self.index,
            "text": self.text,
            "token_count": self.token_count,
            "difficulty": self.difficulty,
            "state_before": self.state_before.value,
            "state_after": self.state_after.value,
            "tag_injected": self.tag_injected.value if self.tag_injected else None,
        }
        if include_tokens and self.tokens is not None:
            d["tokens"] = [t.to_dict() for t in self.tokens]
        if include_features and self.features is not None:
            d["features"] = self.features.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(
            index=d["index"],
            text=d["text"],
            token_count=d["token_count"],
            difficulty=d["difficulty"],
            state_before=ThinkingState(d["state_before"]),
            state_after=ThinkingState(d["state_after"]),
            tag_injected=parse_tag(d["tag_injected"]) if d.get("tag_injected") else None,
            tokens=[TokenMeta.from_dict(t) for t in d["tokens"]] if d.get("tokens") else None,
            features=StepFeatureVector.from_dict(d["features"]) if d.get("features") else None,
        )


@dataclass
class TraceDocument:
    question: str
    system_prompt: str
    steps: list[StepRecord]
    answer: str | None
    total_tokens: int
    answer_tokens: int
    truncated: bool
    fsm_config: FsmConfig
    sampling_config: SamplingConfig
    backend: str
    question_id: str | None = None
    controller_overhead_s: list[float] = field(default_factory=list)

    def to_dict(self, include_tokens: bool = True,
                include_features: bool = True,
                include_timing: bool = False) -> dict:
        return {
            "format_version": TRACE_FORMAT_VERSION,
            "question_id": self.question_id,
            "question": self.question,
            "system_prompt": self.system_prompt,
            "steps": [s.to_dict(include_tokens, include_features) for s in self.steps],
            "answer": self.answer,
            "total_tokens": self.total_tokens,
            "answer_tokens": self.answer_tokens,
            "truncated": self.truncated,
            "config": {"fsm": self.fsm_config.to_dict(),
                       "sampling": self.sampling_config.to_dict()},
            "backend": self.backend,
            "controller_overhead_s": list(self.controller_overhead_s) if include_timing else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceDocument":
        version = d.get("format_version")
        if version != TRACE_FORMAT_VERSION:
            raise ValueError(f"unsupported trace format_version {version!r}")
        return cls(
            question=d["question"],
            system_prompt=d.get("system_prompt", ""),
            steps=[StepRecord.from_dict(s) for s in d["steps"]],
            answer=d.get("answer"),
            total_tokens=d["total_tokens"],
            answer_tokens=d.get("answer_tokens", 0),
            truncated=d["truncated"],
            fsm_config=FsmConfig.from_dict(d["config"]["fsm"]),
            sampling_config=SamplingConfig.from_dict(d["config"]["sampling"]),
            backend=d.get("backend", "unknown"),
            question_id=d.get("question_id"),
            controller_overhead_s=list(d.get("controller_overhead_s") or []),
        )

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(**kwargs), ensure_ascii=False)


def append_trace(path: str | Path, trace: TraceDocument, **kwargs) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(trace.to_json(**kwargs))
        f.write("\n")


def write_traces(path: str | Path, traces: Iterable[TraceDocument], **kwargs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for trace in traces:
            f.write(trace.to_json(**kwargs))
            f.write("\n")


def read_traces(path: str | Path) -> Iterator[TraceDocument]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield TraceDocument.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: bad trace record: {e}") from None
