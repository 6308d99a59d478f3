"""
Generation backends.

A backend exposes generate_until_newline(context, sampling, max_tokens)
returning an iterable of TokenMeta that ends at the first emitted newline,
at the end-of-thought marker, at end-of-sequence (the script or model is
done) or when max_tokens runs out. Every token carries at least
sampling.top_k_logprobs candidates, and an identity() string labels the
backend in traces.

ScriptedBackend is a fully deterministic test double driven by an ordered
script. OpenAICompatBackend adapts a completions endpoint, realizing the
newline stop through the API stop-sequence parameter.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol, runtime_checkable

from .config import ControlTag, SamplingConfig
from .segmenter import THINK_END_MARKER, TokenMeta

API_KEY_ENV = "COTPILOT_API_KEY"

__all__ = [
    "GenerationBackend",
    "BackendError",
    "ScriptConditionMismatch",
    "ScriptEntry",
    "ScriptedBackend",
    "OpenAICompatBackend",
    "tokenize_script_text",
    "synthetic_top_k",
    "API_KEY_ENV",
]


@runtime_checkable
class GenerationBackend(Protocol):
    def generate_until_newline(self, context: str, sampling: SamplingConfig,
                               max_tokens: int) -> Iterator[TokenMeta]: ...

    def identity(self) -> str: ...


class BackendError(RuntimeError):
    """A backend could not produce tokens."""


class ScriptConditionMismatch(BackendError):
    """A script entry expected a different steering tag in the context."""


# Synthetic tokenization: newlines stand alone, words keep their leading
# whitespace, residual whitespace runs form their own tokens. The pieces
# concatenate back to the exact input text.
_PIECES_RE = re.compile(r"\n|[^\S\n]*\S+|[^\S\n]+")


def tokenize_script_text(text: str) -> list[str]:
    return _PIECES_RE.findall(text)


def synthetic_top_k(token_text: str, logprob: float, k: int) -> tuple[tuple[str, float], ...]:
    """Build a plausible descending top-k list around a sampled token.

    The sampled token sits at rank 1 with the given logprob; the leftover
    probability mass decays geometrically over synthetic alternatives so
    the list stays sorted and sums to at most one.
    """
    lp1 = min(logprob, -1e-9)
    p1 = math.exp(lp1)
    raw = [p1 * 0.7 ** j for j in range(1, k)]
    total = sum(raw)
    avail = 1.0 - p1
    scale = min(1.0, avail / total) if total > 0 else 0.0
    out = [(token_text, lp1)]
    for j, p in enumerate(raw):
        p = max(p * scale, 1e-300)
        out.append((f"~alt{j}", math.log(p)))
    return tuple(out)


@dataclass(frozen=True)
class ScriptEntry:
    """One scripted generation segment.

    when, if set, asserts which steering tag must be the most recent one in
    the context when this entry starts; a mismatch aborts the session. text
    is emitted verbatim. logprob is either one value for every token or a
    per-token list (the last value repeats).
    """

    text: str
    when: ControlTag | None = None
    logprob: float | list[float] = -0.25


def _last_tag_in(context: str) -> ControlTag | None:
    best_pos = -1
    best_tag = None
    for tag in ControlTag:
        pos = context.rfind(tag.value)
        if pos > best_pos:
            best_pos = pos
            best_tag = tag
    return best_tag


class ScriptedBackend:
    """Deterministic backend replaying a fixed script, one instance per
    session (it keeps a cursor)."""

    def __init__(self, script: list[ScriptEntry]):
        self.script = list(script)
        self._entry = 0
        self._offset = 0    # token offset inside the current entry
        self._pieces: list[str] | None = None

    def identity(self) -> str:
        digest = hashlib.sha256(
            json.dumps([(e.text, e.when.value if e.when else None, e.logprob)
                        for e in self.script]).encode("utf-8")
        ).hexdigest()[:8]
        return f"scripted:{len(self.script)}:{digest}"

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        """Load a script from JSONL: {"text": ..., "when": "fast"|..., "logprob": ...}."""
        names = {"fast": ControlTag.FAST_STEP, "slow": ControlTag.SLOW_STEP,
                 "normal": ControlTag.NORMAL_STEP, "skip": ControlTag.SKIP_STEP}
        entries = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    when = d.get("when")
                    if when is not None:
                        when = names.get(when) or ControlTag(when)
                    entries.append(ScriptEntry(text=d["text"], when=when,
                                               logprob=d.get("logprob", -0.25)))
                except (json.JSONDecodeError, KeyError, ValueError) as e:
                    raise BackendError(f"{path}:{lineno}: bad script entry: {e}") from None
        return cls(entries)

    def _entry_logprob(self, entry: ScriptEntry, i: int) -> float:
        if isinstance(entry.logprob, list):
            if not entry.logprob:
                return -0.25
            return float(entry.logprob[min(i, len(entry.logprob) - 1)])
        return float(entry.logprob)

    def generate_until_newline(self, context: str, sampling: SamplingConfig,
                               max_tokens: int) -> Iterator[TokenMeta]:
        emitted = 0
        emitted_text = ""
        while emitted < max_tokens and self._entry < len(self.script):
            entry = self.script[self._entry]
            if self._pieces is None:
                if entry.when is not None:
                    last = _last_tag_in(context)
                    if last is not entry.when:
                        raise ScriptConditionMismatch(
                            f"script entry {self._entry} expects tag "
                            f"{entry.when.value}, context ends with "
                            f"{last.value if last else 'no tag'}")
                self._pieces = tokenize_script_text(entry.text)
            while self._offset < len(self._pieces) and emitted < max_tokens:
                piece = self._pieces[self._offset]
                lp = self._entry_logprob(entry, self._offset)
                tok = TokenMeta(
                    text=piece,
                    logprob=min(lp, -1e-9),
                    rank=1,
                    top_k=synthetic_top_k(piece, lp, sampling.top_k_logprobs),
                )
                self._offset += 1
                emitted += 1
                emitted_text += piece
                yield tok
                if "\n" in piece or THINK_END_MARKER in emitted_text:
                    return
            if self._offset >= len(self._pieces):
                self._entry += 1
                self._offset = 0
                self._pieces = None
        # falls through on script exhaustion (end of sequence) or budget


class OpenAICompatBackend:
    """Adapter for an OpenAI-style completions endpoint.

    The newline step delimiter is realized with the stop parameter; the
    API omits the stop sequence from the response, so a synthetic newline
    token is appended when a call finishes on the stop condition. Its
    logprob is unknown and recorded as 0.0.
    """

    def __init__(self, base_url: str, model: str,
                 api_key_env: str = API_KEY_ENV, timeout_s: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s

    def identity(self) -> str:
        return f"openai:{self.base_url}:{self.model}"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env) or os.environ.get("OPENAI_API_KEY")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def generate_until_newline(self, context: str, sampling: SamplingConfig,
                               max_tokens: int) -> Iterator[TokenMeta]:
        import requests

        payload = {
            "model": self.model,
            "prompt": context,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "max_tokens": max_tokens,
            "logprobs": sampling.top_k_logprobs,
            "stop": ["\n"],
        }
        try:
            resp = requests.post(f"{self.base_url}/completions", json=payload,
                                 headers=self._headers(), timeout=self.timeout_s)
            resp.raise_for_status()
            body = resp.json()
        except requests.RequestException as e:
            raise BackendError(f"completions request failed: {e}") from e

        try:
            choice = body["choices"][0]
            lp = choice.get("logprobs") or {}
            texts = lp["tokens"]
            token_logprobs = lp["token_logprobs"]
            top_logprobs = lp.get("top_logprobs") or [{} for _ in texts]
            finish = choice.get("finish_reason")
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError(f"malformed completions response: {e}") from None

        k = sampling.top_k_logprobs
        for text, token_lp, top in zip(texts, token_logprobs, top_logprobs):
            token_lp = min(float(token_lp if token_lp is not None else -1e-9), -1e-9)
            pairs = sorted(((t, float(v)) for t, v in (top or {}).items()),
                           key=lambda p: -p[1])
            if not pairs:
                pairs = [(text, token_lp)]
            pairs = _pad_top_k(pairs, k)
            rank = next((i + 1 for i, (t, _) in enumerate(pairs) if t == text),
                        len(pairs) + 1)
            yield TokenMeta(text=text, logprob=token_lp, rank=rank,
                            top_k=tuple(pairs))
        if finish == "stop":
            yield TokenMeta(text="\n", logprob=0.0, rank=1,
                            top_k=_pad_top_k([("\n", 0.0)], k))


def _pad_top_k(pairs: list[tuple[str, float]], k: int) -> tuple[tuple[str, float], ...]:
    """Extend a candidate list to k entries with strictly descending,
    effectively zero-probability fillers."""
    pairs = list(pairs[:k]) if len(pairs) > k else list(pairs)
    floor = min(p for _, p in pairs)
    base = min(floor, -18.0)
    j = 1
    while len(pairs) < k:
        pairs.append((f"~pad{j}", base - j))
        j += 1
    return tuple(pairs)
