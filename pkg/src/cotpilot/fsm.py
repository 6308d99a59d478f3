"""
State transition logic over a bounded difficulty history.

The rules, applied in order at each completed step with fresh score r:

  1. If the end-of-thought marker was seen, go to END (nothing is pushed).
  2. Push r into the history, then evaluate.
  3. INIT always moves to NORMAL.
  4. From NORMAL, enter FAST only when the last k_fast scores are all
     strictly below tau_fast, or SLOW when the last k_slow scores are all
     strictly above tau_slow; both demand a full window, so warm-up never
     triggers an entry. The two conditions cannot hold at once under a
     valid config.
  5. From FAST, return to NORMAL only when r crosses the threshold with
     the hysteresis margin: r > tau_fast + delta.
  6. From SLOW, return to NORMAL when r < tau_slow - delta; otherwise
     escalate to SKIP when the last k_skip scores are all above tau_skip.
     The exit check runs first.
  7. SKIP only ever leaves to END.

The history is never cleared on a state change, so SKIP escalation sees
scores accumulated while still in NORMAL.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .config import ControlTag, FsmConfig, ThinkingState

__all__ = [
    "DifficultyHistory",
    "ControllerState",
    "TransitionAfterEnd",
    "transition",
    "tag_for_state",
    "reset",
]


class TransitionAfterEnd(RuntimeError):
    """transition was called on a controller already in END."""


class DifficultyHistory:
    """Ring buffer of the most recent difficulty scores, most recent last."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[float] = deque(maxlen=capacity)

    def push(self, r: float) -> None:
        if not (0.0 <= r <= 1.0):
            raise ValueError(f"difficulty {r} outside [0, 1]")
        self._buf.append(r)

    def window(self, k: int) -> list[float]:
        """Last k entries, or fewer during warm-up."""
        if k >= len(self._buf):
            return list(self._buf)
        return list(self._buf)[-k:]

    def full(self, k: int) -> bool:
        return len(self._buf) >= k

    def clear(self) -> None:
        self._buf.clear()

    def values(self) -> list[float]:
        return list(self._buf)

    def __len__(self) -> int:
        return len(self._buf)


@dataclass
class ControllerState:
    """Per-session mutable controller state; never share across sessions."""

    state: ThinkingState
    history: DifficultyHistory
    steps_emitted: int = 0

    @classmethod
    def initial(cls, cfg: FsmConfig) -> "ControllerState":
        cap = max(cfg.k_fast, cfg.k_slow, cfg.k_skip)
        return cls(state=ThinkingState.INIT, history=DifficultyHistory(cap))


def transition(ctrl: ControllerState, r_t: float, saw_think_end: bool,
               cfg: FsmConfig) -> ThinkingState:
    """Apply one step observation and return the new state.

    Mutates ctrl in place (history push, state, step counter). The result
    is a pure function of (state, history-after-push, r_t, flag, cfg).
    """
    if ctrl.state is ThinkingState.END:
        raise TransitionAfterEnd("controller is already in END")

    ctrl.steps_emitted += 1
    if saw_think_end:
        ctrl.state = ThinkingState.END
        return ctrl.state

    ctrl.history.push(r_t)
    prev = ctrl.state
    hist = ctrl.history

    if prev is ThinkingState.INIT:
        ctrl.state = ThinkingState.NORMAL
    elif prev is ThinkingState.NORMAL:
        enter_fast = hist.full(cfg.k_fast) and all(
            r < cfg.tau_fast for r in hist.window(cfg.k_fast))
        enter_slow = hist.full(cfg.k_slow) and all(
            r > cfg.tau_slow for r in hist.window(cfg.k_slow))
        # The shared most-recent score cannot sit below tau_fast and above
        # tau_slow at once, so both entries firing means a broken config.
        assert not (enter_fast and enter_slow), "FAST and SLOW entry both fired"
        if enter_fast:
            ctrl.state = ThinkingState.FAST
        elif enter_slow:
            ctrl.state = ThinkingState.SLOW
    elif prev is ThinkingState.FAST:
        if r_t > cfg.tau_fast + cfg.delta:
            ctrl.state = ThinkingState.NORMAL
    elif prev is ThinkingState.SLOW:
        if r_t < cfg.tau_slow - cfg.delta:
            ctrl.state = ThinkingState.NORMAL
        elif hist.full(cfg.k_skip) and all(
                r > cfg.tau_skip for r in hist.window(cfg.k_skip)):
            ctrl.state = ThinkingState.SKIP
    # SKIP is absorbing; only saw_think_end moves it (handled above).
    return ctrl.state


_TAG_FOR_STATE = {
    ThinkingState.NORMAL: ControlTag.NORMAL_STEP,
    ThinkingState.FAST: ControlTag.FAST_STEP,
    ThinkingState.SLOW: ControlTag.SLOW_STEP,
    ThinkingState.SKIP: ControlTag.SKIP_STEP,
}


def tag_for_state(state: ThinkingState) -> ControlTag | None:
    """Steering tag for a state; INIT and END carry none."""
    return _TAG_FOR_STATE.get(state)


def reset(ctrl: ControllerState) -> ControllerState:
    """Return ctrl to INIT with an empty history. Idempotent."""
    ctrl.state = ThinkingState.INIT
    ctrl.history.clear()
    ctrl.steps_emitted = 0
    return ctrl
