import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mk_token
from cotpilot.segmenter import (FedAfterEnd, StepEventKind, StepSegmenter,
                                THINK_END_MARKER)


def feed_texts(seg, texts):
    events = []
    for t in texts:
        events.extend(seg.feed_token(mk_token(t)))
    return events


def test_simple_concatenation():
    seg = StepSegmenter()
    events = feed_texts(seg, ["He", "llo", "\n"])
    assert [e.kind for e in events] == [StepEventKind.STEP_COMPLETE]
    assert events[0].text == "Hello"
    assert [t.text for t in events[0].tokens] == ["He", "llo", "\n"]


def test_token_embedding_newline_splits():
    seg = StepSegmenter()
    events = feed_texts(seg, ["start ", "a\nb"])
    assert len(events) == 1
    assert events[0].text == "start a"
    assert seg.pending_text == "b"
    # the splitting token belongs to the step it closed
    assert [t.text for t in events[0].tokens] == ["start ", "a\nb"]
    assert seg.pending_tokens == []


def test_think_end_literal():
    seg = StepSegmenter()
    events = feed_texts(seg, [THINK_END_MARKER])
    assert [e.kind for e in events] == [StepEventKind.THINK_END]
    assert seg.ended


def test_think_end_split_across_tokens():
    seg = StepSegmenter()
    events = feed_texts(seg, ["</th", "ink>"])
    assert [e.kind for e in events] == [StepEventKind.THINK_END]


def test_think_end_mid_step_emits_partial_first():
    seg = StepSegmenter()
    events = feed_texts(seg, ["foo</think>bar"])
    assert [e.kind for e in events] == [StepEventKind.STEP_COMPLETE,
                                        StepEventKind.THINK_END]
    assert events[0].text == "foo"
    assert events[1].text == "bar"


def test_no_step_after_think_end():
    seg = StepSegmenter()
    feed_texts(seg, ["x\n", THINK_END_MARKER])
    with pytest.raises(FedAfterEnd):
        seg.feed_token(mk_token("more"))


def test_empty_lines_dropped_tokens_roll_forward():
    seg = StepSegmenter()
    events = feed_texts(seg, ["a\n", "\n", "  \n", "b", "\n"])
    texts = [e.text for e in events if e.kind is StepEventKind.STEP_COMPLETE]
    assert texts == ["a", "b"]
    # the blank-line tokens ride with the next completed step
    step_b = events[-1]
    assert [t.text for t in step_b.tokens] == ["\n", "  \n", "b", "\n"]


def test_token_partition_no_loss_no_duplication():
    seg = StepSegmenter()
    fed = ["x", "\n", "\n", "y1 ", "y2\n", "z</th", "ink>", ]
    # marker reached before last feed; guard against FedAfterEnd
    events = []
    fed_tokens = []
    for t in fed:
        tok = mk_token(t)
        fed_tokens.append(tok)
        events.extend(seg.feed_token(tok))
    seen = [t for e in events for t in e.tokens] + seg.pending_tokens
    assert [id(t) for t in seen] == [id(t) for t in fed_tokens]


def test_flush_pending():
    seg = StepSegmenter()
    feed_texts(seg, ["x ", "= 3"])
    ev = seg.flush()
    assert ev is not None and ev.text == "x = 3"
    assert seg.pending_text == ""
    assert seg.flush() is None


def test_flush_empty_and_whitespace():
    seg = StepSegmenter()
    assert seg.flush() is None
    feed_texts(seg, ["  \t "])
    assert seg.flush() is None


def test_multiple_newlines_in_one_token():
    seg = StepSegmenter()
    events = feed_texts(seg, ["a\nb\nc"])
    texts = [e.text for e in events]
    assert texts == ["a", "b"]
    assert seg.pending_text == "c"
    # the spanning token is consumed by the first step it closes
    assert len(events[0].tokens) == 1
    assert events[1].tokens == []


@settings(max_examples=200)
@given(st.lists(st.text(alphabet="ab \t\n", min_size=1, max_size=5),
                min_size=0, max_size=30))
def test_reconstruction_property(texts):
    # Without the marker: emitted steps + pending reproduce the exact
    # stream minus dropped blank lines.
    seg = StepSegmenter()
    steps = []
    for t in texts:
        for ev in seg.feed_token(mk_token(t)):
            assert ev.kind is StepEventKind.STEP_COMPLETE
            assert "\n" not in ev.text
            steps.append(ev.text)
    full = "".join(texts)
    segments = full.split("\n")
    expected = [s for s in segments[:-1] if s.strip(" \t") != ""]
    assert steps == expected
    assert seg.pending_text == segments[-1]


@settings(max_examples=100)
@given(st.text(alphabet="xy\n<>/thinke", min_size=0, max_size=40))
def test_marker_ends_session_exactly_once(body):
    seg = StepSegmenter()
    think_ends = 0
    try:
        for ch in body + THINK_END_MARKER:
            for ev in seg.feed_token(mk_token(ch)):
                if ev.kind is StepEventKind.THINK_END:
                    think_ends += 1
    except FedAfterEnd:
        pass  # tokens after an embedded marker are rejected, as contracted
    assert think_ends == 1
    assert seg.ended
