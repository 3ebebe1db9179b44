import random
import sqlite3
from dataclasses import replace
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import T0, make_post
from profilebench.buffer import (
    BufferState,
    BufferStore,
    BufferStoreError,
    drain,
    push,
    state_from_record,
    state_to_record,
    stream_batches,
    try_pop,
)
from profilebench.core import Post, get_platform

WEIBO = get_platform("weibo")
ZHIHU = get_platform("zhihu")


def valid_if_tagged(post: Post) -> bool:
    return not post.content.startswith("x")


def posts(n, start=0, user="u1", step=10):
    return [make_post(i, user, minutes=step * i) for i in range(start, start + n)]


def test_push_below_trigger_does_not_emit():
    state = push(BufferState("u1"), posts(4), validator=valid_if_tagged)
    assert state.valid_count == 4
    state, batches = drain(state, WEIBO, reaudit=None)
    assert batches == [] and len(state.pending) == 4


def test_push_nothing_leaves_state_unchanged():
    state = BufferState("u1")
    assert push(state, [], validator=valid_if_tagged) is state


def test_invalid_posts_are_carried_but_not_counted():
    ps = posts(4) + [make_post(9, content="x short")]
    state = push(BufferState("u1"), ps, validator=valid_if_tagged)
    assert state.valid_count == 4 and len(state.pending) == 5


def test_weibo_emits_at_trigger():
    state = push(BufferState("u1"), posts(5), validator=valid_if_tagged)
    state, batches = drain(state, WEIBO, reaudit=None)
    assert len(batches) == 1 and len(batches[0].posts) == 5
    assert state.pending == () and batches[0].step_index == 1


def test_zhihu_waits_for_three():
    state = push(BufferState("u1"), posts(2), validator=valid_if_tagged)
    assert drain(state, ZHIHU, reaudit=None)[1] == []


def test_cap_limits_batch_size():
    profile = replace(WEIBO, buffer_cap=12)
    state = push(BufferState("u1"), posts(14), validator=valid_if_tagged)
    state, batch = try_pop(state, profile, reaudit=None)
    assert batch.valid_count == 12
    assert state.valid_count == 2


def test_failed_reaudit_discards_batch():
    state = push(BufferState("u1"), posts(5), validator=valid_if_tagged)
    state, batch = try_pop(state, WEIBO, reaudit=lambda b, p: False)
    assert batch is None and state.discarded_batches == 1 and state.emitted_steps == 0


def test_density_reaudit_uses_platform_interval():
    tagged = [make_post(i, anchors=("话题",)) for i in range(5)]
    state = push(BufferState("u1"), tagged, validator=valid_if_tagged)
    _, batches = drain(state, WEIBO)  # density 1.0 inside [0.2, 1.0]
    assert len(batches) == 1
    state = push(BufferState("u1"), posts(5), validator=valid_if_tagged)
    _, batches = drain(state, WEIBO)  # density 0
    assert batches == []


def test_out_of_order_post_is_insert_sorted():
    ps = posts(3)
    late = make_post(99, minutes=5)
    state = push(BufferState("u1"), ps + [late], validator=valid_if_tagged)
    stamps = [p.timestamp for p in state.pending]
    assert stamps == sorted(stamps)


def test_duplicate_post_ids_are_ignored():
    ps = posts(3)
    state = push(BufferState("u1"), ps, validator=valid_if_tagged)
    assert push(state, ps, validator=valid_if_tagged) is state


# ---------------------------------------------------------------------------
# Randomized invariants
# ---------------------------------------------------------------------------


def run_sequence(rng: random.Random, profile, n_posts: int):
    all_posts = []
    for i in range(n_posts):
        content = "x" if rng.random() < 0.2 else f"有效的帖子内容{i}"
        all_posts.append(Post(f"p{i}", "u", T0 + timedelta(minutes=i), content=content))
    state = BufferState("u")
    emitted = []
    i = 0
    while i < n_posts:
        step = rng.randint(0, 7)
        chunk = all_posts[i:i + step]
        if rng.random() < 0.1 and i:
            chunk = chunk + [all_posts[rng.randrange(i)]]  # re-delivery
        state = push(state, chunk, validator=valid_if_tagged)
        state, out = drain(state, profile, reaudit=None)
        emitted.extend(out)
        i += step
    return all_posts, emitted, state


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["weibo", "zhihu"]), st.integers(0, 80))
def test_buffer_invariants(seed, platform, n_posts):
    profile = get_platform(platform)
    all_posts, emitted, state = run_sequence(random.Random(seed), profile, n_posts)
    for b in emitted:
        assert profile.buffer_trigger <= b.valid_count <= profile.buffer_cap
        assert sum(valid_if_tagged(p) for p in b.posts) == b.valid_count
    seen = [p.post_id for b in emitted for p in b.posts] + [p.post_id for p in state.pending]
    assert sorted(seen) == sorted(p.post_id for p in all_posts)
    _, emitted2, state2 = run_sequence(random.Random(seed), profile, n_posts)
    assert emitted2 == emitted and state2 == state


def test_stream_batches_push_units_agree_on_sizes():
    ps = posts(40, step=200)
    by_day, _ = stream_batches("u1", ps, WEIBO, validator=valid_if_tagged, reaudit=None)
    by_post, _ = stream_batches("u1", ps, WEIBO, push_unit="post", validator=valid_if_tagged, reaudit=None)
    assert all(5 <= b.valid_count <= 15 for b in by_day)
    assert [len(b.posts) for b in by_post] == [5] * 8
    with pytest.raises(ValueError):
        stream_batches("u1", ps, WEIBO, push_unit="week")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_store_round_trip(tmp_path):
    states = {}
    rng = random.Random(0)
    for u in range(1000):
        ps = [make_post(i, f"u{u}") for i in range(rng.randint(0, 4))]
        states[f"u{u}"] = push(BufferState(f"u{u}"), ps, validator=valid_if_tagged)
    store = BufferStore(tmp_path / "s.sqlite")
    store.persist(states)
    back = store.restore()
    assert back == states
    assert [state_to_record(back[u]) for u in sorted(back)] == [state_to_record(states[u]) for u in sorted(states)]


def test_empty_store_restores_nothing(tmp_path):
    assert BufferStore(tmp_path / "e.sqlite").restore() == {}


def test_crash_between_push_and_persist_resumes(tmp_path):
    store = BufferStore(tmp_path / "s.sqlite")
    ps = posts(8)
    state = push(BufferState("u1"), ps[:3], validator=valid_if_tagged)
    store.persist({"u1": state})
    # crash: the next push of ps[3:6] is lost before persisting
    _ = push(state, ps[3:6], validator=valid_if_tagged)
    restored = store.restore()["u1"]
    assert restored == state
    state = push(restored, ps, validator=valid_if_tagged)  # full re-delivery
    state, batches = drain(state, WEIBO, reaudit=None)
    # every post exactly once: all eight fit under the cap of 15
    assert [p.post_id for b in batches for p in b.posts] == [p.post_id for p in ps]
    assert state.pending == ()


def test_corrupt_store_raises_actionable_error(tmp_path):
    path = tmp_path / "bad.sqlite"
    path.write_bytes(b"not a database at all" * 100)
    with pytest.raises(BufferStoreError, match="rebuild|re-run"):
        BufferStore(path).restore()


def test_store_version_mismatch(tmp_path):
    path = tmp_path / "s.sqlite"
    BufferStore(path).persist({})
    with sqlite3.connect(path) as conn:
        conn.execute("UPDATE meta SET value='99' WHERE key='format_version'")
    with pytest.raises(BufferStoreError):
        BufferStore(path).restore()


def test_state_record_round_trip():
    state = push(BufferState("u1"), posts(3) + [make_post(7, content="x")], validator=valid_if_tagged)
    assert state_from_record(state_to_record(state)) == state
