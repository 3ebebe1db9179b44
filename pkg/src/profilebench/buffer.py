"""Per-user reservoir that slices a post stream by information load.

``push`` appends posts, ``try_pop`` emits one batch once the count of valid
posts reaches the platform trigger. States are immutable; every operation
returns a new one. ``BufferStore`` persists states in an SQLite file.
"""

from __future__ import annotations

import bisect
import json
import logging
import sqlite3
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .anchors import DEFAULT_RULES, FilterRules, is_valid_post
from .core import PlatformProfile, Post, StreamBatch
from .records import dumps, format_timestamp, parse_timestamp, post_from_record, post_to_record

logger = logging.getLogger(__name__)

Validator = Callable[[Post], bool]
Reaudit = Callable[[StreamBatch, PlatformProfile], bool]

STORE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BufferState:
    user_id: str
    pending: tuple[Post, ...] = ()
    valid_flags: tuple[bool, ...] = ()
    valid_count: int = 0
    time_cursor: Optional[datetime] = None
    emitted_steps: int = 0
    seen_ids: frozenset[str] = field(default_factory=frozenset)
    discarded_batches: int = 0


def _validator(profile: Optional[PlatformProfile], rules: FilterRules, validator: Optional[Validator]) -> Validator:
    if validator is not None:
        return validator
    if profile is None:
        return lambda _post: True
    return lambda post: is_valid_post(post, profile, rules)


def push(
    state: BufferState,
    posts: Iterable[Post],
    profile: Optional[PlatformProfile] = None,
    *,
    rules: FilterRules = DEFAULT_RULES,
    validator: Optional[Validator] = None,
) -> BufferState:
    """Append posts in chronological order, skipping post ids already seen.

    A post older than the buffer tail is insert-sorted with a warning.
    """
    check = _validator(profile, rules, validator)
    pending = list(state.pending)
    flags = list(state.valid_flags)
    stamps = [p.timestamp for p in pending]
    seen = set(state.seen_ids)
    for post in posts:
        if post.post_id in seen:
            continue
        seen.add(post.post_id)
        ok = bool(check(post))
        if (stamps and post.timestamp < stamps[-1]) or (
            state.time_cursor is not None and post.timestamp < state.time_cursor
        ):
            logger.warning("out-of-order post %s for user %s", post.post_id, state.user_id)
            i = bisect.bisect_right(stamps, post.timestamp)
        else:
            i = len(pending)
        pending.insert(i, post)
        flags.insert(i, ok)
        stamps.insert(i, post.timestamp)
    if len(pending) == len(state.pending):
        return state
    return replace(
        state,
        pending=tuple(pending),
        valid_flags=tuple(flags),
        valid_count=sum(flags),
        seen_ids=frozenset(seen),
    )


def density_reaudit(batch: StreamBatch, profile: PlatformProfile) -> bool:
    """Batch-level tag density must stay inside the platform interval."""
    valid = batch.valid_count or len(batch.posts)
    density = sum(len(p.anchors) for p in batch.posts) / valid
    lo, hi = profile.density_interval
    return lo <= density <= hi


def try_pop(
    state: BufferState,
    profile: PlatformProfile,
    reaudit: Optional[Reaudit] = density_reaudit,
) -> tuple[BufferState, Optional[StreamBatch]]:
    """Emit the oldest ``min(valid_count, buffer_cap)`` valid posts (with any
    invalid posts interleaved before the last of them) once ``valid_count``
    reaches the trigger. A batch failing the re-audit is discarded and counted.
    """
    if state.valid_count < profile.buffer_trigger:
        return state, None
    take = min(state.valid_count, profile.buffer_cap)
    seen_valid = 0
    cut = 0
    for i, ok in enumerate(state.valid_flags):
        seen_valid += ok
        if seen_valid == take:
            cut = i + 1
            break
    posts = state.pending[:cut]
    anchors: list[str] = []
    for post in posts:
        for a in post.anchors:
            if a not in anchors:
                anchors.append(a)
    batch = StreamBatch(
        user_id=state.user_id,
        step_index=state.emitted_steps + 1,
        posts=posts,
        anchors=tuple(anchors),
        window=(posts[0].timestamp, posts[-1].timestamp),
        valid_count=take,
    )
    rest_flags = state.valid_flags[cut:]
    new_state = replace(
        state,
        pending=state.pending[cut:],
        valid_flags=rest_flags,
        valid_count=sum(rest_flags),
        time_cursor=posts[-1].timestamp,
    )
    if reaudit is not None and not reaudit(batch, profile):
        logger.info("batch for %s failed density re-audit; discarded", state.user_id)
        return replace(new_state, discarded_batches=state.discarded_batches + 1), None
    return replace(new_state, emitted_steps=state.emitted_steps + 1), batch


def drain(
    state: BufferState,
    profile: PlatformProfile,
    reaudit: Optional[Reaudit] = density_reaudit,
) -> tuple[BufferState, list[StreamBatch]]:
    batches = []
    while state.valid_count >= profile.buffer_trigger:
        state, batch = try_pop(state, profile, reaudit)
        if batch is not None:
            batches.append(batch)
    return state, batches


def stream_batches(
    user_id: str,
    posts: Sequence[Post],
    profile: PlatformProfile,
    *,
    push_unit: str = "day",
    rules: FilterRules = DEFAULT_RULES,
    validator: Optional[Validator] = None,
    reaudit: Optional[Reaudit] = density_reaudit,
) -> tuple[list[StreamBatch], BufferState]:
    """Replay a user's posts through a fresh buffer.

    ``push_unit="day"`` pushes one UTC calendar day at a time (the daily
    pipeline cadence); ``"post"`` pushes posts one by one. The trailing
    partial buffer is returned in the final state, never emitted.
    """
    ordered = sorted(posts, key=lambda p: (p.timestamp, p.post_id))
    if push_unit == "day":
        groups: dict = defaultdict(list)
        for p in ordered:
            groups[p.timestamp.date()].append(p)
        chunks = [groups[d] for d in sorted(groups)]
    elif push_unit == "post":
        chunks = [[p] for p in ordered]
    else:
        raise ValueError(f"push_unit must be 'day' or 'post', got {push_unit!r}")
    state = BufferState(user_id)
    out: list[StreamBatch] = []
    for chunk in chunks:
        state = push(state, chunk, profile, rules=rules, validator=validator)
        state, batches = drain(state, profile, reaudit)
        out.extend(batches)
    return out, state


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


class BufferStoreError(RuntimeError):
    pass


def state_to_record(state: BufferState) -> dict:
    return {
        "user_id": state.user_id,
        "pending": [post_to_record(p) for p in state.pending],
        "valid_flags": list(state.valid_flags),
        "valid_count": state.valid_count,
        "time_cursor": format_timestamp(state.time_cursor) if state.time_cursor else None,
        "emitted_steps": state.emitted_steps,
        "seen_ids": sorted(state.seen_ids),
        "discarded_batches": state.discarded_batches,
    }


def state_from_record(rec: dict) -> BufferState:
    return BufferState(
        user_id=rec["user_id"],
        pending=tuple(post_from_record(p) for p in rec["pending"]),
        valid_flags=tuple(bool(f) for f in rec["valid_flags"]),
        valid_count=int(rec["valid_count"]),
        time_cursor=parse_timestamp(rec["time_cursor"]) if rec["time_cursor"] else None,
        emitted_steps=int(rec["emitted_steps"]),
        seen_ids=frozenset(rec["seen_ids"]),
        discarded_batches=int(rec.get("discarded_batches", 0)),
    )


class BufferStore:
    """SQLite file holding one JSON row per user buffer."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)

    def _connect(self) -> sqlite3.Connection:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        conn = sqlite3.connect(self.path)
        try:
            conn.execute("CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT)")
            conn.execute("CREATE TABLE IF NOT EXISTS buffers (user_id TEXT PRIMARY KEY, state TEXT)")
            row = conn.execute("SELECT value FROM meta WHERE key='format_version'").fetchone()
            if row is None:
                conn.execute(
                    "INSERT INTO meta VALUES ('format_version', ?)", (str(STORE_FORMAT_VERSION),)
                )
                conn.commit()
            elif row[0] != str(STORE_FORMAT_VERSION):
                raise BufferStoreError(
                    f"{self.path}: store format {row[0]} != {STORE_FORMAT_VERSION}; "
                    "rebuild it by re-running the buffer stage"
                )
        except sqlite3.DatabaseError as exc:
            conn.close()
            raise BufferStoreError(
                f"{self.path} is corrupt ({exc}); move it aside and re-run the buffer "
                "stage to rebuild it from the filtered posts"
            ) from exc
        return conn

    def persist(self, states: Iterable[BufferState] | Mapping[str, BufferState]) -> int:
        if isinstance(states, Mapping):
            states = states.values()
        rows = [(s.user_id, dumps(state_to_record(s))) for s in states]
        conn = self._connect()
        try:
            with conn:
                conn.executemany("INSERT OR REPLACE INTO buffers VALUES (?, ?)", rows)
        finally:
            conn.close()
        return len(rows)

    def restore(self) -> dict[str, BufferState]:
        conn = self._connect()
        try:
            rows = conn.execute("SELECT user_id, state FROM buffers ORDER BY user_id").fetchall()
        except sqlite3.DatabaseError as exc:
            raise BufferStoreError(f"{self.path} is corrupt ({exc}); rebuild the buffer stage") from exc
        finally:
            conn.close()
        out = {}
        for user_id, blob in rows:
            try:
                out[user_id] = state_from_record(json.loads(blob))
            except (ValueError, KeyError, TypeError) as exc:
                raise BufferStoreError(
                    f"{self.path}: unreadable state for {user_id} ({exc}); rebuild the buffer stage"
                ) from exc
        return out
