"""JSON-lines helpers and record <-> dataclass conversion for the on-disk schema."""

from __future__ import annotations

import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator

from .core import InvalidInputError, Post, StreamBatch, UserMeta

USER_FIELDS = (
    "user_id", "username", "bio", "gender", "location",
    "followers_count", "following_count", "posts_count", "verified_type",
)
POST_TEXT_FIELDS = ("title", "content", "quote_content", "media_text", "action", "item")


def dumps(obj: Any) -> str:
    """Canonical single-line JSON (sorted keys, UTF-8 kept readable)."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def write_jsonl(path: str | Path, rows: Iterable[Any]) -> int:
    """Write rows atomically (temp file + rename); returns the row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(dumps(row))
                fh.write("\n")
                n += 1
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return n


def write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def parse_timestamp(value: Any) -> datetime:
    if isinstance(value, datetime):
        ts = value
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        ts = datetime.fromtimestamp(value, tz=timezone.utc)
    elif isinstance(value, str) and value:
        ts = datetime.fromisoformat(value.replace("Z", "+00:00"))
    else:
        raise InvalidInputError(f"bad timestamp {value!r}")
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def post_to_record(post: Post) -> dict:
    rec = {
        "post_id": post.post_id,
        "user_id": post.user_id,
        "timestamp": format_timestamp(post.timestamp),
        "anchors": list(post.anchors),
    }
    for name in POST_TEXT_FIELDS:
        rec[name] = getattr(post, name)
    return rec


def post_from_record(rec: dict) -> Post:
    try:
        post_id, user_id = rec["post_id"], rec["user_id"]
    except KeyError as exc:
        raise InvalidInputError(f"missing field {exc.args[0]}") from None
    if not post_id or not user_id:
        raise InvalidInputError("post_id and user_id must be non-empty")
    anchors = rec.get("anchors") or []
    if not isinstance(anchors, list):
        raise InvalidInputError("anchors must be a list")
    kwargs = {}
    for name in POST_TEXT_FIELDS:
        value = rec.get(name) or ""
        if not isinstance(value, str):
            raise InvalidInputError(f"field {name} must be a string")
        kwargs[name] = value
    return Post(
        post_id=str(post_id),
        user_id=str(user_id),
        timestamp=parse_timestamp(rec.get("timestamp")),
        anchors=tuple(str(a) for a in anchors),
        **kwargs,
    )


def user_to_record(user: UserMeta) -> dict:
    return {name: getattr(user, name) for name in USER_FIELDS}


def user_from_record(rec: dict) -> UserMeta:
    kwargs = {}
    for name in USER_FIELDS:
        if name in rec and rec[name] is not None:
            kwargs[name] = rec[name]
    for name in ("followers_count", "following_count", "posts_count"):
        if name in kwargs:
            kwargs[name] = int(kwargs[name])
    if "user_id" not in kwargs:
        raise InvalidInputError("missing field user_id")
    kwargs["user_id"] = str(kwargs["user_id"])
    return UserMeta(**kwargs)


def batch_to_record(batch: StreamBatch) -> dict:
    return {
        "user_id": batch.user_id,
        "step_index": batch.step_index,
        "posts": [post_to_record(p) for p in batch.posts],
        "anchors": list(batch.anchors),
        "window": [format_timestamp(batch.window[0]), format_timestamp(batch.window[1])],
        "valid_count": batch.valid_count,
    }


def batch_from_record(rec: dict) -> StreamBatch:
    return StreamBatch(
        user_id=rec["user_id"],
        step_index=int(rec["step_index"]),
        posts=tuple(post_from_record(p) for p in rec["posts"]),
        anchors=tuple(rec["anchors"]),
        window=(parse_timestamp(rec["window"][0]), parse_timestamp(rec["window"][1])),
        valid_count=int(rec.get("valid_count", 0)),
    )
