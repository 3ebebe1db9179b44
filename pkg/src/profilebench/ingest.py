"""Load normalized UGC and user-metadata line files into per-user streams."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from .core import InvalidInputError, Post, UserMeta
from .records import post_from_record, user_from_record

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LineError:
    path: str
    line: int
    message: str


@dataclass
class LoadResult:
    """Per-user streams plus the malformed lines that were skipped.

    Iterating yields ``(UserMeta, tuple[Post, ...])`` pairs ordered by user id.
    """

    streams: list[tuple[UserMeta, tuple[Post, ...]]] = field(default_factory=list)
    errors: list[LineError] = field(default_factory=list)

    def __iter__(self) -> Iterator[tuple[UserMeta, tuple[Post, ...]]]:
        return iter(self.streams)

    def __len__(self) -> int:
        return len(self.streams)

    @property
    def n_posts(self) -> int:
        return sum(len(p) for _, p in self.streams)


def _iter_records(path: Path, errors: list[LineError]) -> Iterator[tuple[int, dict]]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(LineError(str(path), lineno, f"invalid JSON: {exc.msg}"))
                continue
            if not isinstance(rec, dict):
                errors.append(LineError(str(path), lineno, "record is not an object"))
                continue
            yield lineno, rec


def load_user_stream(
    posts_path: str | Path, users_path: Optional[str | Path] = None
) -> LoadResult:
    """Group posts by user and sort each stream by timestamp.

    Malformed lines are collected in ``result.errors`` with their line numbers;
    an unreadable file raises ``OSError``. Users present only in the post file
    get a bare :class:`UserMeta`.
    """
    result = LoadResult()
    metas: dict[str, UserMeta] = {}
    if users_path is not None:
        for lineno, rec in _iter_records(Path(users_path), result.errors):
            try:
                meta = user_from_record(rec)
            except (InvalidInputError, TypeError, ValueError) as exc:
                result.errors.append(LineError(str(users_path), lineno, str(exc)))
                continue
            metas[meta.user_id] = meta

    grouped: dict[str, dict[str, Post]] = defaultdict(dict)
    for lineno, rec in _iter_records(Path(posts_path), result.errors):
        try:
            post = post_from_record(rec)
        except (InvalidInputError, TypeError, ValueError) as exc:
            result.errors.append(LineError(str(posts_path), lineno, str(exc)))
            continue
        if post.post_id in grouped[post.user_id]:
            logger.warning("duplicate post_id %s at line %d ignored", post.post_id, lineno)
            continue
        grouped[post.user_id][post.post_id] = post

    for user_id in sorted(set(grouped) | set(metas)):
        posts = sorted(grouped.get(user_id, {}).values(), key=lambda p: (p.timestamp, p.post_id))
        meta = metas.get(user_id) or UserMeta(user_id=user_id)
        result.streams.append((meta, tuple(posts)))
    if result.errors:
        logger.warning("%d malformed line(s) skipped", len(result.errors))
    return result
