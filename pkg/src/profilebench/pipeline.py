"""In-memory wiring of the curation stages, shared by the CLI and the tests.

annotate -> trending/blacklist -> daily filter -> longitudinal filter ->
buffer -> registry/index -> tasks
"""

from __future__ import annotations

import bisect
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from .anchors import (
    DEFAULT_RULES,
    STRATA_PRESETS,
    FilterRules,
    StrataConfig,
    annotate_posts,
    coarse_filter_user,
    longitudinal_filter,
    summarize_user,
)
from .buffer import stream_batches
from .core import PlatformProfile, Post, StreamBatch, UserMeta, normalize_tag
from .index import (
    DEFAULT_OUTLIER_THRESHOLD,
    DEFAULT_TAU,
    ClusterIndex,
    Embedder,
    HashingEmbedder,
    TagRegistry,
    TrendingTable,
    build_index,
    peer_lookup,
    sample_coverage,
    sample_posts,
    update_blacklist,
)
from .tasks import DistractorSources, StepTask, TaskBuildConfig, build_user_tasks

logger = logging.getLogger(__name__)


def group_by_user(posts: Iterable[Post]) -> dict[str, list[Post]]:
    out: dict[str, list[Post]] = defaultdict(list)
    for p in posts:
        out[p.user_id].append(p)
    for plist in out.values():
        plist.sort(key=lambda p: (p.timestamp, p.post_id))
    return dict(out)


def annotate_corpus(
    by_user: Mapping[str, Sequence[Post]],
    profile: PlatformProfile,
    blacklist: frozenset[str] = frozenset(),
) -> dict[str, list[Post]]:
    return {u: annotate_posts(posts, profile, blacklist) for u, posts in sorted(by_user.items())}


def strip_blacklisted(by_user: Mapping[str, Sequence[Post]], blacklist: set[str]) -> dict[str, list[Post]]:
    if not blacklist:
        return {u: list(p) for u, p in by_user.items()}
    return {
        u: [replace(p, anchors=tuple(a for a in p.anchors if a not in blacklist)) for p in posts]
        for u, posts in by_user.items()
    }


# ---------------------------------------------------------------------------
# Trending and registry
# ---------------------------------------------------------------------------


def trending_tables(
    posts: Iterable[Post],
    *,
    window_days: int = 1,
    sample_size: int = 500_000,
    seed: int = 0,
) -> dict[date, TrendingTable]:
    """One coverage table per calendar day over a trailing window of posts."""
    by_day: dict[date, list[tuple[str, ...]]] = defaultdict(list)
    for p in posts:
        by_day[p.timestamp.date()].append(tuple(dict.fromkeys(p.anchors)))
    tables = {}
    for day in sorted(by_day):
        window = []
        for offset in range(window_days):
            window.extend(by_day.get(day - timedelta(days=offset), ()))
        sample = sample_posts(window, sample_size, seed + day.toordinal())
        tables[day] = replace(sample_coverage(sample), day=day)
    return tables


def dynamic_blacklist(tables: Mapping[date, TrendingTable], tau: Fraction = DEFAULT_TAU) -> set[str]:
    blacklist: set[str] = set()
    for day in sorted(tables):
        update_blacklist(tables[day], tau, blacklist)
    return blacklist


def build_registry(posts: Iterable[Post]) -> TagRegistry:
    per_day: dict[date, Counter] = defaultdict(Counter)
    for p in posts:
        per_day[p.timestamp.date()].update(set(p.anchors))
    reg = TagRegistry()
    for day in sorted(per_day):
        reg.ingest_day(day, per_day[day])
    return reg


class TrendingLookup:
    """Latest table on or before a given day, as a coverage-ordered tag list."""

    def __init__(self, tables: Mapping[date, TrendingTable]) -> None:
        self.days = sorted(tables)
        self.tags = {d: tuple(normalize_tag(t) for t in tables[d].tags()) for d in self.days}

    def __call__(self, day: Optional[date]) -> tuple[str, ...]:
        if not self.days:
            return ()
        if day is None:
            return self.tags[self.days[-1]]
        i = bisect.bisect_right(self.days, day)
        return self.tags[self.days[i - 1]] if i else ()


def make_sources(
    index: Optional[ClusterIndex],
    tables: Mapping[date, TrendingTable],
    registry: TagRegistry,
    blacklist: Iterable[str] = (),
) -> DistractorSources:
    if index is None:
        return DistractorSources(
            trending=TrendingLookup(tables), global_pool=sorted(registry.tags),
            blacklist=frozenset(blacklist),
        )
    peer_memo: dict[str, list[str]] = {}

    def peers(tag: str) -> list[str]:
        if tag not in peer_memo:
            peer_memo[tag] = [normalize_tag(t) for t in peer_lookup(index, tag)]
        return peer_memo[tag]

    return DistractorSources(
        peers=peers,
        cluster_of=index.cluster_of,
        trending=TrendingLookup(tables),
        global_pool=sorted(registry.tags),
        blacklist=frozenset(blacklist),
    )


# ---------------------------------------------------------------------------
# Filtering and buffering
# ---------------------------------------------------------------------------


@dataclass
class FilterReport:
    kept_users: list[str] = field(default_factory=list)
    dropped_days: Counter = field(default_factory=Counter)
    n_users_in: int = 0


def daily_filter(
    by_user: Mapping[str, Sequence[Post]], profile: PlatformProfile, rules: FilterRules = DEFAULT_RULES
) -> tuple[dict[str, list[Post]], Counter]:
    """Keep the valid posts of every user-day that passes the coarse screen."""
    out: dict[str, list[Post]] = {}
    reasons: Counter = Counter()
    for user, posts in sorted(by_user.items()):
        days: dict[date, list[Post]] = defaultdict(list)
        for p in posts:
            days[p.timestamp.date()].append(p)
        kept: list[Post] = []
        for day in sorted(days):
            verdict = coarse_filter_user(days[day], profile, rules)
            if verdict.keep:
                kept.extend(verdict.valid_posts)
            else:
                reasons[verdict.reason] += 1
        if kept:
            out[user] = kept
    return out, reasons


def curate(
    by_user: Mapping[str, Sequence[Post]],
    profile: PlatformProfile,
    *,
    rules: FilterRules = DEFAULT_RULES,
    strata: Optional[StrataConfig] = None,
    seed: int = 0,
) -> tuple[dict[str, list[Post]], FilterReport]:
    strata = strata or STRATA_PRESETS["all"]
    daily, reasons = daily_filter(by_user, profile, rules)
    summaries = [summarize_user(u, posts, profile, rules) for u, posts in daily.items()]
    keep = longitudinal_filter(summaries, strata, seed)
    report = FilterReport(kept_users=keep, dropped_days=reasons, n_users_in=len(by_user))
    return {u: daily[u] for u in keep}, report


def batch_users(
    by_user: Mapping[str, Sequence[Post]],
    profile: PlatformProfile,
    rules: FilterRules = DEFAULT_RULES,
) -> dict[str, list[StreamBatch]]:
    out = {}
    for user, posts in sorted(by_user.items()):
        batches, _ = stream_batches(user, posts, profile, rules=rules)
        if batches:
            out[user] = batches
    return out


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------


@dataclass
class Benchmark:
    profile: PlatformProfile
    tasks: list[StepTask]
    users: dict[str, UserMeta]
    batches: dict[str, list[StreamBatch]]
    index: Optional[ClusterIndex]
    tables: dict[date, TrendingTable]
    registry: TagRegistry
    blacklist: set[str]

    def coverage(self) -> dict[str, Fraction]:
        """Coverage over the latest trending table."""
        if not self.tables:
            return {}
        return self.tables[max(self.tables)].coverage()

    def answer_key(self) -> dict[tuple[str, int], tuple[str, ...]]:
        return {(t.user_id, t.step_index): t.positives for t in self.tasks}


def build_benchmark(
    posts: Sequence[Post],
    users: Iterable[UserMeta],
    profile: PlatformProfile,
    *,
    seed: int = 0,
    rules: FilterRules = DEFAULT_RULES,
    strata: Optional[StrataConfig] = None,
    embedder: Optional[Embedder] = None,
    warmup_days: int = 10,
    trending_window: int = 1,
    tau: Fraction = DEFAULT_TAU,
    outlier_threshold: float = DEFAULT_OUTLIER_THRESHOLD,
    max_positives: int = 12,
    kmeans: Optional[dict] = None,
) -> Benchmark:
    by_user = annotate_corpus(group_by_user(posts), profile)
    all_posts = [p for plist in by_user.values() for p in plist]
    tables = trending_tables(all_posts, window_days=trending_window, seed=seed)
    blacklist: set[str] = set()
    if profile.use_blacklist:
        blacklist = dynamic_blacklist(tables, tau)
        by_user = strip_blacklisted(by_user, blacklist)
        all_posts = [p for plist in by_user.values() for p in plist]
    registry = build_registry(all_posts)
    index = build_index(
        registry, embedder or HashingEmbedder(seed=seed), profile, seed=seed,
        warmup_days=warmup_days, outlier_threshold=outlier_threshold, **(kmeans or {}),
    )
    curated, report = curate(by_user, profile, rules=rules, strata=strata, seed=seed)
    logger.info("curation kept %d of %d users", len(curated), report.n_users_in)
    batches = batch_users(curated, profile, rules)
    sources = make_sources(index, tables, registry, blacklist)
    cfg = TaskBuildConfig(seed=seed, max_positives=max_positives)
    tasks: list[StepTask] = []
    for user in sorted(batches):
        tasks.extend(build_user_tasks(batches[user], sources, cfg, profile.platform_id))
    metas = {u.user_id: u for u in users if u.user_id in batches}
    return Benchmark(profile, tasks, metas, batches, index, tables, registry, blacklist)
