"""Synthetic UGC streams with controllable interest drift, plus oracle agents.

Each user holds a set of latent interests (tags). Every step is one calendar
day: each active interest posts at least once, carrying its tag as a
``#hashtag``. Between steps an interest of age ``a`` survives with probability
``keep_prob * 0.5 ** (a / half_life)``, new interests arrive as a Poisson
process from the user's home clusters, and the set is topped up to the
minimum size with tags the user has never used.

A "crowd" of one-post accounts adds background traffic so the trending
tables, tag registry and global pool have realistic mass. Crowd accounts
never survive the active-day filter.
"""

from __future__ import annotations

import enum
import json
import math
import random
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta, timezone
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import InvalidInputError, Post, UserMeta, get_platform, normalize_tag
from .harness import AgentRequest
from .tasks import derive_seed

_CJK_LO, _CJK_HI = 0x4E00, 0x9FA5

_OPENERS = (
    "今天", "最近", "周末", "下班后", "早上", "晚上", "午休时", "刚刚", "这几天", "昨天",
    "假期里", "通勤路上", "睡前", "一大早", "临近月底",
)
_MIDDLES = (
    "又研究了一下", "认真记录一下", "随手分享", "和朋友聊到", "终于体验了", "整理了一些心得关于",
    "偶然看到", "继续关注", "做了个小总结", "花时间琢磨", "试着入门", "补了很多功课",
    "顺便打卡", "想聊聊", "重新认识了",
)
_CLOSERS = (
    "感觉收获不少", "下次还想继续", "有点意外", "值得推荐", "慢慢来吧", "还需要多练习",
    "大家有什么建议吗", "心情不错", "记录一下进度", "比想象中有趣", "明天接着来",
    "先写到这里", "欢迎交流", "算是小有进展", "越来越上手了",
)


@dataclass(frozen=True)
class DriftConfig:
    seed: int = 0
    users: int = 50
    steps: tuple[int, int] = (6, 10)  # emitted batches per user, inclusive
    interests: tuple[int, int] = (3, 5)  # initial size range; lower bound is the floor
    keep_prob: float = 0.7
    half_life: float = 4.0  # steps; math.inf disables ageing
    novelty_rate: float = 1.0  # expected arrivals per step
    clusters: tuple[int, int] = (40, 25)  # (cluster count, tags per cluster)
    posts_per_interest: tuple[int, int] = (1, 2)
    home_clusters: int = 3
    platform: str = "xiaohongshu"
    crowd_posts: int = 4000
    crowd_days: int = 40
    start: date = date(2025, 3, 1)

    def __post_init__(self) -> None:
        if not 0 <= self.keep_prob <= 1:
            raise InvalidInputError("keep_prob must lie in [0, 1]")
        if self.half_life <= 0:
            raise InvalidInputError("half_life must be positive")
        if self.novelty_rate < 0:
            raise InvalidInputError("novelty_rate must be non-negative")
        for name in ("steps", "interests", "posts_per_interest"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise InvalidInputError(f"{name} must be a range of counts >= 1, got {(lo, hi)}")
        if min(self.clusters) < 1:
            raise InvalidInputError(f"cluster structure needs counts >= 1, got {self.clusters}")
        if self.users < 1 or self.home_clusters < 1:
            raise InvalidInputError("users and home_clusters must be >= 1")
        if self.crowd_posts < 0 or self.crowd_days < 1:
            raise InvalidInputError("crowd_posts must be >= 0 and crowd_days >= 1")
        cap = 3 * get_platform(self.platform).buffer_trigger
        if self.interests[1] > cap:
            raise InvalidInputError(f"at most {cap} interests fit in one batch")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "DriftConfig":
        kwargs = dict(data)
        for name in ("steps", "interests", "clusters", "posts_per_interest"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        if "start" in kwargs and isinstance(kwargs["start"], str):
            kwargs["start"] = date.fromisoformat(kwargs["start"])
        if "half_life" in kwargs:
            kwargs["half_life"] = float(kwargs["half_life"])
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown drift config keys: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class Corpus:
    users: list[UserMeta]
    posts: list[Post]
    vocabulary: list[list[str]]  # cluster -> tags


def make_vocabulary(n_clusters: int, per_cluster: int, seed: int) -> list[list[str]]:
    """Tags are a two-character cluster stem plus a two-character suffix."""
    rng = random.Random(derive_seed(seed, "vocab"))

    def chars(n: int) -> str:
        return "".join(chr(rng.randint(_CJK_LO, _CJK_HI)) for _ in range(n))

    stems: list[str] = []
    while len(stems) < n_clusters:
        s = chars(2)
        if s not in stems:
            stems.append(s)
    used: set[str] = set()
    vocab = []
    for stem in stems:
        tags = []
        while len(tags) < per_cluster:
            t = stem + chars(2)
            if t not in used:
                used.add(t)
                tags.append(t)
        vocab.append(tags)
    return vocab


def _post_text(rng: random.Random, tag: str, day_no: int) -> str:
    return (
        f"{rng.choice(_OPENERS)}{rng.choice(_MIDDLES)} #{tag} "
        f"{rng.choice(_CLOSERS)}，第{day_no}天{rng.choice(_OPENERS)}{rng.choice(_CLOSERS)}"
    )


def _day_posts(
    rng: random.Random, user_id: str, day: date, tags: Sequence[str], day_no: int, counter: list[int]
) -> list[Post]:
    clock = datetime.combine(day, time(8, 0), tzinfo=timezone.utc)
    out = []
    for tag in tags:
        counter[0] += 1
        out.append(Post(
            post_id=f"{user_id}-p{counter[0]:05d}",
            user_id=user_id,
            timestamp=clock,
            content=_post_text(rng, tag, day_no),
        ))
        clock += timedelta(minutes=rng.randint(15, 40))
    return out


def _emission(rng: random.Random, active: list[str], cfg: DriftConfig, theta: int) -> list[str]:
    """Tag of every post for one day: each interest at least once, total in [theta, 3*theta]."""
    lo, hi = cfg.posts_per_interest
    counts = {t: rng.randint(lo, hi) for t in active}
    total = sum(counts.values())
    while total > 3 * theta:
        t = max(sorted(counts), key=lambda x: counts[x])
        counts[t] -= 1
        total -= 1
    while total < theta:
        counts[rng.choice(active)] += 1
        total += 1
    tags = [t for t in active for _ in range(counts[t])]
    rng.shuffle(tags)
    return tags


def _fresh_tag(rng: random.Random, vocab: list[list[str]], home: list[int], used: set[str]) -> Optional[str]:
    cands = [t for c in home for t in vocab[c] if t not in used]
    if not cands:
        cands = [t for tags in vocab for t in tags if t not in used]
    return rng.choice(cands) if cands else None


def generate_stream(cfg: DriftConfig) -> Corpus:
    profile = get_platform(cfg.platform)
    theta = profile.buffer_trigger
    n_clusters, per_cluster = cfg.clusters
    vocab = make_vocabulary(n_clusters, per_cluster, cfg.seed)
    users: list[UserMeta] = []
    posts: list[Post] = []
    width = max(4, len(str(cfg.users)))
    for u in range(cfg.users):
        user_id = f"u{u:0{width}d}"
        rng = random.Random(derive_seed(cfg.seed, "user", u))
        np_rng = np.random.default_rng(derive_seed(cfg.seed, "poisson", u))
        users.append(UserMeta(user_id=user_id, username=f"user{u:0{width}d}", bio="synthetic account"))
        home = rng.sample(range(n_clusters), min(cfg.home_clusters, n_clusters))
        used: set[str] = set()
        active: dict[str, int] = {}  # tag -> age in steps

        def add_fresh() -> bool:
            tag = _fresh_tag(rng, vocab, home, used)
            if tag is None:
                return False
            used.add(tag)
            active[tag] = 0
            return True

        for _ in range(rng.randint(*cfg.interests)):
            add_fresh()
        if not active:
            raise InvalidInputError("configuration yields users with no interests")
        offset = rng.randint(0, max(0, cfg.crowd_days - cfg.steps[1]) // 2)
        counter = [0]
        for step in range(rng.randint(*cfg.steps)):
            day = cfg.start + timedelta(days=offset + step)
            posts.extend(_day_posts(
                rng, user_id, day, _emission(rng, sorted(active), cfg, theta), step + 1, counter
            ))
            # transition to the next step
            survivors = {}
            for tag in sorted(active):
                age = active[tag]
                p = cfg.keep_prob * (0.5 ** (age / cfg.half_life) if math.isfinite(cfg.half_life) else 1.0)
                if rng.random() < p:
                    survivors[tag] = age + 1
            active = survivors
            arrivals = int(np_rng.poisson(cfg.novelty_rate)) if cfg.novelty_rate > 0 else 0
            for _ in range(min(arrivals, cfg.interests[1] - len(active))):
                add_fresh()
            while len(active) < cfg.interests[0]:
                if not add_fresh():
                    break
            if not active:
                raise InvalidInputError("vocabulary exhausted; enlarge the cluster structure")
    posts.extend(_crowd(cfg, vocab))
    return Corpus(users=users, posts=posts, vocabulary=vocab)


def _crowd(cfg: DriftConfig, vocab: list[list[str]]) -> list[Post]:
    rng = random.Random(derive_seed(cfg.seed, "crowd"))
    tags = [t for cluster in vocab for t in cluster]
    rng.shuffle(tags)
    weights = [1.0 / (rank + 1) ** 1.1 for rank in range(len(tags))]
    out = []
    picks = rng.choices(tags, weights=weights, k=cfg.crowd_posts)
    for i, tag in enumerate(picks):
        day = cfg.start + timedelta(days=rng.randrange(cfg.crowd_days))
        ts = datetime.combine(day, time(0, 0), tzinfo=timezone.utc) + timedelta(seconds=rng.randrange(86400))
        user_id = f"crowd{i:06d}"
        out.append(Post(post_id=f"{user_id}-p1", user_id=user_id, timestamp=ts,
                        content=_post_text(rng, tag, 1)))
    return out


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


class OracleKind(str, enum.Enum):
    PERFECT = "perfect"
    COPY_HISTORY = "copy_history"
    RANDOM = "random"
    POPULARITY = "popularity"


def oracle_predict(
    kind: OracleKind | str,
    view: Mapping,
    history: Mapping[str, int],
    answer_key: Optional[Sequence[str]] = None,
    *,
    coverage: Optional[Mapping[str, object]] = None,
    seed: int = 0,
) -> list[str]:
    """Tags an oracle picks for one agent view (``pool`` and ``k``)."""
    kind = OracleKind(kind)
    pool = [normalize_tag(t) for t in view["pool"]]
    k = int(view["k"])
    if kind is OracleKind.PERFECT:
        if answer_key is None:
            raise InvalidInputError("the perfect oracle needs the answer key")
        return [normalize_tag(t) for t in answer_key]
    if kind is OracleKind.COPY_HISTORY:
        return sorted(pool, key=lambda t: (-history.get(t, 0), t))[:k]
    if kind is OracleKind.RANDOM:
        rng = random.Random(derive_seed(seed, view["user_id"], view["step_index"]))
        return rng.sample(pool, k)
    cov = coverage or {}
    return sorted(pool, key=lambda t: (-cov.get(t, 0), t))[:k]


class OracleAgent:
    """Agent wrapper returning oracle picks as a JSON answer."""

    def __init__(
        self,
        kind: OracleKind | str,
        *,
        answer_key: Optional[Mapping[tuple[str, int], Sequence[str]]] = None,
        coverage: Optional[Mapping[str, object]] = None,
        seed: int = 0,
    ) -> None:
        self.kind = OracleKind(kind)
        if self.kind is OracleKind.PERFECT and answer_key is None:
            raise InvalidInputError("the perfect oracle needs the answer key")
        self.answer_key = answer_key or {}
        self.coverage = coverage or {}
        self.seed = seed

    def respond(self, request: AgentRequest) -> str:
        view = request.view
        key = self.answer_key.get((view["user_id"], view["step_index"]))
        tags = oracle_predict(
            self.kind, view, request.history, key, coverage=self.coverage, seed=self.seed
        )
        return json.dumps(
            {
                "persona_summary": f"{self.kind.value} oracle after step {view['step_index']}",
                "predicted_tags": tags,
                "reasoning": "",
            },
            ensure_ascii=False,
        )
