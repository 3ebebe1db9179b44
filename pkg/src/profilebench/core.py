"""Shared domain types and the two small contracts everything else leans on:
tag identity (``tags_equal``) and the per-step selection budget
(``selection_budget``).

All types are frozen dataclasses holding tuples, so they can be handed
between pipeline stages without defensive copies.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction
from typing import Optional


class InvalidInputError(ValueError):
    """Raised when an operation receives input outside its contract."""


# ---------------------------------------------------------------------------
# Contracts
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=1 << 16)
def normalize_tag(tag: str) -> str:
    """Trim and collapse internal whitespace runs to a single space."""
    return " ".join(tag.split())


def tags_equal(a: str, b: str) -> bool:
    return normalize_tag(a) == normalize_tag(b)


def round_half_up(x: Fraction | int) -> int:
    """Round a non-negative rational half away from zero."""
    x = Fraction(x)
    if x < 0:
        return -round_half_up(-x)
    return math.floor(x + Fraction(1, 2))


def selection_budget(pool_size: int) -> int:
    """Number of tags an agent must select from a pool of ``pool_size``.

    ``max(1, round(0.25 * pool_size))`` with half-away-from-zero rounding,
    so a 10-tag pool asks for 3 and a 28-tag pool for 7.
    """
    if pool_size < 1:
        raise InvalidInputError(f"pool_size must be >= 1, got {pool_size}")
    return max(1, round_half_up(Fraction(pool_size, 4)))


# ---------------------------------------------------------------------------
# Platform configuration
# ---------------------------------------------------------------------------


class AnchorRule(str, enum.Enum):
    DOUBLE_HASH = "double_hash"
    SINGLE_HASH = "single_hash"
    QUESTION_TITLE_TFIDF = "question_title_tfidf"
    ITEM_ACTION = "item_action"


@dataclass(frozen=True)
class PlatformProfile:
    platform_id: str
    buffer_trigger: int
    anchor_rule: AnchorRule
    density_interval: tuple[float, float]
    min_tag_frequency: int
    code: str = ""
    buffer_cap: int = 0  # 0 -> 3 * buffer_trigger
    cluster_count: int = 1024
    min_post_length: int = 0
    use_blacklist: bool = False
    high_frequency: bool = True
    anchor_length: tuple[int, int] = (2, 30)
    artifact_patterns: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.buffer_cap == 0:
            object.__setattr__(self, "buffer_cap", 3 * self.buffer_trigger)
        if not self.code:
            object.__setattr__(self, "code", self.platform_id.upper())
        object.__setattr__(self, "anchor_rule", AnchorRule(self.anchor_rule))
        lo, hi = self.density_interval
        object.__setattr__(self, "density_interval", (float(lo), float(hi)))
        if self.buffer_trigger < 1:
            raise InvalidInputError("buffer_trigger must be >= 1")
        if self.buffer_cap < self.buffer_trigger:
            raise InvalidInputError("buffer_cap must be >= buffer_trigger")
        if not 0 <= lo <= hi:
            raise InvalidInputError(f"bad density interval {self.density_interval}")
        if self.min_tag_frequency < 1 or self.cluster_count < 1:
            raise InvalidInputError("min_tag_frequency and cluster_count must be >= 1")


PLATFORMS: dict[str, PlatformProfile] = {
    "weibo": PlatformProfile(
        "weibo", 5, AnchorRule.DOUBLE_HASH, (0.2, 1.0), 3, code="WB",
        use_blacklist=True,
    ),
    "xiaohongshu": PlatformProfile(
        "xiaohongshu", 5, AnchorRule.SINGLE_HASH, (1.0, 4.0), 3, code="XHS",
        artifact_patterns=(r"\[话题\]",),
    ),
    "toutiao": PlatformProfile(
        "toutiao", 3, AnchorRule.SINGLE_HASH, (0.2, 3.0), 3, code="TT",
        min_post_length=20, high_frequency=False,
    ),
    "zhihu": PlatformProfile(
        "zhihu", 3, AnchorRule.QUESTION_TITLE_TFIDF, (0.2, 2.0), 2, code="ZH",
        min_post_length=50, high_frequency=False,
    ),
    "douban": PlatformProfile(
        "douban", 5, AnchorRule.ITEM_ACTION, (0.2, 2.0), 2, code="DB",
        min_post_length=10,
    ),
}


def get_platform(name: str) -> PlatformProfile:
    try:
        return PLATFORMS[name.lower()]
    except KeyError:
        raise InvalidInputError(
            f"unknown platform {name!r}; expected one of {sorted(PLATFORMS)}"
        ) from None


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UserMeta:
    user_id: str
    username: str = ""
    bio: str = ""
    gender: Optional[str] = None
    location: Optional[str] = None
    followers_count: int = 0
    following_count: int = 0
    posts_count: int = 0
    verified_type: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.user_id:
            raise InvalidInputError("user_id must be non-empty")
        if min(self.followers_count, self.following_count, self.posts_count) < 0:
            raise InvalidInputError("counts must be non-negative")


@dataclass(frozen=True)
class Anchor:
    text: str
    source_post: str = ""


@dataclass(frozen=True)
class Post:
    post_id: str
    user_id: str
    timestamp: datetime
    title: str = ""
    content: str = ""
    quote_content: str = ""
    media_text: str = ""
    action: str = ""
    item: str = ""
    anchors: tuple[str, ...] = ()

    @property
    def text(self) -> str:
        """User-authored text (title and body) used by length/entropy rules."""
        return "\n".join(part for part in (self.title, self.content) if part)


@dataclass(frozen=True)
class StreamBatch:
    user_id: str
    step_index: int
    posts: tuple[Post, ...]
    anchors: tuple[str, ...]
    window: tuple[datetime, datetime]
    valid_count: int = 0


COLD_START_PERSONA = (
    "No prior observations yet; this is the user's first activity batch. "
    "Build the persona from scratch."
)


@dataclass(frozen=True)
class PersonaState:
    text: str = COLD_START_PERSONA
    step_index: int = 0


class Label(str, enum.Enum):
    KEEP = "keep"
    NEW = "new"
    DECAY = "decay"
    PEER = "peer"
    VIRAL = "viral"
    RANDOM = "random"

    @property
    def positive(self) -> bool:
        return self in (Label.KEEP, Label.NEW)


DISTRACTOR_LABELS = (Label.PEER, Label.VIRAL, Label.DECAY, Label.RANDOM)


@dataclass(frozen=True)
class CandidatePool:
    tags: tuple[tuple[str, Label], ...]

    def __post_init__(self) -> None:
        if not self.tags:
            raise InvalidInputError("candidate pool must be non-empty")
        seen = set()
        for tag, label in self.tags:
            key = normalize_tag(tag)
            if key in seen:
                raise InvalidInputError(f"duplicate tag in pool: {tag!r}")
            seen.add(key)
            if not isinstance(label, Label):
                raise InvalidInputError(f"bad label {label!r}")

    @property
    def k(self) -> int:
        return selection_budget(len(self.tags))

    def tag_list(self) -> list[str]:
        return [t for t, _ in self.tags]

    def with_label(self, *labels: Label) -> list[str]:
        return [t for t, lab in self.tags if lab in labels]

    def __len__(self) -> int:
        return len(self.tags)


@dataclass(frozen=True)
class Prediction:
    predicted_tags: tuple[str, ...] = ()
    persona_summary: str = ""
    reasoning: str = ""
    raw_response: str = ""
    failed: bool = False
    error: str = ""


@dataclass(frozen=True)
class StepScore:
    """Per-step metrics; ``None`` marks a metric whose target subset is empty.

    ``delta`` counts distractor hits plus out-of-pool picks. ``delta_gt`` is
    every selection slot not spent on a positive (``k - positive hits``).
    """

    recall: Fraction
    recall_stab: Optional[Fraction]
    recall_nov: Optional[Fraction]
    delta: int
    delta_gt: int
    err_decay: Optional[Fraction]
    err_peer: Optional[Fraction]
    err_viral: Optional[Fraction]
    err_random: Optional[Fraction]
    alpha: Fraction
    k: int
    out_of_pool: int = 0
    failed: bool = False

    @property
    def budget(self) -> Fraction:
        return 1 - Fraction(self.delta_gt, self.k)

    def metric(self, name: str) -> Optional[Fraction]:
        return getattr(self, METRIC_ATTRS[name]) if name in METRIC_ATTRS else getattr(self, name)


# Report names -> StepScore attributes.
METRIC_ATTRS = {
    "R": "recall",
    "R_stab": "recall_stab",
    "R_nov": "recall_nov",
    "E_decay": "err_decay",
    "E_peer": "err_peer",
    "E_viral": "err_viral",
    "E_random": "err_random",
    "alpha": "alpha",
    "B": "budget",
}


@dataclass(frozen=True)
class PlatformAggregate:
    metrics: dict[str, Optional[float]]
    f1_ns: Optional[float]
    budget: Optional[float]
    rho: Optional[float]
    n_users: int
    n_steps: int


@dataclass(frozen=True)
class AggregateReport:
    per_platform: dict[str, PlatformAggregate]
    overall: dict[str, Optional[float]]
    f1_ns: Optional[float]
    budget: Optional[float]
    rho: Optional[float]
    n_users: int = 0
    n_steps: int = 0
    extra: dict = field(default_factory=dict)
