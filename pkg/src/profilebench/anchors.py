"""Interest-anchor extraction, anchor cleaning and user-level filtering.

Daily coarse filtering runs per user-day and returns the surviving posts;
longitudinal filtering works on per-user activity summaries accumulated over
the whole observation window.
"""

from __future__ import annotations

import gzip
import logging
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

from .core import Anchor, AnchorRule, PlatformProfile, Post, normalize_tag, round_half_up
from .llm import ChatModel, parse_json_object

logger = logging.getLogger(__name__)

Tokenizer = Callable[[str], list[str]]

_DOUBLE_HASH = re.compile(r"#([^#\n]+?)#")
_SINGLE_HASH = re.compile(r"#([^#\s,.!?;:，。！？、；：\[\]【】()（）\"'“”]+)")
_CJK = re.compile(r"[㐀-鿿豈-﫿]")
_TOKEN_SPLIT = re.compile(r"[\s\W_]+", re.UNICODE)

DOUBAN_ACTIONS = {
    "watched": "看过",
    "want_to_watch": "想看",
    "watching": "在看",
    "read": "读过",
    "want_to_read": "想读",
    "reading": "在读",
    "listened": "听过",
    "want_to_listen": "想听",
}


def default_tokenizer(text: str) -> list[str]:
    """Character bigrams inside CJK runs, whole words elsewhere."""
    tokens: list[str] = []
    for chunk in _TOKEN_SPLIT.split(text):
        if not chunk:
            continue
        if _CJK.search(chunk):
            if len(chunk) == 1:
                continue
            tokens.extend(chunk[i:i + 2] for i in range(len(chunk) - 1))
        elif len(chunk) >= 2 and not chunk.isdigit():
            tokens.append(chunk)
    return tokens


class TfidfKeywords:
    """Smoothed TF-IDF over a small document collection (one user's window)."""

    def __init__(self, documents: Iterable[str], tokenizer: Tokenizer = default_tokenizer):
        self.tokenizer = tokenizer
        df: Counter = Counter()
        n = 0
        for doc in documents:
            df.update(set(tokenizer(doc)))
            n += 1
        self.n_docs = n
        self.df = df

    def idf(self, token: str) -> float:
        return math.log((1 + self.n_docs) / (1 + self.df.get(token, 0))) + 1.0

    def top(self, document: str, n: int = 5) -> list[str]:
        tf = Counter(self.tokenizer(document))
        scored = sorted(tf, key=lambda t: (-tf[t] * self.idf(t), t))
        return scored[:n]


def extract_anchors(
    post: Post, profile: PlatformProfile, keywords: Optional[TfidfKeywords] = None
) -> list[Anchor]:
    """Raw anchors for one post under the platform's extraction rule.

    Duplicates within the post collapse to the first occurrence. Quoted
    content is not scanned; anchors must be authored by the user.
    """
    rule = profile.anchor_rule
    text = post.text
    if rule is AnchorRule.DOUBLE_HASH:
        raw = _DOUBLE_HASH.findall(text)
    elif rule is AnchorRule.SINGLE_HASH:
        raw = _SINGLE_HASH.findall(text)
    elif rule is AnchorRule.QUESTION_TITLE_TFIDF:
        raw = [post.title] if post.title.strip() else []
        if post.content.strip():
            kw = keywords or TfidfKeywords([post.content])
            raw.extend(kw.top(post.content, 5))
    elif rule is AnchorRule.ITEM_ACTION:
        raw = []
        if post.item.strip():
            verb = DOUBAN_ACTIONS.get(post.action.strip(), post.action.strip())
            raw.append(f"{verb}·{post.item.strip()}" if verb else post.item.strip())
    else:  # pragma: no cover - enum is closed
        raise ValueError(rule)
    out: list[Anchor] = []
    seen: set[str] = set()
    for r in raw:
        tag = normalize_tag(r)
        if tag and tag not in seen:
            seen.add(tag)
            out.append(Anchor(tag, post.post_id))
    return out


@dataclass(frozen=True)
class Rejection:
    reason: str
    raw: str


def clean_anchor(
    raw: str,
    blacklist: frozenset[str] | set[str],
    profile: PlatformProfile,
    source_post: str = "",
) -> Anchor | Rejection:
    text = raw
    for pattern in profile.artifact_patterns:
        text = re.sub(pattern, "", text)
    text = normalize_tag(text)
    if not text:
        return Rejection("empty", raw)
    compact = text.replace(" ", "")
    if compact.isdigit():
        return Rejection("pure_numeric", raw)
    if not any(ch.isalnum() for ch in compact):
        return Rejection("pure_symbol", raw)
    lo, hi = profile.anchor_length
    if not lo <= len(text) <= hi:
        return Rejection("length", raw)
    if profile.use_blacklist and text in blacklist:
        return Rejection("blacklisted", raw)
    return Anchor(text, source_post)


def clean_anchors(
    post: Post,
    profile: PlatformProfile,
    blacklist: frozenset[str] | set[str] = frozenset(),
    keywords: Optional[TfidfKeywords] = None,
) -> tuple[str, ...]:
    """Extract then clean; returns the accepted anchor strings in order."""
    accepted = []
    for anchor in extract_anchors(post, profile, keywords):
        res = clean_anchor(anchor.text, blacklist, profile, post.post_id)
        if isinstance(res, Anchor) and res.text not in accepted:
            accepted.append(res.text)
    return tuple(accepted)


def annotate_posts(
    posts: Sequence[Post],
    profile: PlatformProfile,
    blacklist: frozenset[str] | set[str] = frozenset(),
    tokenizer: Tokenizer = default_tokenizer,
) -> list[Post]:
    """Fill ``Post.anchors`` for one user's window of posts.

    For the question-title rule the TF-IDF corpus is the user's own window.
    """
    keywords = None
    if profile.anchor_rule is AnchorRule.QUESTION_TITLE_TFIDF:
        keywords = TfidfKeywords([p.content for p in posts], tokenizer)
    return [replace(p, anchors=clean_anchors(p, profile, blacklist, keywords)) for p in posts]


# ---------------------------------------------------------------------------
# Coarse daily filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeywordRule:
    """Drop a user-day when at least ``max_fraction`` of posts hit a keyword."""

    name: str
    keywords: tuple[str, ...]
    max_fraction: float = 0.5


@dataclass(frozen=True)
class FilterRules:
    min_daily_posts: int = 1
    max_daily_posts: int = 500
    max_duplicate_rate: float = 0.5
    fuzzy_threshold: float = 0.9
    burst_posts: int = 5
    burst_seconds: float = 60.0
    min_compression_ratio: float = 0.2
    entropy_min_bytes: int = 200
    content_blacklist: tuple[str, ...] = ()
    account_rules: tuple[KeywordRule, ...] = ()


DEFAULT_RULES = FilterRules()


@dataclass(frozen=True)
class FilterVerdict:
    keep: bool
    reason: Optional[str] = None
    valid_posts: tuple[Post, ...] = ()


def _trigrams(text: str) -> frozenset[str]:
    if len(text) < 3:
        return frozenset({text})
    return frozenset(text[i:i + 3] for i in range(len(text) - 2))


def duplicate_rate(texts: Sequence[str], fuzzy_threshold: float = 0.9) -> float:
    """Fraction of texts that exactly or fuzzily (3-gram Jaccard) repeat an earlier one.

    Candidate pairs come from prefix filtering: with grams ordered by rarity,
    two sets with Jaccard >= t must share a gram among the first
    ``n - ceil(t * n) + 1`` of each. Candidates are then checked exactly, so
    the result matches an all-pairs comparison.
    """
    if not texts:
        return 0.0
    norms = [" ".join(t.split()) for t in texts]
    grams = [_trigrams(n) for n in norms]
    df = Counter(g for gs in grams for g in gs)
    seen_exact: set[str] = set()
    index: dict[str, list[int]] = {}
    dups = 0
    for i, (norm, g) in enumerate(zip(norms, grams)):
        is_dup = norm in seen_exact
        ordered = sorted(g, key=lambda x: (df[x], x))
        # tolerance keeps float error from shortening the prefix
        prefix = ordered[: len(ordered) - math.ceil(fuzzy_threshold * len(ordered) - 1e-9) + 1]
        if not is_dup:
            checked: set[int] = set()
            for gram in prefix:
                for j in index.get(gram, ()):
                    if j in checked:
                        continue
                    checked.add(j)
                    other = grams[j]
                    if len(g & other) / len(g | other) >= fuzzy_threshold:
                        is_dup = True
                        break
                if is_dup:
                    break
        dups += is_dup
        seen_exact.add(norm)
        for gram in prefix:
            index.setdefault(gram, []).append(i)
    return dups / len(texts)


def has_burst(posts: Sequence[Post], n_posts: int, seconds: float) -> bool:
    if n_posts <= 1:
        return bool(posts)
    stamps = sorted(p.timestamp for p in posts)
    for i in range(len(stamps) - n_posts + 1):
        if (stamps[i + n_posts - 1] - stamps[i]).total_seconds() <= seconds:
            return True
    return False


def compression_ratio(text: str) -> float:
    raw = text.encode("utf-8")
    if not raw:
        return 1.0
    return len(gzip.compress(raw, mtime=0)) / len(raw)


def _validity_text(post: Post) -> str:
    return post.text or post.item


def is_low_entropy(text: str, rules: FilterRules = DEFAULT_RULES) -> bool:
    if len(text.encode("utf-8")) < rules.entropy_min_bytes:
        return False
    return compression_ratio(text) < rules.min_compression_ratio


def is_valid_post(
    post: Post, profile: PlatformProfile, rules: FilterRules = DEFAULT_RULES
) -> bool:
    """Content-level validity shared by the daily filter and the buffer."""
    text = _validity_text(post)
    if len(text.strip()) < max(1, profile.min_post_length):
        return False
    if any(kw in text for kw in rules.content_blacklist):
        return False
    return not is_low_entropy(text, rules)


def coarse_filter_user(
    day_records: Sequence[Post],
    profile: PlatformProfile,
    rules: FilterRules = DEFAULT_RULES,
) -> FilterVerdict:
    """Screen one user-day. Checks run in a fixed order and the first failure
    decides the drop reason. Posts must already carry cleaned anchors."""
    posts = list(day_records)
    n = len(posts)
    if not rules.min_daily_posts <= n <= rules.max_daily_posts:
        return FilterVerdict(False, "post_count")
    if duplicate_rate([p.text for p in posts], rules.fuzzy_threshold) > rules.max_duplicate_rate:
        return FilterVerdict(False, "duplication")
    if has_burst(posts, rules.burst_posts, rules.burst_seconds):
        return FilterVerdict(False, "burst")
    for rule in rules.account_rules:
        hits = sum(any(kw in p.text for kw in rule.keywords) for p in posts)
        if hits / n >= rule.max_fraction:
            return FilterVerdict(False, rule.name)

    valid = [p for p in posts if len(_validity_text(p).strip()) >= max(1, profile.min_post_length)]
    if not valid:
        return FilterVerdict(False, "min_length")
    valid = [p for p in valid if not is_low_entropy(_validity_text(p), rules)]
    if not valid:
        return FilterVerdict(False, "low_entropy")
    valid = [p for p in valid if not any(kw in _validity_text(p) for kw in rules.content_blacklist)]
    if not valid:
        return FilterVerdict(False, "content_blacklist")

    density = sum(len(p.anchors) for p in valid) / len(valid)
    lo, hi = profile.density_interval
    if not lo <= density <= hi:
        return FilterVerdict(False, "density")
    return FilterVerdict(True, None, tuple(valid))


# ---------------------------------------------------------------------------
# Longitudinal filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UserActivitySummary:
    user_id: str
    active_days: int
    valid_post_count: int
    duplicate_rate: float
    tag_density: float


def summarize_user(
    user_id: str,
    posts: Sequence[Post],
    profile: PlatformProfile,
    rules: FilterRules = DEFAULT_RULES,
) -> UserActivitySummary:
    valid = [p for p in posts if is_valid_post(p, profile, rules)]
    days = {p.timestamp.date() for p in valid}
    density = sum(len(p.anchors) for p in valid) / len(valid) if valid else 0.0
    return UserActivitySummary(
        user_id=user_id,
        active_days=len(days),
        valid_post_count=len(valid),
        duplicate_rate=duplicate_rate([p.text for p in posts], rules.fuzzy_threshold),
        tag_density=density,
    )


@dataclass(frozen=True)
class Stratum:
    lo: int
    hi: Optional[int]  # inclusive; None = open-ended
    ratio: float

    def contains(self, days: int) -> bool:
        return days >= self.lo and (self.hi is None or days <= self.hi)


@dataclass(frozen=True)
class StrataConfig:
    min_active_days: int = 3
    strata: tuple[Stratum, ...] = (Stratum(3, None, 1.0),)


STRATA_PRESETS: dict[str, StrataConfig] = {
    # short-form feeds
    "weibo": StrataConfig(3, (Stratum(3, 5, 0.5), Stratum(6, None, 0.175))),
    "toutiao": StrataConfig(3, (Stratum(3, 5, 0.5), Stratum(6, None, 0.175))),
    # image-text communities
    "xiaohongshu": StrataConfig(3, (Stratum(3, 6, 0.4), Stratum(7, None, 0.1))),
    "douban": StrataConfig(3, (Stratum(3, 6, 0.4), Stratum(7, None, 0.1))),
    # long-form
    "zhihu": StrataConfig(2, (Stratum(2, 4, 0.5), Stratum(5, None, 0.15))),
    "all": StrataConfig(3, (Stratum(3, None, 1.0),)),
}


def longitudinal_filter(
    summaries: Iterable[UserActivitySummary], strata: StrataConfig, seed: int = 0
) -> list[str]:
    """Active-day floor, then seeded stratified sampling; returns sorted user ids.

    Users with at least ``min_active_days`` that fall in no stratum are
    dropped. Each stratum keeps ``round(ratio * n)`` users.
    """
    eligible = [s for s in summaries if s.active_days >= strata.min_active_days]
    selected: list[str] = []
    claimed: set[str] = set()
    for stratum in strata.strata:
        members = sorted(
            s.user_id for s in eligible if stratum.contains(s.active_days) and s.user_id not in claimed
        )
        claimed.update(members)
        if not members:
            continue
        rng = random.Random(f"{seed}:{stratum.lo}:{stratum.hi}")
        rng.shuffle(members)
        take = round_half_up(stratum.ratio * len(members)) if stratum.ratio < 1 else len(members)
        selected.extend(members[:take])
    skipped = [s.user_id for s in eligible if s.user_id not in claimed]
    if skipped:
        logger.info("%d eligible user(s) fall outside every stratum", len(skipped))
    return sorted(selected)


# ---------------------------------------------------------------------------
# Personality audit
# ---------------------------------------------------------------------------

FIRST_PERSON = ("我", "俺", "咱", "本人", " I ", " me ", " my ")
SUBJECTIVE_MARKERS = ("觉得", "感觉", "喜欢", "讨厌", "希望", "开心", "难过", "想", "爱", "烦")


def subjectivity_score(posts: Sequence[Post]) -> float:
    """Share of posts with a first-person pronoun or a subjective marker."""
    if not posts:
        return 0.0
    hits = sum(
        any(m in f" {p.text} " for m in FIRST_PERSON + SUBJECTIVE_MARKERS) for p in posts
    )
    return hits / len(posts)


AUDIT_CLASSES = ("High_Quality_User", "Low_Value_Human", "Non_Human_Noise")

AUDIT_PROMPT = """# Role
You are a "Digital Persona Evaluation Expert." Your task is to screen social-media users along three dimensions: cognitive depth, expressive subjectivity, and information entropy.

# Classification Categories
CLASS A: High_Quality_User (keep) --- A well-defined individual with a sharp persona profile, idiosyncratic expression, and cognitive coherence.
CLASS B: Low_Value_Human (reject) --- A genuine human, but with sparse analytical value (low-SNR).
- Features: Semantic poverty (pure emojis, fragmented interjections), high homogeneity, or passive interaction (pure reposts).
CLASS C: Non_Human_Noise (reject) --- Accounts driven by explicit tooling intent (marketing, bots, SEO).
- Features: Rigid template structures, commercial markers (price lists, DM for coupons).

# Profilability Score (1--5 Likert scale)
- 5 Exceptional: Sharp persona; rich narrative; distinctive perspective.
- 4 Good: Clear traits and concrete experiences, but slightly lacking in depth.
- 3 Adequate: Persona silhouette is visible but not vivid.
- 2 Marginal: Mostly templated/fragmented; occasional traces of a real person.
- 1 Poor: No personal signal; purely tool-like output.

# Output Format (Return strict JSON; reasoning in Chinese)
{
  "user_id": "string",
  "class": "High_Quality_User" | "Low_Value_Human" | "Non_Human_Noise",
  "is_gold": boolean,
  "profilability_score": 1-5,
  "reasoning": "string (2-3 sentences in Chinese)"
}"""

AUDIT_SYSTEM = "Output valid JSON only."


@dataclass(frozen=True)
class AuditVerdict:
    user_class: str
    is_gold: bool
    profilability_score: int
    reasoning: str = ""

    def __post_init__(self) -> None:
        if self.user_class not in AUDIT_CLASSES:
            raise ValueError(f"unknown class {self.user_class!r}")
        if not 1 <= self.profilability_score <= 5:
            raise ValueError(f"profilability_score {self.profilability_score} outside 1-5")
        if self.is_gold and self.user_class != "High_Quality_User":
            raise ValueError("is_gold requires class High_Quality_User")

    @property
    def keep(self) -> bool:
        return self.user_class == "High_Quality_User"


def render_audit_prompt(user_id: str, posts: Sequence[Post]) -> str:
    lines = [f"[{i}] {' '.join(p.text.split())}" for i, p in enumerate(posts, start=1)]
    return f"{AUDIT_PROMPT}\n\n# User\nuser_id: {user_id}\n\n# Full Stream\n" + "\n".join(lines)


def parse_audit(raw: str) -> AuditVerdict:
    obj = parse_json_object(raw)
    score = obj.get("profilability_score")
    if isinstance(score, bool) or not isinstance(score, int):
        raise ValueError("profilability_score must be an integer")
    is_gold = obj.get("is_gold")
    if not isinstance(is_gold, bool):
        raise ValueError("is_gold must be a boolean")
    return AuditVerdict(
        user_class=str(obj.get("class", "")),
        is_gold=is_gold,
        profilability_score=score,
        reasoning=str(obj.get("reasoning", "")),
    )


def audit_user(
    user_id: str, posts: Sequence[Post], judge: ChatModel, retries: int = 1
) -> Optional[AuditVerdict]:
    """Judge a full stream; ``None`` means unaudited (excluded by default)."""
    prompt = render_audit_prompt(user_id, posts)
    for attempt in range(retries + 1):
        raw = judge.complete(AUDIT_SYSTEM, prompt)
        try:
            return parse_audit(raw)
        except ValueError as exc:
            logger.warning("audit of %s unparseable (attempt %d): %s", user_id, attempt + 1, exc)
    return None
