"""Personal-information protection: identifier hashing, span detection,
deterministic placeholder replacement and the release safety net.

The built-in patterns only cover the three categories that regexes handle
cleanly (PHONE, EMAIL, ID). Everything else comes from a pluggable span
detector. The ID grammar below is an approximation of the mainland 15/18
digit resident-ID layout, not a validator.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Protocol

from .core import InvalidInputError, Post, UserMeta
from .llm import ChatModel, parse_json_object
from .records import post_to_record, user_to_record

logger = logging.getLogger(__name__)

SALT_ENV = "PROFILEBENCH_SALT"


class PiCategory(str, enum.Enum):
    PHONE = "PHONE"
    ID = "ID"
    BANK = "BANK"
    EMAIL = "EMAIL"
    CONTACT = "CONTACT"
    PLATE = "PLATE"
    IP = "IP"
    GEO = "GEO"
    DEVICE = "DEVICE"
    SELF_NAME = "SELF_NAME"

    @property
    def placeholder(self) -> str:
        return "<SELF>" if self is PiCategory.SELF_NAME else f"<{self.value}>"


@dataclass(frozen=True)
class PiSpan:
    text: str
    category: PiCategory

    def __post_init__(self) -> None:
        if not self.text:
            raise InvalidInputError("PI span text must be non-empty")
        object.__setattr__(self, "category", PiCategory(self.category))


@dataclass(frozen=True)
class HashConfig:
    salt: bytes = field(repr=False)
    platform_code: str

    def __post_init__(self) -> None:
        if not self.salt:
            raise InvalidInputError("hash salt must be non-empty")

    @classmethod
    def from_env(cls, platform_code: str, env: str = SALT_ENV) -> "HashConfig":
        salt = os.environ.get(env, "")
        if not salt:
            raise InvalidInputError(f"environment variable {env} is not set")
        return cls(salt.encode("utf-8"), platform_code)


def hash_identifier(value: str, kind: str, cfg: HashConfig) -> str:
    """Salted SHA-256 pseudonym: ``<CODE>_<10 hex>`` for user ids,
    ``U_<8 hex>`` for usernames, ``P_<12 hex>`` for post ids."""
    if not value:
        raise InvalidInputError("cannot hash an empty identifier")
    digest = hashlib.sha256(cfg.salt + value.encode("utf-8")).hexdigest()
    if kind == "user_id":
        return f"{cfg.platform_code}_{digest[:10]}"
    if kind == "username":
        return f"U_{digest[:8]}"
    if kind == "post_id":
        # post ids often embed the author id, so they are pseudonymized too
        return f"P_{digest[:12]}"
    raise InvalidInputError(f"unknown identifier kind {kind!r}")


# ---------------------------------------------------------------------------
# Patterns
# ---------------------------------------------------------------------------

_DATE = r"(?:0[1-9]|1[0-2])(?:0[1-9]|[12]\d|3[01])"

BUILTIN_PATTERNS: dict[PiCategory, re.Pattern] = {
    PiCategory.PHONE: re.compile(r"(?<!\d)1[3-9]\d{9}(?!\d)"),
    PiCategory.EMAIL: re.compile(
        r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}"
    ),
    PiCategory.ID: re.compile(
        rf"(?<![0-9A-Za-z])(?:[1-9]\d{{5}}(?:18|19|20)\d{{2}}{_DATE}\d{{3}}[0-9Xx]"
        rf"|[1-9]\d{{7}}{_DATE}\d{{3}})(?![0-9A-Za-z])"
    ),
}

# Approximate grammars for the rule-based offline detector.
_RULE_PATTERNS: list[tuple[PiCategory, re.Pattern]] = [
    (PiCategory.BANK, re.compile(r"(?:卡号|银行卡|账号|转账|card)[:：\s]*(\d{16,19})(?!\d)")),
    (PiCategory.CONTACT, re.compile(
        r"(?:微信|V信|VX|vx|Vx|wx|WX|QQ|qq)[号]?[:：\s]*([A-Za-z][-_A-Za-z0-9]{5,19}|\d{5,11})"
    )),
    (PiCategory.PLATE, re.compile(
        r"[京津沪渝冀豫云辽黑湘皖鲁新苏浙赣鄂桂甘晋蒙陕吉闽贵粤青藏川宁琼][A-Z]·?[A-HJ-NP-Z0-9]{5,6}"
    )),
    (PiCategory.IP, re.compile(
        r"(?<![\d.])(?:(?:25[0-5]|2[0-4]\d|1?\d?\d)\.){3}(?:25[0-5]|2[0-4]\d|1?\d?\d)(?![\d.])"
    )),
    (PiCategory.GEO, re.compile(r"-?\d{1,3}\.\d{4,}\s*[,，]\s*-?\d{1,3}\.\d{4,}")),
    (PiCategory.DEVICE, re.compile(
        r"(?i)(?<![0-9a-f:])(?:[0-9a-f]{2}[:-]){5}[0-9a-f]{2}(?![0-9a-f:])"
    )),
    (PiCategory.DEVICE, re.compile(r"IMEI[:：\s]*(\d{15})(?!\d)")),
    (PiCategory.SELF_NAME, re.compile(r"(?:我叫|本人姓名[:：]?|my name is )([一-鿿]{2,3})")),
]

IDENTIFIER_KEYS = frozenset({"user_id", "post_id", "timestamp"})


def pattern_spans(text: str) -> list[PiSpan]:
    spans = []
    for category, pattern in BUILTIN_PATTERNS.items():
        spans.extend(PiSpan(m.group(0), category) for m in pattern.finditer(text))
    return spans


def mask_patterns(text: str) -> str:
    """Replace built-in pattern matches with placeholders."""
    for category, pattern in BUILTIN_PATTERNS.items():
        text = pattern.sub(category.placeholder, text)
    return text


# ---------------------------------------------------------------------------
# Detectors
# ---------------------------------------------------------------------------


class SpanDetector(Protocol):
    def detect(self, text: str, username: str = "") -> list[tuple[str, str]]: ...


class RuleSpanDetector:
    """Offline regex detector covering all ten categories approximately."""

    def detect(self, text: str, username: str = "") -> list[tuple[str, str]]:
        found = [(s.text, s.category.value) for s in pattern_spans(text)]
        for category, pattern in _RULE_PATTERNS:
            for m in pattern.finditer(text):
                span = m.group(1) if pattern.groups else m.group(0)
                found.append((span, category.value))
        if username and len(username) >= 2 and username in text:
            found.append((username, PiCategory.SELF_NAME.value))
        return found


SPAN_DETECTOR_SYSTEM = "You locate personal information in text. Output valid JSON only."

SPAN_DETECTOR_PROMPT = """Find every span of personal information in the TEXT below.
Do not rewrite or summarise anything: report exact substrings only.

Categories:
- PHONE: mobile or landline numbers
- ID: identity card, passport, travel permit, driver's license numbers
- BANK: bank or credit card numbers, only when the text is about banking, payment or transfers
- EMAIL: email addresses
- CONTACT: personal WeChat / QQ / VX handles, only when introduced by a contact cue
  such as "加我", "微信", "VX", "QQ"; official or media account handles are not personal
- PLATE: vehicle license plates
- IP: IPv4 or IPv6 addresses
- GEO: precise GPS coordinates or latitude/longitude pairs
- DEVICE: MAC addresses, IMEI numbers and similar device identifiers
- SELF_NAME: the author's own real name or self-reference to it (the author's handle is given
  as USERNAME for reference only)

Keep public-figure names, brands, topical hashtags, cities, schools and employers.

USERNAME: {username}

TEXT:
{text}

Return {{"spans": [{{"text": "<exact substring>", "category": "<CATEGORY>"}}, ...]}}
and {{"spans": []}} when nothing is found."""


class ChatSpanDetector:
    """Span detector backed by a chat model; the model never rewrites text."""

    def __init__(self, model: ChatModel) -> None:
        self.model = model

    def detect(self, text: str, username: str = "") -> list[tuple[str, str]]:
        prompt = SPAN_DETECTOR_PROMPT.format(username=username or "(none)", text=text)
        obj = parse_json_object(self.model.complete(SPAN_DETECTOR_SYSTEM, prompt))
        spans = obj.get("spans", [])
        if not isinstance(spans, list):
            raise ValueError("'spans' must be a list")
        out = []
        for item in spans:
            if isinstance(item, dict):
                out.append((str(item.get("text", "")), str(item.get("category", ""))))
            elif isinstance(item, (list, tuple)) and len(item) == 2:
                out.append((str(item[0]), str(item[1])))
        return out


class SpanList(list):
    """List of :class:`PiSpan`; ``degraded`` is set when the detector failed."""

    degraded: bool = False


def detect_pi_spans(
    text: str, detector: Optional[SpanDetector] = None, username: str = ""
) -> SpanList:
    """Union of built-in pattern spans and detector spans, deduplicated by text.

    Detector output that is not an exact substring of ``text`` or names an
    unknown category is dropped. A detector exception degrades to
    pattern-only detection and sets ``degraded`` on the result.
    """
    spans = SpanList()
    seen: set[str] = set()

    def add(span: PiSpan) -> None:
        if span.text not in seen:
            seen.add(span.text)
            spans.append(span)

    for span in pattern_spans(text):
        add(span)
    if detector is None:
        return spans
    try:
        raw = detector.detect(text, mask_patterns(username))
    except Exception as exc:  # noqa: BLE001 - any detector fault degrades
        logger.warning("span detector failed (%s); using patterns only", exc)
        spans.degraded = True
        return spans
    for span_text, category in raw:
        if not span_text or span_text not in text:
            continue
        try:
            add(PiSpan(span_text, PiCategory(category)))
        except ValueError:
            logger.debug("detector returned unknown category %r", category)
    return spans


# ---------------------------------------------------------------------------
# Replacement and safety net
# ---------------------------------------------------------------------------


def _order(spans: Iterable[PiSpan]) -> list[PiSpan]:
    uniq = {s.text: s for s in sorted(spans, key=lambda s: (-len(s.text), s.text, s.category.value))}
    return sorted(uniq.values(), key=lambda s: (-len(s.text), s.text))


_PLACEHOLDER = re.compile("(" + "|".join(re.escape(c.placeholder) for c in PiCategory) + ")")


def _apply(text: str, ordered: list[PiSpan], hits: set[str]) -> str:
    for span in ordered:
        if span.text not in text:
            continue
        # odd indices are placeholders from earlier spans; never rewrite them
        parts = _PLACEHOLDER.split(text)
        for i in range(0, len(parts), 2):
            if span.text in parts[i]:
                hits.add(span.text)
                parts[i] = parts[i].replace(span.text, span.category.placeholder)
        text = "".join(parts)
    return text


def _walk(value: Any, fn, key: Optional[str] = None) -> Any:
    if isinstance(value, str):
        return value if key in IDENTIFIER_KEYS else fn(value)
    if isinstance(value, dict):
        return {
            (k if k in IDENTIFIER_KEYS else fn(k)): _walk(v, fn, k) for k, v in value.items()
        }
    if isinstance(value, (list, tuple)):
        return type(value)(_walk(v, fn, key) for v in value)
    return value


def redact_record(record: Any, spans: Iterable[PiSpan], *, warn_missing: bool = True) -> Any:
    """Replace every span with its category placeholder in all text fields.

    Longer spans go first so a short span cannot split a longer one. Spans
    that are absent from the record are skipped with a warning. Identifier
    fields (``user_id``, ``post_id``, ``timestamp``) are left alone.
    """
    ordered = _order(spans)
    if not ordered:
        return record
    hits: set[str] = set()
    out = _walk(record, lambda s: _apply(s, ordered, hits))
    for span in ordered:
        if warn_missing and span.text not in hits:
            logger.warning("PI span %r (%s) not found in record", span.text, span.category.value)
    return out


@dataclass(frozen=True)
class Violation:
    path: str
    category: PiCategory
    text: str


def safety_net_scan(record: Any) -> list[Violation]:
    """Re-run the built-in patterns over every text field; empty list == pass."""
    violations: list[Violation] = []

    def scan(value: Any, path: str, key: Optional[str]) -> None:
        if isinstance(value, str):
            if key in IDENTIFIER_KEYS:
                return
            for span in pattern_spans(value):
                violations.append(Violation(path, span.category, span.text))
        elif isinstance(value, dict):
            for k, v in value.items():
                if k not in IDENTIFIER_KEYS:
                    scan(k, f"{path}/<key>", None)
                scan(v, f"{path}/{k}", k)
        elif isinstance(value, (list, tuple)):
            for i, v in enumerate(value):
                scan(v, f"{path}[{i}]", key)

    scan(record, "", None)
    return violations


# ---------------------------------------------------------------------------
# Corpus pipeline
# ---------------------------------------------------------------------------


@dataclass
class AnonymizeResult:
    users: list[dict] = field(default_factory=list)
    posts: list[dict] = field(default_factory=list)
    rejected: list[dict] = field(default_factory=list)
    degraded_records: int = 0
    spans_by_category: dict[str, int] = field(default_factory=dict)


_POST_TEXT = ("title", "content", "quote_content", "media_text")


def anonymize_corpus(
    streams: Iterable[tuple[UserMeta, Iterable[Post]]],
    cfg: HashConfig,
    detector: Optional[SpanDetector] = None,
) -> AnonymizeResult:
    """Hash identifiers, detect and replace PI spans, and drop any record the
    safety net still flags. A rejected user record takes its posts with it."""
    result = AnonymizeResult()
    for meta, posts in streams:
        posts = list(posts)
        texts = [meta.bio] + [getattr(p, f) for p in posts for f in _POST_TEXT]
        spans: list[PiSpan] = []
        for text in texts:
            if not text:
                continue
            found = detect_pi_spans(text, detector, username=meta.username)
            result.degraded_records += int(found.degraded)
            spans.extend(found)
        for span in _order(spans):
            key = span.category.value
            result.spans_by_category[key] = result.spans_by_category.get(key, 0) + 1

        uid = hash_identifier(meta.user_id, "user_id", cfg)
        user_rec = user_to_record(meta)
        user_rec["user_id"] = uid
        if meta.username:
            user_rec["username"] = hash_identifier(meta.username, "username", cfg)
        user_rec = redact_record(user_rec, spans, warn_missing=False)
        bad = safety_net_scan(user_rec)
        if bad:
            result.rejected.append({"user_id": uid, "kind": "user", "violations": len(bad)})
            continue
        result.users.append(user_rec)
        for post in posts:
            rec = post_to_record(post)
            rec["user_id"] = uid
            rec["post_id"] = hash_identifier(post.post_id, "post_id", cfg)
            rec = redact_record(rec, spans, warn_missing=False)
            bad = safety_net_scan(rec)
            if bad:
                result.rejected.append(
                    {"user_id": uid, "post_id": rec["post_id"], "kind": "post", "violations": len(bad)}
                )
                continue
            result.posts.append(rec)
    return result
