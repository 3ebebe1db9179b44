"""Drive an agent through the read-update-write loop over each user's tasks.

An agent is anything with ``respond(AgentRequest) -> str``. Chat models and
the offline oracles share that interface, so every response goes through the
same answer extraction and transcript path.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Protocol, Sequence

from .buffer import stream_batches
from .core import (
    COLD_START_PERSONA,
    InvalidInputError,
    PersonaState,
    PlatformProfile,
    Post,
    Prediction,
    StreamBatch,
    UserMeta,
    normalize_tag,
)
from .llm import AuthError, ChatModel, RemoteError, RemoteUnavailableError, parse_json_object
from .metrics import ScoredStep, score_step
from .tasks import StepTask, agent_view_record

logger = logging.getLogger(__name__)

LONG_CONTEXT_MIN_STEPS = 4

# (high-frequency trigger, low-frequency trigger)
GRANULARITY_TRIGGERS = {"fine": (3, 1), "default": (5, 3), "coarse": (8, 5)}


# ---------------------------------------------------------------------------
# Prompt
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlatformContext:
    name: str
    description: str
    tag_meaning: str
    analysis_hint: str

    def __post_init__(self) -> None:
        if not all((self.name, self.description, self.tag_meaning, self.analysis_hint)):
            raise InvalidInputError("platform context fields must be non-empty")


PLATFORM_CONTEXTS: dict[str, PlatformContext] = {
    "weibo": PlatformContext(
        "Weibo",
        "A Chinese microblog platform; users engage with topics through posts, reposts and comments.",
        "A tag is a #hashtag# used when posting or reposting, reflecting the user's current focus "
        "(trends, celebrity fandom, daily-life topics).",
        "Distinguish long-term interests (e.g. a celebrity the user consistently follows) from "
        "transient trends (e.g. breaking news). Reposts often signal real interest more faithfully "
        "than original posts.",
    ),
    "xiaohongshu": PlatformContext(
        "Xiaohongshu",
        "A lifestyle-sharing platform; users publish image/video notes on beauty, fashion, food, "
        "travel, parenting, etc.",
        "A tag is a topic label attached to a note, reflecting the user's content-creation direction "
        "and lifestyle interests.",
        "Interests usually revolve around concrete lifestyle scenes. Keywords in note titles are "
        "often more informative about the topic than the body text.",
    ),
    "toutiao": PlatformContext(
        "Toutiao",
        "A news and short-video platform; users mainly browse and produce short videos or "
        "picture-text articles.",
        "A tag is a topic label placed in a creator's title, reflecting the user's content-creation niche.",
        "Most content is short video where the title carries the strongest signal. Watch for users "
        "who concentrate on a single niche (food, travel, parenting, ...).",
    ),
    "zhihu": PlatformContext(
        "Zhihu",
        "A Q&A and long-form community; users ask questions, write answers and publish articles to "
        "share knowledge.",
        "A tag is the title (or topic) of a question the user browses, answers or posts, reflecting "
        "their knowledge interests and expertise.",
        "Zhihu tags tend to be full question titles (and therefore long). Pay attention to how "
        "concentrated the user's answers are; expert users typically specialise in 2-3 areas.",
    ),
    "douban": PlatformContext(
        "Douban",
        "A reviews community for films, books and music; users tag works with states such as "
        "\"want to watch\" or \"watched\".",
        "A tag has the form 'action:work-name' (e.g. watched_film:Title, want_to_read_book:Title), "
        "reflecting cultural-consumption preferences.",
        "Interests show through work categories (film/book/music) and genre preferences. "
        "Distinguish \"want to watch\" (intent) from \"watched\" (consumed).",
    ),
}


def get_context(platform: str) -> PlatformContext:
    try:
        return PLATFORM_CONTEXTS[platform.lower()]
    except KeyError:
        raise InvalidInputError(f"no prompt context for platform {platform!r}") from None


SYSTEM_MESSAGE = (
    "You are a user profiling system that maintains evolving user personas from streaming "
    "social-media data. Output valid JSON only."
)

PROMPT_TEMPLATE = """# Task: Streaming User-Profile Maintenance and Interest Prediction

You are a user-profiling system that processes streaming social-media data. For every new batch of user activities you must:
1. Update the persona. Using the new activities together with the existing persona, maintain a comprehensive understanding of this user's interests, preferences, and behavioural patterns.
2. Predict interests. From the candidate pool, select the tags that this user is most likely to engage with in the next activity cycle.

# Platform Context
- Platform: {platform_name} --- {platform_desc}
- Tag semantics: {tag_meaning}
- Analysis hint: {platform_hint}

# User Profile (static)
- Username: {username}
- Bio: {bio}

# Current Persona (accumulated from prior observations)
{persona}

# New Activity Data (batch #{step_id})
{posts}

# Candidate Tag Pool ({pool_size} tags total)
From the candidate pool below, select exactly {k} tags that this user is most likely to engage with in the next activity cycle, where k = max(1, round(0.25 * |C_n|)).
- You must return exactly {k} tags from the pool --- no more, no fewer.
- Your goal is to predict future behaviour, not to summarise the past.
- Interests evolve over time: some currently hot topics are transient and may not reappear next cycle; other topics absent from the current batch may surface later because of latent preferences.

{pool}

# Output Format (Return strict JSON)
{{
  "persona_summary": "Updated persona covering the user's core interest areas, behavioural patterns, and preference traits. (forwarded to the next batch)",
  "predicted_tags": ["tag1", "tag2", ...],
  "reasoning": "Briefly state which persona features support your tag selection."
}}"""

NOT_PROVIDED = "not provided"


def format_post(post: Post) -> str:
    parts = [p for p in (post.title, post.content) if p]
    if post.quote_content:
        parts.append(f"(quoting) {post.quote_content}")
    if post.action or post.item:
        parts.append(f"{post.action} {post.item}".strip())
    return " --- ".join(parts)


def format_posts(posts: Sequence[Post]) -> str:
    return "\n".join(f"[{i}] {format_post(p)}" for i, p in enumerate(posts, start=1))


def _fill(
    ctx: PlatformContext, user: UserMeta, persona: str, step_id: int, posts: str,
    pool: Sequence[str], k: int,
) -> str:
    return PROMPT_TEMPLATE.format(
        platform_name=ctx.name,
        platform_desc=ctx.description,
        tag_meaning=ctx.tag_meaning,
        platform_hint=ctx.analysis_hint,
        username=user.username or NOT_PROVIDED,
        bio=user.bio.strip() or NOT_PROVIDED,
        persona=persona.strip() or COLD_START_PERSONA,
        step_id=step_id,
        posts=posts,
        pool_size=len(pool),
        k=k,
        pool=json.dumps(list(pool), ensure_ascii=False),
    )


def render_prompt(task: StepTask, persona: PersonaState, ctx: PlatformContext, user: UserMeta) -> str:
    text = COLD_START_PERSONA if persona.step_index == 0 else persona.text
    return _fill(
        ctx, user, text, task.step_index, format_posts(task.input_batch.posts),
        task.pool.tag_list(), task.k,
    )


def render_long_context_prompt(
    tasks: Sequence[StepTask], ctx: PlatformContext, user: UserMeta
) -> str:
    """All observed posts under one ``--- YYYY-MM-DD ---`` header per date, with
    the final task's pool."""
    final = tasks[-1]
    lines: list[str] = []
    current = None
    n = 0
    for task in tasks:
        for post in task.input_batch.posts:
            day = post.timestamp.date().isoformat()
            if day != current:
                lines.append(f"--- {day} ---")
                current = day
            n += 1
            lines.append(f"[{n}] {format_post(post)}")
    return _fill(
        ctx, user, COLD_START_PERSONA, final.step_index, "\n".join(lines),
        final.pool.tag_list(), final.k,
    )


def prompt_digest(system: str, prompt: str) -> str:
    return hashlib.sha256(f"{system}\n\n{prompt}".encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Answer extraction
# ---------------------------------------------------------------------------


class ExtractionError(ValueError):
    pass


def extract_answer(raw: str) -> Prediction:
    try:
        obj = parse_json_object(raw)
    except ValueError as exc:
        raise ExtractionError(str(exc)) from None
    tags = obj.get("predicted_tags", [])
    if not isinstance(tags, list):
        tags = [tags]
    return Prediction(
        predicted_tags=tuple(str(t) for t in tags),
        persona_summary=str(obj.get("persona_summary", "") or ""),
        reasoning=str(obj.get("reasoning", "") or ""),
        raw_response=raw,
    )


def prediction_to_record(pred: Prediction) -> dict:
    return {
        "predicted_tags": list(pred.predicted_tags),
        "persona_summary": pred.persona_summary,
        "reasoning": pred.reasoning,
        "raw_response": pred.raw_response,
        "failed": pred.failed,
        "error": pred.error,
    }


def prediction_from_record(rec: dict) -> Prediction:
    return Prediction(
        predicted_tags=tuple(rec.get("predicted_tags", [])),
        persona_summary=rec.get("persona_summary", ""),
        reasoning=rec.get("reasoning", ""),
        raw_response=rec.get("raw_response", ""),
        failed=bool(rec.get("failed", False)),
        error=rec.get("error", ""),
    )


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentRequest:
    """What an agent sees for one step. No labels, no ground truth."""

    system: str
    prompt: str
    view: dict
    persona: PersonaState
    history: Counter = field(default_factory=Counter)
    user: Optional[UserMeta] = None

    @property
    def pool(self) -> list[str]:
        return list(self.view["pool"])

    @property
    def k(self) -> int:
        return int(self.view["k"])


class Agent(Protocol):
    def respond(self, request: AgentRequest) -> str: ...


class ChatAgent:
    def __init__(self, model: ChatModel) -> None:
        self.model = model

    def respond(self, request: AgentRequest) -> str:
        return self.model.complete(request.system, request.prompt)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunMode:
    persona: str = "full"
    history: str = "streaming"
    granularity: str = "default"

    def __post_init__(self) -> None:
        if self.persona not in ("full", "none"):
            raise InvalidInputError(f"persona mode must be full|none, got {self.persona!r}")
        if self.history not in ("streaming", "long_context"):
            raise InvalidInputError(f"history mode must be streaming|long_context, got {self.history!r}")
        if self.granularity not in GRANULARITY_TRIGGERS:
            raise InvalidInputError(f"granularity must be one of {sorted(GRANULARITY_TRIGGERS)}")


@dataclass(frozen=True)
class StepRecord:
    task: StepTask
    prediction: Prediction
    prompt_sha256: str
    latency: float = 0.0


def _call(agent: Agent, request: AgentRequest) -> tuple[Prediction, float]:
    start = time.perf_counter()
    try:
        raw = agent.respond(request)
    except (AuthError, RemoteUnavailableError):
        raise
    except RemoteError as exc:
        logger.warning("step failed: %s", exc)
        return Prediction(failed=True, error=str(exc)), time.perf_counter() - start
    latency = time.perf_counter() - start
    try:
        return extract_answer(raw), latency
    except ExtractionError as exc:
        return Prediction(raw_response=raw, failed=True, error=f"extraction: {exc}"), latency


def _observed_history(batches: Iterable[StreamBatch]) -> Counter:
    counts: Counter = Counter()
    for batch in batches:
        for post in batch.posts:
            counts.update({normalize_tag(a) for a in post.anchors})
    return counts


def run_stream(
    tasks: Sequence[StepTask],
    agent: Agent,
    mode: RunMode = RunMode(),
    ctx: Optional[PlatformContext] = None,
    user: Optional[UserMeta] = None,
) -> list[StepRecord]:
    """Run one user's tasks in step order, carrying the persona forward.

    With ``mode.persona == "none"`` every step starts cold. An empty or failed
    persona falls back to the previous one.
    """
    if not tasks:
        return []
    ordered = sorted(tasks, key=lambda t: t.step_index)
    if [t.step_index for t in ordered] != [t.step_index for t in tasks]:
        raise InvalidInputError("tasks must be sorted by step_index")
    ctx = ctx or get_context(ordered[0].platform)
    user = user or UserMeta(user_id=ordered[0].user_id)
    persona = PersonaState()
    out: list[StepRecord] = []
    seen: list[StreamBatch] = []
    for task in ordered:
        seen.append(task.input_batch)
        current = persona if mode.persona == "full" else PersonaState()
        prompt = render_prompt(task, current, ctx, user)
        request = AgentRequest(
            system=SYSTEM_MESSAGE,
            prompt=prompt,
            view=agent_view_record(task),
            persona=current,
            history=_observed_history(seen),
            user=user,
        )
        pred, latency = _call(agent, request)
        out.append(StepRecord(task, pred, prompt_digest(SYSTEM_MESSAGE, prompt), latency))
        if pred.persona_summary.strip():
            persona = PersonaState(pred.persona_summary, task.step_index)
    return out


def run_long_context(
    tasks: Sequence[StepTask],
    agent: Agent,
    ctx: Optional[PlatformContext] = None,
    user: Optional[UserMeta] = None,
) -> Optional[StepRecord]:
    """One prediction for the final task from the whole observed history.

    Users with fewer than four tasks are skipped (``None``).
    """
    ordered = sorted(tasks, key=lambda t: t.step_index)
    if len(ordered) < LONG_CONTEXT_MIN_STEPS:
        return None
    ctx = ctx or get_context(ordered[0].platform)
    user = user or UserMeta(user_id=ordered[0].user_id)
    prompt = render_long_context_prompt(ordered, ctx, user)
    final = ordered[-1]
    request = AgentRequest(
        system=SYSTEM_MESSAGE,
        prompt=prompt,
        view=agent_view_record(final),
        persona=PersonaState(),
        history=_observed_history(t.input_batch for t in ordered),
        user=user,
    )
    pred, latency = _call(agent, request)
    return StepRecord(final, pred, prompt_digest(SYSTEM_MESSAGE, prompt), latency)


def run_benchmark(
    tasks: Iterable[StepTask],
    agent: Agent,
    mode: RunMode = RunMode(),
    users: Optional[Mapping[str, UserMeta]] = None,
    max_workers: int = 1,
) -> list[StepRecord]:
    """Run every user; users run concurrently, steps within a user in order.

    Records come back sorted by ``(platform, user_id, step_index)`` whatever
    the completion order.
    """
    by_user: dict[tuple[str, str], list[StepTask]] = defaultdict(list)
    for t in tasks:
        by_user[(t.platform, t.user_id)].append(t)
    users = users or {}

    def one(key: tuple[str, str]) -> list[StepRecord]:
        platform, user_id = key
        ts = sorted(by_user[key], key=lambda t: t.step_index)
        ctx = get_context(platform)
        meta = users.get(user_id)
        if mode.history == "long_context":
            rec = run_long_context(ts, agent, ctx, meta)
            return [rec] if rec else []
        return run_stream(ts, agent, mode, ctx, meta)

    keys = sorted(by_user)
    if max_workers <= 1:
        results = [one(k) for k in keys]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(one, keys))
    records = [r for rs in results for r in rs]
    return sorted(records, key=lambda r: (r.task.platform, r.task.user_id, r.task.step_index))


def score_records(records: Iterable[StepRecord]) -> list[ScoredStep]:
    return [
        ScoredStep(r.task.platform, r.task.user_id, r.task.step_index, score_step(r.task, r.prediction))
        for r in records
    ]


def transcript_record(rec: StepRecord) -> dict:
    """Deterministic transcript row (latency lives in the timings file)."""
    return {
        "platform": rec.task.platform,
        "user_id": rec.task.user_id,
        "step_index": rec.task.step_index,
        "prompt_sha256": rec.prompt_sha256,
        "prediction": prediction_to_record(rec.prediction),
    }


def timing_record(rec: StepRecord) -> dict:
    return {
        "user_id": rec.task.user_id,
        "step_index": rec.task.step_index,
        "latency_s": round(rec.latency, 6),
    }


# ---------------------------------------------------------------------------
# Granularity ablation
# ---------------------------------------------------------------------------


def granularity_profile(profile: PlatformProfile, group: str) -> PlatformProfile:
    try:
        high, low = GRANULARITY_TRIGGERS[group]
    except KeyError:
        raise InvalidInputError(f"granularity must be one of {sorted(GRANULARITY_TRIGGERS)}") from None
    trigger = high if profile.high_frequency else low
    if trigger == profile.buffer_trigger:
        return profile
    # fixed-size steps, so the group changes only how much each step carries
    return replace(profile, buffer_trigger=trigger, buffer_cap=trigger)


def rebatch_granularity(
    user_id: str, posts: Sequence[Post], group: str, profile: PlatformProfile, **kwargs
) -> list[StreamBatch]:
    batches, _ = stream_batches(user_id, posts, granularity_profile(profile, group), **kwargs)
    return batches
