"""Per-step evaluation tasks: ground-truth split plus a labelled distractor pool.

For step ``n`` the agent has seen batches ``1..n`` and must pick tags from the
pool that will show up in batch ``n+1``. Positives are the next batch's
anchors; the other three quarters of the pool are distractors drawn from four
families (decay, peer, viral, random).
"""

from __future__ import annotations

import hashlib
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .core import (
    DISTRACTOR_LABELS,
    CandidatePool,
    InvalidInputError,
    Label,
    StreamBatch,
    normalize_tag,
    round_half_up,
)
from .records import batch_from_record, batch_to_record

logger = logging.getLogger(__name__)

DEFAULT_MAX_POSITIVES = 12
VIRAL_HEAD = 50

# Fixed order used for quota remainders and redistribution.
ALLOCATION_ORDER = (Label.PEER, Label.VIRAL, Label.DECAY, Label.RANDOM)


def derive_seed(seed: int, *parts: object) -> int:
    key = "|".join([str(seed), *map(str, parts)]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


@dataclass(frozen=True)
class StepTask:
    user_id: str
    step_index: int
    input_batch: StreamBatch
    pool: CandidatePool
    gt_keep: tuple[str, ...]
    gt_new: tuple[str, ...]
    history: tuple[tuple[str, int], ...] = ()
    platform: str = ""

    def __post_init__(self) -> None:
        keep, new = set(self.gt_keep), set(self.gt_new)
        if keep & new:
            raise InvalidInputError("gt_keep and gt_new overlap")
        labels = dict(self.pool.tags)
        for tag in keep:
            if labels.get(tag) is not Label.KEEP:
                raise InvalidInputError(f"keep tag {tag!r} missing from pool")
        for tag in new:
            if labels.get(tag) is not Label.NEW:
                raise InvalidInputError(f"new tag {tag!r} missing from pool")

    @property
    def k(self) -> int:
        return self.pool.k

    @property
    def alpha(self) -> Fraction:
        total = len(self.gt_keep) + len(self.gt_new)
        return Fraction(len(self.gt_keep), total) if total else Fraction(0)

    @property
    def positives(self) -> tuple[str, ...]:
        return self.gt_keep + self.gt_new

    def history_counts(self) -> Counter:
        return Counter(dict(self.history))


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


def _ordered_unique(tags: Iterable[str]) -> list[str]:
    out, seen = [], set()
    for t in tags:
        t = normalize_tag(t)
        if t and t not in seen:
            seen.add(t)
            out.append(t)
    return out


def split_ground_truth(
    history_anchors: Iterable[str], future_anchors: Iterable[str]
) -> tuple[list[str], list[str]]:
    """``(future & history, future - history)`` in future order."""
    history = {normalize_tag(t) for t in history_anchors}
    future = _ordered_unique(future_anchors)
    keep = [t for t in future if t in history]
    new = [t for t in future if t not in history]
    return keep, new


def build_decay_candidates(history: Mapping[str, int], future_anchors: Iterable[str]) -> list[str]:
    """History anchors absent from the future, most frequent first."""
    future = {normalize_tag(t) for t in future_anchors}
    cands = [normalize_tag(t) for t in history if normalize_tag(t) not in future]
    freq = {normalize_tag(t): c for t, c in history.items()}
    return sorted(set(cands), key=lambda t: (-freq[t], t))


def batch_frequencies(batch: StreamBatch) -> Counter:
    """Per-tag count of posts carrying it in one batch."""
    counts: Counter = Counter()
    for post in batch.posts:
        counts.update({normalize_tag(a) for a in post.anchors})
    # Batch anchors not attached to any post still count once.
    missing = {normalize_tag(a) for a in batch.anchors} - set(counts)
    counts.update(missing)
    return counts


def history_frequencies(batches: Sequence[StreamBatch]) -> Counter:
    """Per-tag count of posts carrying it across ``batches``."""
    counts: Counter = Counter()
    for batch in batches:
        counts.update(batch_frequencies(batch))
    return counts


def cap_positives(
    keep: Sequence[str], new: Sequence[str], max_positives: int, seed: int
) -> tuple[list[str], list[str]]:
    """Seeded subsample down to ``max_positives``, keeping the keep/new share."""
    total = len(keep) + len(new)
    if total <= max_positives:
        return list(keep), list(new)
    n_keep = round_half_up(Fraction(max_positives * len(keep), total))
    n_keep = min(n_keep, len(keep))
    n_new = min(max_positives - n_keep, len(new))
    rng = random.Random(seed)
    kept = set(rng.sample(list(keep), n_keep))
    newed = set(rng.sample(list(new), n_new))
    return [t for t in keep if t in kept], [t for t in new if t in newed]


# ---------------------------------------------------------------------------
# Distractors
# ---------------------------------------------------------------------------


@dataclass
class DistractorSources:
    """Where each distractor family draws from.

    ``peers`` maps a tag to its cluster lookalikes; ``cluster_of`` maps a tag
    to its cluster id (``None`` when unclustered); ``trending`` is a coverage
    ordered tag list for the step's date; ``global_pool`` is every known tag.
    """

    peers: Callable[[str], Sequence[str]] = lambda _tag: ()
    cluster_of: Callable[[str], Optional[int]] = lambda _tag: None
    trending: Callable[[Optional[date]], Sequence[str]] = lambda _day: ()
    global_pool: Sequence[str] = ()
    blacklist: frozenset[str] = frozenset()

    _trending_memo: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.global_pool = tuple(sorted({normalize_tag(t) for t in self.global_pool} - {""}))

    def trending_clusters(self, day: Optional[date]) -> list[tuple[str, Optional[int]]]:
        """Non-blacklisted trending tags of ``day`` with their clusters, in coverage order."""
        if day not in self._trending_memo:
            self._trending_memo[day] = [
                (t, self.cluster_of(t)) for t in self.trending(day) if t and t not in self.blacklist
            ]
        return self._trending_memo[day]


@dataclass(frozen=True)
class UserContext:
    history: Mapping[str, int]
    future: tuple[str, ...]
    positives: tuple[str, ...]
    day: Optional[date] = None


@dataclass(frozen=True)
class CandidateLists:
    decay: list[str]
    peer: list[str]
    viral: list[str]
    random: list[str]

    def get(self, label: Label) -> list[str]:
        return getattr(self, label.value)


def gather_candidates(sources: DistractorSources, ctx: UserContext) -> CandidateLists:
    """Disjoint candidate lists per family; precedence decay > peer > viral > random."""
    engaged = {normalize_tag(t) for t in ctx.history} | {normalize_tag(t) for t in ctx.future}
    blocked = engaged | {normalize_tag(t) for t in ctx.positives}

    decay = build_decay_candidates(ctx.history, ctx.future)

    anchors = list(ctx.positives) + sorted(ctx.history, key=lambda t: (-ctx.history[t], t))
    peer = [
        t for t in dict.fromkeys(normalize_tag(t) for a in anchors for t in sources.peers(a))
        if t and t not in blocked
    ]
    seen = blocked | set(peer)

    user_clusters = {c for c in map(sources.cluster_of, engaged) if c is not None}
    # trending tables are built from cleaned anchors, already normalized
    viral = [
        t for t in dict.fromkeys(
            t for t, c in sources.trending_clusters(ctx.day) if c is None or c not in user_clusters
        )
        if t not in seen
    ]
    seen.update(viral)

    rnd = [t for t in sources.global_pool if t not in seen]
    return CandidateLists(decay=decay, peer=peer, viral=viral, random=rnd)


def allocate_quotas(total: int, available: Mapping[Label, int]) -> dict[Label, int]:
    """Equal split over the four families, with any family's shortfall spread
    evenly over the families that still have candidates to spare.
    """
    n = len(ALLOCATION_ORDER)
    quotas = {lab: total // n for lab in ALLOCATION_ORDER}
    for lab in ALLOCATION_ORDER[: total % n]:
        quotas[lab] += 1
    while True:
        shortfall = 0
        for lab in ALLOCATION_ORDER:
            cap = available.get(lab, 0)
            if quotas[lab] > cap:
                shortfall += quotas[lab] - cap
                quotas[lab] = cap
        if shortfall == 0:
            return quotas
        spare = [lab for lab in ALLOCATION_ORDER if available.get(lab, 0) > quotas[lab]]
        if not spare:
            raise InvalidInputError(
                f"need {total} distractors but only {sum(quotas.values())} candidates exist"
            )
        share, extra = divmod(shortfall, len(spare))
        for i, lab in enumerate(spare):
            quotas[lab] += share + (1 if i < extra else 0)


def build_distractors(
    n_positives: int,
    sources: DistractorSources,
    ctx: UserContext,
    seed: int,
) -> list[tuple[str, Label]]:
    """Exactly ``3 * n_positives`` labelled distractors."""
    if not sources.global_pool:
        raise InvalidInputError("global tag pool is empty")
    total = 3 * n_positives
    cands = gather_candidates(sources, ctx)
    quotas = allocate_quotas(total, {lab: len(cands.get(lab)) for lab in ALLOCATION_ORDER})
    out: list[tuple[str, Label]] = []
    for lab in DISTRACTOR_LABELS:
        q = quotas[lab]
        pool = cands.get(lab)
        if q == 0:
            continue
        rng = random.Random(derive_seed(seed, lab.value))
        if lab is Label.DECAY:
            chosen = pool[:q]
        elif lab is Label.VIRAL:
            chosen = rng.sample(pool[: max(q, VIRAL_HEAD)], q)
        else:
            chosen = rng.sample(pool, q)
        out.extend((t, lab) for t in chosen)
    return out


def assemble_task(
    batch: StreamBatch,
    gt_keep: Sequence[str],
    gt_new: Sequence[str],
    distractors: Sequence[tuple[str, Label]],
    seed: int,
    *,
    history: Mapping[str, int] | None = None,
    platform: str = "",
) -> StepTask:
    tags = [(t, Label.KEEP) for t in gt_keep] + [(t, Label.NEW) for t in gt_new]
    tags += list(distractors)
    seen: set[str] = set()
    for t, _ in tags:
        if normalize_tag(t) in seen:
            raise InvalidInputError(f"tag {t!r} appears twice in the pool")
        seen.add(normalize_tag(t))
    random.Random(seed).shuffle(tags)
    hist = tuple(sorted((history or {}).items(), key=lambda kv: (-kv[1], kv[0])))
    return StepTask(
        user_id=batch.user_id,
        step_index=batch.step_index,
        input_batch=batch,
        pool=CandidatePool(tuple(tags)),
        gt_keep=tuple(gt_keep),
        gt_new=tuple(gt_new),
        history=hist,
        platform=platform,
    )


@dataclass(frozen=True)
class TaskBuildConfig:
    seed: int = 0
    max_positives: int = DEFAULT_MAX_POSITIVES


def build_step_task(
    history_batches: Sequence[StreamBatch],
    future_batch: StreamBatch,
    sources: DistractorSources,
    cfg: TaskBuildConfig = TaskBuildConfig(),
    platform: str = "",
    history: Optional[Counter] = None,
) -> Optional[StepTask]:
    """Task for the last batch of ``history_batches``; ``None`` if the future is empty.

    ``history`` may carry precomputed ``history_frequencies(history_batches)``.
    """
    current = history_batches[-1]
    future = _ordered_unique(future_batch.anchors)
    if not future:
        logger.info("user %s step %d: empty future batch, skipped", current.user_id, current.step_index)
        return None
    if history is None:
        history = history_frequencies(history_batches)
    keep, new = split_ground_truth(history, future)
    keep, new = cap_positives(
        keep, new, cfg.max_positives, derive_seed(cfg.seed, current.user_id, current.step_index, "cap")
    )
    ctx = UserContext(
        history=history,
        future=tuple(future),
        positives=tuple(keep + new),
        day=current.window[1].date(),
    )
    step_seed = derive_seed(cfg.seed, current.user_id, current.step_index)
    distractors = build_distractors(len(keep) + len(new), sources, ctx, step_seed)
    return assemble_task(
        current, keep, new, distractors, derive_seed(step_seed, "shuffle"),
        history=history, platform=platform,
    )


def build_user_tasks(
    batches: Sequence[StreamBatch],
    sources: DistractorSources,
    cfg: TaskBuildConfig = TaskBuildConfig(),
    platform: str = "",
) -> list[StepTask]:
    """``m - 1`` tasks for ``m`` batches; the last batch only supplies ground truth."""
    ordered = sorted(batches, key=lambda b: b.step_index)
    tasks = []
    history: Counter = Counter()
    for i in range(len(ordered) - 1):
        history.update(batch_frequencies(ordered[i]))
        task = build_step_task(ordered[: i + 1], ordered[i + 1], sources, cfg, platform, Counter(history))
        if task is not None:
            tasks.append(task)
    return tasks


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def agent_view_record(task: StepTask) -> dict:
    """Everything an agent may see: batch, pool tags (no labels), ``k``."""
    return {
        "user_id": task.user_id,
        "step_index": task.step_index,
        "platform": task.platform,
        "batch": batch_to_record(task.input_batch),
        "pool": task.pool.tag_list(),
        "k": task.k,
    }


def answer_key_record(task: StepTask) -> dict:
    return {
        "user_id": task.user_id,
        "step_index": task.step_index,
        "labels": [label.value for _, label in task.pool.tags],
        "gt_keep": list(task.gt_keep),
        "gt_new": list(task.gt_new),
        "alpha": f"{task.alpha.numerator}/{task.alpha.denominator}",
        "history": [[t, c] for t, c in task.history],
    }


def task_from_records(view: dict, key: dict) -> StepTask:
    if (view["user_id"], view["step_index"]) != (key["user_id"], key["step_index"]):
        raise InvalidInputError("agent view and answer key rows do not line up")
    labels = [Label(v) for v in key["labels"]]
    if len(labels) != len(view["pool"]):
        raise InvalidInputError("label count differs from pool size")
    return StepTask(
        user_id=view["user_id"],
        step_index=int(view["step_index"]),
        input_batch=batch_from_record(view["batch"]),
        pool=CandidatePool(tuple(zip(view["pool"], labels))),
        gt_keep=tuple(key["gt_keep"]),
        gt_new=tuple(key["gt_new"]),
        history=tuple((t, int(c)) for t, c in key.get("history", [])),
        platform=view.get("platform", ""),
    )


def join_task_files(views: Iterable[dict], keys: Iterable[dict]) -> list[StepTask]:
    by_id = {(k["user_id"], k["step_index"]): k for k in keys}
    out = []
    for v in views:
        key = by_id.get((v["user_id"], v["step_index"]))
        if key is None:
            raise InvalidInputError(f"no answer key for {v['user_id']} step {v['step_index']}")
        out.append(task_from_records(v, key))
    return out
