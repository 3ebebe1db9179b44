"""Offline distractor sources.

* Trending tables: per-date document coverage of anchors over a uniform post
  sample, with blacklist feedback for over-general tags.
* Cluster index: spherical mini-batch k-means over unit tag embeddings, plus
  incremental nearest-centroid assignment for tags that arrive later.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import date
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .core import InvalidInputError, PlatformProfile

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1
DEFAULT_TAU = Fraction(2, 10_000)
DEFAULT_OUTLIER_THRESHOLD = 0.85


# ---------------------------------------------------------------------------
# Trending tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrendingTable:
    day: Optional[date]
    entries: tuple[tuple[str, Fraction], ...]
    sample_size: int = 0

    def coverage(self) -> dict[str, Fraction]:
        return dict(self.entries)

    def tags(self) -> list[str]:
        return [t for t, _ in self.entries]


def sample_posts(items: Sequence, n: int, seed: int) -> list:
    """Uniform sample without replacement; the whole input if ``n >= len``."""
    if n >= len(items):
        return list(items)
    return random.Random(seed).sample(list(items), n)


def sample_coverage(
    post_anchor_sets: Iterable[Iterable[str]], day: Optional[date] = None
) -> TrendingTable:
    """Coverage(t) = share of sampled posts whose anchors include ``t``."""
    counts: Counter = Counter()
    n = 0
    for anchors in post_anchor_sets:
        counts.update(set(anchors))
        n += 1
    if n == 0:
        return TrendingTable(day, (), 0)
    entries = sorted(
        ((tag, Fraction(c, n)) for tag, c in counts.items()), key=lambda e: (-e[1], e[0])
    )
    return TrendingTable(day, tuple(entries), n)


def update_blacklist(
    table: TrendingTable, tau: Fraction | float, blacklist: set[str]
) -> set[str]:
    """Add tags with coverage >= ``tau`` to ``blacklist``; return the new ones."""
    tau = Fraction(tau)
    if tau <= 0:
        raise InvalidInputError("tau must be positive")
    delta = {tag for tag, cov in table.entries if cov >= tau} - blacklist
    blacklist |= delta
    return delta


def write_trending_table(path: str | Path, table: TrendingTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# date={table.day.isoformat() if table.day else ''}\tsample={table.sample_size}"]
    lines += [f"{tag}\t{cov.numerator}/{cov.denominator}" for tag, cov in table.entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trending_table(path: str | Path) -> TrendingTable:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = dict(part.split("=", 1) for part in lines[0].lstrip("# ").split("\t"))
    day = date.fromisoformat(header["date"]) if header.get("date") else None
    entries = []
    for line in lines[1:]:
        if line:
            tag, cov = line.rsplit("\t", 1)
            entries.append((tag, Fraction(cov)))
    return TrendingTable(day, tuple(entries), int(header.get("sample", 0)))


# ---------------------------------------------------------------------------
# Tag registry
# ---------------------------------------------------------------------------


@dataclass
class TagStats:
    first_seen: date
    frequency: int = 0
    days_seen: int = 0


@dataclass
class TagRegistry:
    tags: dict[str, TagStats] = field(default_factory=dict)
    days: Optional[tuple[date, date]] = None  # first and last ingested day

    def ingest_day(self, day: date, frequencies: Counter | dict[str, int]) -> None:
        if self.days is None:
            self.days = (day, day)
        else:
            self.days = (min(self.days[0], day), max(self.days[1], day))
        for tag, freq in frequencies.items():
            stats = self.tags.get(tag)
            if stats is None:
                stats = self.tags[tag] = TagStats(first_seen=day)
            elif day < stats.first_seen:
                stats.first_seen = day
            stats.frequency += int(freq)
            stats.days_seen += 1

    def frequency(self, tag: str) -> int:
        stats = self.tags.get(tag)
        return stats.frequency if stats else 0

    def span_days(self) -> int:
        """Calendar days covered by ingestion (tag first-seen dates if unknown)."""
        if self.days is not None:
            lo, hi = self.days
        elif self.tags:
            seen = [s.first_seen for s in self.tags.values()]
            lo, hi = min(seen), max(seen)
        else:
            return 0
        return (hi - lo).days + 1

    def frequent(self, f_min: int, until: Optional[date] = None) -> list[str]:
        return sorted(
            t for t, s in self.tags.items()
            if s.frequency >= f_min and (until is None or s.first_seen <= until)
        )

    def to_records(self) -> list[dict]:
        return [
            {"tag": t, "first_seen": s.first_seen.isoformat(), "frequency": s.frequency,
             "days_seen": s.days_seen}
            for t, s in sorted(self.tags.items())
        ]

    @classmethod
    def from_records(cls, rows: Iterable[dict]) -> "TagRegistry":
        reg = cls()
        for r in rows:
            reg.tags[r["tag"]] = TagStats(
                date.fromisoformat(r["first_seen"]), int(r["frequency"]), int(r["days_seen"])
            )
        return reg


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------


class Embedder(Protocol):
    dim: int

    def embed(self, tags: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Signed feature hashing of character unigrams, bigrams and the whole tag.

    Tags that share characters land close together, which is enough semantic
    structure for peer lookup in hermetic runs.
    """

    def __init__(self, dim: int = 512, seed: int = 0) -> None:
        self.dim = dim
        self.seed = seed

    def _features(self, tag: str) -> list[tuple[str, float]]:
        feats = [(f"u:{c}", 1.0) for c in tag]
        feats += [(f"b:{tag[i:i + 2]}", 1.0) for i in range(len(tag) - 1)]
        feats.append((f"w:{tag}", 1.0))
        return feats

    def embed(self, tags: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(tags), self.dim))
        for row, tag in enumerate(tags):
            for feat, weight in self._features(tag):
                h = hashlib.blake2b(f"{self.seed}|{feat}".encode("utf-8"), digest_size=8).digest()
                v = int.from_bytes(h, "little")
                sign = 1.0 if v & 1 else -1.0
                out[row, (v >> 1) % self.dim] += sign * weight
        return out


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return x / norms


# ---------------------------------------------------------------------------
# Mini-batch k-means
# ---------------------------------------------------------------------------


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _assign(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid via the unit-norm identity ||e - mu|| = sqrt(2 - 2 e.mu)."""
    scores = x @ centroids.T
    dist = np.sqrt(np.clip(2.0 - 2.0 * scores, 0.0, None))
    labels = np.argmin(dist, axis=1)
    return labels, dist[np.arange(len(x)), labels]


def minibatch_kmeans(
    x: np.ndarray,
    k: int,
    *,
    batch_size: int = 4096,
    max_iter: int = 300,
    n_init: int = 3,
    seed: int = 0,
    tol: float = 1e-7,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Spherical mini-batch k-means (per-centre 1/count learning rate).

    Returns unit-norm centroids, labels and the within-cluster sum of squares
    of the best of ``n_init`` seeded runs.
    """
    n = x.shape[0]
    best: Optional[tuple[np.ndarray, np.ndarray, float]] = None
    for init in range(n_init):
        rng = np.random.default_rng([seed, init])
        centroids = l2_normalize(_kmeans_pp(x, k, rng))
        counts = np.zeros(k)
        for _ in range(max_iter):
            idx = rng.choice(n, size=min(batch_size, n), replace=False)
            xb = x[idx]
            labels, _ = _assign(xb, centroids)
            old = centroids.copy()
            for c in np.unique(labels):
                members = xb[labels == c]
                counts[c] += len(members)
                centroids[c] += (members.sum(axis=0) - len(members) * centroids[c]) / counts[c]
            centroids = l2_normalize(centroids)
            if np.max(np.abs(centroids - old)) < tol:
                break
        labels, dist = _assign(x, centroids)
        inertia = float((dist ** 2).sum())
        if best is None or inertia < best[2]:
            best = (centroids, labels, inertia)
    assert best is not None
    return best


# ---------------------------------------------------------------------------
# Cluster index
# ---------------------------------------------------------------------------


@dataclass
class ClusterIndex:
    centroids: np.ndarray
    members: dict[int, list[str]]
    outliers: list[str] = field(default_factory=list)
    registry: TagRegistry = field(default_factory=TagRegistry)
    assignment: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.assignment:
            self.assignment = {t: c for c, tags in self.members.items() for t in tags}

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    def cluster_of(self, tag: str) -> Optional[int]:
        return self.assignment.get(tag)

    def knows(self, tag: str) -> bool:
        return tag in self.assignment or tag in self.outliers

    def save(self, path: str | Path) -> None:
        meta = {
            "format_version": INDEX_FORMAT_VERSION,
            "members": {str(c): tags for c, tags in sorted(self.members.items())},
            "outliers": self.outliers,
            "registry": self.registry.to_records(),
        }
        buf = io.BytesIO()
        np.savez(buf, centroids=self.centroids,
                 meta=np.frombuffer(json.dumps(meta, ensure_ascii=False).encode("utf-8"), dtype=np.uint8))
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "ClusterIndex":
        with np.load(path) as data:
            centroids = data["centroids"]
            meta = json.loads(data["meta"].tobytes().decode("utf-8"))
        if meta.get("format_version") != INDEX_FORMAT_VERSION:
            raise InvalidInputError(f"{path}: unsupported index format {meta.get('format_version')}")
        return cls(
            centroids=centroids,
            members={int(c): list(t) for c, t in meta["members"].items()},
            outliers=list(meta["outliers"]),
            registry=TagRegistry.from_records(meta["registry"]),
        )


def base_cluster(
    registry: TagRegistry,
    embedder: Embedder,
    profile: PlatformProfile,
    *,
    seed: int = 0,
    warmup_days: int = 10,
    until: Optional[date] = None,
    batch_size: int = 4096,
    max_iter: int = 300,
    n_init: int = 3,
) -> ClusterIndex:
    """Cluster every registry tag with frequency >= ``profile.min_tag_frequency``.

    Requires ``warmup_days`` of registry history. With fewer eligible tags
    than ``profile.cluster_count`` the cluster count drops to the tag count.
    """
    if registry.span_days() < warmup_days:
        raise InvalidInputError(
            f"registry covers {registry.span_days()} day(s); warm-up needs {warmup_days}"
        )
    tags = registry.frequent(profile.min_tag_frequency, until)
    if not tags:
        raise InvalidInputError("no tags reach the minimum frequency")
    k = profile.cluster_count
    if len(tags) < k:
        logger.warning("only %d tags for %d clusters; reducing K", len(tags), k)
        k = len(tags)
    x = l2_normalize(embedder.embed(tags))
    centroids, labels, inertia = minibatch_kmeans(
        x, k, batch_size=batch_size, max_iter=max_iter, n_init=n_init, seed=seed
    )
    logger.info("base clustering: %d tags, K=%d, inertia=%.4f", len(tags), k, inertia)
    members: dict[int, list[str]] = {c: [] for c in range(k)}
    for tag, c in zip(tags, labels):
        members[int(c)].append(tag)
    return ClusterIndex(centroids=centroids, members=members, registry=registry)


def assign_incremental(
    index: ClusterIndex,
    new_tags: Sequence[str],
    embedder: Embedder,
    outlier_threshold: float = DEFAULT_OUTLIER_THRESHOLD,
) -> ClusterIndex:
    """Attach unseen tags to their nearest centroid, or park them as outliers.

    All scores come from one ``n x K`` product. Ties go to the lowest
    cluster id. Returns a new index; the input is not modified.
    """
    known = set(index.assignment) | set(index.outliers)
    fresh = []
    for tag in new_tags:
        if tag not in known:
            known.add(tag)
            fresh.append(tag)
    members = {c: list(tags) for c, tags in index.members.items()}
    outliers = list(index.outliers)
    assignment = dict(index.assignment)
    if fresh:
        labels, dist = _assign(l2_normalize(embedder.embed(fresh)), index.centroids)
        for tag, c, d in zip(fresh, labels, dist):
            if d < outlier_threshold:
                members.setdefault(int(c), []).append(tag)
                assignment[tag] = int(c)
            else:
                outliers.append(tag)
    return replace(index, members=members, outliers=outliers, assignment=assignment)


def peer_lookup(index: ClusterIndex, tag: str, exclude: Iterable[str] = ()) -> list[str]:
    """Other members of ``tag``'s cluster, most frequent first."""
    c = index.cluster_of(tag)
    if c is None:
        return []
    skip = set(exclude) | {tag}
    peers = [t for t in index.members.get(c, []) if t not in skip]
    return sorted(peers, key=lambda t: (-index.registry.frequency(t), t))


def build_index(
    registry: TagRegistry,
    embedder: Embedder,
    profile: PlatformProfile,
    *,
    seed: int = 0,
    warmup_days: int = 10,
    outlier_threshold: float = DEFAULT_OUTLIER_THRESHOLD,
    **kmeans_kwargs,
) -> ClusterIndex:
    """Base clustering over the warm-up window, then day-by-day incremental
    assignment of the remaining frequent tags in first-seen order."""
    if not registry.tags:
        raise InvalidInputError("empty tag registry")
    start = min(s.first_seen for s in registry.tags.values())
    cutoff = date.fromordinal(start.toordinal() + warmup_days - 1)
    index = base_cluster(
        registry, embedder, profile, seed=seed, warmup_days=warmup_days, until=cutoff,
        **kmeans_kwargs,
    )
    later = [
        t for t, s in sorted(registry.tags.items(), key=lambda kv: (kv[1].first_seen, kv[0]))
        if s.first_seen > cutoff and s.frequency >= profile.min_tag_frequency
    ]
    by_day: dict[date, list[str]] = {}
    for t in later:
        by_day.setdefault(registry.tags[t].first_seen, []).append(t)
    for day in sorted(by_day):
        index = assign_incremental(index, by_day[day], embedder, outlier_threshold)
    return index
