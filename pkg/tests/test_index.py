import math
from collections import Counter
from datetime import date, timedelta
from fractions import Fraction

import numpy as np
import pytest

from profilebench.core import InvalidInputError, get_platform
from profilebench.index import (
    ClusterIndex,
    HashingEmbedder,
    TagRegistry,
    TrendingTable,
    _assign,
    assign_incremental,
    base_cluster,
    build_index,
    l2_normalize,
    minibatch_kmeans,
    peer_lookup,
    read_trending_table,
    sample_coverage,
    sample_posts,
    update_blacklist,
    write_trending_table,
)

D0 = date(2025, 1, 1)


class TableEmbedder:
    """Fixed vectors per tag, for exact geometric fixtures."""

    def __init__(self, table: dict[str, tuple[float, ...]]) -> None:
        self.table = table
        self.dim = len(next(iter(table.values())))

    def embed(self, tags):
        return np.array([self.table[t] for t in tags], dtype=float)


def registry_over(days: int, tags: dict[str, int], first_day: int = 0) -> TagRegistry:
    reg = TagRegistry()
    for d in range(days):
        reg.ingest_day(D0 + timedelta(days=d), Counter(tags) if d == first_day else Counter())
    return reg


# ---------------------------------------------------------------------------
# Coverage and blacklist
# ---------------------------------------------------------------------------


def test_coverage_examples():
    table = sample_coverage([["a"], ["b"], ["b"], ["b", "a", "a"]])
    assert table.coverage()["a"] == Fraction(1, 2)
    table = sample_coverage([["x"], [], [], []])
    assert table.coverage()["x"] == Fraction(1, 4)
    table = sample_coverage([["t", "u"]] * 3)
    assert table.coverage()["t"] == 1


def test_planted_tag_coverage_at_full_sample():
    posts = [("常见",)] * (500_000 - 150) + [("植入",)] * 150
    sample = sample_posts(posts, 500_000, seed=1)
    cov = sample_coverage(sample).coverage()
    assert cov["植入"] == Fraction(3, 10_000)


def test_blacklist_threshold_and_idempotence():
    table = TrendingTable(D0, (("hot", Fraction(3, 10_000)), ("warm", Fraction(1, 10_000))), 10_000)
    bl: set[str] = set()
    assert update_blacklist(table, Fraction(2, 10_000), bl) == {"hot"}
    assert bl == {"hot"}
    assert update_blacklist(table, Fraction(2, 10_000), bl) == set()
    with pytest.raises(InvalidInputError):
        update_blacklist(table, 0, bl)


def test_trending_table_round_trip(tmp_path):
    table = sample_coverage([["甲", "乙"], ["甲"], ["丙 丁"]], day=D0)
    write_trending_table(tmp_path / "t.tsv", table)
    assert read_trending_table(tmp_path / "t.tsv") == table


def test_sample_posts_is_seeded():
    items = list(range(100))
    assert sample_posts(items, 10, 3) == sample_posts(items, 10, 3)
    assert sample_posts(items, 200, 3) == items


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


def test_registry_frequency_and_threshold():
    reg = TagRegistry()
    reg.ingest_day(D0, Counter({"a": 2, "b": 1}))
    reg.ingest_day(D0 + timedelta(days=1), Counter({"b": 1}))
    assert reg.frequency("a") == 2 and reg.frequency("b") == 2
    weibo = get_platform("weibo")
    assert "a" not in reg.frequent(weibo.min_tag_frequency)
    assert reg.frequent(2) == ["a", "b"]
    assert TagRegistry.from_records(reg.to_records()).tags == reg.tags


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


def test_kmeans_recovers_separated_groups():
    rng = np.random.default_rng(0)
    a = l2_normalize(np.array([1.0, 0, 0]) + 0.05 * rng.standard_normal((30, 3)))
    b = l2_normalize(np.array([0, 1.0, 0]) + 0.05 * rng.standard_normal((30, 3)))
    x = np.vstack([a, b])
    centroids, labels, _ = minibatch_kmeans(x, 2, seed=1)
    assert len(set(labels[:30])) == 1 and len(set(labels[30:])) == 1
    assert labels[0] != labels[30]
    exhaustive = np.argmin(((x[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(labels, exhaustive)


def test_single_cluster_centroid_is_mean_direction():
    x = l2_normalize(np.array([[1.0, 0.2], [0.9, -0.1], [1.0, 0.0]]))
    centroids, labels, _ = minibatch_kmeans(x, 1, seed=0)
    expected = x.mean(axis=0) / np.linalg.norm(x.mean(axis=0))
    assert np.allclose(centroids[0], expected, atol=1e-6)
    assert set(labels) == {0}


def test_base_cluster_needs_warmup_and_drops_rare_tags():
    reg = registry_over(5, {"a": 5})
    with pytest.raises(InvalidInputError):
        base_cluster(reg, HashingEmbedder(), get_platform("weibo"), warmup_days=10)
    reg = registry_over(10, {"常见的": 5, "罕见的": 2, "普通的": 3})
    index = base_cluster(reg, HashingEmbedder(), get_platform("weibo"), warmup_days=10)
    assert index.k == 2  # reduced to the eligible tag count
    assert index.cluster_of("罕见的") is None


def test_distance_identity_examples():
    centroids = np.array([[0.8, 0.6]])
    _, dist = _assign(np.array([[1.0, 0.0]]), centroids)
    assert dist[0] == pytest.approx(math.sqrt(0.4))
    _, dist = _assign(np.array([[0.8, 0.6]]), centroids)
    assert dist[0] == pytest.approx(0.0, abs=1e-7)
    _, dist = _assign(np.array([[-0.6, 0.8]]), centroids)
    assert dist[0] == pytest.approx(math.sqrt(2))


def _index(centroids, members) -> ClusterIndex:
    return ClusterIndex(centroids=np.array(centroids, dtype=float), members=members)


def test_incremental_assignment_and_outliers():
    emb = TableEmbedder({"same": (0.8, 0.6), "near": (1.0, 0.0), "orth": (-0.6, 0.8)})
    index = _index([[0.8, 0.6]], {0: ["seed"]})
    out = assign_incremental(index, ["same", "near", "orth", "near"], emb, 0.85)
    assert out.cluster_of("same") == 0 and out.cluster_of("near") == 0
    assert out.outliers == ["orth"]
    assert index.cluster_of("near") is None  # input untouched
    again = assign_incremental(out, ["orth"], emb, 0.85)
    assert again.outliers == ["orth"]


def test_peer_lookup():
    reg = TagRegistry()
    reg.ingest_day(D0, Counter({"a": 1, "b": 5, "c": 3, "solo": 1}))
    index = ClusterIndex(np.eye(2), {0: ["a", "b", "c"], 1: ["solo"]}, outliers=["odd"], registry=reg)
    assert peer_lookup(index, "solo") == []
    assert peer_lookup(index, "a", exclude={"b"}) == ["c"]
    assert peer_lookup(index, "a") == ["b", "c"]
    assert peer_lookup(index, "odd") == []


def test_index_save_load_round_trip(tmp_path):
    reg = registry_over(12, {f"标签{i}号": 4 for i in range(20)})
    index = build_index(reg, HashingEmbedder(seed=2), get_platform("zhihu"), seed=2)
    index.save(tmp_path / "i.npz")
    back = ClusterIndex.load(tmp_path / "i.npz")
    assert np.array_equal(back.centroids, index.centroids)
    assert back.members == index.members and back.outliers == index.outliers
    assert back.assignment == index.assignment


def test_build_index_assigns_late_tags_incrementally():
    reg = TagRegistry()
    for d in range(15):
        tags = Counter({f"早期{i}": 3 for i in range(10)}) if d == 0 else Counter()
        if d == 12:
            tags = Counter({"早期1号": 3, "完全不同": 3})
        reg.ingest_day(D0 + timedelta(days=d), tags)
    profile = get_platform("zhihu")
    index = build_index(reg, HashingEmbedder(), profile, seed=0, warmup_days=10)
    base = {t for tags in index.members.values() for t in tags}
    assert {f"早期{i}" for i in range(10)} <= base | set(index.outliers)
    assert index.knows("早期1号") and index.knows("完全不同")


def test_hashing_embedder_is_deterministic_and_shares_structure():
    emb = HashingEmbedder(seed=1)
    x = l2_normalize(emb.embed(["考研数学", "考研英语", "麻辣火锅"]))
    assert np.array_equal(x, l2_normalize(HashingEmbedder(seed=1).embed(["考研数学", "考研英语", "麻辣火锅"])))
    assert x[0] @ x[1] > x[0] @ x[2]
