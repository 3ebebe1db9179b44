from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from profilebench.core import (
    CandidatePool,
    InvalidInputError,
    Label,
    PlatformProfile,
    get_platform,
    normalize_tag,
    round_half_up,
    selection_budget,
    tags_equal,
)


@pytest.mark.parametrize(
    "a, b, expected",
    [("学习", "学习", True), (" 学习 ", "学习", True), ("学习", "学 习x", False), ("a  b", "a b", True)],
)
def test_tags_equal(a, b, expected):
    assert tags_equal(a, b) is expected


@given(st.text(), st.text())
def test_tags_equal_is_symmetric_and_matches_normalized_bytes(a, b):
    assert tags_equal(a, b) == tags_equal(b, a)
    assert tags_equal(a, b) == (normalize_tag(a).encode() == normalize_tag(b).encode())


@given(st.text())
def test_normalize_tag_is_idempotent(a):
    assert normalize_tag(normalize_tag(a)) == normalize_tag(a)
    assert tags_equal(a, a)


@pytest.mark.parametrize("size, k", [(28, 7), (1, 1), (10, 3), (4, 1), (6, 2), (2, 1), (48, 12)])
def test_selection_budget_examples(size, k):
    assert selection_budget(size) == k


def _budget_by_enumeration(n: int) -> int:
    # nearest integer to n/4, ties resolved upward, never below one
    best = min(range(0, n + 1), key=lambda c: (abs(Fraction(n, 4) - c), -c))
    return max(1, best)


@given(st.integers(min_value=1, max_value=10_000))
def test_selection_budget_matches_enumeration(n):
    k = selection_budget(n)
    assert k == _budget_by_enumeration(n)
    assert 1 <= k <= n


def test_selection_budget_rejects_empty_pool():
    with pytest.raises(InvalidInputError):
        selection_budget(0)


@pytest.mark.parametrize("x, expected", [(Fraction(5, 2), 3), (Fraction(7, 2), 4), (Fraction(9, 4), 2), (0, 0)])
def test_round_half_up(x, expected):
    assert round_half_up(x) == expected


def test_platform_table():
    assert [get_platform(p).buffer_trigger for p in ("weibo", "xiaohongshu", "douban", "toutiao", "zhihu")] == [5, 5, 5, 3, 3]
    assert get_platform("weibo").density_interval == (0.2, 1.0)
    assert get_platform("zhihu").min_tag_frequency == 2
    assert get_platform("Weibo").buffer_cap == 15
    with pytest.raises(InvalidInputError):
        get_platform("myspace")


def test_platform_profile_validation():
    with pytest.raises(InvalidInputError):
        PlatformProfile("x", 0, "single_hash", (0.2, 1.0), 3)
    with pytest.raises(InvalidInputError):
        PlatformProfile("x", 5, "single_hash", (1.0, 0.2), 3)
    with pytest.raises(InvalidInputError):
        PlatformProfile("x", 5, "single_hash", (0.2, 1.0), 3, buffer_cap=4)


def test_candidate_pool_rejects_duplicates_after_normalization():
    with pytest.raises(InvalidInputError):
        CandidatePool((("学习", Label.KEEP), (" 学习", Label.DECAY)))
    with pytest.raises(InvalidInputError):
        CandidatePool(())
    pool = CandidatePool((("a", Label.KEEP), ("b", Label.PEER), ("c", Label.DECAY), ("d", Label.RANDOM)))
    assert pool.k == 1
    assert pool.with_label(Label.PEER, Label.DECAY) == ["b", "c"]
