import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DECAY, KEEP, NEW, make_batch, make_post
from profilebench.core import InvalidInputError, Label, Prediction, StepScore
from profilebench.metrics import (
    ScoredStep,
    aggregate,
    aggregate_tradeoff,
    cluster_map_from,
    coarse_alpha,
    constraint_segment,
    f1_ns,
    geometry_curves,
    macro_average,
    micro_average,
    per_user_f1,
    recall_ratio,
    score_step,
    tradeoff_decompose,
    verify_identity,
)
from profilebench.tasks import assemble_task


def test_golden_conservative_prediction(golden_task):
    pred = Prediction(predicted_tags=KEEP + DECAY[:4])
    s = score_step(golden_task, pred)
    assert (s.recall, s.recall_stab, s.recall_nov, s.delta) == (Fraction(3, 7), 1, 0, 4)
    assert s.err_decay == Fraction(4, 9)
    assert s.err_peer == s.err_viral == s.err_random == 0
    assert tradeoff_decompose(s).budget == Fraction(3, 7)
    assert verify_identity(s) == 0


def test_perfect_prediction(golden_task):
    s = score_step(golden_task, Prediction(predicted_tags=KEEP + NEW))
    assert s.recall == 1 and s.delta == 0 and s.budget == 1
    assert (s.err_decay, s.err_peer, s.err_viral, s.err_random) == (0, 0, 0, 0)
    assert verify_identity(s) == 0


def test_out_of_pool_tag_charges_delta_only(golden_task):
    s = score_step(golden_task, Prediction(predicted_tags=KEEP + ("不存在的标签",)))
    assert s.out_of_pool == 1
    assert s.delta == 1
    assert s.recall == Fraction(3, 7)
    assert s.delta_gt == 4


def test_matching_normalizes_and_ignores_repeats(golden_task):
    s = score_step(golden_task, Prediction(predicted_tags=(" 研究生", "研究生 ", "研二")))
    assert s.recall_stab == Fraction(2, 3)
    assert s.delta == 0


def test_failed_step_scores_zero_with_full_budget_charged(golden_task):
    s = score_step(golden_task, Prediction(failed=True, error="boom"))
    assert s.failed and s.recall == 0 and s.delta == s.delta_gt == golden_task.k
    assert s.recall_stab == 0 and s.recall_nov == 0 and s.err_decay == 0
    assert verify_identity(s) == 0


def _random_task(rng: random.Random, n_keep: int, n_new: int):
    user = "u"
    keep = [f"k{i}" for i in range(n_keep)]
    new = [f"n{i}" for i in range(n_new)]
    n = 3 * (n_keep + n_new)
    labels = [rng.choice([Label.DECAY, Label.PEER, Label.VIRAL, Label.RANDOM]) for _ in range(n)]
    distractors = [(f"d{i}", lab) for i, lab in enumerate(labels)]
    batch = make_batch(user, 1, [make_post(0, user)])
    return assemble_task(batch, keep, new, distractors, rng.randrange(1 << 30))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_identity_holds_for_arbitrary_predictions(n_keep, n_new, seed, n_outside):
    if n_keep + n_new == 0:
        return
    rng = random.Random(seed)
    task = _random_task(rng, n_keep, n_new)
    k = task.k
    picks = rng.sample(task.pool.tag_list(), max(0, k - n_outside)) + [f"x{i}" for i in range(min(n_outside, k))]
    s = score_step(task, Prediction(predicted_tags=tuple(picks)))
    assert s.delta <= s.delta_gt + s.out_of_pool
    assert s.delta_gt == k - sum(1 for t in picks if t in task.positives)
    if s.recall_stab is not None and s.recall_nov is not None:
        assert verify_identity(s) == 0
    assert 0 <= s.budget <= 1


def test_identity_requires_both_recalls():
    s = StepScore(Fraction(1), None, Fraction(1), 0, 0, None, None, None, None, Fraction(0), 1)
    with pytest.raises(InvalidInputError):
        verify_identity(s)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def test_macro_average_examples():
    assert macro_average({"A": [0.2, 0.4], "B": [1.0]}) == pytest.approx(0.65)
    assert macro_average({"A": [0.3, 0.3], "B": [0.3]}) == pytest.approx(0.3)
    assert macro_average({"A": [None], "B": [0.5, None]}) == 0.5
    assert macro_average({"A": [None]}) is None
    assert micro_average({"A": [0.2, 0.4], "B": [1.0]}) == pytest.approx(1.6 / 3)


@given(st.dictionaries(st.text(min_size=1, max_size=3), st.lists(st.floats(0, 1), min_size=1, max_size=6), min_size=1))
def test_macro_average_is_permutation_invariant(per_user):
    shuffled = {u: list(reversed(v)) for u, v in reversed(list(per_user.items()))}
    assert macro_average(per_user) == pytest.approx(macro_average(shuffled), abs=1e-12)


def test_f1_examples():
    assert f1_ns(Fraction(3, 10), Fraction(3, 10)) == Fraction(3, 10)
    assert f1_ns(1, 0) == 0
    assert f1_ns(0, 0) == 0
    assert f1_ns(0.8, 0.4) == pytest.approx(0.533333333, abs=1e-8)
    assert f1_ns(None, 0.5) is None
    with pytest.raises(InvalidInputError):
        f1_ns(-0.1, 0.5)


@given(st.fractions(0, 1), st.fractions(0, 1))
def test_f1_bounds(x, y):
    f = f1_ns(x, y)
    assert 0 <= f <= 2 * min(x, y)
    assert f <= (x + y) / 2
    assert f == f1_ns(y, x)


def test_tradeoff_examples():
    assert recall_ratio(0.5, 0.25) == 0.5
    assert recall_ratio(0, 0.3) == math.inf
    assert recall_ratio(0, 0) is None
    pt = aggregate_tradeoff(1.0, 1.0, 0.24)
    assert pt.budget == pytest.approx(1.0) and pt.rho == 1.0


@given(st.floats(0.01, 0.99), st.floats(0, 1), st.floats(0, 1))
def test_monotone_relaxation(alpha, b1, b2):
    # a smaller delta means a larger budget; both achievable recalls weakly grow
    lo_b, hi_b = sorted((b1, b2))

    def best(budget):
        lo, hi = constraint_segment(alpha, budget)
        return hi, (budget - alpha * lo) / (1 - alpha)

    stab_lo, nov_lo = best(lo_b)
    stab_hi, nov_hi = best(hi_b)
    assert stab_hi >= stab_lo - 1e-12
    assert nov_hi >= nov_lo - 1e-12


def _score(stab, nov, k=4, delta_gt=0, alpha=Fraction(1, 2)):
    f = lambda v: None if v is None else Fraction(v)
    return StepScore(Fraction(0), f(stab), f(nov), 0, delta_gt, None, None, None, None, alpha, k)


def test_aggregate_two_platforms():
    steps = [
        ScoredStep("weibo", "a", 1, _score("0.2", "0.4")),
        ScoredStep("weibo", "a", 2, _score("0.4", "0.4")),
        ScoredStep("weibo", "b", 1, _score("1", "0")),
        ScoredStep("zhihu", "c", 1, _score("0.5", "0.5")),
    ]
    rep = aggregate(steps)
    wb = rep.per_platform["weibo"]
    assert wb.metrics["R_stab"] == pytest.approx(0.65)
    assert wb.metrics["R_nov"] == pytest.approx(0.2)
    assert wb.f1_ns == pytest.approx(f1_ns(0.65, 0.2))
    assert rep.overall["R_stab"] == pytest.approx((0.65 + 0.5) / 2)
    # overall F1 is the harmonic mean of overall recalls
    assert rep.f1_ns == pytest.approx(f1_ns(rep.overall["R_stab"], rep.overall["R_nov"]))
    assert rep.f1_ns != pytest.approx((wb.f1_ns + rep.per_platform["zhihu"].f1_ns) / 2)
    single = aggregate(steps[:3])
    assert single.overall == single.per_platform["weibo"].metrics
    with pytest.raises(InvalidInputError):
        aggregate([])


def test_aggregate_permutation_invariant(small_bench):
    rng = random.Random(0)
    steps = []
    for t in small_bench.tasks:
        picks = rng.sample(t.pool.tag_list(), t.k)
        steps.append(ScoredStep(t.platform, t.user_id, t.step_index, score_step(t, Prediction(tuple(picks)))))
    a = aggregate(steps)
    rng.shuffle(steps)
    b = aggregate(steps)
    for name in a.overall:
        assert a.overall[name] == pytest.approx(b.overall[name], abs=1e-12)


def test_per_user_f1():
    scores = [_score("1", "0.5"), _score("0.5", None)]
    assert per_user_f1(scores) == pytest.approx(f1_ns(0.75, 0.5))


# ---------------------------------------------------------------------------
# Coarse stability
# ---------------------------------------------------------------------------


def test_coarse_alpha_edge_cases(small_bench):
    tasks = small_bench.tasks
    fine, coarse = coarse_alpha(tasks, lambda t: t)
    assert coarse == pytest.approx(fine, abs=1e-12)
    _, const = coarse_alpha(tasks, lambda t: 0)
    assert const == 1.0
    fine2, mapped = coarse_alpha(tasks, small_bench.index.cluster_of)
    assert mapped >= fine2 - 1e-12


def test_coarse_alpha_matches_brute_force(small_bench):
    index = small_bench.index
    cmap = cluster_map_from({t: index.cluster_of(t) for t in index.assignment if index.cluster_of(t) is not None})
    per_user: dict[str, list[Fraction]] = {}
    for t in small_bench.tasks:
        hist = {cmap(a) for a, _ in t.history}
        hits = [a for a in t.gt_keep + t.gt_new if cmap(a) in hist]
        per_user.setdefault(t.user_id, []).append(Fraction(len(hits), len(t.gt_keep) + len(t.gt_new)))
    expected = sum(sum(v) / len(v) for v in per_user.values()) / len(per_user)
    assert coarse_alpha(small_bench.tasks, cmap)[1] == pytest.approx(float(expected), abs=1e-12)


def test_cluster_map_from_gives_unmapped_tags_singletons():
    cmap = cluster_map_from({"a": 1, "b": 1})
    assert cmap("a") == cmap("b")
    assert cmap("c") != cmap("d")


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def test_geometry_examples():
    g = geometry_curves(0.24, 1.0, 0.5)
    assert g.line_x[-1] == pytest.approx(1) and g.line_y[-1] == pytest.approx(1)
    assert g.slope == pytest.approx(-0.24 / 0.76)
    assert round(g.slope, 4) == -0.3158
    # iso-F1 passes through the diagonal point (c, c)
    i = int(np.argmin(np.abs(g.iso_x - 0.5)))
    y_at_c = 0.5 * 0.5 / (2 * 0.5 - 0.5)
    assert y_at_c == 0.5
    assert np.all(g.iso_y[g.iso_x > 0.5] <= 1 + 1e-12)
    assert g.iso_y[i] == pytest.approx(0.5, abs=0.01)


def test_constraint_segment_truncates_at_capacity():
    lo, hi = constraint_segment(0.24, 0.6)
    assert hi == 1.0  # min(1, 0.6/0.24 = 2.5)
    assert lo == 0.0
    g = geometry_curves(0.24, 0.6, 0.5)
    assert np.allclose(0.24 * g.line_x + 0.76 * g.line_y, 0.6)
    assert g.line_y.max() <= 1 + 1e-12


@pytest.mark.parametrize("alpha, budget", [(0.0, 0.5), (1.0, 0.5), (0.3, 1.5)])
def test_geometry_rejects_bad_inputs(alpha, budget):
    with pytest.raises(InvalidInputError):
        geometry_curves(alpha, budget, 0.5)
