from __future__ import annotations

import logging
from dataclasses import replace
from datetime import datetime, timedelta, timezone

import pytest

from profilebench.core import Post, StreamBatch, get_platform
from profilebench.harness import run_benchmark, score_records
from profilebench.metrics import aggregate
from profilebench.pipeline import build_benchmark
from profilebench.synth import DriftConfig, OracleAgent, generate_stream
from profilebench.tasks import DistractorSources, TaskBuildConfig, build_step_task

T0 = datetime(2025, 6, 1, 8, 0, tzinfo=timezone.utc)


def make_post(i: int, user: str = "u1", *, minutes: int | None = None, content: str = "",
              anchors: tuple[str, ...] = (), **kw) -> Post:
    ts = T0 + timedelta(minutes=10 * i if minutes is None else minutes)
    text = content or f"今天记录一下第{i}条日常，和朋友一起去了新的地方，感觉很不错"
    return Post(post_id=f"{user}-p{i}", user_id=user, timestamp=ts, content=text, anchors=anchors, **kw)


def make_batch(user: str, step: int, posts: list[Post]) -> StreamBatch:
    anchors: list[str] = []
    for p in posts:
        for a in p.anchors:
            if a not in anchors:
                anchors.append(a)
    return StreamBatch(user, step, tuple(posts), tuple(anchors), (posts[0].timestamp, posts[-1].timestamp),
                       valid_count=len(posts))


# ---------------------------------------------------------------------------
# Walk-through step: one Xiaohongshu user, batch 1 -> batch 2
# ---------------------------------------------------------------------------

SKINCARE = ("黄黑皮爆改", "美白水乳", "熬夜水乳", "HBN", "茶漾虾青素水乳", "女大学生水乳推荐", "我的好物分享")
STUDY = ("学习", "研二", "研究生", "计划赶不上变化系列", "期待下一个假期")
KEEP = ("研究生", "研二", "学习")
NEW = ("毕业是一场巨大的戒断", "毕业生", "奖学金", "找实习")
DECAY = SKINCARE + ("计划赶不上变化系列", "期待下一个假期")
PEERS = ("26口腔考研", "工作台", "学历歧视", "毕业礼物创意")
VIRAL = ("立白", "清洁护理", "身体放松舒缓")
RANDOM = ("申鹤", "无印良品穿搭", "身体与心理", "英签攻略", "山东红色文化")


def golden_batches() -> tuple[StreamBatch, StreamBatch]:
    user = "XHS_a3f7b2e9d1"
    b1 = [
        make_post(1, user, content="这俩到底啥原理？？？ 水乳测评", anchors=SKINCARE),
        make_post(2, user, content="如何分配研二的时间？ 考公、论文、玩"),
        make_post(3, user, content="本科毕业了"),
        make_post(4, user, content="速算真的是越练越快"),
        make_post(5, user, content="假期倒计时19天，最后的挣扎，制定小小计划", anchors=STUDY),
        make_post(6, user, content="很潇洒地玩了4小时麻将，看了2小时影视剪辑"),
    ]
    b2 = [
        make_post(10, user, content="研二下学期的安排", anchors=("研究生", "研二", "学习")),
        make_post(11, user, content="毕业季的心情", anchors=("毕业是一场巨大的戒断", "毕业生")),
        make_post(12, user, content="奖学金和实习", anchors=("奖学金", "找实习")),
        make_post(13, user, content="继续努力"),
        make_post(14, user, content="周末休息"),
    ]
    return make_batch(user, 1, b1), make_batch(user, 2, b2)


def golden_sources() -> DistractorSources:
    clusters = {}
    for i, t in enumerate(KEEP + NEW + DECAY):
        clusters[t] = i % 4  # user clusters 0..3
    for t in PEERS:
        clusters[t] = 0
    for i, t in enumerate(VIRAL):
        clusters[t] = 10 + i
    clusters["考研加油"] = 1  # trending but in a user cluster -> not viral
    peer_map = {"研究生": PEERS[:2], "毕业生": PEERS[2:], "学习": ("工作台",)}
    return DistractorSources(
        peers=lambda t: peer_map.get(t, ()),
        cluster_of=clusters.get,
        trending=lambda _day: ("考研加油",) + VIRAL + ("研二",),
        global_pool=KEEP + NEW + DECAY + PEERS + VIRAL + RANDOM,
    )


@pytest.fixture
def golden_task():
    b1, b2 = golden_batches()
    task = build_step_task([b1], b2, golden_sources(), TaskBuildConfig(seed=7), platform="xiaohongshu")
    assert task is not None
    return task


# ---------------------------------------------------------------------------
# Synthetic benchmarks
# ---------------------------------------------------------------------------


def synth_benchmark(cfg: DriftConfig, seed: int = 0):
    corpus = generate_stream(cfg)
    profile = replace(get_platform(cfg.platform), cluster_count=cfg.clusters[0])
    return build_benchmark(corpus.posts, corpus.users, profile, seed=seed)


@pytest.fixture(scope="session")
def small_bench():
    logging.getLogger("profilebench").setLevel(logging.WARNING)
    return synth_benchmark(DriftConfig(seed=3, users=24, crowd_posts=1500))


def run_oracle(bench, kind: str, seed: int = 0, **run_kw):
    """Aggregate report of one oracle over a built benchmark."""
    agent = OracleAgent(kind, answer_key=bench.answer_key(), coverage=bench.coverage(), seed=seed)
    return aggregate(score_records(run_benchmark(bench.tasks, agent, **run_kw)))


# ---------------------------------------------------------------------------
# Acceptance verdict lines
# ---------------------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_verdict(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
