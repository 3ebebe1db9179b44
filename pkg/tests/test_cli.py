import json
import logging

import pytest

from profilebench.cli import EXIT_DATA, EXIT_OK, EXIT_REMOTE, EXIT_USAGE, main
from profilebench.records import read_jsonl


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.yaml"
    cfg.write_text("synth: {users: 20, crowd_posts: 1500}\nplatform_overrides: {cluster_count: 40}\n")
    mp = pytest.MonkeyPatch()
    mp.setenv("PROFILEBENCH_SALT", "test-salt")
    steps = [
        ("synth", "--out", root / "syn"),
        ("ingest", "--in", root / "syn", "--out", root / "ing"),
        ("anonymize", "--in", root / "ing", "--platform", "xiaohongshu", "--out", root / "anon"),
        ("filter", "--in", root / "anon", "--platform", "xiaohongshu", "--out", root / "filt"),
        ("buffer", "--in", root / "filt", "--platform", "xiaohongshu", "--out", root / "buf"),
        ("index", "--in", root / "filt", "--platform", "xiaohongshu", "--out", root / "idx"),
        ("build-tasks", "--batches", root / "buf", "--index", root / "idx", "--filter", root / "filt",
         "--platform", "xiaohongshu", "--out", root / "tasks"),
    ]
    try:
        for step in steps:
            assert run(step[0], "--config", cfg, *step[1:]) == EXIT_OK, step[0]
    finally:
        mp.undo()
    logging.getLogger("profilebench").setLevel(logging.WARNING)
    return root


def evaluate_and_score(root, agent, tag):
    assert run("evaluate", "--tasks", root / "tasks", "--agent", agent, "--trending", root / "filt",
               "--users", root / "filt" / "users.jsonl", "--out", root / f"ev_{tag}") == EXIT_OK
    assert run("score", "--tasks", root / "tasks", "--transcript", root / f"ev_{tag}",
               "--name", agent, "--out", root / f"sc_{tag}") == EXIT_OK
    return json.loads((root / f"sc_{tag}" / "aggregate.json").read_text())[agent]


def test_perfect_agent_end_to_end(pipeline_dirs):
    agg = evaluate_and_score(pipeline_dirs, "perfect", "perfect")
    assert agg["f1_ns"] == 1.0 and agg["overall"]["R"] == 1.0
    assert agg["n_steps"] > 0


def test_anonymized_outputs_carry_no_raw_ids(pipeline_dirs):
    text = (pipeline_dirs / "anon" / "posts.jsonl").read_text(encoding="utf-8")
    assert "crowd0" not in text and '"u00' not in text
    assert "test-salt" not in "".join(p.read_text(errors="ignore") for p in (pipeline_dirs / "anon").iterdir())


def test_runs_are_byte_identical(pipeline_dirs):
    evaluate_and_score(pipeline_dirs, "random", "r1")
    evaluate_and_score(pipeline_dirs, "random", "r2")
    for name in ("transcript.jsonl",):
        assert (pipeline_dirs / "ev_r1" / name).read_bytes() == (pipeline_dirs / "ev_r2" / name).read_bytes()
    for name in ("scores.jsonl", "overall.tsv", "errors.tsv", "aggregate.json"):
        assert (pipeline_dirs / "sc_r1" / name).read_bytes() == (pipeline_dirs / "sc_r2" / name).read_bytes()


def test_rebuilding_tasks_is_deterministic(pipeline_dirs, tmp_path):
    r = pipeline_dirs
    assert run("build-tasks", "--batches", r / "buf", "--index", r / "idx", "--filter", r / "filt",
               "--platform", "xiaohongshu", "--out", tmp_path / "t2") == EXIT_OK
    for name in ("agent_view.jsonl", "answer_key.jsonl"):
        assert (tmp_path / "t2" / name).read_bytes() == (r / "tasks" / name).read_bytes()


def test_agent_view_has_no_labels(pipeline_dirs):
    for row in read_jsonl(pipeline_dirs / "tasks" / "agent_view.jsonl"):
        assert set(row) == {"user_id", "step_index", "platform", "batch", "pool", "k"}


def test_report_combines_runs(pipeline_dirs):
    evaluate_and_score(pipeline_dirs, "copy_history", "copy")
    out = pipeline_dirs / "rep"
    assert run("report", "--scores", f"perfect={pipeline_dirs / 'sc_perfect'}",
               f"copy={pipeline_dirs / 'sc_copy'}", "--out", out) == EXIT_OK
    rows = (out / "overall.tsv").read_text().splitlines()
    assert [r.split("\t")[0] for r in rows[1:]] == ["copy", "perfect"]
    assert (out / "tradeoff.svg").exists() and (out / "geometry.svg").exists()


def test_manifest_records_provenance(pipeline_dirs):
    m = json.loads((pipeline_dirs / "tasks" / "manifest.json").read_text())
    assert m["command"] == "build-tasks" and len(m["config_digest"]) == 64
    assert set(m["inputs"]) == {"batches", "index", "filter"}
    assert "agent_view.jsonl" in m["outputs"] and "manifest.json" in m["outputs"]
    assert "seed" in m["seeds"] and "profilebench" in m["versions"]
    synth = json.loads((pipeline_dirs / "syn" / "manifest.json").read_text())
    assert synth["inputs"] == {}


def test_unreachable_endpoint_exits_3_without_outputs(pipeline_dirs, tmp_path):
    cfg = tmp_path / "m.yaml"
    cfg.write_text("model: {max_retries: 0, timeout: 1}\n")
    out = tmp_path / "ev"
    code = run("evaluate", "--config", cfg, "--tasks", pipeline_dirs / "tasks", "--agent", "chat",
               "--endpoint", "http://127.0.0.1:9/v1", "--out", out)
    assert code == EXIT_REMOTE
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir()] == ["m.yaml"]


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("evaluate", "--out", tmp_path / "x")
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        run("evaluate", "--tasks", "t", "--agent", "oracle", "--out", tmp_path / "x")
    assert exc.value.code == EXIT_USAGE
    assert run("filter", "--in", tmp_path, "--out", tmp_path / "f") == EXIT_USAGE  # no platform


def test_data_errors_exit_2(tmp_path):
    assert run("ingest", "--in", tmp_path / "missing", "--out", tmp_path / "o") == EXIT_DATA
    foreign = tmp_path / "foreign"
    foreign.mkdir()
    (foreign / "keep.txt").write_text("mine")
    (tmp_path / "syn").mkdir()
    assert run("synth", "--users", 2, "--out", foreign) == EXIT_DATA
    assert (foreign / "keep.txt").read_text() == "mine"


def test_missing_salt_is_a_data_error(pipeline_dirs, tmp_path, monkeypatch):
    monkeypatch.delenv("PROFILEBENCH_SALT", raising=False)
    assert run("anonymize", "--in", pipeline_dirs / "ing", "--platform", "weibo", "--out", tmp_path / "a") == EXIT_DATA
