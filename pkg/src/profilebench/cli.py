"""``profilebench`` command line: one subcommand per pipeline stage.

Stages talk through files; each output directory gets a ``manifest.json``.
Outputs are staged in a temporary sibling directory and renamed into place
only when the command succeeds.

Exit codes: 0 ok, 1 usage, 2 data error, 3 remote failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import replace
from datetime import date
from fractions import Fraction
from importlib import metadata
from pathlib import Path
from typing import Iterator, Optional, Sequence

import yaml

from . import anchors, index as idx, pipeline
from .buffer import BufferState, BufferStore, BufferStoreError, drain, push, stream_batches
from .core import InvalidInputError, PlatformProfile, get_platform
from .harness import (
    ChatAgent,
    RunMode,
    granularity_profile,
    prediction_from_record,
    run_benchmark,
    timing_record,
    transcript_record,
)
from .ingest import load_user_stream
from .llm import AuthError, ChatClient, ModelClientConfig, RemoteError, RemoteUnavailableError
from .metrics import ScoredStep, aggregate, score_step
from .privacy import ChatSpanDetector, HashConfig, RuleSpanDetector, anonymize_corpus
from .records import (
    batch_from_record,
    batch_to_record,
    dumps,
    post_from_record,
    post_to_record,
    read_jsonl,
    user_from_record,
    user_to_record,
    write_jsonl,
    write_text,
)
from .report import emit_plots, emit_report
from .synth import DriftConfig, OracleAgent, OracleKind, generate_stream
from .tasks import TaskBuildConfig, agent_view_record, answer_key_record, build_user_tasks, join_task_files

logger = logging.getLogger("profilebench")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_REMOTE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Plumbing
# ---------------------------------------------------------------------------


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise InvalidInputError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise InvalidInputError(f"config {path} must be a mapping")
    return data


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(dumps(cfg).encode("utf-8")).hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@contextmanager
def staged_output(out: Path) -> Iterator[Path]:
    """Yield a temp dir; on success it replaces ``out``, on failure it vanishes."""
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not (out / "manifest.json").exists():
        raise InvalidInputError(f"{out} exists and was not written by this tool; refusing to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        old = out.with_name(f".{out.name}.old")
        shutil.rmtree(old, ignore_errors=True)
        out.rename(old)
        tmp.rename(out)
        shutil.rmtree(old, ignore_errors=True)
    else:
        tmp.rename(out)


def write_manifest(out: Path, args: argparse.Namespace, cfg: dict, inputs: dict, started: float, **extra) -> None:
    manifest = {
        "command": args.command,
        "config_digest": config_digest(cfg),
        "seeds": extra.pop("seeds", {"seed": effective_seed(args, cfg)}),
        "mode": extra.pop("mode", None),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(p.name for p in out.iterdir()) + ["manifest.json"],
        "versions": {"profilebench": _version(), "python": sys.version.split()[0]},
        "wall_clock_s": round(time.monotonic() - started, 3),
        **extra,
    }
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def effective_seed(args: argparse.Namespace, cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def resolve_profile(args: argparse.Namespace, cfg: dict) -> PlatformProfile:
    name = args.platform or cfg.get("platform")
    if not name:
        raise UsageError("--platform is required (or set 'platform' in the config)")
    profile = get_platform(name)
    overrides = dict(cfg.get("platform_overrides") or {})
    if getattr(args, "clusters", None):
        overrides["cluster_count"] = args.clusters
    if overrides:
        try:
            profile = replace(profile, **overrides)
        except TypeError as exc:
            raise InvalidInputError(f"bad platform_overrides: {exc}") from None
    return profile


def read_posts(path: Path) -> list:
    return [post_from_record(r) for r in read_jsonl(path)]


def read_users(path: Path) -> list:
    return [user_from_record(r) for r in read_jsonl(path)] if path.exists() else []


def filter_rules(cfg: dict) -> anchors.FilterRules:
    raw = dict(cfg.get("filter") or {})
    raw.pop("strata", None)
    for key in ("content_blacklist",):
        if key in raw:
            raw[key] = tuple(raw[key])
    if "account_rules" in raw:
        raw["account_rules"] = tuple(
            anchors.KeywordRule(r["name"], tuple(r["keywords"]), r.get("max_fraction", 0.5))
            for r in raw["account_rules"]
        )
    try:
        return anchors.FilterRules(**raw)
    except TypeError as exc:
        raise InvalidInputError(f"bad filter config: {exc}") from None


def strata_config(cfg: dict, profile: PlatformProfile) -> anchors.StrataConfig:
    name = (cfg.get("filter") or {}).get("strata", "all")
    if name == "platform":
        name = profile.platform_id
    try:
        return anchors.STRATA_PRESETS[name]
    except KeyError:
        raise InvalidInputError(f"unknown strata preset {name!r}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg, out: Path) -> dict:
    data = dict(cfg.get("synth") or {})
    if args.seed is not None:
        data["seed"] = args.seed
    if args.users is not None:
        data["users"] = args.users
    drift = DriftConfig.from_mapping(data)
    corpus = generate_stream(drift)
    write_jsonl(out / "users.jsonl", [user_to_record(u) for u in corpus.users])
    write_jsonl(out / "posts.jsonl", [post_to_record(p) for p in corpus.posts])
    return {"seeds": {"seed": drift.seed}, "mode": {"platform": drift.platform}, "counts": {"users": len(corpus.users), "posts": len(corpus.posts)}}


def cmd_ingest(args, cfg, out: Path) -> dict:
    src = Path(args.input)
    users_path = src / "users.jsonl"
    result = load_user_stream(src / "posts.jsonl", users_path if users_path.exists() else None)
    write_jsonl(out / "users.jsonl", [user_to_record(m) for m, _ in result])
    write_jsonl(out / "posts.jsonl", [post_to_record(p) for _, posts in result for p in posts])
    write_jsonl(out / "errors.jsonl", [{"path": e.path, "line": e.line, "message": e.message} for e in result.errors])
    if result.errors:
        logger.warning("%d malformed line(s); see errors.jsonl", len(result.errors))
    return {"counts": {"users": len(result), "posts": result.n_posts, "errors": len(result.errors)}}


def cmd_anonymize(args, cfg, out: Path) -> dict:
    src = Path(args.input)
    profile = resolve_profile(args, cfg)
    hash_cfg = HashConfig.from_env(profile.code)
    users_path = src / "users.jsonl"
    result = load_user_stream(src / "posts.jsonl", users_path if users_path.exists() else None)
    detector = RuleSpanDetector()
    if args.endpoint:
        detector = ChatSpanDetector(ChatClient(_model_config(args, cfg)))
    anon = anonymize_corpus(result, hash_cfg, detector)
    write_jsonl(out / "users.jsonl", anon.users)
    write_jsonl(out / "posts.jsonl", anon.posts)
    write_jsonl(out / "rejected.jsonl", anon.rejected)
    return {
        "mode": {"detector": "chat" if args.endpoint else "rules"},
        "counts": {"users": len(anon.users), "posts": len(anon.posts), "rejected": len(anon.rejected),
                   "degraded": anon.degraded_records},
    }


def cmd_filter(args, cfg, out: Path) -> dict:
    src = Path(args.input)
    profile = resolve_profile(args, cfg)
    rules = filter_rules(cfg)
    seed = effective_seed(args, cfg)
    posts = read_posts(src / "posts.jsonl")
    users = read_users(src / "users.jsonl")
    by_user = pipeline.annotate_corpus(pipeline.group_by_user(posts), profile)
    all_posts = [p for plist in by_user.values() for p in plist]
    tables = pipeline.trending_tables(all_posts, window_days=int(cfg.get("trending_window", 1)), seed=seed)
    blacklist: set[str] = set()
    if profile.use_blacklist:
        tau = Fraction(str(cfg.get("tau", idx.DEFAULT_TAU)))
        blacklist = pipeline.dynamic_blacklist(tables, tau)
        by_user = pipeline.strip_blacklisted(by_user, blacklist)
    curated, report = pipeline.curate(by_user, profile, rules=rules, strata=strata_config(cfg, profile), seed=seed)
    write_jsonl(out / "annotated.jsonl", [post_to_record(p) for u in sorted(by_user) for p in by_user[u]])
    write_jsonl(out / "posts.jsonl", [post_to_record(p) for u in sorted(curated) for p in curated[u]])
    write_jsonl(out / "users.jsonl", [user_to_record(m) for m in users if m.user_id in curated])
    for day, table in sorted(tables.items()):
        idx.write_trending_table(out / "trending" / f"{day.isoformat()}.tsv", table)
    write_text(out / "blacklist.txt", "".join(f"{t}\n" for t in sorted(blacklist)))
    return {
        "mode": {"platform": profile.platform_id},
        "counts": {"users_in": report.n_users_in, "users_kept": len(curated)},
        "dropped_days": dict(sorted(report.dropped_days.items())),
    }


def _by_day(posts):
    days: dict = {}
    for p in posts:
        days.setdefault(p.timestamp.date(), []).append(p)
    return [days[d] for d in sorted(days)]


def cmd_buffer(args, cfg, out: Path) -> dict:
    src = Path(args.input)
    profile = granularity_profile(resolve_profile(args, cfg), args.granularity)
    rules = filter_rules(cfg)
    by_user = pipeline.group_by_user(read_posts(src / "posts.jsonl"))
    states: dict[str, BufferState] = {}
    if args.resume:
        states = BufferStore(args.resume).restore()
    batches = []
    for user, posts in sorted(by_user.items()):
        if user in states:
            state, emitted = states[user], []
            for day_posts in _by_day(posts):
                state = push(state, day_posts, profile, rules=rules)
                state, out_batches = drain(state, profile)
                emitted.extend(out_batches)
        else:
            emitted, state = stream_batches(user, posts, profile, rules=rules)
        states[user] = state
        batches.extend(emitted)
    write_jsonl(out / "batches.jsonl", [batch_to_record(b) for b in batches])
    BufferStore(out / "buffer.sqlite").persist(states)
    return {
        "mode": {"granularity": args.granularity, "trigger": profile.buffer_trigger, "cap": profile.buffer_cap},
        "counts": {"batches": len(batches), "users": len({b.user_id for b in batches})},
    }


def cmd_index(args, cfg, out: Path) -> dict:
    src = Path(args.input)
    profile = resolve_profile(args, cfg)
    posts = read_posts(src / "annotated.jsonl")
    registry = pipeline.build_registry(posts)
    kmeans = dict(cfg.get("kmeans") or {})
    index = idx.build_index(
        registry, idx.HashingEmbedder(seed=effective_seed(args, cfg)), profile, seed=effective_seed(args, cfg),
        warmup_days=int(cfg.get("warmup_days", 10)),
        outlier_threshold=float(cfg.get("outlier_threshold", idx.DEFAULT_OUTLIER_THRESHOLD)),
        **kmeans,
    )
    index.save(out / "index.npz")
    return {
        "mode": {"platform": profile.platform_id, "clusters": index.k},
        "counts": {"tags": len(index.assignment), "outliers": len(index.outliers)},
    }


def _load_tables(filter_dir: Path) -> dict[date, idx.TrendingTable]:
    tables = {}
    for path in sorted((filter_dir / "trending").glob("*.tsv")):
        table = idx.read_trending_table(path)
        tables[table.day or date.fromisoformat(path.stem)] = table
    return tables


def cmd_build_tasks(args, cfg, out: Path) -> dict:
    profile = resolve_profile(args, cfg)
    filter_dir = Path(args.filter)
    index = idx.ClusterIndex.load(Path(args.index) / "index.npz")
    tables = _load_tables(filter_dir)
    blacklist = (filter_dir / "blacklist.txt").read_text(encoding="utf-8").split()
    sources = pipeline.make_sources(index, tables, index.registry, blacklist)
    batches: dict[str, list] = {}
    for rec in read_jsonl(Path(args.batches) / "batches.jsonl"):
        b = batch_from_record(rec)
        batches.setdefault(b.user_id, []).append(b)
    tcfg = TaskBuildConfig(seed=effective_seed(args, cfg), max_positives=int(cfg.get("max_positives", 12)))
    tasks = []
    for user in sorted(batches):
        tasks.extend(build_user_tasks(batches[user], sources, tcfg, profile.platform_id))
    write_jsonl(out / "agent_view.jsonl", [agent_view_record(t) for t in tasks])
    write_jsonl(out / "answer_key.jsonl", [answer_key_record(t) for t in tasks])
    return {"counts": {"tasks": len(tasks), "users": len({t.user_id for t in tasks})}}


def _model_config(args, cfg) -> ModelClientConfig:
    raw = dict(cfg.get("model") or {})
    if getattr(args, "endpoint", None):
        raw["endpoint"] = args.endpoint
    if getattr(args, "model", None):
        raw["model"] = args.model
    try:
        return ModelClientConfig(**raw)
    except TypeError as exc:
        raise InvalidInputError(f"bad model config: {exc}") from None


def load_tasks(task_dir: Path) -> list:
    return join_task_files(read_jsonl(task_dir / "agent_view.jsonl"), read_jsonl(task_dir / "answer_key.jsonl"))


def cmd_evaluate(args, cfg, out: Path) -> dict:
    task_dir = Path(args.tasks)
    tasks = load_tasks(task_dir)
    users = {}
    if args.users:
        users = {u.user_id: u for u in read_users(Path(args.users))}
    mode = RunMode(persona=args.persona, history=args.history)
    if args.agent == "chat":
        client = ChatClient(_model_config(args, cfg))
        agent = ChatAgent(client)
        workers = client.cfg.max_in_flight
    else:
        coverage = {}
        if args.trending:
            tables = _load_tables(Path(args.trending))
            if tables:
                coverage = tables[max(tables)].coverage()
        answer_key = {(t.user_id, t.step_index): t.positives for t in tasks}
        agent = OracleAgent(args.agent, answer_key=answer_key, coverage=coverage, seed=effective_seed(args, cfg))
        workers = 1
    records = run_benchmark(tasks, agent, mode, users, max_workers=workers)
    write_jsonl(out / "transcript.jsonl", [transcript_record(r) for r in records])
    write_jsonl(out / "timings.jsonl", [timing_record(r) for r in records])
    failed = sum(r.prediction.failed for r in records)
    return {
        "mode": {"agent": args.agent, "persona": mode.persona, "history": mode.history},
        "counts": {"steps": len(records), "failed": failed},
    }


def cmd_score(args, cfg, out: Path) -> dict:
    tasks = {(t.user_id, t.step_index): t for t in load_tasks(Path(args.tasks))}
    scored = []
    rows = []
    for rec in read_jsonl(Path(args.transcript) / "transcript.jsonl"):
        task = tasks.get((rec["user_id"], rec["step_index"]))
        if task is None:
            raise InvalidInputError(f"transcript row {rec['user_id']}/{rec['step_index']} has no task")
        s = score_step(task, prediction_from_record(rec["prediction"]))
        scored.append(ScoredStep(task.platform, task.user_id, task.step_index, s))
        rows.append(_score_row(task.platform, task.user_id, task.step_index, s))
    if not scored:
        raise InvalidInputError("transcript is empty")
    write_jsonl(out / "scores.jsonl", rows)
    rep = aggregate(scored)
    emit_report({args.name: rep}, out)
    return {"counts": {"steps": len(scored), "users": rep.n_users}}


def _frac(v) -> Optional[str]:
    return None if v is None else f"{v.numerator}/{v.denominator}"


def _score_row(platform: str, user: str, step: int, s) -> dict:
    return {
        "platform": platform, "user_id": user, "step_index": step,
        "R": _frac(s.recall), "R_stab": _frac(s.recall_stab), "R_nov": _frac(s.recall_nov),
        "E_decay": _frac(s.err_decay), "E_peer": _frac(s.err_peer),
        "E_viral": _frac(s.err_viral), "E_random": _frac(s.err_random),
        "alpha": _frac(s.alpha), "delta": s.delta, "delta_gt": s.delta_gt, "k": s.k,
        "out_of_pool": s.out_of_pool, "failed": s.failed,
    }


def _score_from_row(row: dict):
    from .core import StepScore

    def f(v):
        return None if v is None else Fraction(v)

    return StepScore(
        recall=f(row["R"]), recall_stab=f(row["R_stab"]), recall_nov=f(row["R_nov"]),
        delta=int(row["delta"]), delta_gt=int(row["delta_gt"]),
        err_decay=f(row["E_decay"]), err_peer=f(row["E_peer"]),
        err_viral=f(row["E_viral"]), err_random=f(row["E_random"]),
        alpha=f(row["alpha"]), k=int(row["k"]), out_of_pool=int(row.get("out_of_pool", 0)),
        failed=bool(row.get("failed", False)),
    )


def cmd_report(args, cfg, out: Path) -> dict:
    reports = {}
    for spec in args.scores:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).name, spec
        steps = [
            ScoredStep(r["platform"], r["user_id"], int(r["step_index"]), _score_from_row(r))
            for r in read_jsonl(Path(path) / "scores.jsonl")
        ]
        reports[name] = aggregate(steps)
    emit_report(reports, out)
    plot = dict(cfg.get("plots") or {})
    emit_plots(
        reports, out,
        alpha=float(args.alpha if args.alpha is not None else plot.get("alpha", 0.24)),
        f1_levels=tuple(plot.get("f1_levels", (0.3, 0.5, 0.7))),
    )
    return {"counts": {"agents": len(reports)}}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "anonymize": cmd_anonymize,
    "filter": cmd_filter,
    "buffer": cmd_buffer,
    "index": cmd_index,
    "build-tasks": cmd_build_tasks,
    "evaluate": cmd_evaluate,
    "score": cmd_score,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="profilebench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = add("synth", "generate a synthetic corpus")
    p.add_argument("--users", type=int)

    for name, help_text in (("ingest", "normalize and group raw line files"),
                            ("anonymize", "hash identifiers and redact personal information")):
        p = add(name, help_text)
        p.add_argument("--in", dest="input", required=True, help="directory with posts.jsonl/users.jsonl")
        if name == "anonymize":
            p.add_argument("--platform")
            p.add_argument("--endpoint", help="chat endpoint for span detection (default: rules only)")
            p.add_argument("--model")

    p = add("filter", "extract anchors, trending tables, daily and longitudinal filters")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--platform")

    p = add("buffer", "slice each user's stream into batches")
    p.add_argument("--in", dest="input", required=True, help="filter output directory")
    p.add_argument("--platform")
    p.add_argument("--granularity", choices=("fine", "default", "coarse"), default="default")
    p.add_argument("--resume", help="existing buffer store to continue from")

    p = add("index", "cluster the tag registry")
    p.add_argument("--in", dest="input", required=True, help="filter output directory")
    p.add_argument("--platform")
    p.add_argument("--clusters", type=int, help="override the cluster count")

    p = add("build-tasks", "assemble per-step tasks")
    p.add_argument("--batches", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--filter", required=True)
    p.add_argument("--platform")

    p = add("evaluate", "run an agent over the tasks")
    p.add_argument("--tasks", required=True)
    p.add_argument("--agent", required=True, choices=[k.value for k in OracleKind] + ["chat"])
    p.add_argument("--users", help="users.jsonl for the static profile block")
    p.add_argument("--trending", help="filter output directory (popularity oracle)")
    p.add_argument("--persona", choices=("full", "none"), default="full")
    p.add_argument("--history", choices=("streaming", "long_context"), default="streaming")
    p.add_argument("--endpoint")
    p.add_argument("--model")

    p = add("score", "score a transcript")
    p.add_argument("--tasks", required=True)
    p.add_argument("--transcript", required=True)
    p.add_argument("--name", default="agent")

    p = add("report", "combine scored runs into tables and plots")
    p.add_argument("--scores", nargs="+", required=True, help="NAME=DIR pairs of score outputs")
    p.add_argument("--alpha", type=float)
    return parser


INPUT_ARGS = ("input", "tasks", "transcript", "batches", "index", "filter", "users", "trending", "resume")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    started = time.monotonic()
    try:
        cfg = load_config(args.config)
        inputs = {k: v for k, v in vars(args).items() if k in INPUT_ARGS and isinstance(v, str)}
        with staged_output(Path(args.out)) as tmp:
            extra = COMMANDS[args.command](args, cfg, tmp)
            write_manifest(tmp, args, cfg, inputs, started, **extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"profilebench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AuthError, RemoteUnavailableError) as exc:
        print(f"profilebench: remote failure: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except RemoteError as exc:
        print(f"profilebench: remote failure: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except (InvalidInputError, BufferStoreError, KeyError, ValueError, OSError) as exc:
        print(f"profilebench: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
