"""Report tables (TSV + JSON) and trade-off plots (SVG).

Numbers come straight from :mod:`profilebench.metrics`; this module only
formats them.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .core import AggregateReport  # noqa: E402
from .metrics import TradeoffPoint, geometry_curves  # noqa: E402
from .records import write_text  # noqa: E402

DEFAULT_ALPHA = 0.24
DEFAULT_F1_LEVELS = (0.3, 0.5, 0.7)

ERROR_METRICS = ("E_decay", "E_peer", "E_viral", "E_random")


def pct(value: Optional[float]) -> str:
    """Percentage with two decimals; ``-`` when undefined, ``inf`` for infinity."""
    if value is None:
        return "-"
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return f"{100 * float(value):.2f}"


def ratio(value: Optional[float]) -> str:
    if value is None:
        return "-"
    if math.isinf(value):
        return "inf"
    return f"{float(value):.4f}"


def _tsv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    return "\n".join("\t".join(r) for r in [list(header), *rows]) + "\n"


def _platforms(reports: Mapping[str, AggregateReport]) -> list[str]:
    return sorted({p for rep in reports.values() for p in rep.per_platform})


def overall_table(reports: Mapping[str, AggregateReport]) -> str:
    """Per platform R and F1, then the average R and the overall F1."""
    platforms = _platforms(reports)
    header = ["agent"]
    for p in platforms:
        header += [f"{p}.R", f"{p}.F1"]
    header += ["avg.R", "overall.F1"]
    rows = []
    for agent, rep in sorted(reports.items()):
        row = [agent]
        for p in platforms:
            agg = rep.per_platform.get(p)
            row += [pct(agg.metrics["R"]) if agg else "-", pct(agg.f1_ns) if agg else "-"]
        row += [pct(rep.overall["R"]), pct(rep.f1_ns)]
        rows.append(row)
    return _tsv(header, rows)


def recall_table(reports: Mapping[str, AggregateReport]) -> str:
    platforms = _platforms(reports)
    header = ["agent"]
    for p in platforms:
        header += [f"{p}.R_stab", f"{p}.R_nov"]
    header += ["avg.R_stab", "avg.R_nov", "overall.F1"]
    rows = []
    for agent, rep in sorted(reports.items()):
        row = [agent]
        for p in platforms:
            agg = rep.per_platform.get(p)
            row += [pct(agg.metrics["R_stab"]) if agg else "-", pct(agg.metrics["R_nov"]) if agg else "-"]
        row += [pct(rep.overall["R_stab"]), pct(rep.overall["R_nov"]), pct(rep.f1_ns)]
        rows.append(row)
    return _tsv(header, rows)


def error_table(reports: Mapping[str, AggregateReport]) -> str:
    platforms = _platforms(reports)
    header = ["agent"]
    for p in platforms + ["avg"]:
        header += [f"{p}.{m}" for m in ERROR_METRICS]
    rows = []
    for agent, rep in sorted(reports.items()):
        row = [agent]
        for p in platforms:
            agg = rep.per_platform.get(p)
            row += [pct(agg.metrics[m]) if agg else "-" for m in ERROR_METRICS]
        row += [pct(rep.overall[m]) for m in ERROR_METRICS]
        rows.append(row)
    return _tsv(header, rows)


def tradeoff_table(reports: Mapping[str, AggregateReport]) -> str:
    header = ["agent", "alpha", "B", "rho"]
    rows = [
        [agent, pct(rep.overall["alpha"]), pct(rep.budget), ratio(rep.rho)]
        for agent, rep in sorted(reports.items())
    ]
    return _tsv(header, rows)


def report_to_json(rep: AggregateReport) -> dict:
    def num(v):
        if v is None:
            return None
        v = float(v)
        return "inf" if math.isinf(v) else v

    return {
        "overall": {k: num(v) for k, v in rep.overall.items()},
        "f1_ns": num(rep.f1_ns),
        "budget": num(rep.budget),
        "rho": num(rep.rho),
        "n_users": rep.n_users,
        "n_steps": rep.n_steps,
        "per_platform": {
            p: {
                "metrics": {k: num(v) for k, v in agg.metrics.items()},
                "f1_ns": num(agg.f1_ns),
                "budget": num(agg.budget),
                "rho": num(agg.rho),
                "n_users": agg.n_users,
                "n_steps": agg.n_steps,
            }
            for p, agg in sorted(rep.per_platform.items())
        },
    }


def emit_report(reports: Mapping[str, AggregateReport], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    files = {
        "overall.tsv": overall_table(reports),
        "recalls.tsv": recall_table(reports),
        "errors.tsv": error_table(reports),
        "tradeoff.tsv": tradeoff_table(reports),
        "aggregate.json": json.dumps(
            {a: report_to_json(r) for a, r in sorted(reports.items())}, indent=2, sort_keys=True
        ) + "\n",
    }
    paths = []
    for name, text in files.items():
        write_text(out / name, text)
        paths.append(out / name)
    return paths


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def _save_svg(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "profilebench", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_tradeoff(points: Mapping[str, TradeoffPoint], path: str | Path) -> Path:
    """Agents in the (budget, ratio) plane; infinite ratios sit on the top edge."""
    if not points:
        raise ValueError("need at least one point")
    finite = [float(p.rho) for p in points.values() if p.rho is not None and not math.isinf(p.rho)]
    top = max([1.0, *finite]) * 1.1
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, p in sorted(points.items()):
        if p.budget is None or p.rho is None:
            continue
        if math.isinf(p.rho):
            ax.scatter([float(p.budget)], [top], marker="^", color="tab:red")
        else:
            ax.scatter([float(p.budget)], [float(p.rho)], color="tab:blue")
        y = top if math.isinf(p.rho) else float(p.rho)
        ax.annotate(name, (float(p.budget), y), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.axhline(1.0, color="grey", linewidth=0.5, linestyle="--")
    ax.set_xlim(0, 1.05)
    ax.set_ylim(0, top * 1.05)
    ax.set_xlabel("budget B = 1 - delta/K")
    ax.set_ylabel("recall ratio R_nov / R_stab")
    path = Path(path)
    _save_svg(fig, path)
    return path


def plot_geometry(
    budgets: Mapping[str, float],
    path: str | Path,
    alpha: float = DEFAULT_ALPHA,
    f1_levels: Sequence[float] = DEFAULT_F1_LEVELS,
    recalls: Optional[Mapping[str, tuple[float, float]]] = None,
) -> Path:
    """Constraint lines per agent and iso-F1 contours in the (R_stab, R_nov) plane."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for level in f1_levels:
        curves = geometry_curves(alpha, 1.0, level)
        ax.plot(curves.iso_x, curves.iso_y, color="grey", linewidth=0.6, linestyle=":")
        ax.annotate(f"F1={level:g}", (level, level), fontsize=6)
    for name, budget in sorted(budgets.items()):
        curves = geometry_curves(alpha, min(1.0, max(0.0, float(budget))), f1_levels[0] if f1_levels else 0.5)
        ax.plot(curves.line_x, curves.line_y, linewidth=1.0, label=name)
    for name, (x, y) in sorted((recalls or {}).items()):
        ax.scatter([x], [y], s=12)
    ax.plot([0, 1], [0, 1], color="black", linewidth=0.3)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("R_stab")
    ax.set_ylabel("R_nov")
    if budgets:
        ax.legend(fontsize=6)
    path = Path(path)
    _save_svg(fig, path)
    return path


def emit_plots(
    reports: Mapping[str, AggregateReport],
    out_dir: str | Path,
    alpha: float = DEFAULT_ALPHA,
    f1_levels: Sequence[float] = DEFAULT_F1_LEVELS,
) -> list[Path]:
    out = Path(out_dir)
    points = {
        a: TradeoffPoint(budget=r.budget, rho=r.rho, alpha=r.overall.get("alpha"))
        for a, r in reports.items()
    }
    budgets = {a: r.budget for a, r in reports.items() if r.budget is not None}
    recalls = {
        a: (r.overall["R_stab"], r.overall["R_nov"])
        for a, r in reports.items()
        if r.overall["R_stab"] is not None and r.overall["R_nov"] is not None
    }
    return [
        plot_tradeoff(points, out / "tradeoff.svg"),
        plot_geometry(budgets, out / "geometry.svg", alpha, f1_levels, recalls),
    ]
