import math

from conftest import run_oracle
from profilebench.metrics import TradeoffPoint
from profilebench.report import (
    emit_plots,
    emit_report,
    error_table,
    overall_table,
    pct,
    plot_tradeoff,
    ratio,
    tradeoff_table,
)


def test_number_formatting():
    assert pct(None) == "-" and pct(math.inf) == "inf" and pct(0.25) == "25.00"
    assert ratio(None) == "-" and ratio(math.inf) == "inf" and ratio(0.5) == "0.5000"


def test_tables_list_every_agent(small_bench):
    reports = {"perfect": run_oracle(small_bench, "perfect"), "random": run_oracle(small_bench, "random")}
    overall = overall_table(reports).splitlines()
    assert overall[0].split("\t")[0] == "agent" and overall[0].endswith("overall.F1")
    assert [line.split("\t")[0] for line in overall[1:]] == ["perfect", "random"]
    assert overall[1].split("\t")[-1] == "100.00"
    assert error_table(reports).splitlines()[1].count("0.00") >= 4
    assert tradeoff_table(reports).splitlines()[1].startswith("perfect\t")


def test_emitted_reports_are_byte_stable(small_bench, tmp_path):
    reports = {"random": run_oracle(small_bench, "random", seed=2)}
    first = [p.read_bytes() for p in emit_report(reports, tmp_path / "a") + emit_plots(reports, tmp_path / "a")]
    second = [p.read_bytes() for p in emit_report(reports, tmp_path / "b") + emit_plots(reports, tmp_path / "b")]
    assert first == second
    assert (tmp_path / "a" / "aggregate.json").exists() and (tmp_path / "a" / "tradeoff.svg").exists()


def test_tradeoff_plot_handles_infinite_ratio(tmp_path):
    points = {"a": TradeoffPoint(0.5, math.inf, 0.2), "b": TradeoffPoint(0.3, 0.4, 0.2), "c": TradeoffPoint(None, None, None)}
    path = plot_tradeoff(points, tmp_path / "t.svg")
    assert path.read_text().startswith("<?xml")
