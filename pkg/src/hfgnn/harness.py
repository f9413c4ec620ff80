"""Experiment execution and report files shared by the CLI subcommands."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from hfgnn.config import ExperimentConfig, emit_config
from hfgnn.errors import ConfigError
from hfgnn.federation import ExperimentResult, FlowRecord, MetricRow, mean_std, run_experiment
from hfgnn.graph import ClientDataset, Graph, generate_sbm, partition_clients
from hfgnn.seeding import derive_seed

log = logging.getLogger(__name__)

COORDINATOR = "server"
METRIC_COLUMNS = ["round", "client_id", "split", "loss", "accuracy"]
FLOW_COLUMNS = ["round", "client_id", "direction", "param_count", "strategy"]


@dataclass(frozen=True)
class FlowSnapshot:
    """Directed transfer volumes between clients and the coordinator in one round."""

    round: int
    edges: tuple[tuple[str, str, int], ...]

    @property
    def total_volume(self) -> int:
        return sum(v for _, _, v in self.edges)


def build_data(cfg: ExperimentConfig, seed: int, num_clients: int | None = None) -> tuple[Graph, list[ClientDataset]]:
    """Generate the global graph for ``seed`` and partition it."""
    K = cfg.data.num_clients if num_clients is None else num_clients
    graph = generate_sbm(cfg.data.sbm_spec(derive_seed(seed, "data")))
    clients = partition_clients(graph, K, cfg.data.alpha, derive_seed(seed, "partition"))
    return graph, clients


def _fmt(x: float) -> str:
    return f"{x:.17g}"


class _CsvSink:
    def __init__(self, path: Path, columns: list[str]):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(columns)
        self._fh.flush()

    def write(self, rows: Iterable[Sequence]) -> None:
        for row in rows:
            self._writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def run_single(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None, num_clients: int | None = None, strategy: str | None = None) -> ExperimentResult:
    """One experiment; with ``out_dir`` the metrics and flow CSVs plus the
    per-round snapshots are written there."""
    round_cfg = cfg.round if strategy is None else replace(cfg.round, strategy=strategy)
    _, clients = build_data(cfg, seed, num_clients)
    K = len(clients)
    if round_cfg.clients_per_round > K:
        round_cfg = replace(round_cfg, clients_per_round=K)
    if out_dir is None:
        return run_experiment(
            round_cfg, clients, cfg.hmm.model(), seed, drift_scale=cfg.hmm.drift_scale
        )

    out_dir.mkdir(parents=True, exist_ok=False)
    metrics = _CsvSink(out_dir / "metrics.csv", METRIC_COLUMNS)
    flows = _CsvSink(out_dir / "flows.csv", FLOW_COLUMNS)

    def on_round(t: int, rows: list[MetricRow], flow_rows: list[FlowRecord]) -> None:
        metrics.write(rows)
        flows.write(flow_rows)

    try:
        result = run_experiment(
            round_cfg,
            clients,
            cfg.hmm.model(),
            seed,
            drift_scale=cfg.hmm.drift_scale,
            on_round=on_round,
        )
    finally:
        metrics.close()
        flows.close()
    write_snapshots(build_snapshots(result.flows, range(1, round_cfg.num_rounds + 1)), out_dir / "snapshots")
    return result


def _prepare_out(path: Path) -> None:
    if path.exists() and any(path.iterdir()):
        raise ConfigError(f"output directory {path} is not empty; choose a fresh one", key="output_dir")
    path.mkdir(parents=True, exist_ok=True)


def summary_line(strategy: str, K: int, values: Sequence[float]) -> str:
    mean, std = mean_std(values)
    return f"{strategy} {K} {_fmt(mean)}±{_fmt(std)}"


def cmd_run(cfg: ExperimentConfig) -> str:
    """Run every repetition and write all outputs; returns the summary line."""
    out = Path(cfg.output_dir)
    _prepare_out(out)
    (out / "resolved.cfg").write_text(emit_config(cfg), encoding="utf-8")
    finals = []
    for rep in range(cfg.repetitions):
        seed = cfg.repetition_seed(rep)
        log.info("repetition %d (seed %d)", rep, seed)
        result = run_single(cfg, seed, out / f"rep_{rep}")
        finals.append(result.mean_test_accuracy)
    line = summary_line(cfg.round.strategy, cfg.data.num_clients, finals)
    (out / "summary.txt").write_text(line + "\n", encoding="utf-8")
    return line


@dataclass
class SuiteTable:
    strategies: list[str]
    client_counts: list[int]
    # (strategy, K) -> per-repetition mean test accuracy
    runs: dict[tuple[str, int], list[float]]

    def cell(self, strategy: str, K: int) -> tuple[float, float]:
        return mean_std(self.runs[(strategy, K)])

    def to_csv(self) -> str:
        lines = ["strategy," + ",".join(f"K={k}" for k in self.client_counts)]
        for s in self.strategies:
            cells = []
            for k in self.client_counts:
                m, sd = self.cell(s, k)
                cells.append(f"{100 * m:.2f}±{100 * sd:.2f}")
            lines.append(s + "," + ",".join(cells))
        return "\n".join(lines) + "\n"

    def to_long_csv(self) -> str:
        lines = ["strategy,K,mean,std,n"]
        for s in self.strategies:
            for k in self.client_counts:
                m, sd = self.cell(s, k)
                lines.append(f"{s},{k},{_fmt(m)},{_fmt(sd)},{len(self.runs[(s, k)])}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = ["Method"] + [f"M={k}" for k in self.client_counts]
        rows = [header]
        for s in self.strategies:
            row = [s]
            for k in self.client_counts:
                m, sd = self.cell(s, k)
                row.append(f"{100 * m:.2f}±{100 * sd:.2f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        return "\n".join(
            "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
            for r in rows
        ) + "\n"


def run_suite(cfg: ExperimentConfig) -> SuiteTable:
    """Every strategy at every client count on the same generated graphs.

    The centralised baseline does not depend on K: it runs once per
    repetition on the unpartitioned graph and its value fills every column.
    """
    strategies = list(cfg.suite_strategies)
    counts = list(cfg.suite_client_counts)
    runs: dict[tuple[str, int], list[float]] = defaultdict(list)
    for rep in range(cfg.repetitions):
        seed = cfg.repetition_seed(rep)
        for s in strategies:
            if s == "global":
                acc = run_single(cfg, seed, num_clients=1, strategy="global").mean_test_accuracy
                for k in counts:
                    runs[(s, k)].append(acc)
                continue
            for k in counts:
                log.info("suite rep %d strategy %s K=%d", rep, s, k)
                runs[(s, k)].append(run_single(cfg, seed, num_clients=k, strategy=s).mean_test_accuracy)
    return SuiteTable(strategies, counts, dict(runs))


def cmd_suite(cfg: ExperimentConfig) -> SuiteTable:
    out = Path(cfg.output_dir)
    _prepare_out(out)
    (out / "resolved.cfg").write_text(emit_config(cfg), encoding="utf-8")
    table = run_suite(cfg)
    (out / "suite.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "suite_long.csv").write_text(table.to_long_csv(), encoding="utf-8")
    (out / "suite.txt").write_text(table.to_text(), encoding="utf-8")
    return table


def read_flow_csv(path: str | Path) -> list[FlowRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FLOW_COLUMNS:
            raise ConfigError(f"{path}: expected columns {FLOW_COLUMNS}, got {reader.fieldnames}")
        return [
            FlowRecord(int(r["round"]), int(r["client_id"]), r["direction"], int(r["param_count"]), r["strategy"])
            for r in reader
        ]


def read_metrics_csv(path: str | Path) -> list[MetricRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            MetricRow(int(r["round"]), int(r["client_id"]), r["split"], float(r["loss"]), float(r["accuracy"]))
            for r in csv.DictReader(fh)
        ]


def build_snapshots(flows: Iterable[FlowRecord], rounds: Iterable[int]) -> list[FlowSnapshot]:
    """Aggregate transfer volumes per (src, dst) for each requested round."""
    volumes: dict[int, dict[tuple[str, str], int]] = defaultdict(lambda: defaultdict(int))
    for f in flows:
        client = str(f.client_id)
        if f.direction == "up":
            key = (client, COORDINATOR)
        elif f.direction == "down":
            key = (COORDINATOR, client)
        else:
            raise ConfigError(f"unknown flow direction {f.direction!r}")
        if f.param_count < 0:
            raise ConfigError("negative transfer volume in flow log")
        volumes[f.round][key] += f.param_count
    snaps = []
    for t in rounds:
        edges = sorted(volumes.get(t, {}).items(), key=lambda kv: _edge_order(kv[0]))
        snaps.append(FlowSnapshot(t, tuple((s, d, v) for (s, d), v in edges)))
    return snaps


def _edge_order(edge: tuple[str, str]) -> tuple[bool, int]:
    # uploads first, then downloads, each by client id
    src, dst = edge
    return (src == COORDINATOR, int(dst) if src == COORDINATOR else int(src))


def write_snapshots(snaps: Iterable[FlowSnapshot], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for snap in snaps:
        path = out_dir / f"snapshot_{snap.round}.txt"
        path.write_text("".join(f"{s} {d} {v}\n" for s, d, v in snap.edges), encoding="utf-8")
        paths.append(path)
    return paths


def read_snapshot(path: str | Path) -> list[tuple[str, str, int]]:
    edges = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        s, d, v = line.split()
        edges.append((s, d, int(v)))
    return edges


def cmd_snapshot(flow_csv: str | Path, rounds: Sequence[int] | None, out_dir: str | Path) -> list[Path]:
    flows = read_flow_csv(flow_csv)
    if rounds is None:
        last = max((f.round for f in flows), default=0)
        rounds = range(1, last + 1)
    return write_snapshots(build_snapshots(flows, rounds), out_dir)
