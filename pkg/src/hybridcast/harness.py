"""Experiment execution: run a scenario, measure it, sweep a parameter."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

from .config import ScenarioConfig, config_from_dict
from .errors import ConfigInvalidError
from .kernel import _mix
from .oracle import case_statistics, check_total_order
from .runtime import AbcastRuntime, OrderingRuntime


@dataclass
class RunMetrics:
    delivered_total: int = 0
    case1_count: int = 0
    case2_count: int = 0
    case2_rate: float = 0.0
    gmd_path_count: int = 0
    deadline_path_count: int = 0
    order_violations: int = 0
    latency_percentiles: dict = field(default_factory=dict)  # p50/p99/p999, us
    messages_per_tx_mean: float = 0.0
    rejected_requests: int = 0
    blocked_interval_us: int = 0
    insurance_D_us: int = 0
    max_server_queue: int = 0
    events_processed: int = 0
    messages_total: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    config: ScenarioConfig
    metrics: RunMetrics
    trace: object
    delivered: dict  # node -> ordered list of msg_id strings (broadcast runs)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        self.trace.write_csv(os.path.join(out_dir, "trace.csv"))
        with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
            json.dump(self.metrics.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _nearest_rank(sorted_values, q: float):
    n = len(sorted_values)
    if n == 0:
        return 0
    rank = min(max(-(-int(q * n * 10**9) // 10**9), 1), n)
    return sorted_values[rank - 1]


def latency_percentiles(latencies) -> dict:
    ordered = sorted(latencies)
    return {
        "p50_us": _nearest_rank(ordered, 0.50),
        "p99_us": _nearest_rank(ordered, 0.99),
        "p999_us": _nearest_rank(ordered, 0.999),
    }


def blocked_interval(deliveries_by_node: dict, crash_at: int,
                     duration_us: int) -> int:
    """Longest delivery drought at any operative node once the first crash
    has happened: the largest gap between consecutive deliveries, with the
    crash instant as the left edge and the end of the run as the right one."""
    worst = 0
    for times in deliveries_by_node.values():
        post = [t for t in times if t >= crash_at]
        if not post:
            worst = max(worst, duration_us - crash_at)
            continue
        edges = [crash_at] + post
        for prev, cur in zip(edges, edges[1:]):
            worst = max(worst, cur - prev)
    return worst


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    if cfg.workload.kind == "transactions":
        return _run_transactions(cfg)
    return _run_broadcast(cfg)


def _run_broadcast(cfg: ScenarioConfig) -> RunResult:
    rt = AbcastRuntime(cfg)
    events = rt.engine.run_until(cfg.duration_us)
    metrics = RunMetrics(events_processed=events,
                         messages_total=rt.messages_total)
    metrics.latency_percentiles = latency_percentiles(rt.latencies)
    metrics.insurance_D_us = rt.max_deadline_bound()
    delivered_events = sum(len(v) for v in rt.deliveries.values())
    metrics.delivered_total = delivered_events
    if rt.messages_total:
        stats = case_statistics(rt.engine.trace)
        metrics.case1_count = stats["case1_count"]
        metrics.case2_count = stats["case2_count"]
        metrics.case2_rate = stats["case2_rate"]
        metrics.gmd_path_count = stats["gmd_path_count"]
        metrics.deadline_path_count = stats["deadline_path_count"]
        metrics.order_violations = len(check_total_order(rt.engine.trace))
    if cfg.crash_schedule:
        crash_at = min(e["at_us"] for e in cfg.crash_schedule)
        crashed = {e["node"] for e in cfg.crash_schedule}
        per_node = {n: [t for t, *_ in recs]
                    for n, recs in rt.deliveries.items() if n not in crashed}
        metrics.blocked_interval_us = blocked_interval(
            per_node, crash_at, cfg.duration_us)
    return RunResult(cfg, metrics, rt.engine.trace, rt.delivered_orders())


def _run_transactions(cfg: ScenarioConfig) -> RunResult:
    rt = OrderingRuntime(cfg)
    events = rt.engine.run_until(cfg.duration_us)
    metrics = RunMetrics(events_processed=events,
                         messages_total=len(rt.txs))
    metrics.latency_percentiles = latency_percentiles(rt.latencies)
    metrics.messages_per_tx_mean = rt.messages_per_tx()
    metrics.rejected_requests = rt.rejected_requests()
    metrics.max_server_queue = rt.max_queue_len
    metrics.delivered_total = sum(
        1 for tx in rt.txs.values() if tx.done_us >= 0)
    metrics.order_violations = len(check_total_order(rt.engine.trace,
                                                     kind="EXEC"))
    return RunResult(cfg, metrics, rt.engine.trace, {})


def derive_seed(base_seed: int, index: int) -> int:
    """Documented sweep-point seed: splitmix64 of the base and the index."""
    return _mix(base_seed, 101 + index) & 0x7FFFFFFFFFFFFFFF


def _set_axis(data: dict, axis: str, value):
    parts = axis.split(".")
    target = data
    for part in parts[:-1]:
        if part not in target or not isinstance(target[part], dict):
            raise ConfigInvalidError(f"unknown sweep axis {axis!r}")
        target = target[part]
    leaf = parts[-1]
    if leaf not in target:
        raise ConfigInvalidError(f"unknown sweep axis {axis!r}")
    if not isinstance(target[leaf], (int, float)) or isinstance(target[leaf], bool):
        raise ConfigInvalidError(f"sweep axis {axis!r} is not numeric")
    target[leaf] = type(target[leaf])(value)


def sweep(cfg_template: ScenarioConfig, axis: str, values) -> list:
    """One deterministic run per axis value; returns (value, RunMetrics) rows."""
    rows = []
    base = cfg_template.to_dict()
    for i, value in enumerate(values):
        data = json.loads(json.dumps(base))  # deep copy
        _set_axis(data, axis, value)
        data["seed"] = derive_seed(cfg_template.seed, i)
        cfg = config_from_dict(data)
        result = run_scenario(cfg)
        rows.append((value, result.metrics))
    return rows


SWEEP_COLUMNS = [
    "delivered_total", "case1_count", "case2_count", "case2_rate",
    "gmd_path_count", "deadline_path_count", "order_violations",
    "messages_per_tx_mean", "rejected_requests", "blocked_interval_us",
    "insurance_D_us", "max_server_queue", "messages_total",
]


def sweep_csv_lines(axis: str, rows) -> list:
    header = [axis, "latency_p50_us", "latency_p99_us", "latency_p999_us"]
    header += SWEEP_COLUMNS
    lines = [",".join(header)]
    for value, metrics in rows:
        pct = metrics.latency_percentiles
        cells = [value, pct.get("p50_us", 0), pct.get("p99_us", 0),
                 pct.get("p999_us", 0)]
        cells += [getattr(metrics, col) for col in SWEEP_COLUMNS]
        lines.append(",".join(str(c) for c in cells))
    return lines
