"""Append-only run trace: the audit record every oracle consumes.

CSV format: ``sim_time_us,node,event_kind,msg_id,detail``.  The detail
column is a ``key=value`` list joined with ``;`` so the line itself stays
comma-free.  Seen-vectors use ``sender:seq`` pairs joined with ``|``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .errors import IncompleteTraceError

TRACE_HEADER = "sim_time_us,node,event_kind,msg_id,detail"


@dataclass(frozen=True)
class TraceRecord:
    sim_time_us: int
    node: int
    event_kind: str
    msg_id: str
    detail: str

    def detail_dict(self) -> dict:
        out = {}
        if self.detail:
            for part in self.detail.split(";"):
                if "=" in part:
                    k, v = part.split("=", 1)
                    out[k] = v
        return out


def format_detail(**kv) -> str:
    return ";".join(f"{k}={v}" for k, v in kv.items() if v is not None)


def format_seen(seen: dict) -> str:
    return "|".join(f"{s}:{q}" for s, q in sorted(seen.items()))


def parse_seen(text: str) -> dict:
    seen = {}
    if text:
        for part in text.split("|"):
            s, q = part.split(":")
            seen[int(s)] = int(q)
    return seen


class Trace:
    """In-memory list of trace records, flushed to CSV at run end."""

    def __init__(self):
        self.records: list[TraceRecord] = []

    def add(self, sim_time_us: int, node: int, kind: str, msg_id: str = "",
            detail: str = ""):
        self.records.append(TraceRecord(sim_time_us, node, kind, msg_id, detail))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def of_kind(self, kind: str) -> Iterable[TraceRecord]:
        return (r for r in self.records if r.event_kind == kind)

    def to_csv_lines(self) -> list[str]:
        lines = [TRACE_HEADER]
        lines.extend(
            f"{r.sim_time_us},{r.node},{r.event_kind},{r.msg_id},{r.detail}"
            for r in self.records
        )
        return lines

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_csv_lines()))
            fh.write("\n")

    @classmethod
    def read_csv(cls, path) -> "Trace":
        trace = cls()
        with open(path) as fh:
            header = fh.readline().strip()
            if header != TRACE_HEADER:
                raise IncompleteTraceError(f"unexpected trace header: {header!r}")
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                t, node, kind, msg_id, detail = line.split(",", 4)
                trace.records.append(
                    TraceRecord(int(t), int(node), kind, msg_id, detail))
        return trace
