"""External transaction-ordering service and its client-side logic.

Dedicated servers hand out dense global order numbers.  Each response
also carries, per participant, a short history of the transactions that
precede the new one at that participant, which lets a participant start
a transaction without waiting for ordering news about transactions that
cannot precede it (the cascaded-waiting defeat).  Admission is a plain
token bucket per server.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

from .errors import UnknownTransactionError

ADMIT = "ADMIT"
REJECT = "REJECT"

MODE_SERVICE = "SERVICE"
MODE_DIRECT = "DIRECT"


@dataclass(frozen=True)
class OrderRequest:
    tx_id: str
    tx_host: int
    participants: frozenset


@dataclass(frozen=True)
class OrderResponse:
    tx_id: str
    order_no: int
    histories: dict  # participant -> list of preceding tx_ids (most recent last)


class TokenBucket:
    """Admit while tokens last; refill at rate_per_s up to burst."""

    def __init__(self, rate_per_s: float, burst: int):
        self.rate_per_s = rate_per_s
        self.burst = burst
        self.tokens = float(burst)
        self.last_us = 0

    def admit(self, now_us: int) -> str:
        if now_us > self.last_us:
            self.tokens = min(
                float(self.burst),
                self.tokens + self.rate_per_s * (now_us - self.last_us) / 1e6)
            self.last_us = now_us
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return ADMIT
        return REJECT


class OrderServerState:
    """Sequencer state: dense order numbers plus per-participant logs."""

    def __init__(self, rate_per_s: float = 1000.0, burst: int = 100,
                 history_depth: int = 16, admission_enabled: bool = True,
                 first_order_no: int = 1):
        self.next_order_no = first_order_no
        self.history_depth = history_depth
        self.per_participant_log: dict[int, list] = {}
        self.responses: dict[str, OrderResponse] = {}
        self.bucket = TokenBucket(rate_per_s, burst)
        self.admission_enabled = admission_enabled
        self.rejected = 0

    def handle_order_request(self, req: OrderRequest, now_us: int):
        """Returns an OrderResponse, or REJECT when admission denies."""
        cached = self.responses.get(req.tx_id)
        if cached is not None:
            return cached
        if self.admission_enabled and self.bucket.admit(now_us) == REJECT:
            self.rejected += 1
            return REJECT
        order_no = self.next_order_no
        self.next_order_no += 1
        histories = {}
        for p in sorted(req.participants):
            log = self.per_participant_log.setdefault(p, [])
            histories[p] = [tx for _, tx in log[-self.history_depth:]]
            log.append((order_no, req.tx_id))
        resp = OrderResponse(req.tx_id, order_no, histories)
        self.responses[req.tx_id] = resp
        return resp

    def resume_after(self, highest_seen: int, jump_gap: int):
        """Takeover entry point: continue numbering past what was observed."""
        self.next_order_no = max(self.next_order_no, highest_seen + jump_gap + 1)


class ParticipantState:
    """Executes transactions in global order, skipping unrelated ones."""

    def __init__(self, node_id: int):
        self.node_id = node_id
        self.known_orders: dict[str, tuple] = {}  # tx_id -> (order_no, history)
        self.executed: list[str] = []
        self.executed_set: set[str] = set()
        self.pending_participations: set[str] = set()
        self._waiting: list = []  # (order_no, tx_id), kept sorted

    def note_participation(self, tx_id: str):
        if tx_id not in self.executed_set:
            self.pending_participations.add(tx_id)

    def on_order(self, tx_id: str, order_no: int, history) -> list[str]:
        """Record an order; returns tx_ids that just became executable."""
        if (tx_id not in self.pending_participations
                and tx_id not in self.executed_set):
            raise UnknownTransactionError(
                f"node {self.node_id} is not a participant of {tx_id}")
        if tx_id in self.executed_set or tx_id in self.known_orders:
            return []  # replayed forward
        self.known_orders[tx_id] = (order_no, list(history))
        bisect.insort(self._waiting, (order_no, tx_id))
        return self._drain()

    def _executable(self, tx_id: str) -> bool:
        _, history = self.known_orders[tx_id]
        for dep in history:
            if dep in self.executed_set:
                continue
            if dep in self.pending_participations:
                return False  # a preceding transaction of ours is unordered/unexecuted
        return True

    def _drain(self) -> list[str]:
        newly = []
        progress = True
        while progress:
            progress = False
            remaining = []
            for order_no, tx_id in self._waiting:
                if self._executable(tx_id):
                    self.executed.append(tx_id)
                    self.executed_set.add(tx_id)
                    self.pending_participations.discard(tx_id)
                    newly.append(tx_id)
                    progress = True
                else:
                    remaining.append((order_no, tx_id))
            self._waiting = remaining
        return newly


def message_cost_model(k: int, mode: str) -> int:
    """Per-transaction message count for k involved nodes.

    DIRECT: the host runs a GMD abcast among the k involved nodes with
    instant acks: (k-1) sends plus k*(k-1) ack sends.  SERVICE: one
    request, one response, k forwards.
    """
    if k < 1:
        raise ValueError("participant count must be >= 1")
    if mode == MODE_DIRECT:
        return k * k - 1
    if mode == MODE_SERVICE:
        return k + 2
    raise ValueError(f"unknown ordering mode {mode!r}")
