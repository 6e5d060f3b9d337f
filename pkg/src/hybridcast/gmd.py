"""Group-membership-dependent abcast core.

A broadcast carries a hybrid timestamp; every recipient answers with an
ack whose timestamp promises that all of its future broadcasts will carry
larger timestamps.  A message is deliverable once every member has acked
it and every member's promise watermark exceeds its timestamp, so no
earlier-timestamped message can still appear.  When a member crashes and
stays silent, delivery stalls: that blocking is the phenomenon this
module deliberately models.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Optional

MsgId = tuple  # (sender, seq)


def msg_id_str(msg_id: MsgId) -> str:
    return f"{msg_id[0]}:{msg_id[1]}"


@dataclass(frozen=True)
class GmdMessage:
    msg_id: MsgId
    ts: int
    payload: object = None


@dataclass(frozen=True)
class GmdAck:
    acker: int
    acked_msg: MsgId
    acker_ts: int


@dataclass
class _Pending:
    msg: GmdMessage
    acks: dict = field(default_factory=dict)  # acker -> acker_ts


class GmdNodeState:
    """Per-node GMD protocol state.  Pure: callers supply clock readings."""

    def __init__(self, node_id: int, membership):
        self.node_id = node_id
        self.membership = set(membership)
        self.hybrid_clock = 0
        self.pending: dict[MsgId, _Pending] = {}
        self.delivered: list[MsgId] = []
        self.delivered_ts: dict[MsgId, int] = {}
        # largest timestamp seen from each member: the promise watermark
        self.promise: dict[int, int] = {m: 0 for m in self.membership}
        self._order: list = []  # heap of (ts, sender, seq)
        self._early_acks: dict[MsgId, dict] = {}

    # -- timestamps --------------------------------------------------------

    def assign_timestamp(self, clock_reading: int) -> int:
        ts = max(clock_reading, self.hybrid_clock + 1)
        self.hybrid_clock = ts
        return ts

    def note_timestamp(self, member: int, ts: int):
        if ts > self.promise.get(member, -1):
            self.promise[member] = ts

    # -- receive path ------------------------------------------------------

    def known(self, msg_id: MsgId) -> bool:
        return msg_id in self.pending or msg_id in self.delivered_ts

    def add_own(self, msg: GmdMessage):
        """Register the sender's own broadcast (its ts is its own promise)."""
        self._admit(msg)

    def _admit(self, msg: GmdMessage):
        entry = _Pending(msg)
        # the broadcast itself is the sender's implicit ack
        entry.acks[msg.msg_id[0]] = msg.ts
        stale = self._early_acks.pop(msg.msg_id, None)
        if stale:
            entry.acks.update(stale)
        self.pending[msg.msg_id] = entry
        heapq.heappush(self._order, (msg.ts, msg.msg_id[0], msg.msg_id[1]))
        self.note_timestamp(msg.msg_id[0], msg.ts)

    def on_receive(self, msg: GmdMessage, clock_reading: int) -> Optional[GmdAck]:
        """Admit a foreign broadcast; returns the ack to send, None if duplicate."""
        if self.known(msg.msg_id):
            return None
        self._admit(msg)
        if msg.ts > self.hybrid_clock:
            self.hybrid_clock = msg.ts
        acker_ts = self.assign_timestamp(clock_reading)
        ack = GmdAck(self.node_id, msg.msg_id, acker_ts)
        self.on_ack(ack)  # count our own promise immediately
        return ack

    def on_ack(self, ack: GmdAck):
        self.note_timestamp(ack.acker, ack.acker_ts)
        entry = self.pending.get(ack.acked_msg)
        if entry is not None:
            entry.acks[ack.acker] = ack.acker_ts
        elif ack.acked_msg not in self.delivered_ts:
            self._early_acks.setdefault(ack.acked_msg, {})[ack.acker] = ack.acker_ts

    # -- delivery ----------------------------------------------------------

    def head(self) -> Optional[MsgId]:
        while self._order:
            ts, sender, seq = self._order[0]
            mid = (sender, seq)
            if mid in self.pending:
                return mid
            heapq.heappop(self._order)  # delivered, drop stale entry
        return None

    def head_deliverable(self) -> bool:
        mid = self.head()
        if mid is None:
            return False
        entry = self.pending[mid]
        ts = entry.msg.ts
        for member in self.membership:
            if member == mid[0]:
                continue  # sender's promise is implicit in its seq stream
            if member not in entry.acks:
                return False
            if self.promise.get(member, 0) <= ts:
                return False
        return True

    def deliver_head(self) -> MsgId:
        mid = self.head()
        entry = self.pending.pop(mid)
        heapq.heappop(self._order)
        self.delivered.append(mid)
        self.delivered_ts[mid] = entry.msg.ts
        return mid

    def try_deliver(self) -> list[MsgId]:
        out = []
        while self.head_deliverable():
            out.append(self.deliver_head())
        return out

    # -- membership --------------------------------------------------------

    def remove_member(self, node_id: int):
        self.membership.discard(node_id)
