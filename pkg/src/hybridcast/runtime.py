"""Scenario runtimes: wire protocol nodes and workloads onto the kernel.

AbcastRuntime drives a group of broadcast nodes (the abcast protocols
under test); OrderingRuntime drives tx hosts, participants and the
order-service servers.  Both pre-draw the workload from the dedicated
workload RNG stream so the generated load is identical across protocol
modes for the same seed.
"""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field

from .config import ScenarioConfig
from .errors import SyncFailedError
from .insurance import InsuranceNode, MODE_ON_SUSPICION, ProtocolParams
from .kernel import Engine, NodeClock, _mix
from .ordering import (MODE_SERVICE, OrderRequest, OrderServerState,
                       ParticipantState, REJECT)
from .trace import format_detail

SERVER_BASE = 1000  # order server node ids start here


def _protocol_params(cfg: ScenarioConfig) -> ProtocolParams:
    return ProtocolParams(
        mode=cfg.mode, ack_mode=cfg.ack_mode, eta_us=cfg.eta_us,
        theta_us=cfg.theta_us, epsilon_us=cfg.epsilon_us,
        percentile=cfg.percentile, safety_margin_us=cfg.safety_margin_us,
        window_size=cfg.window_size, default_d_us=cfg.default_d_us,
        heartbeat_interval_us=cfg.heartbeat_interval_us,
        suspicion_timeout_us=cfg.suspicion_timeout_us)


def _make_clock(cfg: ScenarioConfig, node_id: int, rng: random.Random,
                is_reference: bool) -> NodeClock:
    cc = cfg.clock
    if is_reference or (cc.init_offset_max_us == 0 and cc.drift_ppm_max == 0):
        return NodeClock(node_id, epsilon_us=cfg.epsilon_us)
    return NodeClock(
        node_id,
        offset_us=rng.randint(-cc.init_offset_max_us, cc.init_offset_max_us),
        drift_ppm=rng.randint(-cc.drift_ppm_max, cc.drift_ppm_max),
        epsilon_us=cfg.epsilon_us)


class AbcastRuntime:
    """A group of abcast nodes under a Poisson broadcast workload."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.engine = Engine(cfg.seed, cfg.build_network())
        self.membership = list(range(cfg.num_client_nodes))
        self.nodes: dict[int, InsuranceNode] = {}
        self.bcast_times: dict[tuple, int] = {}
        self.deliveries: dict[int, list] = {n: [] for n in self.membership}
        self.latencies: list[int] = []
        self.messages_total = 0
        params = _protocol_params(cfg)
        clock_rng = random.Random(_mix(cfg.seed, 7))
        for node_id in self.membership:
            clock = _make_clock(cfg, node_id, clock_rng, node_id == 0)
            node = InsuranceNode(self.engine, node_id, self.membership,
                                 params, self._on_deliver)
            self.nodes[node_id] = node
            self.engine.add_node(
                node_id,
                on_message=node.on_message,
                on_timer=self._timer_handler(node),
                clock=clock)
        self._schedule_workload()
        self._schedule_faults()
        if cfg.clock.sync_enabled:
            for node_id in self.membership[1:]:
                self.engine.set_timer(node_id, cfg.resync_interval_us,
                                      ("resync",))
        if cfg.mode == MODE_ON_SUSPICION:
            for node in self.nodes.values():
                node.start_heartbeats()

    def _timer_handler(self, node: InsuranceNode):
        def handler(key, data):
            tag = key[0]
            if tag == "client":
                mid = node.broadcast(payload=None)
                self.bcast_times[mid] = self.engine.now
                self.messages_total += 1
            elif tag == "view":
                node.on_new_view(key[1])
            elif tag == "resync":
                try:
                    self.engine.sync_clock_probabilistic(
                        node.node_id, 0, self.cfg.clock.sync_bound_us,
                        self.cfg.clock.sync_max_attempts)
                except SyncFailedError:
                    pass  # node keeps its old accuracy; policy is protocol-level
                self.engine.set_timer(node.node_id,
                                      self.cfg.resync_interval_us, ("resync",))
            else:
                node.on_timer(key, data)
        return handler

    def _schedule_workload(self):
        cfg = self.cfg
        rng = self.engine.rng_workload
        horizon = max(0, cfg.duration_us - cfg.workload.stop_margin_us)
        mean_gap_us = 1e6 / cfg.workload.arrival_rate_per_s
        t = 0.0
        i = 0
        while True:
            t += rng.expovariate(1.0 / mean_gap_us)
            if t >= horizon:
                break
            sender = rng.randrange(len(self.membership))
            self.engine.set_timer_at(sender, int(t), ("client", i))
            i += 1

    def _schedule_faults(self):
        cfg = self.cfg
        for entry in cfg.crash_schedule:
            crashed, at_us = entry["node"], entry["at_us"]
            self.engine.schedule_crash(crashed, at_us)
            view_at = at_us + cfg.view_install_delay_us
            for node_id in self.membership:
                if node_id != crashed:
                    self.engine.set_timer_at(node_id, view_at,
                                             ("view", crashed))

    def _on_deliver(self, node_id, mid, ts, path, now):
        self.deliveries[node_id].append((now, mid, ts, path))
        if node_id == mid[0]:
            born = self.bcast_times.get(mid)
            if born is not None:
                self.latencies.append(now - born)

    def run(self) -> "AbcastRuntime":
        self.engine.run_until(self.cfg.duration_us)
        return self

    def delivered_orders(self) -> dict:
        return {n: [f"{m[0]}:{m[1]}" for m in self.nodes[n].gmd.delivered]
                for n in self.membership}

    def max_deadline_bound(self) -> int:
        return max((n.max_deadline_D for n in self.nodes.values()), default=0)


@dataclass
class _TxState:
    tx_id: str
    host: int
    group: tuple  # k involved client nodes, host included
    born_us: int
    attempts: int = 0
    server_cursor: int = 0
    responded: bool = False
    reqto_token: int = -1
    executed_at: dict = field(default_factory=dict)  # node -> time
    done_us: int = -1


class OrderingRuntime:
    """Tx hosts + participants against either the order service or a
    direct per-transaction all-ack broadcast."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.engine = Engine(cfg.seed, cfg.build_network())
        self.clients = list(range(cfg.num_client_nodes))
        self.servers = [SERVER_BASE + i for i in range(cfg.num_order_servers)]
        self.participants = {c: ParticipantState(c) for c in self.clients}
        self.server_states: dict[int, OrderServerState] = {}
        self.server_queues: dict[int, list] = {s: [] for s in self.servers}
        self.server_busy: dict[int, bool] = {s: False for s in self.servers}
        self.max_queue_len = 0
        self.txs: dict[str, _TxState] = {}
        self.latencies: list[int] = []
        self.no_server_failures = 0
        self._rr_counter = 0
        self._direct_acks: dict[tuple, set] = {}
        self._direct_hybrid: dict[int, int] = {c: 0 for c in self.clients}
        self._direct_ts: dict[str, tuple] = {}  # tx_id -> (ts, host)
        self._direct_pending: dict[int, list] = {c: [] for c in self.clients}
        self._highest_order_seen: dict[int, int] = {s: 0 for s in self.servers}
        for c in self.clients:
            self.engine.add_node(c, on_message=self._client_message(c),
                                 on_timer=self._client_timer(c))
        for s in self.servers:
            self.server_states[s] = OrderServerState(
                rate_per_s=cfg.admission.rate_per_s,
                burst=cfg.admission.burst,
                history_depth=cfg.history_depth,
                admission_enabled=cfg.admission.enabled)
            self.engine.add_node(s, on_message=self._server_message(s),
                                 on_timer=self._server_timer(s))
        self.active_server = max(self.servers)
        self._schedule_workload()
        self._schedule_faults()

    # -- workload ------------------------------------------------------------

    def _schedule_workload(self):
        cfg = self.cfg
        rng = self.engine.rng_workload
        horizon = max(0, cfg.duration_us - cfg.workload.stop_margin_us)
        mean_gap_us = 1e6 / cfg.workload.arrival_rate_per_s
        k = min(cfg.workload.participant_count_dist, len(self.clients))
        t = 0.0
        i = 0
        while True:
            t += rng.expovariate(1.0 / mean_gap_us)
            if t >= horizon:
                break
            host = rng.randrange(len(self.clients))
            others = [c for c in self.clients if c != host]
            group = tuple([host] + sorted(rng.sample(others, k - 1)))
            tx_id = f"tx{i}"
            self.txs[tx_id] = _TxState(tx_id, host, group, int(t))
            self.engine.set_timer_at(host, int(t), ("tx", tx_id))
            i += 1

    def _schedule_faults(self):
        for entry in self.cfg.crash_schedule:
            self.engine.schedule_crash(entry["node"], entry["at_us"])
            # promotion check just after the crash becomes effective
            for s in self.servers:
                if s != entry["node"]:
                    self.engine.set_timer_at(s, entry["at_us"] + 1,
                                             ("promote",))

    # -- client side -----------------------------------------------------------

    def _client_timer(self, client: int):
        def handler(key, data):
            tag = key[0]
            if tag == "tx":
                self._start_tx(key[1])
            elif tag == "retry":
                self._submit_request(key[1])
            elif tag == "reqto":
                tx = self.txs[key[1]]
                if not tx.responded:
                    tx.server_cursor += 1
                    self._submit_request(key[1])
        return handler

    def _start_tx(self, tx_id: str):
        tx = self.txs[tx_id]
        for member in tx.group:
            # participants learned of the tx while executing it
            self.participants[member].note_participation(tx_id)
        if self.cfg.workload.ordering == MODE_SERVICE:
            self._submit_request(tx_id)
        else:
            self._direct_broadcast(tx)

    def _operative_servers(self) -> list:
        return [s for s in self.servers if not self.engine.is_crashed(s)]

    def _submit_request(self, tx_id: str):
        tx = self.txs[tx_id]
        if self.engine.is_crashed(tx.host):
            return
        operative = self._operative_servers()
        if not operative:
            self.no_server_failures += 1
            self.engine.trace.add(self.engine.now, tx.host, "NO_SERVERS",
                                  tx_id)
            return
        if tx.attempts == 0 and tx.server_cursor == 0:
            tx.server_cursor = self._rr_counter
            self._rr_counter += 1
        server = operative[tx.server_cursor % len(operative)]
        kind = "ORDER_REQ" if tx.attempts == 0 else "ORDER_RETRY"
        tx.attempts += 1
        req = OrderRequest(tx_id, tx.host, frozenset(tx.group))
        self.engine.send(tx.host, server, kind, tx_id, req,
                         format_detail(frm=tx.host, attempt=tx.attempts))
        tx.reqto_token = self.engine.set_timer(
            tx.host, self.cfg.workload.request_timeout_us, ("reqto", tx_id))

    def _cancel_reqto(self, tx: _TxState):
        if tx.reqto_token >= 0:
            self.engine.cancel_timer(tx.reqto_token)
            tx.reqto_token = -1

    def _client_message(self, client: int):
        def handler(frm, kind, msg_id, payload):
            if kind == "ORDER_RESP":
                self._on_response(client, payload)
            elif kind == "ORDER_REJECT":
                self._on_reject(client, msg_id)
            elif kind == "ORDER_FWD":
                tx_id, order_no, history = payload
                self._apply_order(client, tx_id, order_no, history)
            elif kind == "TX_MSG":
                self._on_tx_msg(client, payload)
            elif kind == "TX_ACK":
                tx_id, acker, acker_ts = payload
                self._on_tx_ack(client, tx_id, acker, acker_ts)
        return handler

    def _on_response(self, client: int, resp):
        tx = self.txs[resp.tx_id]
        self._cancel_reqto(tx)
        if tx.responded:
            return
        tx.responded = True
        # the order is forwarded to every participant, the host included
        for member in tx.group:
            history = resp.histories.get(member, [])
            self.engine.send(client, member, "ORDER_FWD", resp.tx_id,
                             (resp.tx_id, resp.order_no, history),
                             format_detail(order=resp.order_no))

    def _on_reject(self, client: int, tx_id: str):
        tx = self.txs[tx_id]
        self._cancel_reqto(tx)
        if tx.attempts > self.cfg.workload.max_retries:
            return  # give up; the transaction stays unordered
        backoff = min(
            self.cfg.workload.backoff_base_us * (2 ** (tx.attempts - 1)),
            self.cfg.workload.backoff_cap_us)
        self.engine.set_timer(client, backoff, ("retry", tx_id))

    def _apply_order(self, client: int, tx_id: str, order_no: int, history):
        newly = self.participants[client].on_order(tx_id, order_no, history)
        for done in newly:
            self._mark_executed(client, done,
                                self.participants[client].known_orders[done][0])

    def _mark_executed(self, client: int, tx_id: str, order_no=None):
        tx = self.txs[tx_id]
        if client in tx.executed_at:
            return
        tx.executed_at[client] = self.engine.now
        detail = format_detail(ts=order_no) if order_no is not None else ""
        self.engine.trace.add(self.engine.now, client, "EXEC", tx_id, detail)
        if len(tx.executed_at) == len(tx.group) and tx.done_us < 0:
            tx.done_us = self.engine.now
            self.latencies.append(tx.done_us - tx.born_us)

    # -- direct (service-less) path ---------------------------------------------

    def _direct_stamp(self, client: int) -> int:
        ts = max(self.engine.now, self._direct_hybrid[client] + 1)
        self._direct_hybrid[client] = ts
        return ts

    def _direct_admit(self, client: int, tx_id: str, ts: int, host: int):
        self._direct_ts[tx_id] = (ts, host)
        self._direct_hybrid[client] = max(self._direct_hybrid[client], ts)
        bisect.insort(self._direct_pending[client], (ts, host, tx_id))

    def _direct_broadcast(self, tx: _TxState):
        ts = self._direct_stamp(tx.host)
        self._direct_admit(tx.host, tx.tx_id, ts, tx.host)
        payload = (tx.tx_id, ts, tx.group)
        for member in tx.group:
            if member != tx.host:
                self.engine.send(tx.host, member, "TX_MSG", tx.tx_id, payload,
                                 format_detail(frm=tx.host, ts=ts))
        self._send_tx_ack(tx.host, tx.tx_id, tx.group)

    def _on_tx_msg(self, client: int, payload):
        tx_id, ts, group = payload
        host = self.txs[tx_id].host
        self._direct_admit(client, tx_id, ts, host)
        self._send_tx_ack(client, tx_id, group)

    def _send_tx_ack(self, client: int, tx_id: str, group):
        acker_ts = self._direct_stamp(client)
        self._on_tx_ack(client, tx_id, client, acker_ts)
        for member in group:
            if member != client:
                self.engine.send(client, member, "TX_ACK", tx_id,
                                 (tx_id, client, acker_ts),
                                 format_detail(frm=client, ats=acker_ts))

    def _on_tx_ack(self, client: int, tx_id: str, acker: int, acker_ts: int):
        self._direct_hybrid[client] = max(self._direct_hybrid[client], acker_ts)
        acks = self._direct_acks.setdefault((tx_id, client), set())
        acks.add(acker)
        self._direct_drain(client)

    def _direct_drain(self, client: int):
        """Execute fully acked transactions in (ts, host) order; a pending
        earlier transaction holds everything behind it."""
        pending = self._direct_pending[client]
        while pending:
            ts, host, tx_id = pending[0]
            tx = self.txs[tx_id]
            acks = self._direct_acks.get((tx_id, client), ())
            if len(acks) < len(tx.group):
                break
            pending.pop(0)
            self._mark_executed(client, tx_id, ts)

    # -- server side --------------------------------------------------------------

    def _server_message(self, server: int):
        def handler(frm, kind, msg_id, payload):
            if kind in ("ORDER_REQ", "ORDER_RETRY"):
                self._server_ingest(server, payload, payload.tx_host)
            elif kind == "SEQ_FWD":
                req, origin = payload
                self._server_ingest(server, req, origin, forwarded=True)
            elif kind == "SEQ_NOTE":
                self._highest_order_seen[server] = max(
                    self._highest_order_seen[server], payload)
        return handler

    def _server_ingest(self, server: int, req, origin: int, forwarded=False):
        if server != self.active_server and not forwarded:
            self.engine.send(server, self.active_server, "SEQ_FWD", req.tx_id,
                             (req, origin), format_detail(via=server))
            return
        state = self.server_states[server]
        cached = state.responses.get(req.tx_id)
        if cached is not None:
            self._respond(server, origin, cached)
            return
        if state.admission_enabled and state.bucket.admit(self.engine.now) == REJECT:
            state.rejected += 1
            self.engine.trace.add(self.engine.now, server, "REJECT", req.tx_id)
            self.engine.send(server, origin, "ORDER_REJECT", req.tx_id, None)
            return
        service_time = self.cfg.admission.service_time_us
        if service_time <= 0:
            self._assign_and_respond(server, origin, req)
            return
        queue = self.server_queues[server]
        queue.append((req, origin))
        self.max_queue_len = max(self.max_queue_len, len(queue))
        if not self.server_busy[server]:
            self.server_busy[server] = True
            self.engine.set_timer(server, service_time, ("serve",))

    def _server_timer(self, server: int):
        def handler(key, data):
            tag = key[0]
            if tag == "serve":
                queue = self.server_queues[server]
                if queue:
                    req, origin = queue.pop(0)
                    self._assign_and_respond(server, origin, req)
                if queue:
                    self.engine.set_timer(server,
                                          self.cfg.admission.service_time_us,
                                          ("serve",))
                else:
                    self.server_busy[server] = False
            elif tag == "promote":
                self._maybe_promote(server)
        return handler

    def _assign_and_respond(self, server: int, origin: int, req):
        state = self.server_states[server]
        enabled = state.admission_enabled
        state.admission_enabled = False  # admission already happened at ingest
        resp = state.handle_order_request(req, self.engine.now)
        state.admission_enabled = enabled
        self._highest_order_seen[server] = max(
            self._highest_order_seen[server], resp.order_no)
        for peer in self.servers:
            if peer != server and not self.engine.is_crashed(peer):
                self.engine.send(server, peer, "SEQ_NOTE", req.tx_id,
                                 resp.order_no)
        self._respond(server, origin, resp)

    def _respond(self, server: int, origin: int, resp):
        self.engine.trace.add(self.engine.now, server, "ORDER_ASSIGN",
                              resp.tx_id, format_detail(order=resp.order_no))
        self.engine.send(server, origin, "ORDER_RESP", resp.tx_id, resp,
                         format_detail(order=resp.order_no))

    def _maybe_promote(self, server: int):
        operative = self._operative_servers()
        if not operative:
            return
        new_active = max(operative)
        if new_active != self.active_server:
            self.active_server = new_active
            self.server_states[new_active].resume_after(
                max(self._highest_order_seen.values()),
                self.cfg.sequencer_jump_gap)
            self.engine.trace.add(self.engine.now, new_active, "TAKEOVER", "",
                                  format_detail(
                                      resume=self.server_states[new_active].next_order_no))

    # -- run ---------------------------------------------------------------------

    def run(self) -> "OrderingRuntime":
        self.engine.run_until(self.cfg.duration_us)
        return self

    def rejected_requests(self) -> int:
        return sum(s.rejected for s in self.server_states.values())

    def messages_per_tx(self) -> float:
        if not self.txs:
            return 0.0
        if self.cfg.workload.ordering == MODE_SERVICE:
            kinds = ("ORDER_REQ", "ORDER_RETRY", "ORDER_RESP", "ORDER_FWD")
        else:
            kinds = ("TX_MSG", "TX_ACK")
        total = sum(self.engine.send_counts.get(k, 0) for k in kinds)
        return total / len(self.txs)
