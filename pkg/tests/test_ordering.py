import random

import pytest

from hybridcast.errors import UnknownTransactionError
from hybridcast.ordering import (
    MODE_DIRECT,
    MODE_SERVICE,
    REJECT,
    OrderRequest,
    OrderServerState,
    ParticipantState,
    TokenBucket,
    message_cost_model,
)


class TestTokenBucket:
    def test_burst_then_reject(self):
        bucket = TokenBucket(rate_per_s=10, burst=3)
        grants = [bucket.admit(0) for _ in range(4)]
        assert grants == ["ADMIT", "ADMIT", "ADMIT", "REJECT"]

    def test_refill_over_time(self):
        bucket = TokenBucket(rate_per_s=10, burst=3)
        for _ in range(3):
            bucket.admit(0)
        assert bucket.admit(0) == "REJECT"
        # 10/s means one token every 100ms
        assert bucket.admit(100_000) == "ADMIT"
        assert bucket.admit(100_000) == "REJECT"

    def test_never_exceeds_burst(self):
        bucket = TokenBucket(rate_per_s=1000, burst=2)
        bucket.admit(0)
        grants = [bucket.admit(10_000_000) for _ in range(4)]
        assert grants.count("ADMIT") == 2


class TestOrderServer:
    def test_dense_order_numbers(self):
        srv = OrderServerState(admission_enabled=False)
        nums = [
            srv.handle_order_request(
                OrderRequest(f"t{i}", 0, frozenset({0, 1})), 0).order_no
            for i in range(5)
        ]
        assert nums == [1, 2, 3, 4, 5]

    def test_histories_list_preceding_txs_per_participant(self):
        srv = OrderServerState(admission_enabled=False)
        srv.handle_order_request(OrderRequest("a", 0, frozenset({1, 2})), 0)
        srv.handle_order_request(OrderRequest("b", 0, frozenset({2, 3})), 0)
        resp = srv.handle_order_request(OrderRequest("c", 0, frozenset({1, 2, 3})), 0)
        assert resp.histories == {1: ["a"], 2: ["a", "b"], 3: ["b"]}

    def test_history_depth_truncates(self):
        srv = OrderServerState(admission_enabled=False, history_depth=2)
        for i in range(5):
            srv.handle_order_request(OrderRequest(f"t{i}", 0, frozenset({7})), 0)
        resp = srv.handle_order_request(OrderRequest("last", 0, frozenset({7})), 0)
        assert resp.histories == {7: ["t3", "t4"]}

    def test_duplicate_request_is_idempotent_and_skips_admission(self):
        srv = OrderServerState(rate_per_s=1, burst=1)
        first = srv.handle_order_request(OrderRequest("a", 0, frozenset({0})), 0)
        again = srv.handle_order_request(OrderRequest("a", 0, frozenset({0})), 0)
        assert again is first
        assert srv.rejected == 0

    def test_rejection_counted(self):
        srv = OrderServerState(rate_per_s=1, burst=1)
        srv.handle_order_request(OrderRequest("a", 0, frozenset({0})), 0)
        out = srv.handle_order_request(OrderRequest("b", 0, frozenset({0})), 0)
        assert out == REJECT
        assert srv.rejected == 1

    def test_resume_after_jumps_past_observed(self):
        srv = OrderServerState(admission_enabled=False)
        srv.resume_after(highest_seen=40, jump_gap=10)
        resp = srv.handle_order_request(OrderRequest("a", 0, frozenset({0})), 0)
        assert resp.order_no == 51

    def test_history_oracle_brute_force(self):
        """1000 random requests against a from-scratch recomputation."""
        rng = random.Random(2024)
        depth = 4
        srv = OrderServerState(admission_enabled=False, history_depth=depth)
        full_log = {}  # participant -> [tx_id, ...] in assignment order
        for i in range(1000):
            group = frozenset(rng.sample(range(8), rng.randint(1, 4)))
            expected = {p: list(full_log.get(p, []))[-depth:] for p in group}
            resp = srv.handle_order_request(
                OrderRequest(f"t{i}", 0, group), now_us=i)
            assert resp.order_no == i + 1
            assert resp.histories == expected
            for p in group:
                full_log.setdefault(p, []).append(f"t{i}")


class TestParticipant:
    def test_rejects_foreign_transaction(self):
        part = ParticipantState(3)
        with pytest.raises(UnknownTransactionError):
            part.on_order("ghost", 1, [])

    def test_executes_in_order_number_order(self):
        part = ParticipantState(0)
        for tx in ("a", "b"):
            part.note_participation(tx)
        # order for b arrives first; b's history says a precedes it
        assert part.on_order("b", 2, ["a"]) == []
        assert part.on_order("a", 1, []) == ["a", "b"]
        assert part.executed == ["a", "b"]

    def test_cascaded_wait_defeated_by_history(self):
        """A transaction whose history shows no pending predecessor starts
        immediately, even though a lower order number is still unordered."""
        part = ParticipantState(0)
        part.note_participation("mine-early")  # will get order_no 1, later
        part.note_participation("mine-late")
        # the service assigned order 5 to mine-late; its history at node 0
        # does not contain mine-early, so mine-early cannot precede it here
        newly = part.on_order("mine-late", 5, [])
        assert newly == ["mine-late"]
        # the older transaction still executes once its order arrives
        assert part.on_order("mine-early", 1, []) == ["mine-early"]

    def test_history_dependency_blocks_until_executed(self):
        part = ParticipantState(0)
        for tx in ("dep", "main"):
            part.note_participation(tx)
        assert part.on_order("main", 7, ["dep"]) == []
        assert part.on_order("dep", 2, []) == ["dep", "main"]

    def test_history_dependency_not_pending_does_not_block(self):
        # dep involves this node's peers only; node 0 never participates
        part = ParticipantState(0)
        part.note_participation("main")
        assert part.on_order("main", 7, ["dep"]) == ["main"]

    def test_replayed_order_is_ignored(self):
        part = ParticipantState(0)
        part.note_participation("a")
        assert part.on_order("a", 1, []) == ["a"]
        assert part.on_order("a", 1, []) == []


class TestCostModel:
    def test_frozen_small_cases(self):
        # enumerated by hand: k=2 direct is 1 send + 2*1 acks = 3,
        # service is 1 request + 1 response + 2 forwards = 4
        assert message_cost_model(2, MODE_DIRECT) == 3
        assert message_cost_model(2, MODE_SERVICE) == 4
        assert message_cost_model(3, MODE_DIRECT) == 8
        assert message_cost_model(3, MODE_SERVICE) == 5

    def test_crossover_is_between_two_and_three(self):
        wins = [message_cost_model(k, MODE_DIRECT) < message_cost_model(k, MODE_SERVICE)
                for k in range(2, 12)]
        assert wins[0] is True
        assert all(w is False for w in wins[1:])

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            message_cost_model(0, MODE_DIRECT)
        with pytest.raises(ValueError):
            message_cost_model(3, "CARRIER_PIGEON")
