from hybridcast.insurance import (
    DEADLINE_PATH,
    GMD_PATH,
    MODE_GMD_ONLY,
    MODE_HYBRID,
    MODE_ON_SUSPICION,
    InsuranceNode,
    ProtocolParams,
)
from hybridcast.kernel import DelaySpec, Engine, NetworkModel


def build_cluster(n=4, mode=MODE_HYBRID, delay_us=1000, seed=1, **params):
    eng = Engine(seed, NetworkModel(DelaySpec("fixed", value_us=delay_us)))
    members = list(range(n))
    p = ProtocolParams(mode=mode, **params)
    nodes = {}
    for i in members:
        node = InsuranceNode(eng, i, members, p)
        nodes[i] = node
        eng.add_node(i, on_message=node.on_message, on_timer=node.on_timer)
    return eng, nodes


def delivered(node):
    return list(node.gmd.delivered)


def test_two_copies_go_out_eta_apart():
    eng, nodes = build_cluster(n=3, eta_us=2000)
    nodes[0].broadcast("x")
    eng.run_until(100_000)
    sends = [r for r in eng.trace.records if r.event_kind == "INS_MSG"]
    copies = sorted({(r.detail_dict()["copy"], r.sim_time_us) for r in sends})
    assert {c for c, _ in copies} == {"1", "2"}
    t1 = min(t for c, t in copies if c == "1")
    t2 = min(t for c, t in copies if c == "2")
    assert t2 - t1 == 2000


def test_crash_free_broadcast_uses_gmd_path():
    eng, nodes = build_cluster()
    mid = nodes[1].broadcast("payload")
    eng.run_until(200_000)
    for node in nodes.values():
        assert delivered(node) == [mid]
        assert node.delivery_paths[mid] == GMD_PATH


def test_sender_crash_delivers_by_deadline():
    eng, nodes = build_cluster(n=4, delay_us=1000, eta_us=2000, theta_us=1000,
                               epsilon_us=100, default_d_us=5000)
    mid = nodes[0].broadcast("doomed")
    eng.schedule_crash(0, 1)  # dies right after the send
    eng.run_until(2_000_000)
    # survivors must deliver despite never completing the all-ack round
    for i in (1, 2, 3):
        assert delivered(nodes[i]) == [mid], f"node {i} never delivered"

    # deadline respects ts + D + eps on the local clock
    for rec in eng.trace.of_kind("DELIVER"):
        d = rec.detail_dict()
        if d["path"] == DEADLINE_PATH:
            assert int(d["clk"]) >= int(d["dl"])
            assert int(d["dl"]) > int(d["ts"])


def test_gmd_only_blocks_on_sender_crash():
    eng, nodes = build_cluster(n=4, mode=MODE_GMD_ONLY)
    eng.schedule_crash(0, 1)
    eng.run_until(10)
    mid = nodes[1].broadcast_gmd("stuck: the dead member can never ack")
    eng.run_until(30_000_000)
    for i in (1, 2, 3):
        assert delivered(nodes[i]) == []
    # the view change is what unblocks delivery
    for i in (1, 2, 3):
        nodes[i].on_new_view(0)
    for i in (1, 2, 3):
        assert delivered(nodes[i]) == [mid]


def test_relay_covers_sender_that_died_between_copies():
    # drop nothing, but crash the sender before its second copy
    eng, nodes = build_cluster(n=4, eta_us=2000, theta_us=1000)
    nodes[0].broadcast("half sent")
    eng.schedule_crash(0, 1000)  # after copy 1 leaves, before copy 2
    eng.run_until(5_000_000)
    relays = [r for r in eng.trace.of_kind("INS_RELAY")]
    assert relays, "some survivor should have relayed on the sender's behalf"
    for i in (1, 2, 3):
        assert len(delivered(nodes[i])) == 1


def test_relay_is_suppressed_when_another_relay_arrives():
    # stagger theta must exceed the link delay for suppression to win
    eng, nodes = build_cluster(n=4, eta_us=2000, theta_us=2000)
    nodes[0].broadcast("x")
    eng.schedule_crash(0, 1000)
    eng.run_until(5_000_000)
    relayers = {r.detail_dict()["relay"] for r in eng.trace.of_kind("INS_RELAY")}
    # staggered timeouts: the first-ranked survivor relays, the rest stand down
    assert len(relayers) == 1


def test_retransmission_fills_gap_from_ack_evidence():
    # both copies to node 3 are lost; it learns of the message from acks
    eng, nodes = build_cluster(n=4, theta_us=1000)
    original_send = eng.send

    def lossy_send(frm, to, kind, msg_id, payload, detail=""):
        if kind in ("INS_MSG",) and to == 3:
            return  # silently lose every direct copy to node 3
        original_send(frm, to, kind, msg_id, payload, detail)

    eng.send = lossy_send
    mid = nodes[0].broadcast("lossy")
    eng.run_until(5_000_000)
    assert delivered(nodes[3]) == [mid]
    assert any(True for _ in eng.trace.of_kind("RETX_REQ"))


def test_known_gap_blocks_delivery_of_later_timestamps():
    eng, nodes = build_cluster(n=3)
    node = nodes[2]
    # evidence of sender 0's seq 0 and 1 while only seq 1 arrived
    node._note_seq(0, 1, 5000, 0)
    assert node.gaps[0] == {0}
    assert node._gap_blocks(6000)  # the hole may hide any smaller timestamp
    node._note_seq(0, 0, 4000, 0)
    assert not node.gaps[0]
    assert not node._gap_blocks(6000)


def test_gap_with_known_lower_bound_does_not_block_smaller_ts():
    eng, nodes = build_cluster(n=3)
    node = nodes[2]
    node._note_seq(0, 0, 4000, 0)
    node._note_seq(0, 2, 9000, 0)  # seq 1 missing, its ts must exceed 4000
    assert node._gap_blocks(5000)
    assert not node._gap_blocks(4000)  # nothing below the bound is hidden


def test_on_suspicion_mode_arms_deadlines_only_after_suspect():
    eng, nodes = build_cluster(n=4, mode=MODE_ON_SUSPICION, default_d_us=3000)
    eng.schedule_crash(0, 1)
    eng.run_until(10)
    nodes[1].broadcast("quiet failure: waiting on a dead member's ack")
    eng.run_until(1_000_000)
    assert all(not nodes[i].deadlines for i in (1, 2, 3))
    assert delivered(nodes[1]) == []
    for i in (1, 2, 3):
        nodes[i].on_suspect(0)
    eng.run_until(2_000_000)
    for i in (1, 2, 3):
        assert len(delivered(nodes[i])) == 1


def test_false_suspicion_disarms_deadlines():
    eng, nodes = build_cluster(n=4, mode=MODE_ON_SUSPICION)
    nodes[0].broadcast("slow but alive")
    node = nodes[1]
    eng.run_until(1_200)  # copy 1 arrived, all-ack round still in flight
    node.on_suspect(0)
    assert node.deadlines
    node.on_suspicion_false(0)
    assert not node.deadlines


def test_heartbeat_silence_raises_suspicion():
    eng, nodes = build_cluster(n=3, mode=MODE_ON_SUSPICION,
                               heartbeat_interval_us=100_000,
                               suspicion_timeout_us=300_000)
    for node in nodes.values():
        node.start_heartbeats()
    eng.schedule_crash(0, 150_000)
    eng.run_until(2_000_000)
    assert 0 in nodes[1].suspected
    assert 0 in nodes[2].suspected
    assert 1 not in nodes[2].suspected


def test_piggyback_acks_still_deliver():
    eng, nodes = build_cluster(n=4, ack_mode="piggyback", theta_us=1000)
    mids = [nodes[i % 4].broadcast(i) for i in range(6)]
    eng.run_until(10_000_000)
    for node in nodes.values():
        assert set(delivered(node)) == set(mids)
    # piggyback mode must not fall back to instant ack sends
    assert eng.send_counts.get("INS_ACK", 0) < 6 * 4 * 3


def test_delay_estimate_feeds_deadline_bound():
    eng, nodes = build_cluster(n=3, delay_us=4000, epsilon_us=0,
                               eta_us=2000, theta_us=1000, default_d_us=1)
    nodes[0].broadcast("a")
    eng.run_until(1_000_000)
    node = nodes[1]
    assert node.current_d() == 4000
    # 2d + 2eta + theta with the observed fixed delay
    assert node.estimator.per_origin[0].quantile(0.9999) == 4000
