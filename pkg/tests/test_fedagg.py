import numpy as np
import pytest

from dhtfed.fedagg import (CENTRALIZED, DECENTRALIZED, UNWEIGHTED, WEIGHTED,
                           AggregateMessage, FederatedSession, ModeSelector,
                           ProtocolError, RoundConfig, SocialGraph,
                           aggregate_up, audit_decentralized_privacy,
                           branch_aggregate, buffer_mean, gossip_merge,
                           root_update, select_mode)
from dhtfed.model import ModelParams, PersonalState, local_finetune

from conftest import build_world, gaussian_data
from oracles import flat_majority, flat_mean, reachable_within, recursive_average

H = 4


def const_params(value, h=1):
    return ModelParams(np.full((2, h), float(value)), np.full(2, float(value)))


def msg(value, weight=1, rnd=0, group=1, h=1):
    return AggregateMessage(group, rnd, const_params(value, h), weight)


# -- branch aggregation ------------------------------------------------------------

def test_single_child_is_identity_in_both_modes():
    m = msg(3.5)
    for mode in (UNWEIGHTED, WEIGHTED):
        out = branch_aggregate([m], mode)
        assert np.array_equal(out.payload.w, m.payload.w)
        assert out.weight == 1


def test_balanced_pair_averages_to_three():
    for mode in (UNWEIGHTED, WEIGHTED):
        out = branch_aggregate([msg(2), msg(4)], mode)
        assert np.array_equal(out.payload.w, np.full((2, 1), 3.0))
        assert out.weight == 2


def test_round_and_group_mismatch_rejected():
    with pytest.raises(ProtocolError):
        branch_aggregate([msg(1, rnd=0), msg(2, rnd=1)])
    with pytest.raises(ProtocolError):
        branch_aggregate([msg(1, group=1), msg(2, group=2)])
    with pytest.raises(ValueError):
        branch_aggregate([])


def test_weighted_mode_is_tree_shape_independent():
    # Same 5 leaf values as a star and as a lopsided two-level tree.
    values = [1.0, 2.0, 4.0, 8.0, 16.0]
    leaf_msgs = {i + 10: msg(v) for i, v in enumerate(values)}
    star = {0: list(leaf_msgs)}
    lopsided = {0: [10, 1], 1: [11, 12, 13, 14]}

    w_star = aggregate_up(star, 0, leaf_msgs, WEIGHTED)
    w_lop = aggregate_up(lopsided, 0, leaf_msgs, WEIGHTED)
    assert np.max(np.abs(w_star.payload.w - w_lop.payload.w)) <= 1e-12
    assert w_star.weight == w_lop.weight == 5
    assert np.max(np.abs(w_star.payload.w - np.mean(values))) <= 1e-12

    u_star = aggregate_up(star, 0, leaf_msgs, UNWEIGHTED)
    u_lop = aggregate_up(lopsided, 0, leaf_msgs, UNWEIGHTED)
    assert not np.allclose(u_star.payload.w, u_lop.payload.w)
    # unweighted mode equals the plain recursive per-level average
    oracle = recursive_average(
        lopsided, 0, {k: m.payload.w for k, m in leaf_msgs.items()})
    assert np.max(np.abs(u_lop.payload.w - oracle)) <= 1e-12


def test_random_shapes_weighted_equals_flat_mean():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(4, 30))
        children = {}
        for i in range(1, n):
            children.setdefault(int(rng.integers(0, i)), []).append(i)
        leaves = [i for i in range(n) if i not in children]
        leaf_msgs = {
            i: AggregateMessage(1, 0, ModelParams(rng.normal(size=(2, H)),
                                                  rng.normal(size=2)), 1)
            for i in leaves
        }
        agg = aggregate_up(children, 0, leaf_msgs, WEIGHTED)
        flat = flat_mean([leaf_msgs[i].payload.w for i in leaves])
        assert np.max(np.abs(agg.payload.w - flat)) <= 1e-9
        assert agg.weight == len(leaves)


def test_wire_roundtrip():
    rng = np.random.default_rng(1)
    m = AggregateMessage(0xDEADBEEF << 96 | 0x1234, 7,
                         ModelParams(rng.normal(size=(2, H)), rng.normal(size=2)), 9)
    blob = m.serialize()
    assert len(blob) == m.nbytes()
    back = AggregateMessage.deserialize(blob)
    assert back.group == m.group and back.round == 7 and back.weight == 9
    assert np.array_equal(back.payload.w, m.payload.w)
    assert np.array_equal(back.payload.b, m.payload.b)


# -- root update --------------------------------------------------------------------

def test_zero_aggregate_leaves_weights_unchanged():
    w = const_params(5.0, H)
    out = root_update(w, AggregateMessage(1, 0, ModelParams.zeros(H), 1), eta=0.7)
    assert np.array_equal(out.w, w.w)


def test_zero_eta_leaves_weights_unchanged():
    w = const_params(5.0, H)
    out = root_update(w, msg(123, h=H), eta=0.0)
    assert np.array_equal(out.w, w.w)


def test_stale_round_rejected():
    with pytest.raises(ProtocolError):
        root_update(ModelParams.zeros(H), msg(1, rnd=3, h=H), eta=1.0,
                    expected_round=4)


def test_single_leaf_eta_one_recovers_finetuned_weights_exactly():
    ids, overlay, sim, trees, gid, root = build_world(2, fanout=1, seed=5)
    leaf = next(nid for nid in ids if nid != root)
    data = gaussian_data([leaf], H, seed=1)
    cfg = RoundConfig(eta=1.0, steps=4, batch=8, seed=3)
    session = FederatedSession(trees, gid, data, H, cfg, lam=0.4, eta_local=0.1)
    w0 = session.global_params.copy()
    assert np.array_equal(w0.w, np.zeros((2, H)))

    rng = np.random.default_rng([3, 0, leaf])
    delta, _state = local_finetune(data[leaf], w0,
                                   PersonalState(w0.copy(), 0.4, 0.1), 4, 8, rng)
    session.centralized_round()
    expected = w0 - delta  # the leaf's own fine-tuned weights
    assert np.array_equal(session.global_params.w, expected.w)
    assert np.array_equal(session.global_params.b, expected.b)


# -- centralized rounds ----------------------------------------------------------------

def test_star_round_equals_flat_average_oracle():
    n = 25
    ids, overlay, sim, trees, gid, root = build_world(
        n, fanout=n, seed=9, intercept=False)
    data = gaussian_data([i for i in ids if i != root], H, seed=2)
    cfg = RoundConfig(eta=1.0, steps=3, batch=10, seed=7)
    session = FederatedSession(trees, gid, data, H, cfg, lam=0.5, eta_local=0.1)
    w0 = session.global_params.copy()

    finetuned = []
    for nid in sorted(data):
        rng = np.random.default_rng([7, 0, nid])
        delta, _ = local_finetune(data[nid], w0,
                                  PersonalState(w0.copy(), 0.5, 0.1), 3, 10, rng)
        finetuned.append((w0 - delta).w)
    oracle = flat_mean(finetuned)

    metrics = session.centralized_round()
    assert np.max(np.abs(session.global_params.w - oracle)) <= 1e-9
    assert metrics.root_weight == len(data)  # conservation
    assert metrics.mode == CENTRALIZED


def test_bounded_fanout_bounds_per_node_ingress():
    ids, overlay, sim, trees, gid, root = build_world(300, fanout=8, seed=42)
    data = gaussian_data(ids, H, seed=3, n_per_node=8)
    cfg = RoundConfig(eta=1.0, steps=1, batch=4, seed=1)
    session = FederatedSession(trees, gid, data, H, cfg)
    metrics = session.centralized_round()
    assert metrics.max_agg_ingress_msgs <= 8
    assert metrics.root_weight == len(session.contributing_leaves())


def test_star_round_floods_the_root():
    n = 120
    ids, overlay, sim, trees, gid, root = build_world(
        n, fanout=n, seed=23, intercept=False)
    data = gaussian_data([i for i in ids if i != root], H, seed=4, n_per_node=8)
    session = FederatedSession(trees, gid, data, H,
                               RoundConfig(steps=1, batch=4, seed=2))
    metrics = session.centralized_round()
    assert metrics.max_agg_ingress_msgs == n - 1


def test_round_log_exposes_per_node_bytes_and_loss(tmp_path):
    import json

    from dhtfed.fedagg import write_round_log

    ids, overlay, sim, trees, gid, root = build_world(20, fanout=4, seed=51)
    data = gaussian_data(ids, H, seed=14)
    session = FederatedSession(trees, gid, data, H,
                               RoundConfig(steps=5, batch=8, seed=3))
    history = [session.centralized_round() for _ in range(3)]
    assert all(np.isfinite(m.loss) for m in history)
    assert history[-1].loss < history[0].loss  # separable data: training helps

    path = tmp_path / "rounds.jsonl"
    write_round_log(history, str(path), accuracy={0: 0.5, 1: 0.75, 2: 0.9})
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert len(lines) == 3
    assert lines[0]["mode"] == CENTRALIZED
    assert lines[2]["accuracy"] == 0.9
    assert lines[0]["ingress_bytes"]  # hex-keyed per-node byte counts
    assert all(len(k) == 32 for k in lines[0]["ingress_bytes"])


def test_rounds_are_deterministic_bit_for_bit():
    def run():
        ids, overlay, sim, trees, gid, root = build_world(30, fanout=4, seed=15)
        data = gaussian_data(ids, H, seed=5)
        session = FederatedSession(trees, gid, data, H,
                                   RoundConfig(steps=5, batch=8, seed=21))
        session.centralized_round()
        session.centralized_round()
        return session.global_params

    a, b = run(), run()
    assert np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b)


# -- decentralized rounds -----------------------------------------------------------------

def test_two_friends_one_hop_share_their_average():
    a, b = const_params(1.0), const_params(3.0)
    buffers = {1: {1: a}, 2: {2: b}}
    social = SocialGraph({1: {2}, 2: {1}})
    merged = gossip_merge(buffers, social)
    for nid in (1, 2):
        mean = buffer_mean(merged[nid])
        assert np.array_equal(mean.w, np.full((2, 1), 2.0))


def test_ring_of_eight_reaches_global_mean_in_diameter_hops():
    ids = list(range(8))
    social = SocialGraph.ring(ids)
    rng = np.random.default_rng(3)
    values = {i: ModelParams(rng.normal(size=(2, 1)), rng.normal(size=2))
              for i in ids}
    buffers = {i: {i: values[i]} for i in ids}
    for _ in range(8):
        buffers = gossip_merge(buffers, social)
    target = flat_mean([values[i].w for i in ids])
    for i in ids:
        assert reachable_within(social.friends, i, 8) == set(ids)
        assert np.max(np.abs(buffer_mean(buffers[i]).w - target)) <= 1e-6


def test_gossip_contents_match_reachability_oracle():
    ids = list(range(10))
    social = SocialGraph.ring_with_chords(ids, chords=3, seed=5)
    buffers = {i: {i: const_params(i)} for i in ids}
    for k in range(1, 4):
        buffers = gossip_merge(buffers, social)
        for i in ids:
            assert set(buffers[i]) == reachable_within(social.friends, i, k)


def test_k0_complete_graph_equals_centralized_star():
    def centralized():
        ids, overlay, sim, trees, gid, root = build_world(
            20, fanout=20, seed=31, intercept=False)
        data = gaussian_data([i for i in ids if i != root], H, seed=6)
        s = FederatedSession(trees, gid, data, H,
                             RoundConfig(eta=1.0, steps=2, batch=8, seed=11))
        s.centralized_round()
        return s.global_params

    def decentralized():
        ids, overlay, sim, trees, gid, root = build_world(
            20, fanout=20, seed=31, intercept=False)
        data = gaussian_data([i for i in ids if i != root], H, seed=6)
        s = FederatedSession(trees, gid, data, H,
                             RoundConfig(eta=1.0, steps=2, batch=8, seed=11))
        s.decentralized_round(SocialGraph.complete(sorted(data)), k_gossip=0)
        return s.global_params

    wc, wd = centralized(), decentralized()
    assert np.max(np.abs(wc.w - wd.w)) <= 1e-9
    assert np.max(np.abs(wc.b - wd.b)) <= 1e-9


def test_decentralized_conservation_and_privacy():
    ids, overlay, sim, trees, gid, root = build_world(24, fanout=4, seed=37)
    data = gaussian_data(ids, H, seed=7, n_per_node=10)
    session = FederatedSession(trees, gid, data, H,
                               RoundConfig(steps=1, batch=5, seed=13, gossip_k=2))
    social = SocialGraph.ring_with_chords(session.contributing_leaves(),
                                          chords=4, seed=3)
    metrics = session.decentralized_round(social)
    assert metrics.root_weight == metrics.contributors
    assert audit_decentralized_privacy(session.msg_log, social) == []
    assert metrics.mode == DECENTRALIZED


def test_k0_direct_upload_is_flagged_by_the_audit():
    ids, overlay, sim, trees, gid, root = build_world(16, fanout=4, seed=41)
    data = gaussian_data(ids, H, seed=8, n_per_node=10)
    session = FederatedSession(trees, gid, data, H,
                               RoundConfig(steps=1, batch=5, seed=17))
    social = SocialGraph.ring(session.contributing_leaves())
    session.decentralized_round(social, k_gossip=0)
    assert len(audit_decentralized_privacy(session.msg_log, social)) > 0


def test_isolated_leaf_contributes_directly():
    ids, overlay, sim, trees, gid, root = build_world(12, fanout=4, seed=43)
    data = gaussian_data(ids, H, seed=9, n_per_node=10)
    session = FederatedSession(trees, gid, data, H,
                               RoundConfig(steps=1, batch=5, seed=19, gossip_k=2))
    leaves = session.contributing_leaves()
    iso, rest = leaves[0], leaves[1:]
    friends = SocialGraph.ring(rest).friends
    friends[iso] = set()
    social = SocialGraph(friends)
    assert social.isolated() == [iso]
    metrics = session.decentralized_round(social)
    assert metrics.root_weight == len(leaves)  # isolated one still counted
    # its raw weight-1 forward is excused: fewer than two friends
    assert audit_decentralized_privacy(session.msg_log, social) == []


def test_social_graph_validation():
    with pytest.raises(ValueError):
        SocialGraph({1: {1}})
    with pytest.raises(ValueError):
        SocialGraph({1: {2}, 2: set()})


# -- ensemble inference ---------------------------------------------------------------------

def force_vote(session, nid, label):
    """Pin a leaf's personalized head so it always votes `label`."""
    bias = np.array([10.0, -10.0]) if label == 0 else np.array([-10.0, 10.0])
    session.personal[nid].w_per = ModelParams(np.zeros((2, H)), bias)


def test_strict_majority_wins():
    ids, overlay, sim, trees, gid, root = build_world(4, fanout=3, seed=3)
    data = gaussian_data(ids, H, seed=10, n_per_node=4)
    session = FederatedSession(trees, gid, data, H, RoundConfig(seed=1))
    leaves = session.contributing_leaves()[:3]
    session.data = {nid: data[nid] for nid in leaves}
    force_vote(session, leaves[0], 1)
    force_vote(session, leaves[1], 1)
    force_vote(session, leaves[2], 0)
    labels, tally = session.ensemble_infer(np.zeros((1, H)))
    assert labels.tolist() == [1]
    assert tally[0].tolist() == [1.0, 2.0]


def test_single_leaf_root_outputs_its_prediction():
    ids, overlay, sim, trees, gid, root = build_world(2, fanout=1, seed=6)
    leaf = next(nid for nid in ids if nid != root)
    data = gaussian_data([leaf], H, seed=11, n_per_node=6)
    session = FederatedSession(trees, gid, data, H, RoundConfig(seed=1))
    force_vote(session, leaf, 0)
    labels, _ = session.ensemble_infer(np.ones((5, H)))
    assert labels.tolist() == [0] * 5


def test_tie_breaks_on_probability_mass_then_label_zero():
    ids, overlay, sim, trees, gid, root = build_world(3, fanout=2, seed=8)
    data = gaussian_data(ids, H, seed=12, n_per_node=4)
    session = FederatedSession(trees, gid, data, H, RoundConfig(seed=1))
    leaves = session.contributing_leaves()[:2]
    session.data = {nid: data[nid] for nid in leaves}
    # one confident vote for 1, one lukewarm vote for 0
    session.personal[leaves[0]].w_per = ModelParams(np.zeros((2, H)),
                                                    np.array([-8.0, 8.0]))
    session.personal[leaves[1]].w_per = ModelParams(np.zeros((2, H)),
                                                    np.array([0.2, 0.0]))
    labels, _ = session.ensemble_infer(np.zeros((1, H)))
    assert labels.tolist() == [1]  # mass favors the confident voter
    # exact mass tie goes to label 0
    session.personal[leaves[0]].w_per = ModelParams(np.zeros((2, H)),
                                                    np.array([8.0, -8.0]))
    session.personal[leaves[1]].w_per = ModelParams(np.zeros((2, H)),
                                                    np.array([-8.0, 8.0]))
    labels, _ = session.ensemble_infer(np.zeros((1, H)))
    assert labels.tolist() == [0]


def test_root_tally_matches_flat_recount():
    ids, overlay, sim, trees, gid, root = build_world(40, fanout=4, seed=29)
    data = gaussian_data(ids, H, seed=13, n_per_node=6)
    session = FederatedSession(trees, gid, data, H, RoundConfig(seed=1))
    rng = np.random.default_rng(5)
    for nid in session.contributing_leaves():
        session.personal[nid].w_per = ModelParams(rng.normal(size=(2, H)),
                                                  rng.normal(size=2))
    x = rng.normal(size=(200, H))
    labels, tally = session.ensemble_infer(x)

    from dhtfed.model import forward_batch
    leaves = session.contributing_leaves()
    votes = np.stack([np.argmax(forward_batch(x, session.personal[n].w_per), axis=1)
                      for n in leaves])
    masses = np.stack([forward_batch(x, session.personal[n].w_per) for n in leaves])
    assert np.array_equal(labels, flat_majority(votes, masses))
    assert np.array_equal(tally.sum(axis=1), np.full(200, float(len(leaves))))


def test_no_live_leaves_rejected():
    ids, overlay, sim, trees, gid, root = build_world(3, fanout=2, seed=9)
    session = FederatedSession(trees, gid, {}, H, RoundConfig(seed=1))
    with pytest.raises(ProtocolError):
        session.ensemble_infer(np.zeros((1, H)))
    with pytest.raises(ProtocolError):
        session.centralized_round()


# -- mode selection ------------------------------------------------------------------------

def test_all_zero_stats_stay_centralized():
    assert select_mode([]) == CENTRALIZED
    assert select_mode([(0, 0.0), (0, 0.0)]) == CENTRALIZED


def test_threshold_edge_switches_to_decentralized():
    threshold = 1 << 20
    assert select_mode([(threshold + 1, 0.0)], bytes_threshold=threshold) == DECENTRALIZED
    assert select_mode([(threshold, 0.0)], bytes_threshold=threshold) == CENTRALIZED
    assert select_mode([(0, 2001.0)], latency_threshold=2000.0) == DECENTRALIZED


def test_hysteresis_limits_switching_rate():
    sel = ModeSelector(bytes_threshold=100, latency_threshold=1e9)
    oscillating = [150, 50] * 10
    modes = [sel.update(b, 0.0) for b in oscillating]
    switches = sum(1 for a, b in zip(modes, modes[1:]) if a != b)
    # one switch at most per two rounds
    assert switches <= len(modes) // 2
    for i in range(1, len(modes) - 1):
        if modes[i] != modes[i - 1]:
            assert modes[i + 1] == modes[i]
