import numpy as np
import pytest

import gflsim.fedruntime.runtime as rt
from gflsim.encoder import AggregatedContext, HiddenPacket, ModelParams, fedavg, local_gradient, mean_packet, mlp_jacobian
from gflsim.fedruntime import (
    DPConfig,
    InProcTransport,
    MessageKind,
    RoundError,
    Server,
    TrainingConfig,
    client_hidden_estimate,
    run_baseline,
    run_round,
    run_training,
    server_aggregate_hidden,
)
from gflsim.fedruntime.transport import SERVER
from gflsim.graphgen import TRAIN, ClientDataset, Graph, PropagationMatrix, propagation_matrix
from oracles import centralized_appnp_step, centralized_mlp_step


def history_key(h):
    return [(r.update, r.train_loss, r.valid_loss, r.train_acc, r.valid_acc) for r in h.records], h.test_acc, h.final_params.flat().tobytes()


# ---------------------------------------------------------------- hidden estimates and aggregation


def test_client_hidden_estimate_examples():
    rng = np.random.default_rng(0)
    w = ModelParams.glorot(4, 3, 2, rng)
    x = rng.standard_normal(4)
    one = client_hidden_estimate(x[None, :], w)
    ref = mlp_jacobian(x, w)
    assert np.allclose(one.h, ref.h, atol=1e-15) and np.allclose(one.jac, ref.jac, atol=1e-15)
    two = client_hidden_estimate(np.stack([x, x]), w)
    assert np.allclose(two.h, one.h, atol=1e-15) and np.allclose(two.jac, one.jac, atol=1e-15)
    zero = ModelParams(np.zeros((4, 3)), np.zeros((3, 2)))
    assert np.array_equal(client_hidden_estimate(np.stack([x, -x]), zero).h, np.zeros(2))
    with pytest.raises(ValueError):
        client_hidden_estimate(np.zeros((0, 4)), w)


def packets(rng, n, c=2, size=5):
    return [HiddenPacket(rng.standard_normal(c), rng.standard_normal((c, size))) for _ in range(n)]


def test_aggregate_k2_example():
    rng = np.random.default_rng(1)
    pk = packets(rng, 2)
    a = PropagationMatrix(np.array([[0.95, 0.05], [0.05, 0.95]]), 0.1, 10)
    ctx = server_aggregate_hidden(a, pk)
    assert np.allclose(ctx[0].c_vec, 0.05 * pk[1].h)
    assert np.allclose(ctx[0].c_jac, 0.05 * pk[1].jac)
    assert np.allclose(ctx[1].c_vec, 0.05 * pk[0].h)


def test_aggregate_trivial_cases():
    rng = np.random.default_rng(2)
    a = propagation_matrix(Graph(3, ((0, 1), (1, 2))), 0.1, 10, "teleport")
    zeros = [HiddenPacket(np.zeros(2), np.zeros((2, 5))) for _ in range(3)]
    for c in server_aggregate_hidden(a, zeros).values():
        assert not c.c_vec.any() and not c.c_jac.any()
    ident = PropagationMatrix(np.eye(3), 0.0, 1)
    for c in server_aggregate_hidden(ident, packets(rng, 3)).values():
        assert not c.c_vec.any() and not c.c_jac.any()


def test_aggregate_missing_packet_names_client():
    rng = np.random.default_rng(3)
    pk = dict(enumerate(packets(rng, 3)))
    del pk[1]
    with pytest.raises(RoundError, match="client 1"):
        server_aggregate_hidden(np.eye(3), pk)


def test_aggregate_is_linear():
    rng = np.random.default_rng(4)
    a = propagation_matrix(Graph(4, ((0, 1), (1, 2), (2, 3))), 0.1, 10, "teleport")
    pk = packets(rng, 4)
    base = server_aggregate_hidden(a, pk)
    scaled = server_aggregate_hidden(a, [HiddenPacket(3 * p.h, 3 * p.jac) for p in pk])
    for k in range(4):
        assert np.allclose(scaled[k].c_vec, 3 * base[k].c_vec)
        assert np.allclose(scaled[k].c_jac, 3 * base[k].c_jac)


# ---------------------------------------------------------------- batched kernels against the reference path


def test_batched_packets_match_reference(small_sc, small_dnc):
    for _, data in (small_sc, small_dnc):
        states = rt.build_states(data, 0)
        w = ModelParams.glorot(data.p, 8, 2, np.random.default_rng(5))
        got = rt.compute_packets(states, w, None)
        for s, pk in zip(states, got):
            ref = mean_packet(s.features, w)
            assert np.allclose(pk.h, ref.h, rtol=1e-12, atol=1e-15)
            assert np.allclose(pk.jac, ref.jac, rtol=1e-12, atol=1e-15)


def test_batched_packets_uneven_row_counts():
    rng = np.random.default_rng(6)
    feats = [rng.standard_normal((n, 5)) for n in (1, 4, 2, 7)]
    labels = [np.eye(2)[rng.integers(2, size=len(f))] for f in feats]
    splits = [np.full(len(f), TRAIN, dtype=np.int8) for f in feats]
    data = ClientDataset(feats, labels, splits, np.ones(4, dtype=bool))
    states = rt.build_states(data, 0)
    w = ModelParams.glorot(5, 3, 2, rng)
    for s, pk in zip(states, rt.compute_packets(states, w, None)):
        ref = mean_packet(s.features, w)
        assert np.allclose(pk.h, ref.h, atol=1e-14) and np.allclose(pk.jac, ref.jac, atol=1e-14)


def test_cohort_steps_match_reference(small_sc):
    _, data = small_sc
    cfg = TrainingConfig(eta=0.3, T=5, I=5, batch_size=3, hidden=6)
    rng = np.random.default_rng(7)
    w0 = ModelParams.glorot(data.p, 6, 2, rng)
    states = rt.build_states(data, 11)
    ref_states = rt.build_states(data, 11)
    a = np.diag(rng.uniform(0.1, 0.9, data.n_clients))
    for s, r in zip(states, ref_states):
        ctx = AggregatedContext(rng.standard_normal(2), rng.standard_normal((2, w0.size)) * 0.1)
        s.params = r.params = w0
        s.ctx = r.ctx = ctx
    rt.local_updates([s for s in states if s.labeled], cfg, 5, a)
    for r in ref_states:
        if not r.labeled:
            continue
        w = r.params
        for _ in range(5):
            idx = r.next_batch(3)
            w = w.step(local_gradient(r.x_train[idx], r.y_train[idx], w, r.ctx, a[r.id, r.id]), cfg.eta)
        assert np.allclose(states[r.id].params.flat(), w.flat(), rtol=1e-12, atol=1e-14)


def test_batches_are_without_replacement_per_epoch(small_sc):
    _, data = small_sc
    s = rt.build_states(data, 0)[0]
    n = len(s.x_train)
    seen = np.concatenate([s.next_batch(2) for _ in range(n // 2)])
    assert sorted(seen.tolist()) == list(range(n))
    assert np.array_equal(s.next_batch(n + 3), np.arange(n))


# ---------------------------------------------------------------- protocol


def dnc_oracle_trajectory(layout, data, cfg, updates):
    a = propagation_matrix(layout.graph, cfg.alpha, cfg.M, cfg.propagation).matrix
    x = np.concatenate(data.features)
    y = np.concatenate(data.labels)
    labeled = np.flatnonzero(data.labeled)
    w = rt.initial_params(data, cfg)
    w1, w2 = w.w1.copy(), w.w2.copy()
    out = []
    for _ in range(updates):
        w1, w2 = centralized_appnp_step(x, y, labeled, a, w1, w2, cfg.eta)
        out.append(np.concatenate([w1.ravel(), w2.ravel()]))
    return out


def test_i1_matches_centralized_appnp(small_dnc):
    layout, data = small_dnc
    cfg = TrainingConfig(eta=0.5, T=1, I=1, batch_size=1, hidden=16, seed=3)
    oracle = dnc_oracle_trajectory(layout, data, cfg, 30)
    for t in (1, 7, 30):
        h = run_training(cfg.replace(T=t), layout.graph, data)
        assert np.abs(h.final_params.flat() - oracle[t - 1]).max() < 1e-12


def test_fedmlp_i1_matches_centralized_mlp(small_sc):
    _, data = small_sc
    cfg = TrainingConfig(eta=0.2, T=12, I=1, batch_size=100, hidden=8, baseline="fedmlp", seed=1)
    h = run_baseline(cfg, data)
    w = rt.initial_params(data, cfg)
    labeled = [k for k in range(data.n_clients) if data.labeled[k]]
    w1, w2 = w.w1.copy(), w.w2.copy()
    for _ in range(12):
        # FedAvg of full-batch client steps: mean over clients of per-client mean-loss gradients
        steps = [centralized_mlp_step(*data.rows(k, TRAIN), w1, w2, cfg.eta) for k in labeled]
        w1 = sum(s[0] for s in steps) / len(steps)
        w2 = sum(s[1] for s in steps) / len(steps)
    assert np.abs(h.final_params.flat() - np.concatenate([w1.ravel(), w2.ravel()])).max() < 1e-12


def test_local_mlps_single_client_equals_fedmlp(small_sc):
    _, data = small_sc
    one = ClientDataset(data.features[:1], data.labels[:1], data.splits[:1], data.labeled[:1])
    cfg = TrainingConfig(eta=0.2, T=20, I=5, batch_size=3, hidden=8, seed=2)
    a = run_baseline(cfg.replace(baseline="local_mlps"), one)
    b = run_baseline(cfg.replace(baseline="fedmlp"), one)
    assert np.array_equal(a.final_params[0].flat(), b.final_params.flat())
    assert a.test_acc == b.test_acc
    assert [r.train_loss for r in a.records] == [r.train_loss for r in b.records]


def test_local_mlps_rejects_unlabeled_test_clients(small_dnc):
    _, data = small_dnc
    with pytest.raises(ValueError, match="no training rows"):
        run_baseline(TrainingConfig(eta=0.1, T=2, baseline="local_mlps"), data)


def test_zero_updates(small_dnc):
    layout, data = small_dnc
    cfg = TrainingConfig(eta=0.5, T=0, hidden=8)
    h = run_training(cfg, layout.graph, data)
    assert h.records == []
    assert np.array_equal(h.final_params.flat(), rt.initial_params(data, cfg).flat())


def test_records_and_best_snapshot(small_sc):
    layout, data = small_sc
    h = run_training(TrainingConfig(eta=0.3, T=40, I=10, batch_size=4, hidden=8), layout.graph, data)
    assert h.updates() == [10, 20, 30, 40]
    assert h.best_valid_loss == min(r.valid_loss for r in h.records)
    assert 0 <= h.test_acc <= 1
    partial = run_training(TrainingConfig(eta=0.3, T=25, I=10, batch_size=4, hidden=8), layout.graph, data)
    assert partial.updates() == [10, 20, 25]


def test_dp_sigma_zero_is_identity(small_dnc):
    layout, data = small_dnc
    cfg = TrainingConfig(eta=0.5, T=30, I=5, hidden=8)
    a = run_training(cfg, layout.graph, data)
    b = run_training(cfg.replace(dp=DPConfig("h_and_grad", 0.0)), layout.graph, data)
    assert history_key(a) == history_key(b)
    c = run_training(cfg.replace(dp=DPConfig("h", 0.5)), layout.graph, data)
    assert history_key(a) != history_key(c)


def test_determinism_threads_and_transport(small_sc, monkeypatch):
    layout, data = small_sc
    monkeypatch.setattr(rt, "CHUNK", 4)  # several blocks so threads actually split work
    cfg = TrainingConfig(eta=0.3, T=30, I=5, batch_size=3, hidden=8, seed=4, dp=DPConfig("h_and_grad", 0.1))
    base = history_key(run_training(cfg, layout.graph, data))
    assert history_key(run_training(cfg, layout.graph, data)) == base
    assert history_key(run_training(cfg.replace(threads=3), layout.graph, data)) == base
    assert history_key(run_training(cfg.replace(transport="socket", threads=2), layout.graph, data)) == base


def make_round(data, graph, cfg):
    states = rt.build_states(data, cfg.seed)
    w0 = rt.initial_params(data, cfg)
    # give labeled clients distinct models so FedAvg is non-trivial
    rng = np.random.default_rng(9)
    for s in states:
        s.params = ModelParams.from_flat(w0.flat() + 0.01 * rng.standard_normal(w0.size), *w0.shape) if s.labeled else w0
    a = propagation_matrix(graph, cfg.alpha, cfg.M, cfg.propagation)
    tr = InProcTransport(range(data.n_clients))
    labeled = [s.id for s in states if s.labeled]
    return states, Server(a, data.n_clients, labeled, tr), tr


def test_round_conservation_and_unlabeled_rule(small_dnc):
    layout, data = small_dnc
    cfg = TrainingConfig(eta=0.5, T=10, I=3, hidden=8)
    states, server, tr = make_round(data, layout.graph, cfg)
    expected = fedavg([s.params for s in states if s.labeled])
    for rnd in range(3):
        run_round(states, server, cfg, rnd)
        if rnd == 0:
            for s in states:
                if not s.labeled:
                    assert np.array_equal(s.params.flat(), expected.flat())
    for s in states:
        if s.labeled:
            assert tr.sent[(s.id, MessageKind.MODEL_UPLOAD)] == 3
            assert tr.sent[(s.id, MessageKind.HIDDEN_UPLOAD)] == 3
            assert tr.received[(s.id, MessageKind.MODEL_BROADCAST)] == 3
            assert tr.received[(s.id, MessageKind.AGG_BROADCAST)] == 3
            assert s.ctx_round == 2
        else:
            assert tr.sent[(s.id, MessageKind.MODEL_UPLOAD)] == 0
            assert tr.received[(s.id, MessageKind.AGG_BROADCAST)] == 0
            assert s.ctx is None
    assert tr.received[(SERVER, MessageKind.HIDDEN_UPLOAD)] == 3 * data.n_clients


def test_context_frozen_during_local_steps(small_dnc):
    layout, data = small_dnc
    cfg = TrainingConfig(eta=0.5, T=10, I=4, hidden=8)
    states, server, tr = make_round(data, layout.graph, cfg)
    run_round(states, server, cfg, 0, steps=0)
    snap = {s.id: (s.ctx.c_vec.copy(), s.ctx.c_jac.copy()) for s in states if s.labeled}
    w_bar = server.w_bar
    rt.local_updates([s for s in states if s.labeled], cfg, 4, server.a_tilde.matrix)
    for s in states:
        if s.labeled:
            assert not s.ctx.c_vec.flags.writeable and not s.ctx.c_jac.flags.writeable
            assert np.array_equal(s.ctx.c_vec, snap[s.id][0]) and np.array_equal(s.ctx.c_jac, snap[s.id][1])
            assert not np.array_equal(s.params.flat(), w_bar.flat())


class DroppingTransport(InProcTransport):
    def send(self, m):
        if m.kind is MessageKind.HIDDEN_UPLOAD and m.client_id == 3:
            return
        super().send(m)


def test_transport_failure_aborts_round(small_dnc):
    layout, data = small_dnc
    cfg = TrainingConfig(eta=0.5, T=5, I=5, hidden=8)
    with pytest.raises(RoundError, match="round 0"):
        run_training(cfg, layout.graph, data, transport=DroppingTransport(range(data.n_clients)))


def test_training_config_validation():
    for bad in ({"T": -1}, {"I": 0}, {"eta": 0.0}, {"batch_size": 0}, {"baseline": "gcn"}):
        with pytest.raises(ValueError):
            TrainingConfig(**{"eta": 0.1, "T": 1, **bad})
    with pytest.raises(ValueError):
        DPConfig("weights", 0.1)
    with pytest.raises(ValueError):
        DPConfig("h", -0.1)


def test_graph_size_mismatch(small_dnc):
    _, data = small_dnc
    with pytest.raises(ValueError, match="clients"):
        run_training(TrainingConfig(eta=0.1, T=1), Graph(3, ((0, 1),)), data)
