from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from fedunlearn import adversary as adv
from fedunlearn.errors import DimensionError, DomainError
from fedunlearn.fedsim import (
    ClientState,
    FedConfig,
    GlobalState,
    GradientRecord,
    RecordStore,
    SharedDelta,
    Simulation,
    aggregate,
    client_stream,
    local_update,
    run_round,
    sample_clients,
)
from fedunlearn.numkernel import RngStream
from fedunlearn.recmodel import ScorerParams, bce_loss_and_grads, init_scorer, sample_negatives, xavier_init


def small_world(head="dsvae", n_users=12, n_items=25, dim=6, seed=0, scorer="dot"):
    rng = RngStream(seed, ("world",))
    items = xavier_init((n_items, dim), rng.derive("items"))
    adversary = adv.init_adversary(dim, 2, head, rng.derive("adv"), hidden=8) if head else None
    state = GlobalState(items, init_scorer(scorer, dim, rng.derive("sc"), hidden=4), adversary)
    clients = {}
    for u in range(n_users):
        r = rng.derive("u", u)
        train = np.sort(r.choice(n_items, size=5, replace=False))
        clients[u] = ClientState(u, r.normal(dim) * 0.3, u % 2, train)
    return state, clients


def copy_clients(clients):
    return {u: ClientState(c.user, c.em_u.copy(), c.y, c.train_items) for u, c in clients.items()}


def test_sample_clients_rules():
    rng = RngStream(1)
    assert sample_clients(range(7), 1.0, rng) == list(range(7))
    ten = sample_clients(range(100), 0.1, RngStream(2))
    assert len(set(ten)) == 10
    assert ten == sample_clients(range(100), 0.1, RngStream(2))
    assert len(sample_clients(range(10), 0.3, rng)) == 3
    assert len(sample_clients(range(11), 0.1, rng)) == 2
    with pytest.raises(DomainError):
        sample_clients([], 0.5, rng)
    with pytest.raises(DomainError):
        sample_clients(range(3), 0.0, rng)


def test_aggregate_examples():
    state, _ = small_world(head=None)
    g = RngStream(3).normal((2, state.items.shape[1]))
    rows = np.array([1, 4])
    plus = SharedDelta(rows, g, {}, {})
    minus = SharedDelta(rows, -g, {}, {})
    out = aggregate(state, [plus, minus])
    assert np.allclose(out.items, state.items, rtol=0, atol=1e-15)
    assert out.round == state.round + 1
    single = aggregate(state, [plus])
    assert np.array_equal(single.items[rows], state.items[rows] + g)
    untouched = np.setdiff1d(np.arange(state.items.shape[0]), rows)
    assert np.array_equal(single.items[untouched], state.items[untouched])


def test_aggregate_weighted_mean():
    state = GlobalState(np.zeros((1, 1)), ScorerParams(), None)
    d0 = SharedDelta(np.array([0]), np.array([[0.0]]), {}, {})
    d4 = SharedDelta(np.array([0]), np.array([[4.0]]), {}, {})
    assert aggregate(state, [d0, d4], [1, 3]).items[0, 0] == 3.0
    with pytest.raises(DomainError):
        aggregate(state, [d0, d4], [0, 0])
    with pytest.raises(DimensionError):
        aggregate(state, [SharedDelta(np.array([0]), np.zeros((1, 2)), {}, {})])


def test_uniform_aggregate_is_mean_of_deltas():
    state, clients = small_world()
    cfg = FedConfig(lr=0.5, batch_size=2)
    ups = [local_update(clients[u], state, cfg, client_stream(RngStream(4), 0, u)) for u in range(5)]
    out = aggregate(state, [up.delta for up in ups])
    dense = np.zeros((5,) + state.items.shape)
    for k, up in enumerate(ups):
        dense[k][up.delta.item_rows] = up.delta.item_values
    assert np.allclose(out.items - state.items, dense.mean(axis=0), rtol=0, atol=1e-12)
    for name, v in state.adversary.arrays().items():
        mean = np.mean([up.delta.adversary[name] for up in ups], axis=0)
        assert np.allclose(out.adversary.arrays()[name] - v, mean, rtol=0, atol=1e-12)


def test_local_update_without_adversary_has_no_adversary_delta():
    state, clients = small_world(head=None)
    up = local_update(clients[0], state, FedConfig(adv_weight=0.0), RngStream(5))
    assert up.delta.adversary == {} and up.record is None and up.adv_loss is None


def test_local_update_is_deterministic():
    state, clients = small_world()
    cfg = FedConfig(lr=0.3, local_epochs=2, batch_size=2)
    a = local_update(clients[3], state, cfg, RngStream(6, 1))
    b = local_update(clients[3], state, cfg, RngStream(6, 1))
    assert np.array_equal(a.em_u, b.em_u)
    assert np.array_equal(a.delta.item_values, b.delta.item_values)
    assert all(np.array_equal(a.delta.adversary[k], b.delta.adversary[k]) for k in a.delta.adversary)
    assert a.record.to_json() == b.record.to_json()


def test_record_is_captured_even_when_skipped():
    state, clients = small_world(head="plain")
    c = clients[0]
    pred = adv.forward(state.adversary, c.em_u).prediction
    c.y = 1 - pred
    up = local_update(c, state, FedConfig(batch_size=100), RngStream(7))
    assert up.skipped == 1.0
    assert up.record is not None and up.record.y == c.y


@pytest.mark.parametrize("head", adv.HEADS)
def test_record_replays_bit_for_bit(head):
    state, clients = small_world(head=head)
    up = local_update(clients[2], state, FedConfig(), RngStream(8))
    rec = up.record
    noise = adv.NoiseDraw(rec.oracle.get("eps1"), rec.oracle.get("eps2"))
    trace = adv.forward(state.adversary, rec.oracle["em_u"], noise=noise)
    replay = adv.backward(state.adversary, trace, rec.y).final_layer()
    assert set(replay) == set(rec.grads)
    assert all(np.array_equal(replay[k], rec.grads[k]) for k in replay)


def test_single_client_round_equals_direct_sgd():
    state, clients = small_world(head=None, n_users=1)
    cfg = FedConfig(lr=0.2, fraction=1.0)
    rng = RngStream(9)
    new_state, log, _ = run_round(state, copy_clients(clients), cfg, rng)
    c = clients[0]
    rec_rng = client_stream(rng, 0, 0).derive("rec")
    rec_rng.permutation(c.train_items.size)
    negs = sample_negatives(c.train_items, state.items.shape[0], cfg.negatives * c.train_items.size, rec_rng)
    g = bce_loss_and_grads(c.em_u, c.train_items, negs, state.items, state.scorer)
    expected = state.items.copy()
    expected[g.item_rows] -= cfg.lr * g.grad_item_rows
    assert np.allclose(new_state.items, expected, rtol=0, atol=1e-12)
    assert log.clients == [0]


def test_zero_rounds_leave_state_unchanged():
    state, clients = small_world()
    sim = Simulation(state, clients, FedConfig(), RngStream(10)).run(0)
    assert sim.state is state and sim.logs == []


def test_parallel_matches_serial():
    state, clients = small_world(scorer="mlp")
    cfg = FedConfig(lr=0.3, fraction=0.5, batch_size=2)
    serial = Simulation(state.copy(), copy_clients(clients), cfg, RngStream(11)).run(4)
    with ThreadPoolExecutor(4) as ex:
        parallel = Simulation(state.copy(), copy_clients(clients), cfg, RngStream(11)).run(4, ex)
    a, b = serial.state.arrays(), parallel.state.arrays()
    assert set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)
    assert all(np.array_equal(serial.clients[u].em_u, parallel.clients[u].em_u) for u in clients)
    assert [lg.to_dict() for lg in serial.logs] == [lg.to_dict() for lg in parallel.logs]


def test_round_logs_and_privacy_partition():
    state, clients = small_world()
    sim = Simulation(state, clients, FedConfig(fraction=0.25, batch_size=2), RngStream(12)).run(3)
    for lg in sim.logs:
        assert len(lg.clients) == 3
        assert 0.0 <= lg.skip_rate <= 1.0
    server = sim.state.arrays()
    assert not any(k.startswith("user") or "em_u" in k for k in server)
    em_bytes = {c.em_u.tobytes() for c in sim.clients.values()}
    assert not any(v.tobytes() in em_bytes for v in server.values())


def test_record_store_keeps_latest_and_round_trips(tmp_path):
    state, clients = small_world()
    sim = Simulation(state, clients, FedConfig(fraction=0.5, batch_size=2), RngStream(13))
    sim.run(5, attack_round=2)
    assert set(sim.store.latest) <= set(clients)
    for rec in sim.store.records():
        assert rec.round in sim.store.snapshots
        assert rec.round == max(t for t, lg in enumerate(sim.logs) if rec.client in lg.clients)
    assert all(r.round < 2 for r in sim.attack_store.records())
    sim.store.write(tmp_path / "g.jsonl", tmp_path / "s.npz")
    back = RecordStore.read(tmp_path / "g.jsonl", tmp_path / "s.npz")
    assert [r.to_json() for r in back.records()] == [r.to_json() for r in sim.store.records()]
    for t, snap in sim.store.snapshots.items():
        assert all(np.array_equal(snap.arrays()[k], back.snapshots[t].arrays()[k]) for k in snap.arrays())


def test_gradient_record_json_round_trip():
    rec = GradientRecord(3, 7, "vae", {"Wmu": np.ones((2, 3)), "Wsigma": np.zeros((2, 3))}, 1,
                         {"em_u": np.arange(4.0)})
    assert GradientRecord.from_json(rec.to_json()).to_json() == rec.to_json()
