import io
import json
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lorarelay import _counters as C
from lorarelay import sim
from lorarelay.core import Protocol, ScenarioConfig, dbm_to_mw, validate_config
from lorarelay.draws import Draws, arrival_slots, draw
from lorarelay.engine import (
    CodedFrame,
    Discarded,
    GatewayStore,
    NothingNew,
    Phase,
    Recovered,
    RelayState,
    SensorMessage,
    World,
    decode_coded_frame,
    relay_transmit,
    run_world,
    step_slot,
    xor_bytes,
)


def msg(sid, seq, payload=None, idx=-1):
    payload = payload if payload is not None else bytes([sid, seq]) * 5
    return SensorMessage(sid, seq, payload, 0, idx)


# -- coded frames --


def test_decode_recovers_missing():
    m1, m2, m3 = msg(1, 5), msg(2, 7), msg(3, 2)
    store = GatewayStore()
    store.add(m1.key, m1.payload, 0)
    store.add(m2.key, m2.payload, 0)
    frame = CodedFrame.from_messages([m1, m2, m3])
    res = decode_coded_frame(store, frame)
    assert res == Recovered((3, 2), m3.payload)
    assert res.payload == xor_bytes([frame.xor_payload, m1.payload, m2.payload])


def test_decode_nothing_new_and_discarded():
    m1, m2, m3 = msg(1, 5), msg(2, 7), msg(3, 2)
    store = GatewayStore()
    for m in (m1, m2, m3):
        store.add(m.key, m.payload, 0)
    assert decode_coded_frame(store, CodedFrame.from_messages([m1, m2, m3])) == NothingNew()
    empty = GatewayStore()
    empty.add(m1.key, m1.payload, 0)
    assert decode_coded_frame(empty, CodedFrame.from_messages([m1, m2, m3])) == Discarded(2)


def test_decode_respects_horizon():
    m1, m2 = msg(1, 5), msg(2, 7)
    store = GatewayStore()
    store.add(m1.key, m1.payload, 3)
    frame = CodedFrame.from_messages([m1, m2])
    assert isinstance(decode_coded_frame(store, frame, since_slot=0), Recovered)
    # an entry older than the horizon is a previous message with a wrapped sequence number
    assert decode_coded_frame(store, frame, since_slot=10) == Discarded(2)


def test_coded_frame_bytes_on_air():
    frame = CodedFrame.from_messages([msg(1, 1), msg(2, 2), msg(3, 3)])
    assert frame.payload_bytes_on_air(1, 1) == 16
    with pytest.raises(ValueError):
        CodedFrame(b"\x00" * 10, ())


def test_xor_round_trip_random():
    rng = np.random.default_rng(4)
    for _ in range(10**4):
        m = int(rng.integers(1, 12))
        payloads = [rng.integers(0, 256, 10, dtype=np.uint8).tobytes() for _ in range(m)]
        msgs = [msg(i, i, p) for i, p in enumerate(payloads)]
        missing = int(rng.integers(0, m))
        store = GatewayStore()
        for i, mm in enumerate(msgs):
            if i != missing:
                store.add(mm.key, mm.payload, 0)
        res = decode_coded_frame(store, CodedFrame.from_messages(msgs))
        assert isinstance(res, Recovered)
        assert res.key == (missing, missing)
        assert res.payload == payloads[missing]


@given(st.lists(st.binary(min_size=4, max_size=4), min_size=1, max_size=10))
def test_xor_self_inverse(chunks):
    total = xor_bytes(chunks)
    assert xor_bytes([total, *chunks]) == bytes(4)


def test_recovered_payloads_match_traffic_trace():
    cfg = validate_config(ScenarioConfig(n_sensors=30))
    d = draw(cfg, 12, 30000)
    world = run_world(cfg, d)[4]
    originals = d.payloads(cfg.b_pl)
    assert world.recovered_payloads
    for index, payload in world.recovered_payloads.items():
        assert payload == originals[index].tobytes()


# -- relay transmit --


def test_relay_transmit_coded():
    r = RelayState(0, Protocol.SINGLE_RELAY, 11, buffer=[msg(1, 1), msg(2, 2), msg(3, 3)])
    (frame,) = relay_transmit(r)
    assert isinstance(frame, CodedFrame) and len(frame.id_list) == 3
    assert frame.payload_bytes_on_air(1, 1) == 16
    assert relay_transmit(RelayState(0, Protocol.SINGLE_RELAY, 11)) == []


def test_relay_transmit_immediate():
    m = msg(4, 4)
    assert relay_transmit(RelayState(0, Protocol.IMMEDIATE, 1, pending=m)) == [m]
    assert relay_transmit(RelayState(0, Protocol.IMMEDIATE, 1)) == []


def test_uncoded_selection_uniform():
    buf = [msg(i, i) for i in range(5)]
    rng = random.Random(8)
    counts = np.zeros(5)
    trials = 10**4
    for _ in range(trials):
        r = RelayState(0, Protocol.UNCODED, 5, buffer=list(buf))
        sent = relay_transmit(r, cap=2, tie=iter(rng.random, None))
        assert len(sent) == 2 and sent[0] != sent[1]
        for m in sent:
            counts[m.sensor_id] += 1
    assert np.all(np.abs(counts / trials - 0.4) <= 0.02)


def test_uncoded_under_capacity_sends_all():
    buf = [msg(1, 1)]
    assert relay_transmit(RelayState(0, Protocol.UNCODED, 5, buffer=buf), cap=2, tie=iter(())) == buf


# -- schedules --


def test_single_relay_phases():
    r = RelayState(0, Protocol.SINGLE_RELAY, 3)
    assert [r.phase(t) for t in range(5)] == [Phase.RECEIVE] * 3 + [Phase.TRANSMIT, Phase.RECEIVE]


def test_cooperative_one_listener_every_slot():
    cfg = validate_config(ScenarioConfig(protocol=Protocol.COOPERATIVE, n_r=4))
    world = World(cfg, draw(cfg, 1, 10))
    for t in range(10**5):
        states = [r.phase(t) for r in world.relays]
        assert states.count(Phase.RECEIVE) == 1
        # the other relay is transmitting or asleep, and the two never transmit together
        assert states.count(Phase.TRANSMIT) <= 1


def test_cooperative_run_asserts_schedule():
    cfg = validate_config(ScenarioConfig(protocol=Protocol.COOPERATIVE, n_r=3, n_sensors=40))
    d = draw(cfg, 5, 10**5)
    out = run_world(cfg, d, check_schedule=True)
    assert out[2][C.RW_SLOTS] == 10**5


def _hand_draws(cfg, tx, pw_gw, pw_relay, n_slots=4):
    m = len(tx)
    return Draws(
        n_slots=n_slots,
        tx_slot=np.array(tx, dtype=np.int64),
        created_slot=np.array(tx, dtype=np.int64),
        sensor=np.arange(m, dtype=np.int64),
        seq=np.zeros(m, dtype=np.int64),
        pw_gw=np.array(pw_gw, dtype=float),
        pw_relay=np.array(pw_relay, dtype=float),
        listener=np.zeros(m, dtype=np.int8),
        rg_pw=np.full(m + 1, 1.0),
        tie=np.full(m + 1, 0.5),
        d_gw=np.ones(cfg.n_sensors),
        d_relay=np.ones((2, cfg.n_sensors)),
        payload_seed=0,
    )


def test_step_no_arrivals():
    cfg = validate_config(ScenarioConfig(n_sensors=2))
    world = World(cfg, _hand_draws(cfg, [], [], []))
    step_slot(world)
    assert world.t == 1
    assert world.counters[C.RW_SLOTS] == 1 and world.counters[C.RW_EMPTY] == 1
    assert world.counters.sum() == 2
    assert not world.relays[0].buffer


def test_step_one_frame_heard_by_both():
    cfg = validate_config(ScenarioConfig(n_sensors=2))
    strong = dbm_to_mw(-100.0)
    world = World(cfg, _hand_draws(cfg, [0], [strong], [strong]))
    step_slot(world)
    assert world.outcome[0] == C.DIRECT
    assert world.heard[0] == 1
    assert world.relays[0].buffer[0].index == 0


def test_step_equal_powers_tie():
    cfg = validate_config(ScenarioConfig(n_sensors=2))
    p = dbm_to_mw(-100.0)
    world = World(cfg, _hand_draws(cfg, [0, 0], [p, p], [p, p]))
    step_slot(world)
    assert list(world.outcome) == [C.LOST, C.LOST]
    assert world.counters[C.RW_EMPTY] == 1


def test_immediate_forwarding_is_half_duplex():
    cfg = validate_config(ScenarioConfig(n_sensors=3, protocol=Protocol.IMMEDIATE))
    weak, strong = dbm_to_mw(-140.0), dbm_to_mw(-100.0)
    # frame 0 reaches only the relay in slot 0; frame 1 arrives while the relay forwards
    world = World(cfg, _hand_draws(cfg, [0, 1], [weak, weak], [strong, strong]))
    step_slot(world)
    step_slot(world)
    assert world.outcome[0] == C.VIA_RELAY
    assert world.heard[1] == 0
    assert world.outcome[1] == C.LOST


def test_trace_records():
    cfg = validate_config(ScenarioConfig(n_sensors=20))
    buf = io.StringIO()
    run_world(cfg, draw(cfg, 3, 300), trace=buf)
    records = [json.loads(line) for line in buf.getvalue().splitlines()]
    kinds = {r["event"] for r in records}
    assert {"sensor_tx", "gw_rx", "relay_rx"} <= kinds
    assert all("slot" in r for r in records)
    tx = [r for r in records if r["event"] == "sensor_tx"]
    assert all(isinstance(r["power_gw_dbm"], float) for r in tx)


# -- traffic --


def test_fifo_one_frame_per_slot():
    rng = np.random.default_rng(0)
    sensor, created, tx, rank = arrival_slots(rng, 5, 20.0, 0.083, 2000)
    assert np.all(tx > created)
    for s in range(5):
        t = tx[sensor == s]
        assert np.all(np.diff(t) >= 1)
        assert np.all(t == np.maximum.accumulate(t))


def test_arrival_rate():
    rng = np.random.default_rng(1)
    sensor, *_ = arrival_slots(rng, 50, 1 / 17.5, 0.083, 10**5)
    expected = 50 * 10**5 * 0.083 / 17.5
    assert abs(sensor.size - expected) < 4 * np.sqrt(expected)


# -- compiled kernel equivalence --


@pytest.mark.skipif(not sim.HAVE_COMPILED, reason="compiled kernel not built")
@pytest.mark.parametrize("protocol", list(Protocol), ids=lambda p: p.value)
@pytest.mark.parametrize("n_r", [1, 3, 11])
def test_kernel_matches_python_engine(protocol, n_r):
    for n, seed in ((10, 1), (40, 2)):
        for cap in (1, 2):
            cfg = validate_config(ScenarioConfig(n_sensors=n, protocol=protocol, n_r=n_r, uncoded_cap=cap))
            d = draw(cfg, seed, 20000)
            k_out, k_heard, k_cnt, k_air = sim._run_compiled(cfg, d)
            p_out, p_heard, p_cnt, p_air, _ = run_world(cfg, d)
            assert np.array_equal(k_out, p_out)
            assert np.array_equal(k_heard, p_heard)
            assert np.array_equal(k_cnt, p_cnt)
            np.testing.assert_allclose(k_air, p_air, rtol=1e-12)
