"""Object-level slot engine: messages, relays, coded frames and the gateway.

This is the readable reference implementation and the pure-Python fallback
of the compiled kernel. It carries real payloads so XOR recovery can be
checked byte for byte, and it can write a per-slot event trace.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, TextIO, Union

import numpy as np

from . import _counters as C
from .channel import resolve_capture
from .core import Protocol, ScenarioConfig, mw_to_dbm, resolved
from .draws import Draws

MessageId = tuple[int, int]


@dataclass(frozen=True)
class SensorMessage:
    sensor_id: int
    seq: int
    payload: bytes
    created_slot: int
    index: int = -1  # position in the run's traffic trace

    @property
    def key(self) -> MessageId:
        return (self.sensor_id, self.seq)


def xor_bytes(chunks: Sequence[bytes]) -> bytes:
    if not chunks:
        raise ValueError("nothing to XOR")
    size = len(chunks[0])
    acc = 0
    for c in chunks:
        if len(c) != size:
            raise ValueError("payloads differ in length")
        acc ^= int.from_bytes(c, "big")
    return acc.to_bytes(size, "big")


@dataclass(frozen=True)
class CodedFrame:
    """Bitwise XOR of buffered payloads plus the ids of the summed messages."""

    xor_payload: bytes
    id_list: tuple[MessageId, ...]

    def __post_init__(self):
        if not self.id_list:
            raise ValueError("a coded frame sums at least one message")

    @classmethod
    def from_messages(cls, messages: Sequence[SensorMessage]) -> "CodedFrame":
        return cls(xor_bytes([m.payload for m in messages]), tuple(m.key for m in messages))

    def payload_bytes_on_air(self, b_id: int, b_seq: int) -> int:
        return len(self.xor_payload) + len(self.id_list) * (b_id + b_seq)


class GatewayStore:
    """Messages the gateway holds, keyed by (sensor id, sequence number).

    Sequence numbers wrap, so each entry remembers the slot it arrived in and
    lookups can be restricted to a recent horizon.
    """

    def __init__(self):
        self.delivered: dict[MessageId, bytes] = {}
        self._slot: dict[MessageId, int] = {}
        self.direct = 0
        self.via_relay = 0

    def has(self, key: MessageId, since_slot: Optional[int] = None) -> bool:
        if key not in self.delivered:
            return False
        return since_slot is None or self._slot[key] >= since_slot

    def add(self, key: MessageId, payload: bytes, slot: int, via_relay: bool = False) -> None:
        # a wrapped sequence number simply replaces the stale entry
        self.delivered[key] = payload
        self._slot[key] = slot
        if via_relay:
            self.via_relay += 1
        else:
            self.direct += 1


@dataclass(frozen=True)
class Recovered:
    key: MessageId
    payload: bytes


@dataclass(frozen=True)
class NothingNew:
    pass


@dataclass(frozen=True)
class Discarded:
    missing_count: int


DecodeResult = Union[Recovered, NothingNew, Discarded]


def decode_coded_frame(store: GatewayStore, frame: CodedFrame, since_slot: Optional[int] = None) -> DecodeResult:
    """Recover the single missing message of a coded frame, if exactly one is missing."""
    missing = [k for k in frame.id_list if not store.has(k, since_slot)]
    if not missing:
        return NothingNew()
    if len(missing) > 1:
        return Discarded(len(missing))
    known = [store.delivered[k] for k in frame.id_list if k != missing[0]]
    payload = xor_bytes([frame.xor_payload, *known])
    return Recovered(missing[0], payload)


class Phase(enum.Enum):
    RECEIVE = "receive"
    TRANSMIT = "transmit"
    SLEEP = "sleep"


@dataclass
class RelayState:
    relay_id: int
    protocol: Protocol
    n_r: int
    n_s: int = 0
    offset: int = 0
    buffer: list = field(default_factory=list)
    pending: Optional[SensorMessage] = None  # immediate forwarding only

    @property
    def cycle(self) -> int:
        if self.protocol is Protocol.COOPERATIVE:
            return self.n_r + self.n_s + 1
        return self.n_r + 1

    def phase(self, slot: int) -> Phase:
        if self.protocol is Protocol.IMMEDIATE:
            return Phase.TRANSMIT if self.pending is not None else Phase.RECEIVE
        pos = (slot - self.offset) % self.cycle
        if pos < self.n_r:
            return Phase.RECEIVE
        if pos == self.n_r:
            return Phase.TRANSMIT
        return Phase.SLEEP


def relay_transmit(relay: RelayState, cap: int = 1, tie: Optional[list] = None) -> list:
    """Frames a relay sends in its transmit slot.

    Coded protocols send one :class:`CodedFrame` over the whole buffer;
    uncoded forwarding sends up to ``cap`` buffered messages, a uniformly
    random subset when the buffer overflows (``tie`` is an iterator of
    uniforms in [0, 1)); immediate forwarding resends the pending message.
    """
    p = relay.protocol
    if p is Protocol.IMMEDIATE:
        return [relay.pending] if relay.pending is not None else []
    buf = list(relay.buffer)
    if not buf:
        return []
    if p in (Protocol.SINGLE_RELAY, Protocol.COOPERATIVE):
        return [CodedFrame.from_messages(buf)]
    if p is Protocol.UNCODED:
        if len(buf) > cap:
            m = len(buf)
            for s in range(cap):
                r = s + int(next(tie) * (m - s))
                buf[s], buf[r] = buf[r], buf[s]
            buf = buf[:cap]
        return buf
    raise ValueError(f"protocol {p.value} has no relay")


_PROTOCOL_CODE = {
    Protocol.NO_RELAY: C.NO_RELAY,
    Protocol.IMMEDIATE: C.IMMEDIATE,
    Protocol.UNCODED: C.UNCODED,
    Protocol.SINGLE_RELAY: C.SINGLE_RELAY,
    Protocol.COOPERATIVE: C.COOPERATIVE,
}


class World:
    """Mutable state of one run; advance it with :func:`step_slot`."""

    def __init__(self, cfg: ScenarioConfig, draws: Draws, trace: Optional[TextIO] = None):
        cfg = resolved(cfg)
        self.cfg = cfg
        self.draws = draws
        self.t = 0
        self.trace = trace
        p = cfg.protocol
        if p is Protocol.NO_RELAY:
            self.relays = []
        elif p is Protocol.COOPERATIVE:
            self.relays = [
                RelayState(0, p, cfg.n_r, cfg.n_s, offset=0),
                RelayState(1, p, cfg.n_r, cfg.n_s, offset=cfg.n_r),
            ]
        else:
            self.relays = [RelayState(0, p, cfg.n_r, 0)]
        self.store = GatewayStore()
        payloads = draws.payloads(cfg.b_pl)
        self.messages = [
            SensorMessage(int(s), int(q), payloads[i].tobytes(), int(c), i)
            for i, (s, q, c) in enumerate(zip(draws.sensor, draws.seq, draws.created_slot))
        ]
        m = draws.n_messages
        self.outcome = np.zeros(m, dtype=np.int8)
        self.heard = np.zeros(m, dtype=np.int8)
        self.counters = np.zeros(C.N_COUNTERS, dtype=np.int64)
        self.airtime = np.zeros(2)
        self.recovered_payloads: dict[int, bytes] = {}
        self._next = 0
        self._rg = iter(draws.rg_pw.tolist())
        self._tie = iter(draws.tie.tolist())
        self._horizon = max(2 * cfg.cycle_slots, 2)
        self._sens_sensor = cfg.sensitivity_mw(cfg.sf_sensor)
        self._sens_relay = cfg.sensitivity_mw(cfg.sf_relay)
        self._coded_len = {}
        self._single_len = cfg.airtime(cfg.sf_relay, cfg.b_pl + cfg.b_id + cfg.b_seq)

    # -- helpers --

    def _emit(self, kind: str, **fields):
        if self.trace is not None:
            rec = {"slot": self.t, "event": kind}
            rec.update(fields)
            self.trace.write(json.dumps(rec) + "\n")

    def coded_airtime(self, n_msgs: int) -> float:
        if n_msgs not in self._coded_len:
            cfg = self.cfg
            self._coded_len[n_msgs] = cfg.airtime(cfg.sf_relay, cfg.b_pl + n_msgs * (cfg.b_id + cfg.b_seq))
        return self._coded_len[n_msgs]

    def _deliver(self, msg: SensorMessage, via_relay: bool) -> bool:
        if self.outcome[msg.index] != C.LOST:
            return False
        self.outcome[msg.index] = C.VIA_RELAY if via_relay else C.DIRECT
        self.store.add(msg.key, msg.payload, self.t, via_relay)
        return True

    def _relay_link(self, relay: RelayState, airtime: float, kind: str, ids) -> bool:
        self.airtime[relay.relay_id] += airtime
        self.counters[C.RELAY_FRAMES] += 1
        power = next(self._rg)
        ok = power >= self._sens_relay
        self.counters[C.RELAY_FRAMES_OK if ok else C.RELAY_FRAMES_LOST] += 1
        self._emit(kind, relay=relay.relay_id, ids=ids, power_dbm=mw_to_dbm(power), delivered=bool(ok))
        return ok

    def listener(self) -> Optional[RelayState]:
        for relay in self.relays:
            if relay.phase(self.t) is Phase.RECEIVE:
                return relay
        return None

    def transmitting(self) -> list[RelayState]:
        return [r for r in self.relays if r.phase(self.t) is Phase.TRANSMIT]


def step_slot(world: World) -> World:
    """Advance ``world`` by one slot and return it."""
    d = world.draws
    cfg = world.cfg
    t = world.t
    lo = world._next
    hi = lo
    while hi < d.n_messages and d.tx_slot[hi] == t:
        hi += 1
    world._next = hi
    frames = range(lo, hi)

    # 1. sensor transmissions
    for j in frames:
        world._emit("sensor_tx", sensor=int(d.sensor[j]), seq=int(d.seq[j]), index=j,
                    power_gw_dbm=mw_to_dbm(d.pw_gw[j]), power_relay_dbm=mw_to_dbm(d.pw_relay[j]))

    # 2. receivers on the sensor SF
    if hi > lo:
        w = resolve_capture(((j, d.pw_gw[j]) for j in frames), world._sens_sensor, cfg.capture_threshold_db)
        if w is not None:
            world._deliver(world.messages[w], via_relay=False)
            world.counters[C.GW_CAPTURES] += 1
            world._emit("gw_rx", index=w, sensor=int(d.sensor[w]))

    listening = world.listener()
    transmitting = world.transmitting()
    captured = None
    if listening is not None:
        world.counters[C.RW_SLOTS] += 1
        if hi > lo:
            captured = resolve_capture(((j, d.pw_relay[j]) for j in frames), world._sens_sensor,
                                       cfg.capture_threshold_db)
        if captured is None:
            world.counters[C.RW_EMPTY] += 1
        else:
            msg = world.messages[captured]
            world.heard[captured] = 1
            world.counters[C.RELAY_CAPTURES] += 1
            both = world.outcome[captured] == C.DIRECT
            world.counters[C.RW_BOTH if both else C.RW_RELAY_ONLY] += 1
            world._emit("relay_rx", relay=listening.relay_id, index=captured, sensor=msg.sensor_id)
            if cfg.protocol is not Protocol.IMMEDIATE:
                listening.buffer.append(msg)

    # 3-4. relay transmissions on the relay SF, gateway decoding
    for relay in transmitting:
        if cfg.protocol is Protocol.IMMEDIATE:
            msg = relay.pending
            if world._relay_link(relay, world._single_len, "relay_fwd", [list(msg.key)]):
                if world._deliver(msg, via_relay=True):
                    world.counters[C.FORWARD_DELIVERED] += 1
            relay.pending = None
            continue

        world.counters[C.TW_SLOTS] += 1
        sources = list(relay.buffer)
        relay.buffer.clear()
        if not sources:
            world.counters[C.EMPTY_TW] += 1
            continue
        if cfg.protocol is Protocol.UNCODED:
            sent = relay_transmit(RelayState(relay.relay_id, relay.protocol, relay.n_r, buffer=sources),
                                  cfg.uncoded_cap, world._tie)
            world.counters[C.UNCODED_DROPPED] += len(sources) - len(sent)
            for msg in sent:
                if world._relay_link(relay, world._single_len, "relay_fwd", [list(msg.key)]):
                    if world._deliver(msg, via_relay=True):
                        world.counters[C.FORWARD_DELIVERED] += 1
            continue

        frame = CodedFrame.from_messages(sources)
        if not world._relay_link(relay, world.coded_airtime(len(sources)), "relay_coded",
                                 [list(k) for k in frame.id_list]):
            continue
        since = t - world._horizon
        result = decode_coded_frame(world.store, frame, since_slot=since)
        if isinstance(result, Recovered):
            msg = next(m for m in sources if m.key == result.key)
            world.recovered_payloads[msg.index] = result.payload
            world._deliver(msg, via_relay=True)
            world.counters[C.DECODE_RECOVERED] += 1
            world._emit("decode", result="recovered", id=list(result.key))
        elif isinstance(result, NothingNew):
            world.counters[C.DECODE_NOTHING_NEW] += 1
            world._emit("decode", result="nothing_new")
        else:
            world.counters[C.DECODE_DISCARDED] += 1
            world._emit("decode", result="discarded", missing=result.missing_count)

    # immediate forwarding: queue what was just heard for the next slot
    if cfg.protocol is Protocol.IMMEDIATE and captured is not None:
        listening.pending = world.messages[captured]

    # 5. phases advance
    world.t += 1
    return world


def run_world(cfg: ScenarioConfig, draws: Draws, trace: Optional[TextIO] = None, check_schedule: bool = False):
    """Run the object engine to the end of the draws.

    Returns ``(outcome, heard, counters, airtime, world)``.
    """
    world = World(cfg, draws, trace)
    coop = world.cfg.protocol is Protocol.COOPERATIVE
    for _ in range(draws.n_slots):
        if check_schedule and coop:
            listeners = sum(r.phase(world.t) is Phase.RECEIVE for r in world.relays)
            if listeners != 1:
                raise AssertionError(f"slot {world.t}: {listeners} cooperative relays listening")
        step_slot(world)
    return world.outcome, world.heard, world.counters, world.airtime, world
