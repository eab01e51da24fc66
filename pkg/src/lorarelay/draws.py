"""All randomness of one simulation run, drawn up front.

Both slot engines consume the same :class:`Draws`, so a given ``(cfg, seed)``
produces bit-identical results whichever engine runs it. Each source of
randomness has its own stream; a sensor frame's gateway fading therefore does
not depend on the protocol, which gives common random numbers across
protocols for free.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .channel import RAYLEIGH
from .core import Protocol, ScenarioConfig, resolved, rng_stream


@dataclass
class Draws:
    n_slots: int
    # one row per transmitted message, sorted by (tx_slot, sensor)
    tx_slot: np.ndarray
    created_slot: np.ndarray
    sensor: np.ndarray
    seq: np.ndarray
    pw_gw: np.ndarray
    pw_relay: np.ndarray  # at the relay scheduled to listen in tx_slot
    listener: np.ndarray  # which relay that is (0 or 1)
    # consumed in transmission order
    rg_pw: np.ndarray
    tie: np.ndarray
    d_gw: np.ndarray
    d_relay: np.ndarray  # shape (2, n_sensors)
    payload_seed: int

    @property
    def n_messages(self) -> int:
        return int(self.tx_slot.shape[0])

    def payloads(self, b_pl: int) -> np.ndarray:
        """Message payloads, one row of ``b_pl`` bytes per message."""
        rng = np.random.Generator(np.random.PCG64(self.payload_seed))
        return rng.integers(0, 256, size=(self.n_messages, b_pl), dtype=np.uint8)


def arrival_slots(rng: np.random.Generator, n_sensors: int, rate: float, slot_len: float, n_slots: int):
    """Poisson arrivals per sensor, binned to slots.

    Returns ``(sensor, created_slot, tx_slot, rank)`` sorted by sensor then
    time. A message created in slot ``s`` goes out at the next boundary; a
    sensor with a backlog sends one frame per slot, first in first out.
    """
    horizon = n_slots * slot_len
    counts = rng.poisson(rate * horizon, size=n_sensors) if rate > 0 else np.zeros(n_sensors, dtype=np.int64)
    total = int(counts.sum())
    sensor = np.repeat(np.arange(n_sensors, dtype=np.int64), counts)
    times = rng.random(total) * horizon
    order = np.lexsort((times, sensor))
    sensor = sensor[order]
    created = np.floor(times[order] / slot_len).astype(np.int64)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    # FIFO: tx[j] = j + max_{i<=j}(created[i] + 1 - i), per sensor
    key = created + 1 - rank
    big = n_slots + int(counts.max(initial=0)) + 4
    shifted = np.maximum.accumulate(key + sensor * big)
    tx = rank + shifted - sensor * big
    return sensor, created, tx, rank


def listener_for_slot(cfg: ScenarioConfig, slots: np.ndarray) -> np.ndarray:
    if cfg.protocol is Protocol.COOPERATIVE:
        return np.where(slots % (cfg.n_r + cfg.n_s + 1) < cfg.n_r, 0, 1).astype(np.int8)
    return np.zeros(slots.shape, dtype=np.int8)


def draw(cfg: ScenarioConfig, seed: int, n_slots: int, fading=RAYLEIGH) -> Draws:
    cfg = resolved(cfg)
    g = cfg.geometry
    n = cfg.n_sensors
    link_gain = cfg.gamma_linear
    ple = cfg.path_loss_exponent

    geo = rng_stream(seed, "geometry")
    d_gw = g.sensor_gateway.sample(geo, n)
    d_relay = np.vstack([g.sensor_relay.sample(geo, n), g.sensor_relay.sample(geo, n)])

    sensor, created, tx, rank = arrival_slots(rng_stream(seed, "traffic"), n, cfg.lambda_rate, cfg.slot_len_s, n_slots)
    # frames still queued at the end stay in the trace and are never sent
    order = np.lexsort((sensor, tx))
    sensor, created, tx, rank = sensor[order], created[order], tx[order], rank[order]
    m = tx.shape[0]
    if cfg.b_seq >= 7:
        seq = rank
    else:
        seq = rank % (1 << (8 * cfg.b_seq))

    a_gw = fading.sample(rng_stream(seed, "fading-gw"), m)
    a_rel = fading.sample(rng_stream(seed, "fading-relay"), m)
    listener = listener_for_slot(cfg, tx)
    pw_gw = link_gain * a_gw * d_gw[sensor] ** -ple
    pw_relay = link_gain * a_rel * d_relay[listener, sensor] ** -ple

    # a relay frame carries at least one captured message, so m bounds both
    a_rg = fading.sample(rng_stream(seed, "fading-relay-gw"), m + 1)
    rg_pw = link_gain * a_rg * g.relay_gateway_m**-ple
    tie = rng_stream(seed, "tie-break").random(m + 1)
    payload_seed = int(rng_stream(seed, "payload").integers(0, 2**63 - 1))

    return Draws(
        n_slots=n_slots,
        tx_slot=np.ascontiguousarray(tx, dtype=np.int64),
        created_slot=created,
        sensor=sensor,
        seq=seq,
        pw_gw=np.ascontiguousarray(pw_gw),
        pw_relay=np.ascontiguousarray(pw_relay),
        listener=listener,
        rg_pw=np.ascontiguousarray(rg_pw),
        tie=np.ascontiguousarray(tie),
        d_gw=d_gw,
        d_relay=d_relay,
        payload_seed=payload_seed,
    )
