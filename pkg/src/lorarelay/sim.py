"""Monte Carlo runs: draw the randomness, run a slot engine, reduce to metrics."""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass
from typing import Optional, TextIO

import numpy as np

from . import _counters as C
from .core import ConfigError, ConfigIssue, Protocol, ScenarioConfig, resolved
from .draws import Draws, draw
from .engine import run_world

log = logging.getLogger(__name__)

try:
    if os.environ.get("LORARELAY_BACKEND", "").lower() == "python":
        raise ImportError("pure-Python backend forced")
    from . import _kernel
except ImportError:
    _kernel = None

HAVE_COMPILED = _kernel is not None
N_BATCHES = 20

_CODES = {
    Protocol.NO_RELAY: C.NO_RELAY,
    Protocol.IMMEDIATE: C.IMMEDIATE,
    Protocol.UNCODED: C.UNCODED,
    Protocol.SINGLE_RELAY: C.SINGLE_RELAY,
    Protocol.COOPERATIVE: C.COOPERATIVE,
}


@dataclass
class RunMetrics:
    protocol: str
    seed: int
    n_slots: int
    warmup_slots: int
    cooldown_slots: int
    messages_generated: int
    messages_delivered_direct: int
    messages_delivered_via_relay: int
    messages_lost: int
    mlr: float
    mlr_stderr: float
    relay_airtime_s: tuple
    total_time_s: float
    rdc: float
    counters: dict
    # empirical counterparts of the analysis intermediates
    s_dir_sim: float
    s_sr_sim: float
    f_sim: float
    p_gr_sim: float
    seq_wrap_risk: bool
    backend: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["relay_airtime_s"] = list(self.relay_airtime_s)
        return d


def default_margins(cfg: ScenarioConfig) -> tuple[int, int]:
    """Warmup and cooldown slots.

    Protocols without relay windows use a fixed margin so their results do not
    depend on ``n_r`` at all.
    """
    if cfg.protocol in (Protocol.NO_RELAY, Protocol.IMMEDIATE):
        return 4, 4
    return 2 * (cfg.n_r + 1), 2 * (cfg.n_r + cfg.n_s + 1)


def batch_means_stderr(lost: np.ndarray, n_batches: int = N_BATCHES) -> float:
    """Standard error of the mean of ``lost`` from contiguous batch means."""
    n = lost.shape[0]
    if n < 2:
        return 0.0
    k = min(n_batches, n)
    means = np.array([b.mean() for b in np.array_split(lost.astype(float), k)])
    return float(means.std(ddof=1) / np.sqrt(k))


def _run_compiled(cfg: ScenarioConfig, d: Draws):
    max_m = max(cfg.n_r, 1)
    per_id = cfg.b_id + cfg.b_seq
    coded_len = np.array([cfg.airtime(cfg.sf_relay, cfg.b_pl + m * per_id) if m else 0.0 for m in range(max_m + 1)])
    return _kernel.run_kernel(
        _CODES[cfg.protocol], d.n_slots, cfg.n_r, cfg.n_s, cfg.uncoded_cap,
        d.tx_slot, d.pw_gw, d.pw_relay,
        cfg.sensitivity_mw(cfg.sf_sensor), cfg.sensitivity_mw(cfg.sf_relay), cfg.capture_ratio,
        d.rg_pw, d.tie, coded_len, cfg.airtime(cfg.sf_relay, cfg.b_pl + per_id),
    )


def pick_backend(backend: str, trace) -> str:
    if backend not in ("auto", "compiled", "python"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "compiled" and not HAVE_COMPILED:
        raise RuntimeError("compiled kernel not available; rebuild the package or use backend='python'")
    if backend == "auto":
        backend = "compiled" if HAVE_COMPILED and trace is None else "python"
    if trace is not None and backend == "compiled":
        raise ValueError("event traces need the python backend")
    return backend


def run(
    cfg: ScenarioConfig,
    seed: int,
    n_slots: int = 10**6,
    warmup_slots: Optional[int] = None,
    cooldown_slots: Optional[int] = None,
    trace: Optional[TextIO] = None,
    backend: str = "auto",
) -> RunMetrics:
    """Simulate ``n_slots`` slots and measure MLR and RDC.

    Only messages generated in ``[warmup, n_slots - cooldown)`` enter the MLR.
    Deterministic in ``(cfg, seed)`` and identical across backends.
    """
    cfg = resolved(cfg)
    dw, dc = default_margins(cfg)
    warmup = dw if warmup_slots is None else warmup_slots
    cooldown = dc if cooldown_slots is None else cooldown_slots
    if warmup < 0 or cooldown < 0 or n_slots <= warmup + cooldown:
        raise ConfigError([ConfigIssue("BadRunLength", f"n_slots={n_slots} must exceed warmup+cooldown={warmup + cooldown}")])
    backend = pick_backend(backend, trace)

    d = draw(cfg, seed, n_slots)
    if backend == "compiled":
        outcome, heard, counters, airtime = _run_compiled(cfg, d)
    else:
        outcome, heard, counters, airtime, _ = run_world(cfg, d, trace, check_schedule=True)

    window = (d.created_slot >= warmup) & (d.created_slot < n_slots - cooldown)
    out = outcome[window]
    generated = int(out.shape[0])
    direct = int(np.count_nonzero(out == C.DIRECT))
    via = int(np.count_nonzero(out == C.VIA_RELAY))
    lost = generated - direct - via
    if generated:
        mlr = lost / generated
        # created order is the order messages are generated in time
        order = np.argsort(d.created_slot[window], kind="stable")
        stderr = batch_means_stderr(out[order] == C.LOST)
        s_dir_sim = direct / generated
        s_sr_sim = float(np.count_nonzero(heard[window].astype(bool) & (out != C.DIRECT))) / generated
    else:
        mlr = stderr = s_dir_sim = s_sr_sim = float("nan")

    rw = counters[C.RW_SLOTS]
    f_sim = counters[C.RW_EMPTY] / rw if rw else float("nan")
    p_gr_sim = counters[C.RW_BOTH] / rw if rw else float("nan")
    total_time = n_slots * cfg.slot_len_s
    horizon = 2 * cfg.cycle_slots
    wrap_risk = cfg.b_seq < 7 and horizon >= (1 << (8 * cfg.b_seq))

    metrics = RunMetrics(
        protocol=cfg.protocol.value,
        seed=int(seed),
        n_slots=int(n_slots),
        warmup_slots=int(warmup),
        cooldown_slots=int(cooldown),
        messages_generated=generated,
        messages_delivered_direct=direct,
        messages_delivered_via_relay=via,
        messages_lost=lost,
        mlr=float(mlr),
        mlr_stderr=float(stderr),
        relay_airtime_s=tuple(float(a) for a in airtime),
        total_time_s=total_time,
        rdc=float(airtime.sum() / total_time),
        counters={name: int(counters[i]) for i, name in enumerate(C.NAMES)},
        s_dir_sim=float(s_dir_sim),
        s_sr_sim=float(s_sr_sim),
        f_sim=float(f_sim),
        p_gr_sim=float(p_gr_sim),
        seq_wrap_risk=bool(wrap_risk),
        backend=backend,
    )
    log.debug("run %s seed=%d slots=%d mlr=%.5f rdc=%.5f", metrics.protocol, seed, n_slots, metrics.mlr, metrics.rdc)
    return metrics
