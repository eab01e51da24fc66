"""Closed-form message loss rate and relay duty cycle of the coded protocols.

Every expectation over fading and node distance is evaluated by
deterministic adaptive quadrature, so results carry no seed. The channel
moments do not depend on the receive-window size and are cached, which makes
scans over ``n_r`` cheap.
"""

from __future__ import annotations

import functools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from .channel import RAYLEIGH, QuadratureNonConvergence, RayleighPower, cdf_received_power
from .core import Protocol, ScenarioConfig, p_tx, resolved

log = logging.getLogger(__name__)


class UnsupportedProtocolForAnalysis(ValueError):
    pass


class CodedFrameOverflow(UserWarning):
    pass


class FOutOfRange(UserWarning):
    pass


# --------------------------------------------------------------------------
# Expectation engine


def _quad_vec(fn, lo, hi, tol):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = integrate.quad_vec(fn, lo, hi, epsrel=tol, epsabs=1e-14, norm="max", limit=2000, full_output=True)
    val, _err, info = res
    if not info.success:
        raise QuadratureNonConvergence(f"quad_vec failed on [{lo}, {hi}]: {info.message}")
    return val


def expect(fn: Callable, laws: Sequence, tol: float = 1e-6):
    """Expectation of ``fn(x1, ..., xk)`` over independent variables.

    ``laws`` holds one law per argument: a fading law (integrated in
    probability space through its inverse cdf) or a distance law (integrated
    against its density; a fixed distance is substituted directly). ``fn``
    may return a scalar or an array.
    """
    laws = list(laws)

    def nest(i, args):
        if i == len(laws):
            return np.asarray(fn(*args), dtype=float)
        law = laws[i]
        if getattr(law, "is_fixed", False):
            return nest(i + 1, args + (law.d,))
        if hasattr(law, "ppf"):
            return _quad_vec(lambda v: nest(i + 1, args + (float(law.ppf(v)),)), 0.0, 1.0, tol)
        lo, hi = law.support
        return _quad_vec(lambda u: float(law.pdf(u)) * nest(i + 1, args + (u,)), lo, hi, tol)

    out = nest(0, ())
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Result types


@dataclass(frozen=True)
class LinkProbabilities:
    s_dir: float
    s_sr: float
    s_rg: float
    s_c: float
    p_gr: float
    f: float
    p_rw: float
    nu: float
    p_tx: float = 0.0
    p_gr_frame: float = 0.0
    relay_rx_frame: float = 0.0
    f_unclamped: float = 0.0


@dataclass(frozen=True)
class PerformanceResult:
    protocol: Protocol
    n_r: int
    mlr: float
    rdc: float
    l_av_s: float
    intermediates: LinkProbabilities

    @property
    def s_rel(self) -> float:
        i = self.intermediates
        return i.s_sr * i.s_rg * i.s_c

    def to_dict(self) -> dict:
        doc = {
            "protocol": self.protocol.value,
            "n_r": self.n_r,
            "mlr": self.mlr,
            "rdc": self.rdc,
            "l_av_s": self.l_av_s,
            "s_rel": self.s_rel,
        }
        doc.update(asdict(self.intermediates))
        return doc


# --------------------------------------------------------------------------
# Channel moments


@dataclass(frozen=True)
class _Moments:
    nu: float
    p_tx: float
    m_gw: np.ndarray  # per-link clear-probability moments, k = 0..n-1
    m_rel: np.ndarray  # same on the sensor-relay link
    exp_gw: float  # exponential-limit moment on the gateway link
    exp_rel: float


def _channel_key(cfg: ScenarioConfig) -> ScenarioConfig:
    return replace(cfg, protocol=Protocol.SINGLE_RELAY, n_r=1, n_s=0, uncoded_cap=1, sdir_form="exponential")


def _interference_cdf(cfg: ScenarioConfig, interferer_law, fading: RayleighPower):
    link_gain = cfg.gamma_linear
    ple = cfg.path_loss_exponent
    if interferer_law.is_fixed:
        scale = interferer_law.d**ple / link_gain
        return lambda x: fading.cdf(x * scale)
    return lambda x: cdf_received_power(interferer_law, fading.cdf, link_gain, ple, x)


def _link_moments(cfg: ScenarioConfig, law, mean_interferers: float, tol: float, fading=RAYLEIGH) -> tuple[np.ndarray, float]:
    """Per-link moments of the interference-clear probability.

    Returns ``E[ok * c**k]`` for k < n and ``E[ok * exp(-m * (1 - c))]``, where
    ``ok`` marks a frame above sensitivity, ``c`` is the chance one interferer
    stays below the capture margin and ``m`` is the mean interferer count.

    Interferers are the other sensors, drawn from the same distance law as
    the desired sensor on this link.
    """
    n = cfg.n_sensors
    link_gain = cfg.gamma_linear
    ple = cfg.path_loss_exponent
    sens_mw = cfg.sensitivity_mw(cfg.sf_sensor)
    cap_ratio = cfg.capture_ratio
    f_int = _interference_cdf(cfg, law, fading)
    ks = np.arange(n, dtype=float)

    def over_fading(d):
        # integrate only above sensitivity, in probability space
        v_min = float(fading.cdf(sens_mw * d**ple / link_gain))
        if v_min >= 1.0:
            return np.zeros(n + 1)

        def g(v):
            a = float(fading.ppf(v))
            clear_prob = float(f_int(link_gain * a * d**-ple / cap_ratio))
            out = np.empty(n + 1)
            with np.errstate(divide="ignore"):
                out[:n] = clear_prob**ks
            out[n] = math.exp(-mean_interferers * (1.0 - clear_prob))
            return out

        return _quad_vec(g, v_min, 1.0, tol)

    if law.is_fixed:
        vec = over_fading(law.d)
    else:
        lo, hi = law.support
        vec = _quad_vec(lambda u: float(law.pdf(u)) * over_fading(u), lo, hi, tol)
    return vec[:n], float(vec[n])


@functools.lru_cache(maxsize=256)
def _moments_cached(key: ScenarioConfig, tol: float) -> _Moments:
    ptx = p_tx(key)
    mean_int = (key.n_sensors - 1) * ptx
    m_gw, exp_gw = _link_moments(key, key.geometry.sensor_gateway, mean_int, tol)
    m_rel, exp_rel = _link_moments(key, key.geometry.sensor_relay, mean_int, tol)
    return _Moments(nu=mean_int, p_tx=ptx, m_gw=m_gw, m_rel=m_rel, exp_gw=exp_gw, exp_rel=exp_rel)


def _moments(cfg: ScenarioConfig, tol: float = 1e-9) -> _Moments:
    return _moments_cached(_channel_key(resolved(cfg)), tol)


def poisson_weights(mean: float, n: int) -> np.ndarray:
    """Poisson pmf with the given mean at k = 0..n-1."""
    k = np.arange(n)
    if mean == 0.0:
        return (k == 0).astype(float)
    return np.exp(k * math.log(mean) - mean - gammaln(k + 1))


# --------------------------------------------------------------------------
# Component probabilities


def nu(cfg: ScenarioConfig) -> float:
    """Mean number of same-slot interferers, ``(n - 1) p_tx``."""
    cfg = resolved(cfg)
    return (cfg.n_sensors - 1) * p_tx(cfg)


def s_dir(cfg: ScenarioConfig, form: str | None = None) -> float:
    """Direct delivery probability.

    ``form="exponential"`` replaces the truncated Poisson sum by its
    exponential limit; ``"truncated"`` keeps the sum up to ``n - 1``
    interferers. Defaults to ``cfg.sdir_form``.
    """
    cfg = resolved(cfg)
    form = form or cfg.sdir_form
    m = _moments(cfg)
    if form == "exponential":
        return m.exp_gw
    if form == "truncated":
        return float(poisson_weights(m.nu, cfg.n_sensors) @ m.m_gw)
    raise ValueError(f"unknown form {form!r}")


def p_rw(n_r: int) -> float:
    if n_r < 1:
        raise ValueError("n_r must be >= 1")
    return n_r / (n_r + 1.0)


def _window_probability(cfg: ScenarioConfig) -> float:
    # two relays act as one always-listening full-duplex relay
    return 1.0 if cfg.protocol is Protocol.COOPERATIVE else p_rw(cfg.n_r)


def _clear_margins(cfg: ScenarioConfig, eps: float = 1e-6) -> bool:
    g = cfg.geometry
    if not (g.sensor_gateway.is_fixed and g.sensor_relay.is_fixed):
        return False
    sens_mw = cfg.sensitivity_mw(cfg.sf_sensor)
    worst = max(g.sensor_gateway.d, g.sensor_relay.d)
    return float(RAYLEIGH.cdf(sens_mw * worst**cfg.path_loss_exponent / cfg.gamma_linear)) < eps


def s_sr_general(cfg: ScenarioConfig) -> float:
    """Lost at the gateway, received by the relay, sent inside the receive window.

    Given k interferers the two links fade independently, so the expectation
    factorises into per-link moments.
    """
    cfg = resolved(cfg)
    m = _moments(cfg)
    w = poisson_weights(m.nu, cfg.n_sensors)
    return _window_probability(cfg) * float(w @ (m.m_rel - m.m_gw * m.m_rel))


def s_sr_clustered(cfg: ScenarioConfig, tol: float = 1e-10) -> float:
    """Clustered-sensor form: fixed distances and no fading loss assumed.

    Window probability times the chance the relay link is clear minus the
    chance both links are clear, with Poisson interferer counts.
    """
    cfg = resolved(cfg)
    g = cfg.geometry
    if not (g.sensor_gateway.is_fixed and g.sensor_relay.is_fixed):
        raise ValueError("clustered form needs fixed distances on both sensor links")
    mean_int = nu(cfg)
    cap_ratio = cfg.capture_ratio
    link_gain = cfg.gamma_linear
    ple = cfg.path_loss_exponent
    dist_gw, dist_relay = g.sensor_gateway.d, g.sensor_relay.d
    f_gw = _interference_cdf(cfg, g.sensor_gateway, RAYLEIGH)
    f_rel = _interference_cdf(cfg, g.sensor_relay, RAYLEIGH)

    def gw_interf_cdf(a):
        return float(f_gw(link_gain * a * dist_gw**-ple / cap_ratio))

    def relay_interf_cdf(a):
        return float(f_rel(link_gain * a * dist_relay**-ple / cap_ratio))

    first = expect(lambda fade_relay: math.exp(-mean_int * (1.0 - relay_interf_cdf(fade_relay))), [RAYLEIGH], tol)
    second = expect(lambda fade_gw, fade_relay: math.exp(-mean_int * (1.0 - gw_interf_cdf(fade_gw) * relay_interf_cdf(fade_relay))), [RAYLEIGH, RAYLEIGH], tol)
    return _window_probability(cfg) * (first - second)


def s_sr(cfg: ScenarioConfig, method: str = "auto") -> float:
    cfg = resolved(cfg)
    if method == "auto":
        method = "clustered" if _clear_margins(cfg) else "general"
    if method == "clustered":
        return s_sr_clustered(cfg)
    if method == "general":
        return s_sr_general(cfg)
    raise ValueError(f"unknown method {method!r}")


def s_rg(cfg: ScenarioConfig) -> float:
    """Relay-to-gateway success: fading against the relay-SF sensitivity only."""
    cfg = resolved(cfg)
    sens_mw = cfg.sensitivity_mw(cfg.sf_relay)
    dist_rg = cfg.geometry.relay_gateway_m
    return float(1.0 - RAYLEIGH.cdf(sens_mw * dist_rg**cfg.path_loss_exponent / cfg.gamma_linear))


def p_gr_frame(cfg: ScenarioConfig) -> float:
    """Probability a single sensor frame is captured by both relay and gateway."""
    cfg = resolved(cfg)
    m = _moments(cfg)
    return float(poisson_weights(m.nu, cfg.n_sensors) @ (m.m_gw * m.m_rel))


def p_gr(cfg: ScenarioConfig) -> float:
    """Per-slot probability that the relay captures a message the gateway also got."""
    cfg = resolved(cfg)
    return cfg.n_sensors * p_tx(cfg) * p_gr_frame(cfg)


def f_empty(cfg: ScenarioConfig, clamp: bool = True) -> float:
    """Per-slot probability that the relay captures nothing."""
    cfg = resolved(cfg)
    m = _moments(cfg)
    val = 1.0 - cfg.n_sensors * m.p_tx * m.exp_rel
    if clamp and not 0.0 <= val <= 1.0:
        warnings.warn(f"empty-slot probability {val:.4f} outside [0, 1]; clamped", FOutOfRange, stacklevel=2)
        val = min(max(val, 0.0), 1.0)
    return val


def s_c_sum(p_both: float, f: float, n_r: int) -> float:
    """Binomial sum over how many of the other ``n_r - 1`` slots held a both-received message."""
    k = n_r - 1
    return float(sum(math.comb(k, m) * p_both**m * f ** (k - m) for m in range(k + 1)))


def s_c_closed(p_both: float, f: float, n_r: int) -> float:
    return float((p_both + f) ** (n_r - 1))


def s_c(cfg: ScenarioConfig) -> float:
    cfg = resolved(cfg)
    pb, f = p_gr(cfg), f_empty(cfg)
    val = s_c_closed(pb, f, cfg.n_r)
    alt = s_c_sum(pb, f, cfg.n_r)
    assert abs(val - alt) <= 1e-12, (val, alt)
    return val


def coded_payload_bytes(cfg: ScenarioConfig, m: int) -> int:
    """Coded frame payload for ``m`` summed messages: XOR sum plus one id/seq pair each."""
    return cfg.b_pl + m * (cfg.b_id + cfg.b_seq)


def average_relay_frame(cfg: ScenarioConfig, f: float | None = None) -> float:
    """Mean airtime spent per transmit window (zero when nothing was received)."""
    cfg = resolved(cfg)
    if f is None:
        f = f_empty(cfg)
    n_r = cfg.n_r
    q = 1.0 - f
    total = 0.0
    for m in range(1, n_r + 1):
        total += math.comb(n_r, m) * q**m * f ** (n_r - m) * cfg.airtime(cfg.sf_relay, coded_payload_bytes(cfg, m))
    return total


def rdc_from_average(cfg: ScenarioConfig, l_av: float) -> float:
    cfg = resolved(cfg)
    if cfg.protocol is Protocol.COOPERATIVE:
        # two relays, each transmitting once per n_r + n_s + 1 slots
        return 2.0 * l_av / ((cfg.n_r + cfg.n_s + 1) * cfg.slot_len_s)
    return l_av / ((cfg.n_r + 1) * cfg.slot_len_s)


# --------------------------------------------------------------------------
# Top level


def link_probabilities(cfg: ScenarioConfig) -> LinkProbabilities:
    cfg = resolved(cfg)
    m = _moments(cfg)
    f_raw = f_empty(cfg, clamp=False)
    f = f_empty(cfg)
    pb = p_gr(cfg)
    sc = s_c_closed(pb, f, cfg.n_r)
    if abs(sc - s_c_sum(pb, f, cfg.n_r)) > 1e-12:
        raise AssertionError("S_c forms disagree")
    return LinkProbabilities(
        s_dir=s_dir(cfg),
        s_sr=s_sr(cfg),
        s_rg=s_rg(cfg),
        s_c=sc,
        p_gr=pb,
        f=f,
        p_rw=_window_probability(cfg),
        nu=m.nu,
        p_tx=m.p_tx,
        p_gr_frame=p_gr_frame(cfg),
        relay_rx_frame=m.exp_rel,
        f_unclamped=f_raw,
    )


def analyze(cfg: ScenarioConfig) -> PerformanceResult:
    """MLR and RDC of a single-relay or cooperative scenario, with all intermediates."""
    cfg = resolved(cfg)
    if not cfg.protocol.is_proposed:
        raise UnsupportedProtocolForAnalysis(f"no closed form for protocol {cfg.protocol.value}")
    lp = link_probabilities(cfg)
    s_rel = lp.s_sr * lp.s_rg * lp.s_c
    mlr_val = 1.0 - lp.s_dir - s_rel
    for name, val in (("s_dir", lp.s_dir), ("s_rel", s_rel), ("mlr", mlr_val)):
        if not -1e-12 <= val <= 1 + 1e-12:
            raise ArithmeticError(f"{name} = {val} outside [0, 1]")
    mlr_val = min(max(mlr_val, 0.0), 1.0)

    worst = cfg.airtime(cfg.sf_relay, coded_payload_bytes(cfg, cfg.n_r))
    if worst > cfg.slot_len_s:
        warnings.warn(
            f"coded frame with {cfg.n_r} messages lasts {worst * 1e3:.3f} ms, longer than the "
            f"{cfg.slot_len_s * 1e3:.3f} ms transmit slot",
            CodedFrameOverflow,
            stacklevel=2,
        )
    l_av = average_relay_frame(cfg, lp.f)
    return PerformanceResult(
        protocol=cfg.protocol,
        n_r=cfg.n_r,
        mlr=mlr_val,
        rdc=rdc_from_average(cfg, l_av),
        l_av_s=l_av,
        intermediates=lp,
    )


def mlr(cfg: ScenarioConfig) -> PerformanceResult:
    return analyze(cfg)


def rdc(cfg: ScenarioConfig) -> PerformanceResult:
    return analyze(cfg)


def optimal_nr(cfg: ScenarioConfig, n_r_max: int) -> tuple[int, float, list[PerformanceResult]]:
    """Exhaustive scan of ``n_r = 1..n_r_max``; ties go to the smaller window."""
    cfg = resolved(cfg)
    results = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CodedFrameOverflow)
        for n_r in range(1, n_r_max + 1):
            n_s = n_r - 1 if cfg.protocol is Protocol.COOPERATIVE else 0
            results.append(analyze(replace(cfg, n_r=n_r, n_s=n_s)))
    best = min(results, key=lambda r: (r.mlr, r.n_r))
    return best.n_r, best.mlr, results
