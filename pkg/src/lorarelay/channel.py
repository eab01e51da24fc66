"""LoRa physical layer: airtime, path loss, block fading and capture."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Hashable, Iterable, Optional

import numpy as np
from scipy import integrate

from .core import DistanceLaw


class BadSf(ValueError):
    pass


class BadPayload(ValueError):
    pass


class QuadratureNonConvergence(ArithmeticError):
    pass


def airtime(
    sf: int,
    bandwidth_hz: float = 125_000.0,
    coding_rate: int = 1,
    preamble_symbols: int = 8,
    explicit_header: bool = True,
    payload_bytes: int = 10,
    low_dr_optimize: Optional[bool] = None,
    crc: bool = True,
) -> float:
    """Semtech time-on-air of one LoRa frame, in seconds.

    ``coding_rate`` is the CR index 1..4 (4/5..4/8). When ``low_dr_optimize``
    is None it is switched on for symbol times of 16 ms and above (SF11/12 at
    125 kHz).
    """
    if not isinstance(sf, (int, np.integer)) or not 7 <= sf <= 12:
        raise BadSf(f"spreading factor must be 7..12, got {sf}")
    if payload_bytes < 1:
        raise BadPayload(f"payload must be at least 1 byte, got {payload_bytes}")
    t_sym = (1 << int(sf)) / bandwidth_hz
    if low_dr_optimize is None:
        low_dr_optimize = t_sym >= 16e-3
    de = 1 if low_dr_optimize else 0
    ih = 0 if explicit_header else 1
    num = 8 * payload_bytes - 4 * sf + 28 + (16 if crc else 0) - 20 * ih
    n_payload = 8 + max(math.ceil(num / (4 * (sf - 2 * de))) * (coding_rate + 4), 0)
    return (preamble_symbols + 4.25 + n_payload) * t_sym


def rx_power(gamma_linear, fading, distance_m, path_loss_exponent):
    """Received power in mW: gain times fading times distance path loss (vectorised)."""
    return gamma_linear * fading * np.power(distance_m, -path_loss_exponent)


# --------------------------------------------------------------------------
# Fading


@dataclass(frozen=True)
class RayleighPower:
    """Unit-mean exponential power coefficient (Rayleigh amplitude squared)."""

    def cdf(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return -np.expm1(-x)

    def sf(self, x):
        return np.exp(-np.maximum(np.asarray(x, dtype=float), 0.0))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, np.exp(-np.abs(x)), 0.0)

    def ppf(self, q):
        return -np.log1p(-np.asarray(q, dtype=float))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.standard_exponential(size)

    @property
    def mean(self) -> float:
        return 1.0


RAYLEIGH = RayleighPower()


# --------------------------------------------------------------------------
# Capture


def resolve_capture(
    contenders: Iterable[tuple[Hashable, float]],
    sensitivity_mw: float,
    capture_threshold_db: float,
):
    """Pick the frame a receiver demodulates from same-SF contenders.

    The strongest frame wins if it clears the sensitivity and beats the
    strongest *other* frame by strictly more than the capture ratio. Ties
    lose. Returns the winner's id, or None.
    """
    best_id = None
    best = -1.0
    second = 0.0
    for frame_id, power in contenders:
        if power > best:
            second = max(second, best)
            best_id, best = frame_id, power
        elif power > second:
            second = power
    if best_id is None or best < sensitivity_mw:
        return None
    ratio = 10.0 ** (0.1 * capture_threshold_db)
    if second > 0.0 and not best > ratio * second:
        return None
    return best_id


def capture_ok(desired_mw: float, others_mw: Iterable[float], sensitivity_mw: float, capture_threshold_db: float) -> bool:
    """Direct check of the two capture conditions for one desired frame."""
    if desired_mw < sensitivity_mw:
        return False
    ratio = 10.0 ** (0.1 * capture_threshold_db)
    return all(desired_mw > ratio * o for o in others_mw)


# --------------------------------------------------------------------------
# Received-power distribution


def _quad(fn, lo, hi, epsrel, points=None):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _err = integrate.quad(fn, lo, hi, epsrel=epsrel, epsabs=0.0, limit=200, points=points)
        except integrate.IntegrationWarning as exc:
            raise QuadratureNonConvergence(str(exc)) from None
    return val


def cdf_received_power(law: DistanceLaw, fading_cdf, gamma_linear: float, path_loss_exponent: float, x, rtol: float = 1e-8):
    """cdf of the received power at ``x`` when the distance follows ``law``.

    Closed form for a fixed distance, adaptive quadrature over the distance
    density otherwise. ``fading_cdf`` is the cdf of the power coefficient.
    """
    xs = np.asarray(x, dtype=float)
    if np.any(xs < 0):
        raise ValueError("x must be non-negative")
    if law.is_fixed:
        out = fading_cdf(xs * law.d**path_loss_exponent / gamma_linear)
        return float(out) if out.ndim == 0 else out

    lo, hi = law.support

    def one(xv):
        if xv == 0.0:
            return 0.0
        if math.isinf(xv):
            return 1.0
        return _quad(lambda u: float(fading_cdf(u**path_loss_exponent * xv / gamma_linear)) * float(law.pdf(u)), lo, hi, rtol)

    if xs.ndim == 0:
        return one(float(xs))
    return np.array([one(float(v)) for v in xs.ravel()]).reshape(xs.shape)
