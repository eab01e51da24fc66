"""Scenario configuration, distance laws, and seeded random streams."""

from __future__ import annotations

import enum
import math
import warnings
import zlib
from dataclasses import dataclass, fields, replace
from typing import Union

import numpy as np

AUTO = "auto"

DEFAULT_SENSITIVITY_DBM = (
    (7, -123.0),
    (8, -126.0),
    (9, -129.0),
    (10, -132.0),
    (11, -134.5),
    (12, -137.0),
)

# lambda * slot length above this triggers a warning
LOAD_WARNING_THRESHOLD = 0.05


class Protocol(str, enum.Enum):
    NO_RELAY = "no-relay"
    IMMEDIATE = "immediate-forwarding"
    UNCODED = "uncoded-forwarding"
    SINGLE_RELAY = "single-relay"
    COOPERATIVE = "cooperative"

    @property
    def is_proposed(self) -> bool:
        return self in (Protocol.SINGLE_RELAY, Protocol.COOPERATIVE)

    @property
    def uses_windows(self) -> bool:
        return self in (Protocol.UNCODED, Protocol.SINGLE_RELAY, Protocol.COOPERATIVE)

    @classmethod
    def parse(cls, value: Union[str, "Protocol"]) -> "Protocol":
        if isinstance(value, Protocol):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "norelay": cls.NO_RELAY,
            "immediateforwarding": cls.IMMEDIATE,
            "immediate": cls.IMMEDIATE,
            "uncodedforwarding": cls.UNCODED,
            "uncoded": cls.UNCODED,
            "singlerelaycoded": cls.SINGLE_RELAY,
            "single-relay-coded": cls.SINGLE_RELAY,
            "coded": cls.SINGLE_RELAY,
            "coop": cls.COOPERATIVE,
        }
        for p in cls:
            if key == p.value:
                return p
        compact = key.replace("-", "")
        if compact in aliases:
            return aliases[compact]
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown protocol {value!r}")


# --------------------------------------------------------------------------
# Distance laws


@dataclass(frozen=True)
class FixedDistance:
    d: float

    kind = "fixed"

    @property
    def is_fixed(self) -> bool:
        return True

    @property
    def support(self) -> tuple[float, float]:
        return (self.d, self.d)

    @property
    def nominal(self) -> float:
        return self.d

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, float(self.d))

    def pdf(self, x):
        # point mass; density is not defined
        raise TypeError("FixedDistance has no density")

    def cdf(self, x):
        return np.where(np.asarray(x, dtype=float) >= self.d, 1.0, 0.0)

    def to_dict(self) -> dict:
        return {"kind": "fixed", "d": self.d}


class _UniformByArea:
    """Node placed uniformly by area in the ring ``r_min <= r <= r_max``."""

    @property
    def is_fixed(self) -> bool:
        return False

    @property
    def support(self) -> tuple[float, float]:
        return (self.r_min, self.r_max)

    @property
    def nominal(self) -> float:
        # median distance
        return math.sqrt(0.5 * (self.r_min**2 + self.r_max**2))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random(size)
        return np.sqrt(self.r_min**2 + u * (self.r_max**2 - self.r_min**2))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.r_min) & (x <= self.r_max)
        return np.where(inside, 2.0 * x / (self.r_max**2 - self.r_min**2), 0.0)

    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=float), self.r_min, self.r_max)
        return (x**2 - self.r_min**2) / (self.r_max**2 - self.r_min**2)


@dataclass(frozen=True)
class UniformAnnulus(_UniformByArea):
    r_min: float
    r_max: float

    kind = "annulus"

    def to_dict(self) -> dict:
        return {"kind": "annulus", "r_min": self.r_min, "r_max": self.r_max}


@dataclass(frozen=True)
class UniformDisc(_UniformByArea):
    r_max: float

    kind = "disc"
    r_min = 0.0

    def to_dict(self) -> dict:
        return {"kind": "disc", "r_max": self.r_max}


DistanceLaw = Union[FixedDistance, UniformAnnulus, UniformDisc]


def distance_law_from_dict(doc) -> DistanceLaw:
    if isinstance(doc, (int, float)):
        return FixedDistance(float(doc))
    doc = dict(doc)
    kind = doc.pop("kind", None)
    try:
        if kind == "fixed":
            return FixedDistance(float(doc.pop("d")))
        if kind == "annulus":
            law = UniformAnnulus(float(doc.pop("r_min")), float(doc.pop("r_max")))
        elif kind == "disc":
            law = UniformDisc(float(doc.pop("r_max")))
        else:
            raise ValueError(f"unknown distance law kind {kind!r}")
    except KeyError as exc:
        raise ValueError(f"distance law {kind!r} missing field {exc}") from None
    if doc:
        raise ValueError(f"unknown keys in distance law: {sorted(doc)}")
    return law


@dataclass(frozen=True)
class Geometry:
    sensor_gateway: DistanceLaw = FixedDistance(2000.0)
    sensor_relay: DistanceLaw = FixedDistance(1000.0)
    relay_gateway_m: float = 1000.0

    def to_dict(self) -> dict:
        return {
            "sensor_gateway": self.sensor_gateway.to_dict(),
            "sensor_relay": self.sensor_relay.to_dict(),
            "relay_gateway_m": self.relay_gateway_m,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Geometry":
        doc = dict(doc)
        kw = {}
        for key in ("sensor_gateway", "sensor_relay"):
            if key in doc:
                kw[key] = distance_law_from_dict(doc.pop(key))
        if "relay_gateway_m" in doc:
            kw["relay_gateway_m"] = float(doc.pop("relay_gateway_m"))
        if doc:
            raise ValueError(f"unknown keys in geometry: {sorted(doc)}")
        return cls(**kw)


# --------------------------------------------------------------------------
# Scenario


@dataclass(frozen=True)
class ScenarioConfig:
    """Every channel, traffic, geometry and protocol knob of a scenario.

    Fields that accept ``"auto"`` are resolved by :func:`validate_config`.
    """

    n_sensors: int = 20
    lambda_rate: float = 1.0 / 17.5
    slot_len_s: Union[float, str] = AUTO
    sf_sensor: int = 8
    sf_relay: int = 7
    bandwidth_hz: float = 125_000.0
    coding_rate: int = 1
    preamble_symbols: int = 8
    explicit_header: bool = True
    b_pl: int = 10
    b_id: int = 1
    b_seq: int = 1
    path_loss_exponent: float = 3.5
    gamma_db: Union[float, str] = AUTO
    median_margin_db: float = 10.0
    sensitivity_dbm_by_sf: tuple = DEFAULT_SENSITIVITY_DBM
    capture_threshold_db: float = 6.0
    geometry: Geometry = Geometry()
    protocol: Protocol = Protocol.SINGLE_RELAY
    n_r: int = 11
    n_s: Union[int, str] = AUTO
    uncoded_cap: Union[int, str] = AUTO
    sdir_form: str = "exponential"

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol.parse(self.protocol))
        sens = self.sensitivity_dbm_by_sf
        if isinstance(sens, dict):
            sens = tuple(sorted((int(k), float(v)) for k, v in sens.items()))
            object.__setattr__(self, "sensitivity_dbm_by_sf", sens)

    # -- derived quantities (valid once resolved) --

    def sensitivity_dbm(self, sf: int) -> float:
        for s, v in self.sensitivity_dbm_by_sf:
            if s == sf:
                return v
        raise KeyError(f"no sensitivity entry for SF{sf}")

    def sensitivity_mw(self, sf: int) -> float:
        return dbm_to_mw(self.sensitivity_dbm(sf))

    @property
    def gamma_linear(self) -> float:
        if self.gamma_db == AUTO:
            raise ValueError("gamma_db unresolved; call validate_config first")
        return 10.0 ** (0.1 * self.gamma_db)

    @property
    def capture_ratio(self) -> float:
        return 10.0 ** (0.1 * self.capture_threshold_db)

    @property
    def cycle_slots(self) -> int:
        """Length of one relay schedule period in slots."""
        p = self.protocol
        if p is Protocol.NO_RELAY:
            return 1
        if p is Protocol.IMMEDIATE:
            return 2
        if p is Protocol.COOPERATIVE:
            return self.n_r + int(self.n_s) + 1
        return self.n_r + 1

    def airtime(self, sf: int, payload_bytes: int) -> float:
        from .channel import airtime

        return airtime(
            sf,
            self.bandwidth_hz,
            self.coding_rate,
            self.preamble_symbols,
            self.explicit_header,
            payload_bytes,
        )

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    # -- serialization --

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "geometry":
                v = v.to_dict()
            elif f.name == "protocol":
                v = v.value
            elif f.name == "sensitivity_dbm_by_sf":
                v = {str(k): val for k, val in v}
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError([ConfigIssue("UnknownKey", f"unknown scenario keys: {unknown}")])
        if "geometry" in doc:
            doc["geometry"] = Geometry.from_dict(doc["geometry"])
        return cls(**doc)


@dataclass(frozen=True)
class ConfigIssue:
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class ConfigError(ValueError):
    """Raised with every violation found, not just the first."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))

    @property
    def codes(self) -> list[str]:
        return [i.code for i in self.issues]


def dbm_to_mw(dbm):
    if np.ndim(dbm):
        return 10.0 ** (0.1 * np.asarray(dbm, dtype=float))
    return 10.0 ** (0.1 * dbm)


def mw_to_dbm(mw):
    if np.ndim(mw):
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(np.asarray(mw, dtype=float))
    return 10.0 * math.log10(mw) if mw > 0 else -math.inf


def validate_config(cfg: ScenarioConfig) -> ScenarioConfig:
    """Check every invariant and resolve the ``"auto"`` fields.

    Raises :class:`ConfigError` listing all problems. Idempotent.
    """
    from .channel import airtime

    issues: list[ConfigIssue] = []
    if not isinstance(cfg.n_sensors, int) or cfg.n_sensors < 1:
        issues.append(ConfigIssue("BadSensorCount", f"n_sensors must be >= 1, got {cfg.n_sensors}"))
    if not (cfg.lambda_rate >= 0) or not math.isfinite(cfg.lambda_rate):
        issues.append(ConfigIssue("NegativeRate", f"lambda_rate must be >= 0, got {cfg.lambda_rate}"))
    sf_ok = True
    for name in ("sf_sensor", "sf_relay"):
        sf = getattr(cfg, name)
        if not isinstance(sf, int) or not 7 <= sf <= 12:
            issues.append(ConfigIssue("BadSf", f"{name} must be in 7..12, got {sf}"))
            sf_ok = False
    if sf_ok:
        for name in ("sf_sensor", "sf_relay"):
            try:
                cfg.sensitivity_dbm(getattr(cfg, name))
            except KeyError as exc:
                issues.append(ConfigIssue("MissingSensitivity", str(exc)))
                sf_ok = False
    if not isinstance(cfg.n_r, int) or cfg.n_r < 1:
        issues.append(ConfigIssue("InvalidWindow", f"n_r must be >= 1, got {cfg.n_r}"))
    for name in ("b_pl", "b_id", "b_seq"):
        if getattr(cfg, name) < (1 if name != "b_id" else 0):
            issues.append(ConfigIssue("BadPayload", f"{name} too small: {getattr(cfg, name)}"))
    if cfg.path_loss_exponent <= 0:
        issues.append(ConfigIssue("BadPathLoss", "path_loss_exponent must be positive"))
    if cfg.sdir_form not in ("exponential", "truncated"):
        issues.append(ConfigIssue("BadOption", f"sdir_form must be exponential|truncated, got {cfg.sdir_form!r}"))
    g = cfg.geometry
    for name in ("sensor_gateway", "sensor_relay"):
        law = getattr(g, name)
        lo, hi = law.support
        if law.is_fixed and not lo > 0:
            issues.append(ConfigIssue("BadDistance", f"{name} distance must be > 0"))
        if not law.is_fixed and not (0 <= lo <= hi and hi > 0):
            issues.append(ConfigIssue("BadDistance", f"{name} needs 0 <= r_min <= r_max"))
    if not g.relay_gateway_m > 0:
        issues.append(ConfigIssue("BadDistance", "relay_gateway_m must be > 0"))

    n_s = cfg.n_s
    if cfg.protocol is Protocol.COOPERATIVE:
        if n_s == AUTO:
            n_s = cfg.n_r - 1 if isinstance(cfg.n_r, int) else 0
        elif isinstance(cfg.n_r, int) and n_s != cfg.n_r - 1:
            issues.append(ConfigIssue("InvalidWindow", f"cooperative needs n_s = n_r - 1, got n_s={n_s}, n_r={cfg.n_r}"))
    else:
        n_s = 0 if n_s == AUTO else n_s
    if isinstance(n_s, int) and n_s < 0:
        issues.append(ConfigIssue("InvalidWindow", f"n_s must be >= 0, got {n_s}"))

    slot = cfg.slot_len_s
    gamma_db = cfg.gamma_db
    cap = cfg.uncoded_cap
    if sf_ok and not any(i.code == "BadPayload" for i in issues):
        frame_bytes = cfg.b_id + cfg.b_seq + cfg.b_pl
        sensor_frame = airtime(
            cfg.sf_sensor, cfg.bandwidth_hz, cfg.coding_rate, cfg.preamble_symbols,
            cfg.explicit_header, frame_bytes,
        )
        if slot == AUTO:
            slot = math.ceil(round(sensor_frame * 1e3, 9)) / 1e3
        elif not slot >= sensor_frame:
            issues.append(ConfigIssue("SlotTooShort", f"slot {slot} s shorter than sensor frame {sensor_frame:.6f} s"))
        if cap == AUTO:
            cap = 1
        elif cap == "fit":
            relay_frame = airtime(
                cfg.sf_relay, cfg.bandwidth_hz, cfg.coding_rate, cfg.preamble_symbols,
                cfg.explicit_header, frame_bytes,
            )
            cap = max(1, int(math.floor(round(slot / relay_frame, 9))))
        elif not isinstance(cap, int) or cap < 1:
            issues.append(ConfigIssue("BadOption", f"uncoded_cap must be >= 1, 'auto' or 'fit', got {cap!r}"))
        if gamma_db == AUTO and not any(i.code == "BadDistance" for i in issues):
            # median of unit-mean exponential power fading is ln 2
            dist_gw = g.sensor_gateway.nominal
            sens_mw = cfg.sensitivity_mw(cfg.sf_sensor)
            link_gain = sens_mw * 10 ** (0.1 * cfg.median_margin_db) * dist_gw**cfg.path_loss_exponent / math.log(2)
            gamma_db = 10 * math.log10(link_gain)

    if issues:
        raise ConfigError(issues)

    if cfg.lambda_rate * slot > LOAD_WARNING_THRESHOLD:
        warnings.warn(
            f"lambda*l_s = {cfg.lambda_rate * slot:.3f} exceeds {LOAD_WARNING_THRESHOLD}; "
            "single-arrival-per-slot approximation degrades",
            stacklevel=2,
        )
    return replace(cfg, slot_len_s=float(slot), n_s=int(n_s), gamma_db=float(gamma_db), uncoded_cap=int(cap))


def is_resolved(cfg: ScenarioConfig) -> bool:
    return AUTO not in (cfg.slot_len_s, cfg.gamma_db, cfg.n_s, cfg.uncoded_cap) and cfg.uncoded_cap != "fit"


def resolved(cfg: ScenarioConfig) -> ScenarioConfig:
    return cfg if is_resolved(cfg) else validate_config(cfg)


def p_tx(cfg: ScenarioConfig) -> float:
    """Probability that a sensor transmits in a given slot, ``1 - exp(-lambda*l_s)``."""
    cfg = resolved(cfg)
    return -math.expm1(-cfg.lambda_rate * cfg.slot_len_s)


# --------------------------------------------------------------------------
# Random streams

STREAM_IDS = (
    "traffic",
    "fading-gw",
    "fading-relay",
    "fading-relay-gw",
    "geometry",
    "tie-break",
    "payload",
)


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: str

    def generator(self) -> np.random.Generator:
        # crc32 gives a label hash that is stable across interpreter runs
        key = zlib.crc32(self.stream_id.encode())
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=(key,))
        return np.random.Generator(np.random.PCG64(ss))


def rng_stream(seed: int, stream_id: str) -> np.random.Generator:
    return RngStream(seed, stream_id).generator()


def derive_seed(seed_base: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for replication ``keys``."""
    ss = np.random.SeedSequence(entropy=int(seed_base) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
