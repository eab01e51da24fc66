"""Coded relaying for LoRa sensor networks: analysis and slot-level simulation."""

from .core import (
    FixedDistance,
    Geometry,
    Protocol,
    ScenarioConfig,
    UniformAnnulus,
    UniformDisc,
    validate_config,
)

__version__ = "0.1.0"

__all__ = [
    "FixedDistance",
    "Geometry",
    "Protocol",
    "ScenarioConfig",
    "UniformAnnulus",
    "UniformDisc",
    "validate_config",
]
