"""Streaming detection of robot errors from facial action-unit intensities."""

from ausentinel.core import (
    AU_IDS,
    AU_NAMES,
    N_AUS,
    RATE_HZ,
    TIMESTEP_SECONDS,
    AuFrame,
    AusentinelError,
    ContractError,
    ErrorEvent,
    GroundTruth,
    ModelIntegrityError,
    StreamFormatError,
    StreamIntegrityError,
    Timestep,
    TrialRecord,
    UnusableCorpusError,
    timestep_of,
)

__version__ = "0.1.0"

__all__ = [
    "AU_IDS",
    "AU_NAMES",
    "N_AUS",
    "RATE_HZ",
    "TIMESTEP_SECONDS",
    "AuFrame",
    "AusentinelError",
    "ContractError",
    "ErrorEvent",
    "GroundTruth",
    "ModelIntegrityError",
    "StreamFormatError",
    "StreamIntegrityError",
    "Timestep",
    "TrialRecord",
    "UnusableCorpusError",
    "timestep_of",
]
