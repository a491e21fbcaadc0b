"""Radio location fingerprinting engine and trace-emulation toolkit.

Subpackages cover the full terminal/server pipeline: trace and fingerprint
ingestion (``core``), radio-map construction (``radiomap``), position
estimation (``locate``), heterogeneous-client adaptation (``adapt``),
zone-based RSS reporting (``zone``), walking-distance proximity detection
(``proximity``), movement detection with scan-mode switching (``movement``),
and the emulation harness with metrics and synthetic worlds (``emu``).
"""

from fingerloc.core import (
    Fingerprint,
    FingerprintMap,
    InvariantViolation,
    Observation,
    ParseError,
    Sample,
    Trace,
    ValueRange,
    load_fingerprints,
    load_trace,
    save_fingerprints,
    save_trace,
)

__all__ = [
    "Fingerprint",
    "FingerprintMap",
    "InvariantViolation",
    "Observation",
    "ParseError",
    "Sample",
    "Trace",
    "ValueRange",
    "load_fingerprints",
    "load_trace",
    "save_fingerprints",
    "save_trace",
]

__version__ = "0.1.0"
