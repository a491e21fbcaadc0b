"""Domain types and file ingestion for signal-strength traces and fingerprints.

File formats are line-oriented UTF-8.  A trace file starts with a
``#range v_min v_max`` header, followed by one sample per line
(``t=<sec> <station>:<rss> ...``) and optional annotation lines
(``@cell <sec> <cellid>``, ``@motion <sec> still|moving``).  A fingerprint
file uses the same sample lines grouped under ``!cell <cellid>`` headers.
Serialization is canonical: parsing a writer-produced file and re-serializing
it yields byte-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence


class ParseError(ValueError):
    """Raised when a file does not parse; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvariantViolation(ValueError):
    """Raised when parsed or constructed data violates a domain invariant."""


_ID_FORBIDDEN = set(" \t\n\r:*")


def _check_id(kind: str, value: str) -> str:
    if not value:
        raise InvariantViolation(f"{kind} id must be non-empty")
    if any(c in _ID_FORBIDDEN for c in value):
        raise InvariantViolation(f"{kind} id {value!r} contains a reserved character")
    return value


@dataclass(frozen=True)
class ValueRange:
    """Discrete signal-strength value range [v_min, v_max], v_min > 0.

    The positive lower bound keeps signal-strength ratios well defined.
    """

    v_min: int = 1
    v_max: int = 100

    def __post_init__(self) -> None:
        if self.v_min < 1:
            raise InvariantViolation(f"v_min must be >= 1, got {self.v_min}")
        if self.v_max < self.v_min:
            raise InvariantViolation(f"v_max {self.v_max} < v_min {self.v_min}")

    def contains(self, value: float) -> bool:
        return self.v_min <= value <= self.v_max

    def clamp(self, value: float) -> int:
        return max(self.v_min, min(self.v_max, round(value)))

    @property
    def size(self) -> int:
        return self.v_max - self.v_min + 1


@dataclass(frozen=True)
class Observation:
    """One per-station signal-strength reading."""

    station: str
    rss: float

    def __post_init__(self) -> None:
        _check_id("station", self.station)


@dataclass(frozen=True)
class Sample:
    """Same-time readings, at most one per visible station.

    ``rss`` values are integers when loaded from files; estimators also
    accept real values (sample aggregation, gain-invariance analysis).
    """

    timestamp: float
    rss: Mapping[str, float]

    def __post_init__(self) -> None:
        for station in self.rss:
            _check_id("station", station)

    @property
    def stations(self) -> frozenset[str]:
        return frozenset(self.rss)

    def observations(self) -> Iterator[Observation]:
        for station in sorted(self.rss):
            yield Observation(station, self.rss[station])


@dataclass(frozen=True)
class Fingerprint:
    """Samples collected within a single cell."""

    cell: str
    samples: tuple[Sample, ...]

    def __post_init__(self) -> None:
        _check_id("cell", self.cell)
        if not self.samples:
            raise InvariantViolation(f"fingerprint for {self.cell!r} has no samples")

    def station_values(self, station: str) -> list[float]:
        """All readings of ``station`` across this fingerprint's samples."""
        return [s.rss[station] for s in self.samples if station in s.rss]

    @property
    def stations(self) -> frozenset[str]:
        out: set[str] = set()
        for s in self.samples:
            out.update(s.rss)
        return frozenset(out)


class FingerprintMap(dict):
    """Mapping of cell id to :class:`Fingerprint`, carrying the value range."""

    def __init__(self, fingerprints: Mapping[str, Fingerprint] | None = None,
                 value_range: ValueRange = ValueRange()):
        super().__init__(fingerprints or {})
        self.value_range = value_range


@dataclass(frozen=True)
class Trace:
    """Timestamped samples with optional ground-truth and motion annotations.

    Ground truth and motion marks are breakpoint sequences: an annotation at
    time ``t`` holds until the next one.  Empty annotation sequences are
    permitted for unlabeled (live) traces.
    """

    samples: tuple[Sample, ...]
    ground_truth: tuple[tuple[float, str], ...] = ()
    motion_marks: tuple[tuple[float, str], ...] = ()
    value_range: ValueRange = field(default_factory=ValueRange)

    def __post_init__(self) -> None:
        last = None
        for s in self.samples:
            if last is not None and s.timestamp < last:
                raise InvariantViolation(
                    f"sample timestamps decrease at t={s.timestamp}")
            last = s.timestamp
            for station, v in s.rss.items():
                if not self.value_range.contains(v):
                    raise InvariantViolation(
                        f"rss {v} for {station} at t={s.timestamp} outside "
                        f"[{self.value_range.v_min}, {self.value_range.v_max}]")
        for name, marks in (("cell", self.ground_truth), ("motion", self.motion_marks)):
            for i in range(1, len(marks)):
                if marks[i][0] < marks[i - 1][0]:
                    raise InvariantViolation(f"@{name} timestamps decrease")
        for _, state in self.motion_marks:
            if state not in ("still", "moving"):
                raise InvariantViolation(f"motion state {state!r} not still|moving")
        if self.samples:
            t0 = self.samples[0].timestamp
            for name, marks in (("cell", self.ground_truth), ("motion", self.motion_marks)):
                if marks and marks[0][0] > t0:
                    raise InvariantViolation(
                        f"@{name} annotations start after the first sample")

    @property
    def labeled(self) -> bool:
        return bool(self.ground_truth)

    def duration(self) -> float:
        if not self.samples:
            return 0.0
        return self.samples[-1].timestamp - self.samples[0].timestamp

    def truth_at(self, timestamp: float) -> str | None:
        return _mark_at(self.ground_truth, timestamp)

    def motion_at(self, timestamp: float) -> str | None:
        return _mark_at(self.motion_marks, timestamp)


def _mark_at(marks: Sequence[tuple[float, str]], timestamp: float) -> str | None:
    current = None
    for ts, value in marks:
        if ts > timestamp:
            break
        current = value
    return current


def _fmt_num(x: float) -> str:
    if float(x) == int(x):
        return str(int(x))
    return repr(float(x))


def _parse_num(token: str, what: str, line: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"bad {what} {token!r}", line) from None


def _parse_range_header(text: str, line: int) -> ValueRange:
    parts = text.split()
    if len(parts) != 3 or parts[0] != "#range":
        raise ParseError("expected '#range v_min v_max' header", line)
    try:
        return ValueRange(int(parts[1]), int(parts[2]))
    except ValueError as exc:
        raise ParseError(f"bad range header: {exc}", line) from None


def _parse_sample_line(text: str, line: int, rng: ValueRange) -> Sample:
    parts = text.split()
    if not parts[0].startswith("t="):
        raise ParseError("sample line must start with 't='", line)
    ts = _parse_num(parts[0][2:], "timestamp", line)
    rss: dict[str, float] = {}
    if len(parts) < 2:
        raise ParseError("sample has no observations", line)
    for token in parts[1:]:
        station, sep, value = token.rpartition(":")
        if not sep or not station:
            raise ParseError(f"bad observation {token!r}", line)
        if station in rss:
            raise ParseError(f"duplicate station {station!r} in sample", line)
        v = _parse_num(value, "rss", line)
        if v != int(v):
            raise ParseError(f"rss {value!r} is not an integer", line)
        if not rng.contains(v):
            raise ParseError(
                f"rss {value} outside [{rng.v_min}, {rng.v_max}]", line)
        rss[station] = int(v)
    return Sample(ts, rss)


def load_trace(path: str) -> Trace:
    """Load a trace file, validating all domain invariants.

    Raises :class:`ParseError` with a line number on malformed input and
    :class:`InvariantViolation` on valid syntax with inconsistent content.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty trace file", 1)
    rng = _parse_range_header(lines[0], 1)
    samples: list[Sample] = []
    cells: list[tuple[float, str]] = []
    motion: list[tuple[float, str]] = []
    for i, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text:
            continue
        if text.startswith("t="):
            sample = _parse_sample_line(text, i, rng)
            if samples and sample.timestamp < samples[-1].timestamp:
                raise ParseError(
                    f"timestamp {sample.timestamp} decreases", i)
            samples.append(sample)
        elif text.startswith("@cell "):
            parts = text.split()
            if len(parts) != 3:
                raise ParseError("expected '@cell <sec> <cellid>'", i)
            cells.append((_parse_num(parts[1], "timestamp", i), parts[2]))
        elif text.startswith("@motion "):
            parts = text.split()
            if len(parts) != 3 or parts[2] not in ("still", "moving"):
                raise ParseError("expected '@motion <sec> still|moving'", i)
            motion.append((_parse_num(parts[1], "timestamp", i), parts[2]))
        else:
            raise ParseError(f"unrecognized line {text.split()[0]!r}", i)
    return Trace(tuple(samples), tuple(cells), tuple(motion), rng)


def _sample_lines(samples: Iterable[Sample]) -> Iterator[str]:
    for s in samples:
        obs = " ".join(f"{st}:{_fmt_num(s.rss[st])}" for st in sorted(s.rss))
        yield f"t={_fmt_num(s.timestamp)} {obs}"


def dump_trace(trace: Trace) -> str:
    """Serialize a trace to its canonical text form."""
    rng = trace.value_range
    lines = [f"#range {rng.v_min} {rng.v_max}"]
    lines.extend(_sample_lines(trace.samples))
    lines.extend(f"@cell {_fmt_num(ts)} {cell}" for ts, cell in trace.ground_truth)
    lines.extend(f"@motion {_fmt_num(ts)} {state}" for ts, state in trace.motion_marks)
    return "\n".join(lines) + "\n"


def save_trace(trace: Trace, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_trace(trace))


def load_fingerprints(path: str) -> FingerprintMap:
    """Load a fingerprint file as a mapping of cell id to fingerprint.

    Samples from repeated ``!cell`` blocks with the same label are merged
    into one fingerprint.  Total sample count is preserved.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty fingerprint file", 1)
    rng = _parse_range_header(lines[0], 1)
    per_cell: dict[str, list[Sample]] = {}
    current: str | None = None
    for i, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if not text:
            continue
        if text.startswith("!cell "):
            parts = text.split()
            if len(parts) != 2:
                raise ParseError("expected '!cell <cellid>'", i)
            current = parts[1]
            per_cell.setdefault(current, [])
        elif text.startswith("t="):
            if current is None:
                raise ParseError("sample line before any '!cell' header", i)
            per_cell[current].append(_parse_sample_line(text, i, rng))
        else:
            raise ParseError(f"unrecognized line {text.split()[0]!r}", i)
    if not per_cell:
        raise ParseError("fingerprint file has no cells", len(lines))
    fps = {}
    for cell, samples in per_cell.items():
        if not samples:
            raise InvariantViolation(f"cell {cell!r} has zero samples")
        fps[cell] = Fingerprint(cell, tuple(samples))
    return FingerprintMap(fps, rng)


def dump_fingerprints(fps: FingerprintMap) -> str:
    rng = fps.value_range
    lines = [f"#range {rng.v_min} {rng.v_max}"]
    for cell in sorted(fps):
        lines.append(f"!cell {cell}")
        lines.extend(_sample_lines(fps[cell].samples))
    return "\n".join(lines) + "\n"


def save_fingerprints(fps: FingerprintMap, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_fingerprints(fps))
