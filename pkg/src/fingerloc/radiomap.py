"""Radio-map construction from fingerprints.

Four map flavors are supported: deterministic per-station mean/std,
probabilistic per-station histograms, and their hyperbolic counterparts
built on normalized log signal-strength ratios between base-station pairs.
Ratios are invariant to multiplicative sensor gain, which is what makes the
hyperbolic maps calibration-free across heterogeneous clients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from fingerloc.core import (
    Fingerprint,
    FingerprintMap,
    InvariantViolation,
    ParseError,
    Sample,
    ValueRange,
)

DEFAULT_RATIO_STEP = 0.02
LIKELIHOOD_FLOOR = 1e-6


def nlr(v: float, y: float, rng: ValueRange) -> float:
    """Normalized log signal-strength ratio of two readings.

    Computed as ``log10(v/y) - log10(1/v_max)``; the normalization term keeps
    the value on a positive scale for all readings within the range.
    """
    if v <= 0 or y <= 0:
        raise InvariantViolation(f"ratio requires positive rss, got {v}, {y}")
    return math.log10(v / y) + math.log10(rng.v_max)


def nlr_max(rng: ValueRange) -> float:
    """Upper end of the normalized-log-ratio domain for a value range."""
    return math.log10(rng.v_max / rng.v_min) + math.log10(rng.v_max)


def station_pair(a: str, b: str) -> tuple[str, str]:
    """Canonical (lexicographically ordered) station pair."""
    return (a, b) if a < b else (b, a)


def sample_ratios(sample: Sample, rng: ValueRange) -> dict[tuple[str, str], float]:
    """Pairwise normalized log ratios over a sample's observed stations."""
    stations = sorted(sample.rss)
    out: dict[tuple[str, str], float] = {}
    for i, a in enumerate(stations):
        for b in stations[i + 1:]:
            out[(a, b)] = nlr(sample.rss[a], sample.rss[b], rng)
    return out


@dataclass(frozen=True)
class StationStats:
    mean: float
    std: float
    count: int


@dataclass
class DeterministicMap:
    """Per (cell, station) mean/std/count of fingerprint readings."""

    cells: dict[str, dict[str, StationStats]]

    def stations(self, cell: str) -> frozenset[str]:
        return frozenset(self.cells[cell])


@dataclass
class HistogramMap:
    """Per (cell, station) probability mass over integer rss values."""

    cells: dict[str, dict[str, dict[int, float]]]
    value_range: ValueRange

    def prob(self, cell: str, station: str, value: float,
             floor: float = LIKELIHOOD_FLOOR) -> float:
        pmf = self.cells[cell].get(station)
        if pmf is None:
            raise KeyError(station)
        return max(pmf.get(round(value), 0.0), floor)


@dataclass
class RatioVectorMap:
    """Per (cell, station pair) mean normalized log ratio."""

    cells: dict[str, dict[tuple[str, str], float]]
    value_range: ValueRange


@dataclass
class RatioHistogramMap:
    """Per (cell, station pair) pmf over discretized normalized-log-ratio bins."""

    cells: dict[str, dict[tuple[str, str], dict[int, float]]]
    value_range: ValueRange
    step: float = DEFAULT_RATIO_STEP

    def bin_index(self, ratio: float) -> int:
        return int(ratio // self.step)

    def prob(self, cell: str, pair: tuple[str, str], ratio: float,
             floor: float = LIKELIHOOD_FLOOR) -> float:
        pmf = self.cells[cell].get(pair)
        if pmf is None:
            raise KeyError(pair)
        return max(pmf.get(self.bin_index(ratio), 0.0), floor)


def _pop_std(values: list[float], mean: float) -> float:
    # population std (divide by n): deterministic for count=1
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def build_deterministic(fps: Mapping[str, Fingerprint]) -> DeterministicMap:
    """Mean/std aggregation of each cell's fingerprint, per station."""
    cells: dict[str, dict[str, StationStats]] = {}
    for cell, fp in fps.items():
        entry: dict[str, StationStats] = {}
        for station in sorted(fp.stations):
            values = fp.station_values(station)
            mean = sum(values) / len(values)
            entry[station] = StationStats(mean, _pop_std(values, mean), len(values))
        cells[cell] = entry
    return DeterministicMap(cells)


def build_histogram(fps: FingerprintMap) -> HistogramMap:
    """Histogram-method map: normalized value counts per (cell, station)."""
    cells: dict[str, dict[str, dict[int, float]]] = {}
    for cell, fp in fps.items():
        entry: dict[str, dict[int, float]] = {}
        for station in sorted(fp.stations):
            values = [round(v) for v in fp.station_values(station)]
            pmf: dict[int, float] = {}
            for v in values:
                pmf[v] = pmf.get(v, 0.0) + 1.0
            total = len(values)
            entry[station] = {v: c / total for v, c in sorted(pmf.items())}
        cells[cell] = entry
    return HistogramMap(cells, fps.value_range)


def build_ratio_vector(fps: Mapping[str, Fingerprint], rng: ValueRange,
                       per_station_means: bool = False) -> RatioVectorMap:
    """Ratio map: per cell and station pair, the mean normalized log ratio.

    The default averages the ratio over all observation combinations of the
    two stations within the cell's fingerprint.  With ``per_station_means``
    the ratio of the per-station mean readings is stored instead; for
    log-ratios the two readings differ only through the log nonlinearity.
    """
    cells: dict[str, dict[tuple[str, str], float]] = {}
    for cell, fp in fps.items():
        stations = sorted(fp.stations)
        log_stats: dict[str, tuple[float, float]] = {}
        for station in stations:
            values = fp.station_values(station)
            if any(v <= 0 for v in values):
                raise InvariantViolation(
                    f"ratio map requires positive rss (cell {cell!r}, {station})")
            mean_log = sum(math.log10(v) for v in values) / len(values)
            mean_val = sum(values) / len(values)
            log_stats[station] = (mean_log, mean_val)
        entry: dict[tuple[str, str], float] = {}
        norm = math.log10(rng.v_max)
        for i, a in enumerate(stations):
            for b in stations[i + 1:]:
                if per_station_means:
                    entry[(a, b)] = nlr(log_stats[a][1], log_stats[b][1], rng)
                else:
                    # mean of nlr over the observation cross product separates
                    # into the difference of per-station mean logs
                    entry[(a, b)] = log_stats[a][0] - log_stats[b][0] + norm
        cells[cell] = entry
    return RatioVectorMap(cells, rng)


def build_ratio_histogram(fps: Mapping[str, Fingerprint], rng: ValueRange,
                          step: float = DEFAULT_RATIO_STEP) -> RatioHistogramMap:
    """Histogram-method map over per-sample pairwise normalized log ratios."""
    if step <= 0:
        raise InvariantViolation(f"step must be positive, got {step}")
    cells: dict[str, dict[tuple[str, str], dict[int, float]]] = {}
    for cell, fp in fps.items():
        counts: dict[tuple[str, str], dict[int, int]] = {}
        for sample in fp.samples:
            for pair, ratio in sample_ratios(sample, rng).items():
                bins = counts.setdefault(pair, {})
                idx = int(ratio // step)
                bins[idx] = bins.get(idx, 0) + 1
        entry: dict[tuple[str, str], dict[int, float]] = {}
        for pair in sorted(counts):
            total = sum(counts[pair].values())
            entry[pair] = {i: c / total for i, c in sorted(counts[pair].items())}
        cells[cell] = entry
    return RatioHistogramMap(cells, rng, step)


# -- text serialization -------------------------------------------------------
#
# One entry per line, deterministic (cell, station/pair, bin ascending)
# ordering so identical maps serialize to identical bytes.

def _fmt(x: float) -> str:
    return repr(float(x))


def _pair_token(pair: tuple[str, str]) -> str:
    return f"{pair[0]}*{pair[1]}"


def _parse_pair(token: str, line: int) -> tuple[str, str]:
    a, sep, b = token.partition("*")
    if not sep or not a or not b:
        raise ParseError(f"bad station pair {token!r}", line)
    return (a, b)


def dump_map(radio_map) -> str:
    rng = getattr(radio_map, "value_range", ValueRange())
    if isinstance(radio_map, DeterministicMap):
        lines = ["#map deterministic"]
        for cell in sorted(radio_map.cells):
            for station, st in sorted(radio_map.cells[cell].items()):
                lines.append(f"{cell} {station} {_fmt(st.mean)} {_fmt(st.std)} {st.count}")
    elif isinstance(radio_map, HistogramMap):
        lines = [f"#map histogram {rng.v_min} {rng.v_max}"]
        for cell in sorted(radio_map.cells):
            for station, pmf in sorted(radio_map.cells[cell].items()):
                row = " ".join(f"{v}:{_fmt(p)}" for v, p in sorted(pmf.items()))
                lines.append(f"{cell} {station} {row}")
    elif isinstance(radio_map, RatioVectorMap):
        lines = [f"#map ratio {rng.v_min} {rng.v_max}"]
        for cell in sorted(radio_map.cells):
            for pair, value in sorted(radio_map.cells[cell].items()):
                lines.append(f"{cell} {_pair_token(pair)} {_fmt(value)}")
    elif isinstance(radio_map, RatioHistogramMap):
        lines = [f"#map ratio-histogram {rng.v_min} {rng.v_max} {_fmt(radio_map.step)}"]
        for cell in sorted(radio_map.cells):
            for pair, pmf in sorted(radio_map.cells[cell].items()):
                row = " ".join(f"{b}:{_fmt(p)}" for b, p in sorted(pmf.items()))
                lines.append(f"{cell} {_pair_token(pair)} {row}")
    else:
        raise TypeError(f"not a radio map: {type(radio_map).__name__}")
    return "\n".join(lines) + "\n"


def save_map(radio_map, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_map(radio_map))


def _parse_pmf(tokens: list[str], line: int) -> dict[int, float]:
    pmf: dict[int, float] = {}
    for token in tokens:
        key, sep, prob = token.partition(":")
        if not sep:
            raise ParseError(f"bad pmf entry {token!r}", line)
        pmf[int(key)] = float(prob)
    return pmf


def load_map(path: str):
    """Load a serialized radio map; the header line selects the flavor."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#map "):
        raise ParseError("expected '#map <kind> ...' header", 1)
    head = lines[0].split()
    kind = head[1]
    body = [(i, ln.split()) for i, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if kind == "deterministic":
        cells: dict[str, dict[str, StationStats]] = {}
        for i, parts in body:
            if len(parts) != 5:
                raise ParseError("expected 'cell station mean std count'", i)
            cell, station, mean, std, count = parts
            cells.setdefault(cell, {})[station] = StationStats(
                float(mean), float(std), int(count))
        return DeterministicMap(cells)
    rng = ValueRange(int(head[2]), int(head[3]))
    if kind == "histogram":
        hcells: dict[str, dict[str, dict[int, float]]] = {}
        for i, parts in body:
            hcells.setdefault(parts[0], {})[parts[1]] = _parse_pmf(parts[2:], i)
        return HistogramMap(hcells, rng)
    if kind == "ratio":
        rcells: dict[str, dict[tuple[str, str], float]] = {}
        for i, parts in body:
            if len(parts) != 3:
                raise ParseError("expected 'cell pair mean'", i)
            rcells.setdefault(parts[0], {})[_parse_pair(parts[1], i)] = float(parts[2])
        return RatioVectorMap(rcells, rng)
    if kind == "ratio-histogram":
        step = float(head[4])
        rhcells: dict[str, dict[tuple[str, str], dict[int, float]]] = {}
        for i, parts in body:
            rhcells.setdefault(parts[0], {})[_parse_pair(parts[1], i)] = \
                _parse_pmf(parts[2:], i)
        return RatioHistogramMap(rhcells, rng, step)
    raise ParseError(f"unknown map kind {kind!r}", 1)
