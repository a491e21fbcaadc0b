"""Zone-based RSS reporting.

A location server configures a terminal with an update zone (a set of
cells); the terminal reports measurements only when they stop matching the
zone's signal-strength pattern.  Four terminal-side detectors are provided:
common base stations, rank correlation, Manhattan distance with per-cell
thresholds, and a two-hypothesis Bayes estimator guarded by a Markov model.
The Bayes model can be compressed into a compact wire format for shipping to
resource-constrained terminals.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from fingerloc.core import (
    Fingerprint,
    FingerprintMap,
    InvariantViolation,
    Observation,
    ParseError,
    Sample,
    Trace,
    ValueRange,
)
from fingerloc.emu import ConfusionCounts
from fingerloc.locate import UnlocatableError, bayes_estimate
from fingerloc.radiomap import (
    LIKELIHOOD_FLOOR,
    DeterministicMap,
    build_deterministic,
    build_histogram,
)

CBS_THRESHOLD = 0.70
RANKING_THRESHOLD = 0.9
MIN_COMMON_STATIONS = 3
DEFAULT_MARKOV = (0.99, 0.01)  # (P_sustain, P_change)
MAX_MODEL_STATIONS = 12


def zone_stations(zone: Iterable[str], fps: Mapping[str, Fingerprint]) -> frozenset[str]:
    """All stations visible in the zone cells' fingerprints."""
    out: set[str] = set()
    for cell in zone:
        out.update(fps[cell].stations)
    return frozenset(out)


def _sample_values(sample) -> dict[str, float]:
    if isinstance(sample, Sample):
        return dict(sample.rss)
    return dict(sample)


def aggregate_samples(samples: Sequence[Sample]) -> dict[str, float]:
    """Per-station mean over a detection step's samples."""
    values: dict[str, list[float]] = {}
    for s in samples:
        for st, v in s.rss.items():
            values.setdefault(st, []).append(float(v))
    return {st: sum(vs) / len(vs) for st, vs in values.items()}


def cbs_detect(stations: frozenset[str] | set[str], sample,
               threshold: float = CBS_THRESHOLD) -> bool:
    """In-zone when enough of the zone's base stations are currently seen."""
    if not stations:
        raise InvariantViolation("zone station set is empty")
    seen = set(_sample_values(sample))
    return len(seen & set(stations)) / len(stations) >= threshold


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank-order correlation with average ranks for ties."""
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two equal-length sequences of length >= 2")

    def ranks(values: Sequence[float]) -> np.ndarray:
        arr = np.asarray(values, dtype=float)
        order = np.argsort(arr, kind="stable")
        out = np.empty(len(arr))
        i = 0
        while i < len(arr):
            j = i
            while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
                j += 1
            out[order[i:j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return out

    rx = ranks(x) - (len(x) + 1) / 2.0
    ry = ranks(y) - (len(y) + 1) / 2.0
    denom = math.sqrt(float((rx ** 2).sum()) * float((ry ** 2).sum()))
    if denom == 0.0:
        return 1.0 if np.array_equal(rx, ry) else 0.0
    return float((rx * ry).sum()) / denom


def ranking_detect(cell_means: Mapping[str, Mapping[str, float]], sample,
                   threshold: float = RANKING_THRESHOLD,
                   min_common: int = MIN_COMMON_STATIONS) -> bool:
    """In-zone when any zone cell's station ranking matches the sample's.

    Cells sharing fewer than ``min_common`` stations with the sample fail
    individually; with no qualifying cell the verdict is out.
    """
    values = _sample_values(sample)
    for cell in sorted(cell_means):
        common = sorted(set(values) & set(cell_means[cell]))
        if len(common) < min_common:
            continue
        rho = spearman([values[st] for st in common],
                       [cell_means[cell][st] for st in common])
        if rho >= threshold:
            return True
    return False


def manhattan_detect(radio_map: DeterministicMap, sample,
                     min_common: int = MIN_COMMON_STATIONS) -> bool:
    """In-zone when some cell's Manhattan distance is under its threshold.

    The per-cell threshold is the sum of the cell's per-station standard
    deviations over all of its stations, independent of the sample.
    """
    values = _sample_values(sample)
    for cell, entry in radio_map.cells.items():
        common = [st for st in values if st in entry]
        if len(common) < min_common:
            continue
        threshold = sum(st.std for st in entry.values())
        distance = sum(abs(values[st] - entry[st].mean) for st in common)
        if distance < threshold:
            return True
    return False


# -- two-hypothesis Bayes detector ----------------------------------------------

@dataclass(frozen=True)
class BayesZoneModel:
    """Compact in-zone/out-of-zone emission model with Markov guard.

    ``h0``/``h1`` give, per roster station, a pmf over rss values for the
    in-zone and out-of-zone hypotheses.  ``p_sustain``/``p_change`` guard
    verdict flips between time steps.
    """

    stations: tuple[str, ...]
    h0: dict[str, dict[int, float]]
    h1: dict[str, dict[int, float]]
    value_range: ValueRange
    p_sustain: float = DEFAULT_MARKOV[0]
    p_change: float = DEFAULT_MARKOV[1]

    def __post_init__(self) -> None:
        # p_change 0 (no guard, propagation is the identity) is permitted
        if not 0.0 < self.p_sustain <= 1.0 or not 0.0 <= self.p_change < 1.0:
            raise InvariantViolation("Markov probabilities must lie in (0,1]/[0,1)")
        if not math.isclose(self.p_sustain + self.p_change, 1.0, abs_tol=1e-6):
            raise InvariantViolation("P_sustain + P_change must be 1")

    def prob(self, hypothesis: int, obs: Observation,
             floor: float = LIKELIHOOD_FLOOR) -> float:
        table = self.h0 if hypothesis == 0 else self.h1
        pmf = table[obs.station]
        return max(pmf.get(round(obs.rss), 0.0), floor)


@dataclass
class BayesDetectorState:
    """Belief over the two hypotheses; verdict is the argmax (in on ties)."""

    p_in: float = 0.5
    p_out: float = 0.5

    @property
    def in_zone(self) -> bool:
        return self.p_in >= self.p_out

    def _normalized(self, p_in: float, p_out: float) -> "BayesDetectorState":
        total = p_in + p_out
        return BayesDetectorState(p_in / total, p_out / total)


def markov_propagate(state: BayesDetectorState,
                     model: BayesZoneModel) -> BayesDetectorState:
    """One Markov time step: belief mixes toward the other hypothesis."""
    return BayesDetectorState(
        model.p_sustain * state.p_in + model.p_change * state.p_out,
        model.p_change * state.p_in + model.p_sustain * state.p_out)


def bayes_observe(state: BayesDetectorState, model: BayesZoneModel,
                  obs: Observation) -> BayesDetectorState:
    """Bayes-update the belief with one observation; non-roster stations are
    ignored."""
    if obs.station not in model.h0:
        return state
    p_in = model.prob(0, obs) * state.p_in
    p_out = model.prob(1, obs) * state.p_out
    return state._normalized(p_in, p_out)


def bayes_zone_step(state: BayesDetectorState, model: BayesZoneModel,
                    obs: Observation) -> BayesDetectorState:
    """Markov propagation followed by a single-observation Bayes update."""
    return bayes_observe(markov_propagate(state, model), model, obs)


def bayes_zone_sample(state: BayesDetectorState, model: BayesZoneModel,
                      sample: Sample) -> BayesDetectorState:
    """Process one sample: one Markov step, then all observations update."""
    state = markov_propagate(state, model)
    for obs in sample.observations():
        state = bayes_observe(state, model, obs)
    return state


def build_zone_model(zone: Iterable[str], fps: FingerprintMap,
                     max_stations: int = MAX_MODEL_STATIONS,
                     markov: tuple[float, float] = DEFAULT_MARKOV,
                     ) -> BayesZoneModel:
    """Histogram-method emission model from in-zone and out-of-zone prints.

    The roster keeps the ``max_stations`` most frequently observed in-zone
    stations (ties lexicographic).  A roster station never observed under a
    hypothesis gets a uniform pmf.
    """
    zone = set(zone)
    unknown = zone - set(fps)
    if unknown:
        raise InvariantViolation(f"zone cells without fingerprints: {sorted(unknown)}")
    complement = set(fps) - zone
    if not zone:
        raise InvariantViolation("zone is empty")
    if not complement:
        raise InvariantViolation("zone covers every cell; complement is empty")
    counts: dict[str, int] = {}
    for cell in zone:
        for s in fps[cell].samples:
            for st in s.rss:
                counts[st] = counts.get(st, 0) + 1
    roster = tuple(sorted(counts, key=lambda st: (-counts[st], st))[:max_stations])

    def pmf_table(cells: set[str]) -> dict[str, dict[int, float]]:
        table: dict[str, dict[int, float]] = {}
        rng = fps.value_range
        for st in roster:
            hist: dict[int, int] = {}
            for cell in cells:
                for v in fps[cell].station_values(st):
                    hist[round(v)] = hist.get(round(v), 0) + 1
            total = sum(hist.values())
            if total == 0:
                uniform = 1.0 / rng.size
                table[st] = {v: uniform for v in range(rng.v_min, rng.v_max + 1)}
            else:
                table[st] = {v: c / total for v, c in sorted(hist.items())}
        return table

    return BayesZoneModel(roster, pmf_table(zone), pmf_table(complement),
                          fps.value_range, markov[0], markov[1])


# -- compact wire format ---------------------------------------------------------
#
# Big-endian layout: magic "ZBM1", u8 version, u16 v_min, u16 v_max,
# u16 quantized P_sustain, u16 station count, station table (u8 length +
# utf-8 bytes each), then for each hypothesis (in-zone, out-of-zone) and each
# roster station a run-length block: u16 run count, then (u16 length,
# u16 value) pairs covering the station's full value row.

_MAGIC = b"ZBM1"
_VERSION = 1
_SCALE = 0xFFFF


def quantize_row(probs: Sequence[float]) -> list[int]:
    """Round probabilities to 16-bit fixed point, preserving the row sum.

    Rounds half up; any residual from rounding is absorbed into the largest
    bin so rows that sum to 1 still sum to exactly 65535/65535.  An all-zero
    row stays all-zero.
    """
    q = [math.floor(p * _SCALE + 0.5) for p in probs]
    total = sum(q)
    if total:
        q[max(range(len(q)), key=lambda i: q[i])] += _SCALE - total
    return q


def _rle(values: Sequence[int]) -> list[tuple[int, int]]:
    runs: list[tuple[int, int]] = []
    for v in values:
        if runs and runs[-1][1] == v and runs[-1][0] < 0xFFFF:
            runs[-1] = (runs[-1][0] + 1, v)
        else:
            runs.append((1, v))
    return runs


def _row(model: BayesZoneModel, table: dict[str, dict[int, float]],
         station: str) -> list[float]:
    rng = model.value_range
    pmf = table[station]
    return [pmf.get(v, 0.0) for v in range(rng.v_min, rng.v_max + 1)]


def encode_zone_model(model: BayesZoneModel) -> bytes:
    """Serialize a zone model to the compact 16-bit run-length format."""
    out = bytearray(_MAGIC)
    out += struct.pack(">BHHHH", _VERSION, model.value_range.v_min,
                       model.value_range.v_max,
                       math.floor(model.p_sustain * _SCALE + 0.5),
                       len(model.stations))
    for st in model.stations:
        raw = st.encode("utf-8")
        if len(raw) > 0xFF:
            raise InvariantViolation(f"station id {st!r} too long to encode")
        out += struct.pack(">B", len(raw)) + raw
    for table in (model.h0, model.h1):
        for st in model.stations:
            runs = _rle(quantize_row(_row(model, table, st)))
            out += struct.pack(">H", len(runs))
            for length, value in runs:
                out += struct.pack(">HH", length, value)
    return bytes(out)


def decode_zone_model(data: bytes) -> BayesZoneModel:
    """Inverse of :func:`encode_zone_model` up to 16-bit quantization."""
    if data[:4] != _MAGIC:
        raise ParseError("bad magic; not a zone model")
    try:
        version, v_min, v_max, q_sustain, n_stations = struct.unpack_from(
            ">BHHHH", data, 4)
        if version != _VERSION:
            raise ParseError(f"unsupported version {version}")
        offset = 13
        stations = []
        for _ in range(n_stations):
            (length,) = struct.unpack_from(">B", data, offset)
            offset += 1
            stations.append(data[offset:offset + length].decode("utf-8"))
            offset += length
        rng = ValueRange(v_min, v_max)
        tables: list[dict[str, dict[int, float]]] = []
        for _ in range(2):
            table: dict[str, dict[int, float]] = {}
            for st in stations:
                (n_runs,) = struct.unpack_from(">H", data, offset)
                offset += 2
                pmf: dict[int, float] = {}
                v = rng.v_min
                for _ in range(n_runs):
                    length, value = struct.unpack_from(">HH", data, offset)
                    offset += 4
                    if value:
                        for i in range(length):
                            pmf[v + i] = value / _SCALE
                    v += length
                if v != rng.v_max + 1:
                    raise ParseError(f"row for {st!r} covers {v - rng.v_min} "
                                     f"of {rng.size} values")
                table[st] = pmf
            tables.append(table)
        if offset != len(data):
            raise ParseError(f"{len(data) - offset} trailing bytes")
    except struct.error as exc:
        raise ParseError(f"truncated zone model: {exc}") from None
    p_sustain = q_sustain / _SCALE
    return BayesZoneModel(tuple(stations), tables[0], tables[1], rng,
                          p_sustain, 1.0 - p_sustain)


# -- protocol emulation -----------------------------------------------------------

DETECTOR_KINDS = ("cbs", "rank", "manhattan", "bayes", "oracle")


@dataclass
class ProtocolLog:
    """Outcome of a simulated terminal/server zone-reporting exchange."""

    frames: list[tuple[float, bool, bool]] = field(default_factory=list)
    updates: int = 0
    configs: int = 0
    baseline: int = 0

    @property
    def confusion(self) -> ConfusionCounts:
        """Zone containment as the positive class, one frame per sample."""
        return ConfusionCounts.from_pairs(
            (verdict, truth) for _, truth, verdict in self.frames)


class _Detector:
    """Terminal-side detector bound to one configured zone."""

    def __init__(self, kind: str, zone: set[str], fps: FingerprintMap,
                 markov: tuple[float, float]):
        self.kind = kind
        self.zone = zone
        if kind == "cbs":
            self.stations = zone_stations(zone, fps)
        elif kind == "rank":
            dmap = build_deterministic({c: fps[c] for c in zone})
            self.means = {c: {st: s.mean for st, s in e.items()}
                          for c, e in dmap.cells.items()}
        elif kind == "manhattan":
            self.dmap = build_deterministic({c: fps[c] for c in zone})
        elif kind == "bayes":
            self.model = build_zone_model(zone, fps, markov=markov)
            self.state = BayesDetectorState()
        elif kind != "oracle":
            raise ValueError(f"unknown detector kind {kind!r}")

    def verdict(self, sample: Sample, truth_in: bool) -> bool:
        if self.kind == "oracle":
            return truth_in
        if self.kind == "cbs":
            return cbs_detect(self.stations, sample)
        if self.kind == "rank":
            return ranking_detect(self.means, sample)
        if self.kind == "manhattan":
            return manhattan_detect(self.dmap, sample)
        self.state = bayes_zone_sample(self.state, self.model, sample)
        return self.state.in_zone


def zone_accuracy_run(fps: FingerprintMap, trace: Trace, zone: Iterable[str],
                      detector: str = "bayes",
                      markov: tuple[float, float] = DEFAULT_MARKOV,
                      samples_per_step: int = 1) -> ProtocolLog:
    """Replay a trace against one fixed zone and log per-frame verdicts.

    Measures pure detection accuracy: the zone is never reconfigured and the
    update counter reflects out-of-zone verdicts.  With ``samples_per_step``
    greater than one, ranking and Manhattan detection aggregate each step's
    samples to their per-station mean; the step verdict applies to each of
    its frames.
    """
    if not trace.labeled:
        raise InvariantViolation("accuracy emulation needs a labeled trace")
    if samples_per_step < 1:
        raise ValueError("samples_per_step must be >= 1")
    det = _Detector(detector, set(zone), fps, markov)
    log = ProtocolLog(baseline=len(trace.samples))
    log.configs += 1
    samples = list(trace.samples)
    for k in range(0, len(samples), samples_per_step):
        chunk = samples[k:k + samples_per_step]
        truth_flags = [trace.truth_at(s.timestamp) in det.zone for s in chunk]
        if det.kind in ("rank", "manhattan") and len(chunk) > 1:
            step_input = aggregate_samples(chunk)
            verdict = det.verdict(step_input, truth_flags[-1])
        elif det.kind == "bayes":
            for s in chunk[:-1]:
                det.state = bayes_zone_sample(det.state, det.model, s)
            verdict = det.verdict(chunk[-1], truth_flags[-1])
        else:
            verdict = det.verdict(chunk[-1], truth_flags[-1])
        for s, truth_in in zip(chunk, truth_flags):
            log.frames.append((s.timestamp, truth_in, verdict))
            if not verdict:
                log.updates += 1
    return log


def zone_protocol_run(fps: FingerprintMap, trace: Trace,
                      zone_policy: Callable[[str], Iterable[str]],
                      detector: str = "bayes",
                      markov: tuple[float, float] = DEFAULT_MARKOV,
                      ) -> ProtocolLog:
    """Replay a trace against the zone-update protocol.

    The first zone is centered on the walk's starting cell.  While the
    detector matches the zone no message is sent; when it reports out-of-zone
    the terminal sends an RSS update, the server re-estimates the cell and
    reconfigures a zone centered there (instantaneously).  The baseline
    counter corresponds to one periodic update per sample.
    """
    if not trace.labeled:
        raise InvariantViolation("protocol emulation needs a labeled trace")
    if detector not in DETECTOR_KINDS:
        raise ValueError(f"unknown detector kind {detector!r}")
    hist = build_histogram(fps)
    log = ProtocolLog(baseline=len(trace.samples))
    start = trace.truth_at(trace.samples[0].timestamp)
    current = _Detector(detector, set(zone_policy(start)), fps, markov)
    log.configs += 1
    for sample in trace.samples:
        truth_cell = trace.truth_at(sample.timestamp)
        truth_in = truth_cell in current.zone
        verdict = current.verdict(sample, truth_in)
        log.frames.append((sample.timestamp, truth_in, verdict))
        if not verdict:
            log.updates += 1
            if detector == "oracle":
                estimate = truth_cell
            else:
                try:
                    estimate = bayes_estimate(hist, sample).cell
                except UnlocatableError:
                    estimate = truth_cell
            current = _Detector(detector, set(zone_policy(estimate)), fps, markov)
            log.configs += 1
    return log
