"""Heterogeneous-client handling.

Different radios, antennas, and firmwares report signal strength on
different scales, cache readings, or report values unrelated to signal
strength.  This module provides measurement-quality classifiers, a
still-period analyzer, and linear normalization fitted manually (known
locations), quasi-automatically (unknown locations, weighted), or fully
automatically (still periods found by the analyzer).

The linear client model is ``client_value = c1 * normalized + c2``; fitted
mappings therefore map the calibration scale to the client scale, and
:func:`apply_mapping` inverts it to normalize client readings.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from fingerloc.core import Fingerprint, FingerprintMap, Sample, Trace, ValueRange
from fingerloc.locate import UnlocatableError, bayes_estimate
from fingerloc.movement import MovementHmm, hmm_detect, train_emissions
from fingerloc.radiomap import HistogramMap, build_deterministic, build_histogram

# (mean, std) per station, per cell for calibration-side tables
StatsTable = dict[str, dict[str, tuple[float, float]]]
StationStats = dict[str, tuple[float, float]]

STILL_WINDOW_SECONDS = 20.0
MIN_SEGMENT_SECONDS = 10.0
MIN_SEGMENT_OBSERVATIONS = 5
AUTOCORR_BANDWIDTH = 0.05
VARIATION_BANDWIDTH = 1.0


@dataclass(frozen=True)
class LinearMapping:
    """Linear scale relation between client and calibration readings."""

    c1: float
    c2: float

    def __post_init__(self) -> None:
        if self.c1 <= 0:
            warnings.warn(f"fitted c1={self.c1} is not positive; the mapping "
                          "is not physically meaningful", stacklevel=3)

    def to_client(self, normalized: float) -> float:
        return self.c1 * normalized + self.c2

    def to_normalized(self, client_value: float) -> float:
        if self.c1 == 0:
            raise ZeroDivisionError("mapping with c1=0 cannot be inverted")
        return (client_value - self.c2) / self.c1


@dataclass(frozen=True)
class QualityVerdict:
    """Classifier output; labels use a 0.5 probability threshold."""

    caching_or_low_freq: float
    not_signal_strength: float

    @property
    def caching_label(self) -> bool:
        return self.caching_or_low_freq > 0.5

    @property
    def not_ss_label(self) -> bool:
        return self.not_signal_strength > 0.5


def autocorrelation(series: Sequence[float], lag: int) -> float:
    """Lag-k autocorrelation coefficient of a series.

    A constant series is defined to have coefficient 1.0: it is the limiting
    case of a fully cached signal and avoids a 0/0.
    """
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    n = len(series)
    if n <= lag:
        raise ValueError(f"series of length {n} too short for lag {lag}")
    x = np.asarray(series, dtype=float)
    centered = x - x.mean()
    denom = float((centered ** 2).sum())
    if denom == 0.0:
        return 1.0
    num = float((centered[:-lag] * centered[lag:]).sum())
    return num / denom


# -- naive Bayes quality classifiers ------------------------------------------

@dataclass(frozen=True)
class NaiveBayesModel:
    """Two-class (good/bad) naive Bayes with Gaussian-kernel likelihoods.

    ``kind`` names the feature extractor the model was trained for
    ("caching" or "notss").
    """

    good: tuple[tuple[float, ...], ...]
    bad: tuple[tuple[float, ...], ...]
    bandwidths: tuple[float, ...]
    kind: str = "caching"

    def __post_init__(self) -> None:
        if not self.good or not self.bad:
            raise ValueError("both classes need at least one training vector")

    def _log_likelihood(self, data: tuple[tuple[float, ...], ...],
                        features: Sequence[float]) -> float:
        total = 0.0
        for dim, (value, bw) in enumerate(zip(features, self.bandwidths)):
            pts = np.array([row[dim] for row in data])
            dens = float(np.exp(-0.5 * ((value - pts) / bw) ** 2).mean())
            total += math.log(max(dens, 1e-12))
        return total

    def bad_probability(self, features: Sequence[float]) -> float:
        """Posterior probability of the bad class, empirical class priors."""
        if len(features) != len(self.bandwidths):
            raise ValueError("feature dimension mismatch")
        n = len(self.good) + len(self.bad)
        log_good = self._log_likelihood(self.good, features) + math.log(len(self.good) / n)
        log_bad = self._log_likelihood(self.bad, features) + math.log(len(self.bad) / n)
        m = max(log_good, log_bad)
        pg, pb = math.exp(log_good - m), math.exp(log_bad - m)
        return pb / (pg + pb)


def save_nb_model(model: NaiveBayesModel, path: str) -> None:
    doc = {"kind": model.kind,
           "good": [list(r) for r in model.good],
           "bad": [list(r) for r in model.bad],
           "bandwidths": list(model.bandwidths)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_nb_model(path: str) -> NaiveBayesModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return NaiveBayesModel(tuple(tuple(r) for r in doc["good"]),
                           tuple(tuple(r) for r in doc["bad"]),
                           tuple(doc["bandwidths"]),
                           doc.get("kind", "caching"))


def _station_series(trace: Trace, min_length: int) -> dict[str, list[float]]:
    series: dict[str, list[float]] = {}
    for s in trace.samples:
        for st, v in s.rss.items():
            series.setdefault(st, []).append(float(v))
    return {st: vals for st, vals in series.items() if len(vals) >= min_length}


def caching_features(trace: Trace, lags: tuple[int, int] = (1, 2)) -> tuple[float, ...]:
    """Mean per-station autocorrelation at each lag; near 1 when caching."""
    if trace.duration() < 60.0:
        raise ValueError("caching classification needs at least 60 s of data")
    series = _station_series(trace, min_length=max(lags) + 2)
    if not series:
        raise ValueError("no station has enough measurements")
    return tuple(
        float(np.mean([autocorrelation(vals, lag) for vals in series.values()]))
        for lag in lags)


def not_ss_feature(trace: Trace) -> tuple[float]:
    """Mean across-station spread of same-sample readings.

    Values unrelated to signal strength tend to be equal for all base
    stations, collapsing this spread toward zero.
    """
    spreads = [float(np.std(list(s.rss.values())))
               for s in trace.samples if len(s.rss) >= 3]
    if not spreads:
        raise ValueError("no sample observes at least 3 stations")
    return (float(np.mean(spreads)),)


def train_caching_classifier(good_traces: Sequence[Trace],
                             bad_traces: Sequence[Trace]) -> NaiveBayesModel:
    return NaiveBayesModel(
        tuple(caching_features(t) for t in good_traces),
        tuple(caching_features(t) for t in bad_traces),
        (AUTOCORR_BANDWIDTH, AUTOCORR_BANDWIDTH), "caching")


def train_not_ss_classifier(good_traces: Sequence[Trace],
                            bad_traces: Sequence[Trace]) -> NaiveBayesModel:
    return NaiveBayesModel(
        tuple(not_ss_feature(t) for t in good_traces),
        tuple(not_ss_feature(t) for t in bad_traces),
        (VARIATION_BANDWIDTH,), "notss")


def classify_caching(trace: Trace, model: NaiveBayesModel) -> float:
    """Probability that the client caches or updates slowly."""
    if model.kind != "caching":
        raise ValueError(f"model is trained for {model.kind!r}, not caching")
    return model.bad_probability(caching_features(trace))


def classify_not_ss(trace: Trace, model: NaiveBayesModel) -> float:
    """Probability that reported values do not correspond to signal strength."""
    if model.kind != "notss":
        raise ValueError(f"model is trained for {model.kind!r}, not notss")
    return model.bad_probability(not_ss_feature(trace))


def classify_quality(trace: Trace, caching_model: NaiveBayesModel,
                     not_ss_model: NaiveBayesModel) -> QualityVerdict:
    """Full measurement-quality verdict from both trained classifiers."""
    return QualityVerdict(classify_caching(trace, caching_model),
                          classify_not_ss(trace, not_ss_model))


# -- still period analyzer -----------------------------------------------------

def _weighted_window_variance(samples: Sequence[Sample]) -> float | None:
    values: dict[str, list[float]] = {}
    for s in samples:
        for st, v in s.rss.items():
            values.setdefault(st, []).append(float(v))
    num = den = 0.0
    for vals in values.values():
        if len(vals) < 2:
            continue
        num += float(np.var(vals)) * len(vals)
        den += len(vals)
    if den == 0.0:
        return None
    return num / den


def analyzer_features(trace: Trace,
                      window_seconds: float = STILL_WINDOW_SECONDS,
                      ) -> list[tuple[float, float]]:
    """(timestamp, feature) series for the still-period analyzer.

    The feature is the per-station sample variance over a sliding window of
    ``window_seconds``, weighted by how often each station was seen in it.
    """
    if trace.duration() < window_seconds:
        raise ValueError(
            f"trace spans {trace.duration():.1f} s, need >= {window_seconds}")
    t0 = trace.samples[0].timestamp
    window: list[Sample] = []
    out: list[tuple[float, float]] = []
    for s in trace.samples:
        window.append(s)
        while window and window[0].timestamp < s.timestamp - window_seconds:
            window.pop(0)
        if s.timestamp - t0 < window_seconds:
            continue
        feature = _weighted_window_variance(window)
        if feature is not None:
            out.append((s.timestamp, feature))
    return out


def train_analyzer(traces: Sequence[Trace],
                   window_seconds: float = STILL_WINDOW_SECONDS,
                   transitions: tuple[float, float] = (0.05, 0.05),
                   bandwidths: tuple[float, float] = (2.0, 10.0),
                   grid_max: float = 400.0) -> MovementHmm:
    """Train the analyzer's still/moving model from motion-annotated traces.

    The 20-second windowed variance runs on a larger scale than the
    movement-detection feature, so the kernel bandwidths and grid span are
    wider than that module's defaults.  Transitions default to a balanced
    pair: segmentation wants prompt verdict flips, not scan suppression.
    """
    still_values: list[float] = []
    moving_values: list[float] = []
    for trace in traces:
        if not trace.motion_marks:
            raise ValueError("analyzer training traces need motion marks")
        for ts, feature in analyzer_features(trace, window_seconds):
            if trace.motion_at(ts) == "still":
                still_values.append(feature)
            else:
                moving_values.append(feature)
    still_e, moving_e = train_emissions(still_values, moving_values,
                                        bandwidths, grid_max=grid_max)
    return MovementHmm(still_e, moving_e, transitions[0], transitions[1])


def still_period_analyzer(trace: Trace, hmm: MovementHmm,
                          window_seconds: float = STILL_WINDOW_SECONDS,
                          min_segment: float = MIN_SEGMENT_SECONDS,
                          ) -> list[tuple[float, float]]:
    """Intervals classified still from windowed weighted rss variance.

    The windowed feature series is smoothed by the two-state HMM; contiguous
    still verdicts merge into segments.  Segments shorter than
    ``min_segment`` carry too few samples for stable statistics and are
    dropped.
    """
    history: list[float] = []
    verdicts: list[tuple[float, str]] = []
    for ts, feature in analyzer_features(trace, window_seconds):
        history.append(feature)
        if len(history) > hmm.history:
            del history[:len(history) - hmm.history]
        verdicts.append((ts, hmm_detect(hmm, history)))
    segments: list[tuple[float, float]] = []
    start = None
    last_ts = None
    for ts, verdict in verdicts:
        if verdict == "still":
            if start is None:
                start = ts
            last_ts = ts
        elif start is not None:
            segments.append((start, last_ts))
            start = None
    if start is not None:
        segments.append((start, last_ts))
    return [(a, b) for a, b in segments if b - a >= min_segment]


def stats_from_fingerprints(fps: Mapping[str, Fingerprint]) -> StatsTable:
    """Per (cell, station) mean/std table from fingerprints."""
    dmap = build_deterministic(fps)
    return {cell: {st: (s.mean, s.std) for st, s in entry.items()}
            for cell, entry in dmap.cells.items()}


def dequantized_std(std: float) -> float:
    """Sheppard's correction: back out the variance added by integer rounding."""
    return math.sqrt(max(std * std - 1.0 / 12.0, 0.0))


def segment_stats(trace: Trace, segments: Sequence[tuple[float, float]],
                  min_observations: int = MIN_SEGMENT_OBSERVATIONS,
                  edge_trim: float = 5.0,
                  ) -> list[tuple[tuple[float, float], StationStats, dict[str, int]]]:
    """Per-segment station statistics; under-observed stations are dropped.

    ``edge_trim`` seconds are cut from both segment ends: the analyzer flips
    verdicts with some lag, so segment edges can contain movement samples.
    Standard deviations carry Sheppard's correction so they scale linearly
    under a linear client mapping despite integer quantization.  Returns
    (interval, stats, observation counts) triples; segments left with no
    qualifying station are omitted entirely.
    """
    blocks: list[tuple[tuple[float, float], StationStats, dict[str, int]]] = []
    for a, b in segments:
        lo, hi = a + edge_trim, b - edge_trim
        if hi <= lo:
            lo, hi = a, b
        values: dict[str, list[float]] = {}
        for s in trace.samples:
            if lo <= s.timestamp <= hi:
                for st, v in s.rss.items():
                    values.setdefault(st, []).append(float(v))
        block = {st: (float(np.mean(vals)), dequantized_std(float(np.std(vals))))
                 for st, vals in values.items() if len(vals) >= min_observations}
        if block:
            counts = {st: len(values[st]) for st in block}
            blocks.append(((a, b), block, counts))
    return blocks


# -- least-squares normalization ----------------------------------------------

def _manual_rows(obs_stats: StatsTable, cal_stats: StatsTable,
                 ) -> tuple[np.ndarray, np.ndarray]:
    h_rows, y_rows = [], []
    for cell in sorted(obs_stats):
        if cell not in cal_stats:
            continue
        for st in sorted(obs_stats[cell]):
            if st not in cal_stats[cell]:
                continue
            mu_o, sigma_o = obs_stats[cell][st]
            mu_c, sigma_c = cal_stats[cell][st]
            h_rows.append([mu_c, 1.0])
            y_rows.append(mu_o)
            h_rows.append([sigma_c, 0.0])
            y_rows.append(sigma_o)
    return np.asarray(h_rows, dtype=float), np.asarray(y_rows, dtype=float)


def _solve(h: np.ndarray, y: np.ndarray) -> LinearMapping:
    solution, _, rank, _ = np.linalg.lstsq(h, y, rcond=None)
    if rank < 2:
        raise ValueError("normal equations are singular; the statistics do "
                         "not determine a unique mapping")
    return LinearMapping(float(solution[0]), float(solution[1]))


def fit_manual(obs_stats: StatsTable, cal_stats: StatsTable) -> LinearMapping:
    """Least-squares mapping from same-cell observed and calibration stats.

    One mean row (with intercept) and one std row (without) per common
    (cell, station) pair; at least two pairs are needed.
    """
    h, y = _manual_rows(obs_stats, cal_stats)
    if len(h) < 4:
        raise ValueError(f"need >= 2 (cell, station) pairs, got {len(h) // 2}")
    return _solve(h, y)


def mapping_residual(mapping: LinearMapping, obs_stats: StatsTable,
                     cal_stats: StatsTable) -> float:
    """Root-mean-square residual of the manual row system under a mapping."""
    h, y = _manual_rows(obs_stats, cal_stats)
    r = h @ np.array([mapping.c1, mapping.c2]) - y
    return float(np.sqrt(np.mean(r ** 2)))


def fit_weighted(obs_blocks: Sequence[StationStats], cal_stats: StatsTable,
                 weights: Sequence[Mapping[str, float]],
                 counts: Sequence[Mapping[str, int]] | None = None,
                 ) -> LinearMapping:
    """Weighted least squares for observation blocks at unknown locations.

    Every block is compared against every calibrated cell; the rows of block
    ``i`` against cell ``j`` enter with weight ``weights[i][j]``.  Weights
    must be non-negative and not all zero.

    With per-station observation ``counts``, rows are additionally scaled by
    their inverse estimated sampling variance, so stations with noisy block
    statistics do not drown out stable ones.
    """
    if len(obs_blocks) != len(weights):
        raise ValueError("one weight row per observation block required")
    h_rows, y_rows, w_rows = [], [], []
    for i, (block, wrow) in enumerate(zip(obs_blocks, weights)):
        for cell in sorted(cal_stats):
            w = wrow.get(cell, 0.0)
            if w < 0:
                raise ValueError(f"negative weight for cell {cell!r}")
            for st in sorted(block):
                if st not in cal_stats[cell]:
                    continue
                mu_o, sigma_o = block[st]
                mu_c, sigma_c = cal_stats[cell][st]
                if counts is None:
                    mu_scale = sigma_scale = 1.0
                else:
                    n = counts[i].get(st, 1)
                    var = max(sigma_o * sigma_o, 1.0 / 12.0)  # quantization floor
                    mu_scale = n / var
                    sigma_scale = 2.0 * n / var
                h_rows.append([mu_c, 1.0])
                y_rows.append(mu_o)
                w_rows.append(w * mu_scale)
                h_rows.append([sigma_c, 0.0])
                y_rows.append(sigma_o)
                w_rows.append(w * sigma_scale)
    if not h_rows or not any(w > 0 for w in w_rows):
        raise ValueError("weighted system is empty or has all-zero weights")
    h = np.asarray(h_rows, dtype=float)
    y = np.asarray(y_rows, dtype=float)
    sq = np.sqrt(np.asarray(w_rows, dtype=float))
    return _solve(h * sq[:, None], y * sq)


def _gauss_bin_masses(mu: float, sigma: float, rng: ValueRange) -> np.ndarray:
    values = np.arange(rng.v_min, rng.v_max + 1, dtype=float)
    if sigma == 0.0:
        masses = np.zeros(len(values))
        masses[int(rng.clamp(mu)) - rng.v_min] = 1.0
        return masses
    z_hi = (values + 0.5 - mu) / (sigma * math.sqrt(2))
    z_lo = (values - 0.5 - mu) / (sigma * math.sqrt(2))
    return 0.5 * (np.vectorize(math.erf)(z_hi) - np.vectorize(math.erf)(z_lo))


def overlap_weight(obs_stat: StationStats, cal_stat: StationStats,
                   rng: ValueRange) -> float:
    """Distribution overlap between observed and calibration statistics.

    Per common station, readings are modeled as Gaussians discretized to the
    value range; the weight is the mean over stations of the summed
    minimum bin masses, in [0, 1].
    """
    common = sorted(set(obs_stat) & set(cal_stat))
    if not common:
        return 0.0
    total = 0.0
    for st in common:
        o = _gauss_bin_masses(*obs_stat[st], rng)
        c = _gauss_bin_masses(*cal_stat[st], rng)
        total += float(np.minimum(o, c).sum())
    return total / len(common)


def bayes_weights(trace: Trace, segments: Sequence[tuple[float, float]],
                  hist_map: HistogramMap) -> list[dict[str, float]]:
    """Per-segment localization posteriors used as block weights.

    Each segment's samples are run through sequential Bayesian estimation,
    the final posterior becoming the segment's cell weights.
    """
    out = []
    for a, b in segments:
        prior: dict[str, float] | None = None
        for s in trace.samples:
            if not a <= s.timestamp <= b:
                continue
            try:
                prior = dict(bayes_estimate(hist_map, s, prior).per_cell_scores)
            except UnlocatableError:
                continue
        if prior is None:
            prior = {cell: 1.0 / len(hist_map.cells) for cell in hist_map.cells}
        out.append(prior)
    return out


def _harden(weights: list[dict[str, float]]) -> list[dict[str, float]]:
    out = []
    for row in weights:
        best = min(row, key=lambda cell: (-row[cell], cell))
        out.append({cell: (1.0 if cell == best else 0.0) for cell in row})
    return out


def normalize_automatic(trace: Trace, cal_fps: Mapping[str, Fingerprint],
                        hmm: MovementHmm, rng: ValueRange,
                        weight_mode: str = "overlap",
                        min_trace_seconds: float = 300.0,
                        allow_short: bool = False) -> LinearMapping:
    """Fit a mapping from an unlabeled trace using still-period analysis.

    Still segments become observation blocks at unknown locations and are
    fitted against all calibrated cells with overlap (or localization
    posterior) weights.  The ``-hard`` weight modes keep only each block's
    best-scoring cell; soft weights leave enough mass on wrong cells to bias
    the fit badly when the client scale is far from the calibration scale.
    When the analyzer finds no usable segment the whole trace forms a single
    block.
    """
    if trace.duration() < min_trace_seconds and not allow_short:
        raise ValueError(
            f"trace spans {trace.duration():.1f} s; need >= {min_trace_seconds} "
            "(pass allow_short to override)")
    try:
        segments = still_period_analyzer(trace, hmm)
    except ValueError:
        segments = []
    triples = segment_stats(trace, segments)
    if not triples:
        whole = (trace.samples[0].timestamp, trace.samples[-1].timestamp)
        triples = segment_stats(trace, [whole], min_observations=2)
    if not triples:
        raise ValueError("trace has no station with enough observations")
    intervals = [iv for iv, _, _ in triples]
    blocks = [block for _, block, _ in triples]
    counts = [n for _, _, n in triples]
    cal_stats = {cell: {st: (mu, dequantized_std(sd))
                        for st, (mu, sd) in entry.items()}
                 for cell, entry in stats_from_fingerprints(cal_fps).items()}
    base_mode, _, hard = weight_mode.partition("-")
    if base_mode == "overlap":
        weights = [{cell: overlap_weight(block, cal_stats[cell], rng)
                    for cell in cal_stats} for block in blocks]
    elif base_mode == "bayes":
        if not isinstance(cal_fps, FingerprintMap):
            cal_fps = FingerprintMap(cal_fps, rng)
        hist = build_histogram(cal_fps)
        weights = bayes_weights(trace, intervals, hist)
    else:
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    if hard:
        if hard != "hard":
            raise ValueError(f"unknown weight mode {weight_mode!r}")
        weights = _harden(weights)
    elif all(w == 0.0 for row in weights for w in row.values()):
        # nothing overlaps at all; fall back to an uninformative fit
        weights = [{cell: 1.0 for cell in row} for row in weights]
    return fit_weighted(blocks, cal_stats, weights, counts)


def apply_mapping(mapping: LinearMapping, sample: Sample,
                  rng: ValueRange) -> Sample:
    """Normalize a client sample onto the calibration scale."""
    return Sample(sample.timestamp,
                  {st: rng.clamp(mapping.to_normalized(v))
                   for st, v in sample.rss.items()})


def apply_mapping_trace(mapping: LinearMapping, trace: Trace) -> Trace:
    return Trace(tuple(apply_mapping(mapping, s, trace.value_range)
                       for s in trace.samples),
                 trace.ground_truth, trace.motion_marks, trace.value_range)
