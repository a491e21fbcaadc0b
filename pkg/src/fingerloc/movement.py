"""Movement detection from signal-strength dynamics.

A sliding window of samples feeds a windowed feature (signal-strength
variance averaged over access points, or Euclidean-distance features) into a
two-state still/moving hidden Markov model decoded with Viterbi.  The
detector drives a scan-mode state machine that switches between invasive
active scanning (while moving) and light-weight monitor sniffing (while
still).
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fingerloc.core import Sample

STILL = "still"
MOVING = "moving"

DEFAULT_WINDOW = 10
DEFAULT_HISTORY = 10
DEFAULT_BANDWIDTHS = (0.1, 1.5)  # (still, moving) kernel widths
GRID_MAX = 50.0
GRID_STEP = 0.1
EMISSION_FLOOR = 1e-9

# Named transition presets: (p_move_to_still, p_still_to_move).  The first
# favors still detection (stable communication), the second favors movement
# detection (position accuracy).
PRESETS = {
    "comm-friendly": (0.011, 0.0011),
    "position-friendly": (0.00011, 0.5),
}


class FeatureWindow:
    """Ring of the last ``size`` samples with per-station eligibility.

    A station is eligible for feature computation only when present in at
    least ``ceil(0.8 * size)`` of the window's entries.
    """

    def __init__(self, size: int = DEFAULT_WINDOW):
        if size < 2:
            raise ValueError(f"window size must be >= 2, got {size}")
        self.size = size
        self._samples: deque[Sample] = deque(maxlen=size)

    def push(self, sample: Sample) -> None:
        self._samples.append(sample)

    def __len__(self) -> int:
        return len(self._samples)

    @property
    def full(self) -> bool:
        return len(self._samples) == self.size

    @property
    def samples(self) -> tuple[Sample, ...]:
        return tuple(self._samples)

    def eligible_stations(self) -> list[str]:
        threshold = math.ceil(0.8 * self.size)
        counts: dict[str, int] = {}
        for s in self._samples:
            for st in s.rss:
                counts[st] = counts.get(st, 0) + 1
        return sorted(st for st, c in counts.items() if c >= threshold)

    def station_series(self, station: str) -> list[float]:
        return [s.rss[station] for s in self._samples if station in s.rss]


def variance_feature(window: FeatureWindow, k: int = 1) -> float:
    """Mean signal-strength variance over the k most-seen eligible stations.

    ``k`` is capped at the number of eligible stations; when fewer stations
    are eligible all of them are used.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    eligible = window.eligible_stations()
    if not eligible:
        raise ValueError("no station is eligible in the window")
    by_presence = sorted(eligible,
                         key=lambda st: (-len(window.station_series(st)), st))
    chosen = by_presence[:min(k, len(by_presence))]
    variances = []
    for st in chosen:
        series = np.asarray(window.station_series(st), dtype=float)
        variances.append(float(series.var()))
    return float(np.mean(variances))


def _euclid(a: Sample, b: Sample) -> float | None:
    common = a.stations & b.stations
    if not common:
        return None
    return math.sqrt(sum((a.rss[st] - b.rss[st]) ** 2 for st in common))


def euclid_gap_feature(window: FeatureWindow) -> float:
    """Euclidean rss distance between the window's first and last sample."""
    samples = window.samples
    if len(samples) < 2:
        raise ValueError("gap feature needs at least 2 window entries")
    d = _euclid(samples[0], samples[-1])
    if d is None:
        raise ValueError("first and last sample share no station")
    return d


def euclid_avg_feature(window: FeatureWindow) -> float:
    """Mean Euclidean rss distance over consecutive sample pairs."""
    samples = window.samples
    if len(samples) < 2:
        raise ValueError("average feature needs at least 2 window entries")
    distances = [d for d in (_euclid(a, b) for a, b in zip(samples, samples[1:]))
                 if d is not None]
    if not distances:
        raise ValueError("no consecutive pair shares a station")
    return float(np.mean(distances))


@dataclass(frozen=True)
class EmissionGrid:
    """Discretized emission distribution over feature values.

    ``probs[i]`` is the mass of the bin ``[i*step, (i+1)*step)``; lookups
    clamp to the grid edges and are floored to keep Viterbi defined
    off-support.
    """

    probs: tuple[float, ...]
    step: float = GRID_STEP

    def log_prob(self, value: float) -> float:
        idx = int(value // self.step)
        idx = max(0, min(len(self.probs) - 1, idx))
        return math.log(max(self.probs[idx], EMISSION_FLOOR))


@dataclass(frozen=True)
class MovementHmm:
    """Two-state still/moving HMM over a windowed feature."""

    still_emissions: EmissionGrid
    moving_emissions: EmissionGrid
    p_move_to_still: float = PRESETS["comm-friendly"][0]
    p_still_to_move: float = PRESETS["comm-friendly"][1]
    history: int = DEFAULT_HISTORY

    def __post_init__(self) -> None:
        for name, p in (("p_move_to_still", self.p_move_to_still),
                        ("p_still_to_move", self.p_still_to_move)):
            if not 0.0 < p < 1.0:
                raise ValueError(f"{name} must be in (0,1), got {p}")

    def with_transitions(self, p_move_to_still: float,
                         p_still_to_move: float) -> "MovementHmm":
        return MovementHmm(self.still_emissions, self.moving_emissions,
                           p_move_to_still, p_still_to_move, self.history)

    def with_preset(self, name: str) -> "MovementHmm":
        return self.with_transitions(*PRESETS[name])


def train_emissions(still_values: Sequence[float],
                    moving_values: Sequence[float],
                    bandwidths: tuple[float, float] = DEFAULT_BANDWIDTHS,
                    grid_max: float = GRID_MAX,
                    grid_step: float = GRID_STEP) -> tuple[EmissionGrid, EmissionGrid]:
    """Gaussian-kernel emission distributions on a fixed feature grid."""
    grids = []
    for values, bw in zip((still_values, moving_values), bandwidths):
        if len(values) == 0:
            raise ValueError("each state needs at least one training value")
        centers = np.arange(grid_step / 2, grid_max, grid_step)
        data = np.asarray(values, dtype=float)[:, None]
        density = np.exp(-0.5 * ((centers[None, :] - data) / bw) ** 2).mean(axis=0)
        mass = density * grid_step
        total = mass.sum()
        if total <= 0:
            raise ValueError("training values produce no mass on the grid")
        grids.append(EmissionGrid(tuple(mass / total), grid_step))
    return grids[0], grids[1]


def hmm_detect(hmm: MovementHmm, features: Sequence[float]) -> str:
    """Most likely current state via Viterbi over the feature history.

    Initial state probabilities are equal; the verdict is the final state of
    the best path, preferring ``still`` on exact ties.
    """
    if len(features) == 0:
        raise ValueError("feature history is empty")
    feats = list(features)[-hmm.history:]
    log_ss = math.log(1.0 - hmm.p_still_to_move)
    log_sm = math.log(hmm.p_still_to_move)
    log_ms = math.log(hmm.p_move_to_still)
    log_mm = math.log(1.0 - hmm.p_move_to_still)
    d_still = math.log(0.5) + hmm.still_emissions.log_prob(feats[0])
    d_moving = math.log(0.5) + hmm.moving_emissions.log_prob(feats[0])
    for f in feats[1:]:
        e_s = hmm.still_emissions.log_prob(f)
        e_m = hmm.moving_emissions.log_prob(f)
        d_still, d_moving = (
            max(d_still + log_ss, d_moving + log_ms) + e_s,
            max(d_still + log_sm, d_moving + log_mm) + e_m,
        )
    return STILL if d_still >= d_moving else MOVING


ACTIVE_SCANNING = "active_scanning"
MONITOR_SNIFFING = "monitor_sniffing"


@dataclass
class ScanState:
    """Scan-mode state machine driven by the movement detector."""

    mode: str = ACTIVE_SCANNING
    last_verdict: str | None = None
    feature_history: list[float] = field(default_factory=list)


def composcan_step(state: ScanState, hmm: MovementHmm, window: FeatureWindow,
                   k: int = 1) -> tuple[ScanState, str]:
    """Advance the scan-mode machine for one measurement step.

    Without a full window of samples no verdict can be computed and an
    active scan is requested (startup rule).  Otherwise the window feature is
    appended to the history and the HMM verdict selects the mode: moving
    keeps active scanning, still switches to monitor sniffing.
    """
    if not window.full or not window.eligible_stations():
        state.mode = ACTIVE_SCANNING
        return state, ACTIVE_SCANNING
    state.feature_history.append(variance_feature(window, k))
    if len(state.feature_history) > hmm.history:
        del state.feature_history[:len(state.feature_history) - hmm.history]
    verdict = hmm_detect(hmm, state.feature_history)
    state.last_verdict = verdict
    state.mode = MONITOR_SNIFFING if verdict == STILL else ACTIVE_SCANNING
    return state, state.mode


# -- model files ---------------------------------------------------------------

def save_hmm(hmm: MovementHmm, path: str) -> None:
    doc = {
        "grid_step": hmm.still_emissions.step,
        "p_move_to_still": hmm.p_move_to_still,
        "p_still_to_move": hmm.p_still_to_move,
        "history": hmm.history,
        "still": list(hmm.still_emissions.probs),
        "moving": list(hmm.moving_emissions.probs),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_hmm(path: str) -> MovementHmm:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    step = float(doc["grid_step"])
    return MovementHmm(
        EmissionGrid(tuple(doc["still"]), step),
        EmissionGrid(tuple(doc["moving"]), step),
        float(doc["p_move_to_still"]),
        float(doc["p_still_to_move"]),
        int(doc["history"]),
    )
