"""Position estimators over radio maps.

Deterministic nearest neighbor and probabilistic Bayesian inference, in both
their absolute-value and signal-strength-ratio (hyperbolic) forms, plus the
K-strongest sensitivity filter.  All estimators are pure functions over
immutable maps; ties are broken by lexicographic cell id so repeated runs are
reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from fingerloc.core import Sample, ValueRange
from fingerloc.radiomap import (
    LIKELIHOOD_FLOOR,
    DeterministicMap,
    HistogramMap,
    RatioHistogramMap,
    RatioVectorMap,
    sample_ratios,
)


class UnlocatableError(ValueError):
    """Raised when a sample shares no usable observations with any cell."""


@dataclass(frozen=True)
class CellEstimate:
    """Chosen cell with its score and the full per-cell score table.

    ``score`` is a distance for deterministic estimators (lower is better)
    and a posterior probability for probabilistic ones (scores sum to 1).
    """

    cell: str
    score: float
    per_cell_scores: Mapping[str, float]


def _argmin(scores: dict[str, float]) -> str:
    return min(scores, key=lambda c: (scores[c], c))


def _argmax(scores: dict[str, float]) -> str:
    return min(scores, key=lambda c: (-scores[c], c))


def nn_estimate(radio_map: DeterministicMap, sample: Sample) -> CellEstimate:
    """Nearest neighbor in Euclidean rss space over common stations."""
    scores: dict[str, float] = {}
    for cell, entry in radio_map.cells.items():
        common = [st for st in sample.rss if st in entry]
        if not common:
            continue
        scores[cell] = math.sqrt(
            sum((sample.rss[st] - entry[st].mean) ** 2 for st in common))
    if not scores:
        raise UnlocatableError("sample shares no station with any cell")
    best = _argmin(scores)
    return CellEstimate(best, scores[best], scores)


def _posterior(log_likelihoods: dict[str, float],
               prior: Mapping[str, float] | None) -> CellEstimate:
    # log-space normalization keeps many-observation products from
    # underflowing to an all-zero posterior
    cells = sorted(log_likelihoods)
    if prior is None:
        prior = {c: 1.0 / len(cells) for c in cells}
    else:
        total_prior = sum(prior.get(c, 0.0) for c in cells)
        if not math.isclose(total_prior, 1.0, abs_tol=1e-6):
            raise ValueError(f"prior sums to {total_prior}, expected 1")
    scores = {}
    for c in cells:
        p = prior.get(c, 0.0)
        if p > 0:
            scores[c] = log_likelihoods[c] + math.log(p)
    if not scores:
        raise UnlocatableError("all posterior mass is zero")
    peak = max(scores.values())
    weighted = {c: math.exp(s - peak) for c, s in scores.items()}
    total = sum(weighted.values())
    posterior = {c: weighted.get(c, 0.0) / total for c in cells}
    best = _argmax(posterior)
    return CellEstimate(best, posterior[best], posterior)


def bayes_estimate(radio_map: HistogramMap, sample: Sample,
                   prior: Mapping[str, float] | None = None,
                   floor: float = LIKELIHOOD_FLOOR) -> CellEstimate:
    """Posterior over cells from per-station histogram likelihoods.

    Stations absent from a cell's map are skipped for that cell; histogram
    lookups are floored at ``floor`` so one unseen value cannot zero a cell.
    """
    log_likelihoods: dict[str, float] = {}
    any_common = False
    for cell, entry in radio_map.cells.items():
        log_lik = 0.0
        common = False
        for station, value in sample.rss.items():
            if station in entry:
                common = True
                log_lik += math.log(radio_map.prob(cell, station, value, floor))
        log_likelihoods[cell] = log_lik
        any_common = any_common or common
    if not any_common:
        raise UnlocatableError("sample shares no station with any cell")
    return _posterior(log_likelihoods, prior)


def hlf_nn_estimate(radio_map: RatioVectorMap, sample: Sample,
                    rng: ValueRange) -> CellEstimate:
    """Nearest neighbor in signal-strength-ratio space.

    Distances are computed over the station pairs present both in the sample
    and in a cell's ratio map; pairs unknown to a cell are skipped.
    """
    ratios = sample_ratios(sample, rng)
    if not ratios:
        raise UnlocatableError("ratio estimation requires at least 2 stations")
    scores: dict[str, float] = {}
    for cell, entry in radio_map.cells.items():
        common = [p for p in ratios if p in entry]
        if not common:
            continue
        scores[cell] = math.sqrt(
            sum((ratios[p] - entry[p]) ** 2 for p in common))
    if not scores:
        raise UnlocatableError("sample shares no station pair with any cell")
    best = _argmin(scores)
    return CellEstimate(best, scores[best], scores)


def hlf_bayes_estimate(radio_map: RatioHistogramMap, sample: Sample,
                       rng: ValueRange,
                       prior: Mapping[str, float] | None = None,
                       floor: float = LIKELIHOOD_FLOOR) -> CellEstimate:
    """Posterior over cells from pair-ratio histogram likelihoods."""
    ratios = sample_ratios(sample, rng)
    if not ratios:
        raise UnlocatableError("ratio estimation requires at least 2 stations")
    log_likelihoods: dict[str, float] = {}
    any_common = False
    for cell, entry in radio_map.cells.items():
        log_lik = 0.0
        common = False
        for pair, ratio in ratios.items():
            if pair in entry:
                common = True
                log_lik += math.log(radio_map.prob(cell, pair, ratio, floor))
        log_likelihoods[cell] = log_lik
        any_common = any_common or common
    if not any_common:
        raise UnlocatableError("sample shares no station pair with any cell")
    return _posterior(log_likelihoods, prior)


def k_strongest_filter(sample: Sample, k: int) -> Sample:
    """Keep the k strongest observations, matching a less sensitive client.

    Ties at the cutoff are broken by lexicographic station id; the timestamp
    is preserved.  Idempotent for fixed k.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(sample.rss) <= k:
        return sample
    ranked = sorted(sample.rss, key=lambda st: (-sample.rss[st], st))
    keep = ranked[:k]
    return Sample(sample.timestamp, {st: sample.rss[st] for st in sorted(keep)})
