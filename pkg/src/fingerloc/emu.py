"""Emulation support: frame metrics, synthetic worlds, and cross-validation.

Frame granularity is one sample, so 1 Hz and 0.5 Hz traces are handled
uniformly.  All generators are seeded (numpy PCG64); rerunning with the same
seed reproduces identical traces and therefore identical downstream CSV.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from fingerloc.adapt import LinearMapping
from fingerloc.core import Sample, Trace, ValueRange


@dataclass(frozen=True)
class ConfusionCounts:
    """Frame-level confusion counts for a binary detector."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @staticmethod
    def from_pairs(pairs: Iterable[tuple[bool, bool]]) -> "ConfusionCounts":
        """Counts from (predicted, truth) pairs, positive meaning True."""
        tp = fp = tn = fn = 0
        for predicted, truth in pairs:
            if truth:
                tp += predicted
                fn += not predicted
            else:
                fp += predicted
                tn += not predicted
        return ConfusionCounts(tp, fp, tn, fn)


def sensitivity(c: ConfusionCounts) -> float | None:
    """TP / (TP + FN) in percent; None when undefined."""
    denom = c.tp + c.fn
    return 100.0 * c.tp / denom if denom else None


def specificity(c: ConfusionCounts) -> float | None:
    """TN / (TN + FP) in percent; None when undefined."""
    denom = c.tn + c.fp
    return 100.0 * c.tn / denom if denom else None


def correlation_coefficient(c: ConfusionCounts) -> float | None:
    """Global accuracy combining sensitivity and specificity, in [-1, 1]."""
    denom = (c.tp + c.fp) * (c.tn + c.fn) * (c.tp + c.fn) * (c.tn + c.fp)
    if denom == 0:
        return None
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def tp_rate(c: ConfusionCounts) -> float | None:
    return sensitivity(c)


def fp_rate(c: ConfusionCounts) -> float | None:
    denom = c.fp + c.tn
    return 100.0 * c.fp / denom if denom else None


def roc_points(runs: Iterable[tuple[str, Iterable[tuple[bool, bool]]]],
               ) -> list[tuple[str, float, float]]:
    """Per parameter setting, the (fp%, tp%) operating point.

    ``runs`` yields (label, (predicted_moving, truly_moving) pairs); moving
    is the positive class.
    """
    out = []
    for label, pairs in runs:
        counts = ConfusionCounts.from_pairs(pairs)
        fp = fp_rate(counts)
        tp = tp_rate(counts)
        if fp is None or tp is None:
            raise ValueError(f"run {label!r} lacks positive or negative frames")
        out.append((label, fp, tp))
    return out


# -- synthetic worlds ----------------------------------------------------------

@dataclass(frozen=True)
class ClientModel:
    """Simulated client behavior applied on top of true signal strength."""

    mapping: LinearMapping = LinearMapping(1.0, 0.0)
    noise_std: float = 0.0
    cache_factor: int = 1    # a reading is refreshed every this many samples
    not_ss: bool = False     # report a shared non-signal value for all stations


@dataclass(frozen=True)
class ScriptStep:
    """One motion-script entry: dwell in a cell or walk toward it."""

    cell: str
    seconds: float
    mode: str = "still"  # "still" dwells; "move" walks from the previous cell

    def __post_init__(self) -> None:
        if self.mode not in ("still", "move"):
            raise ValueError(f"mode {self.mode!r} not still|move")


@dataclass(frozen=True)
class SynthWorld:
    """Cell layout with per-station truth, a client model, and a motion script."""

    cells: dict[str, dict[str, tuple[float, float]]]
    script: tuple[ScriptStep, ...]
    client: ClientModel = ClientModel()
    value_range: ValueRange = field(default_factory=ValueRange)
    sample_period: float = 1.0

    def __post_init__(self) -> None:
        if not self.script:
            raise ValueError("script is empty")
        if self.script[0].mode != "still":
            raise ValueError("script must start with a still step")
        for step in self.script:
            if step.cell not in self.cells:
                raise ValueError(f"script cell {step.cell!r} not in world")


def _step_means(world: SynthWorld, prev_cell: str, step: ScriptStep,
                progress: float) -> dict[str, tuple[float, float]]:
    if step.mode == "still":
        return world.cells[step.cell]
    floor = float(world.value_range.v_min)
    src = world.cells[prev_cell]
    dst = world.cells[step.cell]
    out: dict[str, tuple[float, float]] = {}
    for st in sorted(set(src) | set(dst)):
        m1, s1 = src.get(st, (floor, 0.0))
        m2, s2 = dst.get(st, (floor, 0.0))
        out[st] = ((1 - progress) * m1 + progress * m2, max(s1, s2))
    return out


def synth_trace(world: SynthWorld, seed: int) -> Trace:
    """Generate a fully annotated trace; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    client = world.client
    samples: list[Sample] = []
    truth_marks: list[tuple[float, str]] = []
    motion_marks: list[tuple[float, str]] = []
    cache: dict[str, float] = {}
    ages: dict[str, int] = {}
    shared_value: float | None = None
    shared_age = 0
    t = 0.0
    prev_cell = world.script[0].cell
    for step in world.script:
        n = max(1, round(step.seconds / world.sample_period))
        for i in range(n):
            progress = (i + 0.5) / n
            truth = step.cell if step.mode == "still" or progress >= 0.5 else prev_cell
            if not truth_marks or truth_marks[-1][1] != truth:
                truth_marks.append((t, truth))
            mode = "still" if step.mode == "still" else "moving"
            if not motion_marks or motion_marks[-1][1] != mode:
                motion_marks.append((t, mode))
            means = _step_means(world, prev_cell, step, progress)
            if client.not_ss:
                if shared_value is None or shared_age % client.cache_factor == 0:
                    shared_value = 50.0 + rng.normal(0.0, 0.5)
                shared_age += 1
                rss = {st: world.value_range.clamp(shared_value) for st in means}
            else:
                rss = {}
                for st in sorted(means):
                    age = ages.get(st, 0)
                    if st not in cache or age % client.cache_factor == 0:
                        mean, std = means[st]
                        true_value = mean + (rng.normal(0.0, std) if std else 0.0)
                        reported = client.mapping.to_client(true_value)
                        if client.noise_std:
                            reported += rng.normal(0.0, client.noise_std)
                        cache[st] = reported
                    ages[st] = age + 1
                    rss[st] = world.value_range.clamp(cache[st])
            samples.append(Sample(t, rss))
            t += world.sample_period
        if step.mode == "move":
            cache.clear()  # walking invalidates held readings at arrival
        prev_cell = step.cell
    return Trace(tuple(samples), tuple(truth_marks), tuple(motion_marks),
                 world.value_range)


def load_world(path: str) -> SynthWorld:
    """Load a synthetic-world description from JSON."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    cells = {cell: {st: (float(ms[0]), float(ms[1]))
                    for st, ms in stations.items()}
             for cell, stations in doc["cells"].items()}
    script = tuple(ScriptStep(s["cell"], float(s["seconds"]),
                              s.get("mode", "still"))
                   for s in doc["script"])
    cdoc = doc.get("client", {})
    client = ClientModel(
        mapping=LinearMapping(float(cdoc.get("c1", 1.0)), float(cdoc.get("c2", 0.0))),
        noise_std=float(cdoc.get("noise_std", 0.0)),
        cache_factor=int(cdoc.get("cache_factor", 1)),
        not_ss=bool(cdoc.get("not_ss", False)))
    rdoc = doc.get("range", [1, 100])
    return SynthWorld(cells, script, client,
                      ValueRange(int(rdoc[0]), int(rdoc[1])),
                      float(doc.get("sample_period", 1.0)))


# -- cross-validation -----------------------------------------------------------

@dataclass(frozen=True)
class CrossvalResult:
    per_fold: tuple[ConfusionCounts, ...]
    aggregate: ConfusionCounts


def crossval(folds: Sequence, train_fn: Callable, eval_fn: Callable,
             ) -> CrossvalResult:
    """Leave-one-fold-out evaluation.

    ``train_fn`` receives the concatenated training folds, ``eval_fn`` the
    trained model and the held-out fold, returning :class:`ConfusionCounts`.
    The aggregate sums counts over folds, i.e. a frame-weighted mean.
    """
    if len(folds) < 2:
        raise ValueError(f"need at least 2 folds, got {len(folds)}")
    for i, fold in enumerate(folds):
        if not fold:
            raise ValueError(f"fold {i} is empty")
    per_fold = []
    for i in range(len(folds)):
        train = [item for j, fold in enumerate(folds) if j != i for item in fold]
        model = train_fn(train)
        per_fold.append(eval_fn(model, folds[i]))
    aggregate = ConfusionCounts()
    for c in per_fold:
        aggregate = aggregate + c
    return CrossvalResult(tuple(per_fold), aggregate)
