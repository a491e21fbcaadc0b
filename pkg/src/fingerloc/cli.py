"""Command-line harness: replay traces, fit mappings, emulate protocols.

All commands write CSV to stdout (or ``--out``) and are deterministic for a
fixed ``--seed``.  Exit codes: 0 success, 1 usage error, 2 invariant or
format violation in the inputs.
"""

from __future__ import annotations

import argparse
import sys
from typing import Callable, Sequence

from fingerloc import adapt, emu, locate, movement, proximity, radiomap, zone
from fingerloc.core import (
    InvariantViolation,
    ParseError,
    Trace,
    load_fingerprints,
    load_trace,
    save_trace,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}")


def _fmt(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _emit(rows: list[list], header: list[str], out_path: str | None) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _print(text: str, out_path: str | None) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load_traces(spec: str) -> list[Trace]:
    return [load_trace(p) for p in spec.split(",") if p]


# -- locate ---------------------------------------------------------------------

_MAP_TYPES = {
    "nn": radiomap.DeterministicMap,
    "bayes": radiomap.HistogramMap,
    "hlf-nn": radiomap.RatioVectorMap,
    "hlf-bayes": radiomap.RatioHistogramMap,
}


def _cmd_locate(args) -> int:
    trace = load_trace(args.trace)
    rng = trace.value_range
    if args.map:
        radio_map = radiomap.load_map(args.map)
        if not isinstance(radio_map, _MAP_TYPES[args.method]):
            raise ValueError(f"map file holds a {type(radio_map).__name__}, "
                             f"which method {args.method!r} cannot use")
        rng = getattr(radio_map, "value_range", rng)
    elif args.fps:
        fps = load_fingerprints(args.fps)
        rng = fps.value_range
        builders = {
            "nn": radiomap.build_deterministic,
            "bayes": radiomap.build_histogram,
            "hlf-nn": lambda f: radiomap.build_ratio_vector(f, rng),
            "hlf-bayes": lambda f: radiomap.build_ratio_histogram(f, rng, args.step),
        }
        radio_map = builders[args.method](fps)
    else:
        raise ValueError("locate needs --map or --fps")
    estimators: dict[str, Callable] = {
        "nn": lambda s: locate.nn_estimate(radio_map, s),
        "bayes": lambda s: locate.bayes_estimate(radio_map, s),
        "hlf-nn": lambda s: locate.hlf_nn_estimate(radio_map, s, rng),
        "hlf-bayes": lambda s: locate.hlf_bayes_estimate(radio_map, s, rng),
    }
    estimate = estimators[args.method]
    rows = []
    for sample in trace.samples:
        if args.k:
            sample = locate.k_strongest_filter(sample, args.k)
        truth = trace.truth_at(sample.timestamp) or ""
        try:
            est = estimate(sample)
            rows.append([sample.timestamp, truth, est.cell, est.score])
        except locate.UnlocatableError:
            rows.append([sample.timestamp, truth, "", ""])
    _emit(rows, ["timestamp", "true_cell", "estimated_cell", "score"], args.out)
    return 0


# -- adapt ----------------------------------------------------------------------

def _cmd_adapt_fit(args) -> int:
    if args.mode in ("manual", "quasi") and not args.obs:
        raise ValueError(f"{args.mode} mode needs --obs")
    if args.mode == "auto" and not (args.trace and args.hmm):
        raise ValueError("auto mode needs --trace and --hmm")
    cal = load_fingerprints(args.cal)
    cal_stats = adapt.stats_from_fingerprints(cal)
    if args.mode == "manual":
        obs = load_fingerprints(args.obs)
        mapping = adapt.fit_manual(adapt.stats_from_fingerprints(obs), cal_stats)
        residual = adapt.mapping_residual(
            mapping, adapt.stats_from_fingerprints(obs), cal_stats)
    elif args.mode == "quasi":
        obs = load_fingerprints(args.obs)
        blocks = [{st: (s.mean, s.std) for st, s in entry.items()}
                  for _, entry in sorted(
                      radiomap.build_deterministic(obs).cells.items())]
        weights = [{cell: adapt.overlap_weight(block, cal_stats[cell],
                                               cal.value_range)
                    for cell in cal_stats} for block in blocks]
        mapping = adapt.fit_weighted(blocks, cal_stats, weights)
        residual = float("nan")
    else:
        trace = load_trace(args.trace)
        hmm = movement.load_hmm(args.hmm)
        mapping = adapt.normalize_automatic(
            trace, cal, hmm, cal.value_range, weight_mode=args.weights,
            allow_short=args.allow_short)
        residual = float("nan")
    _print(f"{mapping.c1:.6f} {mapping.c2:.6f} {_fmt(residual)}\n", args.out)
    return 0


def _cmd_adapt_train(args) -> int:
    good = _load_traces(args.good)
    bad = _load_traces(args.bad)
    if args.kind == "caching":
        model = adapt.train_caching_classifier(good, bad)
    else:
        model = adapt.train_not_ss_classifier(good, bad)
    adapt.save_nb_model(model, args.out)
    return 0


def _cmd_adapt_classify(args) -> int:
    trace = load_trace(args.trace)
    model = adapt.load_nb_model(args.model)
    if model.kind == "caching":
        prob = adapt.classify_caching(trace, model)
    else:
        prob = adapt.classify_not_ss(trace, model)
    label = "bad" if prob > 0.5 else "good"
    _print(f"{model.kind} {prob:.6f} {label}\n", args.out)
    return 0


# -- zone -----------------------------------------------------------------------

def _cmd_zone_emulate(args) -> int:
    if not args.zone and not args.graph:
        raise ValueError("zone emulate needs --zone (fixed) or --graph (tracking)")
    trace = load_trace(args.trace)
    fps = load_fingerprints(args.fps)
    markov = (args.markov, 1.0 - args.markov)
    if args.zone:
        cells = args.zone.split(",")
        log = zone.zone_accuracy_run(fps, trace, cells, args.detector, markov,
                                     args.samples_per_step)
    else:
        graph = proximity.load_building_graph(args.graph)
        log = zone.zone_protocol_run(
            fps, trace, lambda cell: proximity.wds(graph, cell, args.radius),
            args.detector, markov)
    c = log.confusion
    _emit([[args.detector, emu.sensitivity(c), emu.specificity(c),
            emu.correlation_coefficient(c), log.updates, log.configs,
            log.baseline]],
          ["detector", "sn", "sp", "cc", "updates", "configs", "baseline"],
          args.out)
    return 0


# -- prox -----------------------------------------------------------------------

def _cmd_prox_emulate(args) -> int:
    graph = proximity.load_building_graph(args.graph)
    targets = _load_traces(args.traces)
    if args.mode == "buddy":
        log = proximity.buddy_service(graph, targets, args.p, args.b)
    else:
        threshold = args.p if args.mode == "proximity" else args.s
        log = proximity.dcc_monitor(graph, targets, args.mode, threshold, args.b)
    rows = [[ts, kind, "|".join(str(i) for i in pair)]
            for ts, kind, pair in log.events]
    rows.append(["summary", f"updates={log.updates};polls={log.polls};"
                 f"configs={log.configs}", f"baseline={log.baseline}"])
    _emit(rows, ["timestamp", "event", "pair"], args.out)
    return 0


# -- move -----------------------------------------------------------------------

def _movement_features(trace: Trace, window_size: int, k: int,
                       ) -> list[tuple[float, float, str | None]]:
    window = movement.FeatureWindow(window_size)
    out = []
    for sample in trace.samples:
        window.push(sample)
        if not window.full or not window.eligible_stations():
            continue
        out.append((sample.timestamp, movement.variance_feature(window, k),
                    trace.motion_at(sample.timestamp)))
    return out


def _cmd_move_train(args) -> int:
    still_values: list[float] = []
    moving_values: list[float] = []
    for trace in _load_traces(args.traces):
        if not trace.motion_marks:
            raise InvariantViolation("training traces need @motion marks")
        for _, feature, label in _movement_features(trace, args.window, args.k):
            (still_values if label == "still" else moving_values).append(feature)
    still_e, moving_e = movement.train_emissions(still_values, moving_values)
    p_ms, p_sm = movement.PRESETS[args.preset]
    hmm = movement.MovementHmm(still_e, moving_e, p_ms, p_sm, args.history)
    movement.save_hmm(hmm, args.out)
    return 0


def _cmd_move_detect(args) -> int:
    trace = load_trace(args.trace)
    hmm = movement.load_hmm(args.model)
    if args.preset:
        hmm = hmm.with_preset(args.preset)
    window = movement.FeatureWindow(args.window)
    state = movement.ScanState()
    rows = []
    for sample in trace.samples:
        window.push(sample)
        state, mode = movement.composcan_step(state, hmm, window, args.k)
        rows.append([sample.timestamp, state.last_verdict or "", mode])
    _emit(rows, ["timestamp", "verdict", "mode"], args.out)
    return 0


# -- synth / crossval -------------------------------------------------------------

def _cmd_synth(args) -> int:
    world = emu.load_world(args.world)
    trace = emu.synth_trace(world, args.seed)
    if args.out:
        save_trace(trace, args.out)
    else:
        from fingerloc.core import dump_trace
        sys.stdout.write(dump_trace(trace))
    return 0


def _crossval_move(traces: list[Trace], window: int, k: int,
                   preset: str) -> emu.CrossvalResult:
    folds = [[t] for t in traces]

    def train(train_traces):
        still, moving = [], []
        for t in train_traces:
            for _, f, label in _movement_features(t, window, k):
                (still if label == "still" else moving).append(f)
        se, me = movement.train_emissions(still, moving)
        p_ms, p_sm = movement.PRESETS[preset]
        return movement.MovementHmm(se, me, p_ms, p_sm)

    def evaluate(hmm, fold):
        pairs = []
        for t in fold:
            history: list[float] = []
            for _, feature, label in _movement_features(t, window, k):
                history.append(feature)
                history = history[-hmm.history:]
                verdict = movement.hmm_detect(hmm, history)
                pairs.append((verdict == "moving", label == "moving"))
        return emu.ConfusionCounts.from_pairs(pairs)

    return emu.crossval(folds, train, evaluate)


def _crossval_classify(kind: str, good: list[Trace], bad: list[Trace],
                       n_folds: int) -> emu.CrossvalResult:
    folds = [[] for _ in range(n_folds)]
    for i, t in enumerate(good):
        folds[i % n_folds].append(("good", t))
    for i, t in enumerate(bad):
        folds[i % n_folds].append(("bad", t))

    def train(items):
        g = [t for label, t in items if label == "good"]
        b = [t for label, t in items if label == "bad"]
        if kind == "caching":
            return adapt.train_caching_classifier(g, b)
        return adapt.train_not_ss_classifier(g, b)

    def evaluate(model, fold):
        classify = (adapt.classify_caching if kind == "caching"
                    else adapt.classify_not_ss)
        return emu.ConfusionCounts.from_pairs(
            (classify(t, model) > 0.5, label == "bad") for label, t in fold)

    return emu.crossval(folds, train, evaluate)


def _cmd_crossval(args) -> int:
    if args.task == "move":
        if not args.traces:
            raise ValueError("task 'move' needs --traces")
        result = _crossval_move(_load_traces(args.traces), args.window,
                                args.k, args.preset)
    else:
        if not (args.good and args.bad):
            raise ValueError(f"task {args.task!r} needs --good and --bad")
        result = _crossval_classify(args.task, _load_traces(args.good),
                                    _load_traces(args.bad), args.folds)
    rows = []
    for i, c in enumerate(result.per_fold):
        rows.append([f"fold{i}", c.tp, c.fp, c.tn, c.fn,
                     emu.tp_rate(c), emu.fp_rate(c)])
    agg = result.aggregate
    rows.append(["aggregate", agg.tp, agg.fp, agg.tn, agg.fn,
                 emu.tp_rate(agg), emu.fp_rate(agg)])
    _emit(rows, ["fold", "tp", "fp", "tn", "fn", "tp_rate", "fp_rate"], args.out)
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fingerloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("locate", help="replay a trace through an estimator")
    p.add_argument("--trace", required=True)
    p.add_argument("--map")
    p.add_argument("--fps")
    p.add_argument("--method", required=True,
                   choices=["nn", "bayes", "hlf-nn", "hlf-bayes"])
    p.add_argument("--k", type=int, default=0,
                   help="keep only the k strongest observations")
    p.add_argument("--step", type=float, default=radiomap.DEFAULT_RATIO_STEP)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_locate)

    adapt_p = sub.add_parser("adapt", help="client quality and normalization")
    adapt_sub = adapt_p.add_subparsers(dest="subcommand", required=True)
    p = adapt_sub.add_parser("fit")
    p.add_argument("--mode", required=True, choices=["manual", "quasi", "auto"])
    p.add_argument("--cal", required=True, help="calibration fingerprint file")
    p.add_argument("--obs", help="observed fingerprint file (manual/quasi)")
    p.add_argument("--trace", help="unlabeled client trace (auto)")
    p.add_argument("--hmm", help="movement model for the still analyzer (auto)")
    p.add_argument("--weights", default="overlap", choices=["overlap", "bayes"])
    p.add_argument("--allow-short", action="store_true")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_adapt_fit)
    p = adapt_sub.add_parser("train")
    p.add_argument("--kind", required=True, choices=["caching", "notss"])
    p.add_argument("--good", required=True, help="comma-separated trace files")
    p.add_argument("--bad", required=True, help="comma-separated trace files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_adapt_train)
    p = adapt_sub.add_parser("classify")
    p.add_argument("--trace", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_adapt_classify)

    zone_p = sub.add_parser("zone", help="zone-based reporting emulation")
    zone_sub = zone_p.add_subparsers(dest="subcommand", required=True)
    p = zone_sub.add_parser("emulate")
    p.add_argument("--detector", required=True,
                   choices=list(zone.DETECTOR_KINDS))
    p.add_argument("--trace", required=True)
    p.add_argument("--fps", required=True)
    p.add_argument("--zone", help="comma-separated cell ids (fixed zone)")
    p.add_argument("--graph", help="building model file (tracking mode)")
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--markov", type=float, default=zone.DEFAULT_MARKOV[0])
    p.add_argument("--samples-per-step", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_zone_emulate)

    prox_p = sub.add_parser("prox", help="proximity/separation emulation")
    prox_sub = prox_p.add_subparsers(dest="subcommand", required=True)
    p = prox_sub.add_parser("emulate")
    p.add_argument("--graph", required=True)
    p.add_argument("--traces", required=True, help="comma-separated trace files")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--s", type=float, default=0.0, help="d_s (separation mode)")
    p.add_argument("--mode", default="buddy",
                   choices=["buddy", "proximity", "separation"])
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_prox_emulate)

    move_p = sub.add_parser("move", help="movement detection")
    move_sub = move_p.add_subparsers(dest="subcommand", required=True)
    p = move_sub.add_parser("train")
    p.add_argument("--traces", required=True, help="comma-separated, "
                   "motion-annotated trace files")
    p.add_argument("--window", type=int, default=movement.DEFAULT_WINDOW)
    p.add_argument("--history", type=int, default=movement.DEFAULT_HISTORY)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--preset", default="comm-friendly",
                   choices=list(movement.PRESETS))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_move_train)
    p = move_sub.add_parser("detect")
    p.add_argument("--trace", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--preset", choices=list(movement.PRESETS))
    p.add_argument("--window", type=int, default=movement.DEFAULT_WINDOW)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_move_detect)

    p = sub.add_parser("synth", help="generate a synthetic trace")
    p.add_argument("--world", required=True, help="world description (JSON)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("crossval", help="leave-one-fold-out evaluation")
    p.add_argument("--task", required=True, choices=["move", "caching", "notss"])
    p.add_argument("--traces", help="comma-separated trace files (move)")
    p.add_argument("--good", help="comma-separated trace files (classifiers)")
    p.add_argument("--bad", help="comma-separated trace files (classifiers)")
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--window", type=int, default=movement.DEFAULT_WINDOW)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--preset", default="comm-friendly",
                   choices=list(movement.PRESETS))
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_crossval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 1
        return exc.code or 0
    try:
        return args.fn(args)
    except (ParseError, InvariantViolation, locate.UnlocatableError) as exc:
        print(f"fingerloc: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"fingerloc: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
