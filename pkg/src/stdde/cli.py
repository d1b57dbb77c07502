"""Command-line entry point.

Subcommands: train, predict, estimate-delays, stability-check,
generate-synthetic, evaluate.  Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical divergence.  Horizon offsets are given in minutes
and converted to grid units internally, so a model trained at one sampling
interval can be queried at any finer one.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as dataio
from .delays import (
    DEFAULT_PEAK_WINDOWS,
    estimate_all_delays,
    load_delays_csv,
    save_delays_csv,
    zero_delay_table,
)
from .errors import DivergenceError, InputError
from .model import forecast
from .stability import build_envelope, check_stability, format_report
from .training import (
    TrainConfig,
    load_checkpoint,
    metrics,
    save_checkpoint,
    save_history_csv,
    train,
)

__all__ = ["main", "parse", "run"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _minutes_of_day(text: str) -> float:
    hh, mm = text.split(":")
    return float(hh) * 60.0 + float(mm)


def _parse_peak_windows(text: str):
    out = []
    for chunk in text.split(","):
        lo, hi = chunk.split("-")
        out.append((_minutes_of_day(lo), _minutes_of_day(hi)))
    return tuple(out)


def _parse_edges(text: str):
    """`src-dst:lag:gain` triples, comma separated."""
    edges = []
    for chunk in text.split(","):
        link, lag, gain = chunk.split(":")
        src, dst = link.split("-")
        edges.append((int(src), int(dst), int(lag), float(gain)))
    return edges


def parse(argv) -> argparse.Namespace:
    parser = _Parser(prog="stdde", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", parents=[], help="fit a model and save a checkpoint")
    p.add_argument("--flows", required=True, help="flow CSV (time,node,... header)")
    p.add_argument("--adj", required=True, help="adjacency CSV (src,dst,weight)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--eta", type=float, default=0.25)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--t-in", type=int, default=12)
    p.add_argument("--t-out", type=int, default=12)
    p.add_argument("--max-shift", type=int, default=None,
                   help="MCC search range for the delay init (default t_in)")
    p.add_argument("--delay-lr-multiplier", type=float, default=1.0)
    p.add_argument("--enforce-stability", action="store_true")
    p.add_argument("--fixed-delays", action="store_true",
                   help="keep delays at their initial values")
    p.add_argument("--zero-delays", action="store_true",
                   help="start from zero delays instead of MCC estimates")
    p.add_argument("--delays", default=None, help="delay CSV to initialize from")
    p.add_argument("--history-csv", default=None)
    p.add_argument("--peak", default=None, help="peak windows, e.g. 07:00-09:00,17:00-19:00")
    add_common(p)

    p = sub.add_parser("predict", help="forecast at arbitrary horizon offsets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--flows", required=True)
    p.add_argument("--at", required=True,
                   help="comma-separated horizon offsets in minutes")
    p.add_argument("--out", default=None, help="output CSV (default stdout)")
    add_common(p)

    p = sub.add_parser("estimate-delays", help="MCC delay estimation per edge")
    p.add_argument("--flows", required=True)
    p.add_argument("--adj", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-shift", type=int, default=12)
    p.add_argument("--full-series", action="store_true",
                   help="estimate on the whole series (default: training split)")
    p.add_argument("--peak", default=None)
    add_common(p)

    p = sub.add_parser("stability-check", help="certify the delay envelope")
    p.add_argument("--adj", required=True)
    p.add_argument("--c", type=float, required=True)
    p.add_argument("--p", default="inf", choices=["1", "2", "inf"])
    p.add_argument("--delays", default=None)
    p.add_argument("--regime", default="offpeak", choices=["offpeak", "peak"])
    p.add_argument("--json", action="store_true", help="key=value output")

    p = sub.add_parser("generate-synthetic", help="planted-lag synthetic dataset")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--edges", required=True,
                   help="src-dst:lag:gain list, e.g. 0-1:5:0.8,1-2:3:0.5")
    p.add_argument("--length", type=int, default=400)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--interval", type=float, default=5.0)
    p.add_argument("--start-tod", default=None, help="HH:MM anchor (optional)")
    p.add_argument("--out-flows", required=True)
    p.add_argument("--out-adj", required=True)
    p.add_argument("--out-delays", required=True)
    add_common(p)

    p = sub.add_parser("evaluate", help="MAE/RMSE/MAPE of a prediction CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)

    return parser.parse_args(argv)


def _require_files(*paths):
    for path in paths:
        if path is not None and not os.path.exists(path):
            raise InputError(f"input file not found: {path}")


def _cmd_train(args) -> int:
    _require_files(args.flows, args.adj, args.delays)
    series = dataio.load_flows_csv(args.flows)
    graph = dataio.load_adjacency_csv(args.adj, node_count=series.num_nodes)
    train_s, val_s, _ = dataio.split_dataset(series)
    peak = _parse_peak_windows(args.peak) if args.peak else DEFAULT_PEAK_WINDOWS

    if args.delays:
        table = load_delays_csv(args.delays, graph, peak_windows=peak,
                                tau_max=float(args.t_in))
    elif args.zero_delays:
        table = zero_delay_table(graph, float(args.t_in), peak_windows=peak)
    else:
        shift = args.max_shift if args.max_shift is not None else args.t_in
        table = estimate_all_delays(train_s, graph, shift, peak_windows=peak,
                                    tau_max=float(args.t_in))
    config = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        delta=args.delta, eta=args.eta, enforce_stability=args.enforce_stability,
        seed=args.seed, hidden_dim=args.hidden_dim, t_in=args.t_in,
        t_out=args.t_out, learnable_delays=not args.fixed_delays,
        delay_lr_multiplier=args.delay_lr_multiplier,
    )
    params, history = train(train_s, val_s, graph, config)
    from .training import standardize

    _, stats = standardize(train_s.values)
    save_checkpoint(args.out, params, graph, stats,
                    config={"t_in": args.t_in, "t_out": args.t_out,
                            "eta": args.eta, "seed": args.seed,
                            "interval_minutes": series.interval_minutes})
    if args.history_csv:
        save_history_csv(history, args.history_csv)
    last = history[-1]
    print(f"trained {args.epochs} epochs; final train_loss={last.train_loss:.6f} "
          f"val_mae={last.val_mae:.6f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_predict(args) -> int:
    _require_files(args.checkpoint, args.flows)
    params, graph, stats, config = load_checkpoint(args.checkpoint)
    series = dataio.load_flows_csv(args.flows)
    if series.num_nodes != graph.node_count:
        raise InputError(
            f"flows have {series.num_nodes} nodes, model expects {graph.node_count}"
        )
    t_in = int(config.get("t_in", 12))
    if series.length < t_in:
        raise InputError(f"need at least {t_in} frames, got {series.length}")
    window = series.slice(series.length - t_in, series.length)
    minutes = np.array([float(tok) for tok in args.at.split(",")])
    offsets = minutes / series.interval_minutes
    fc = forecast(params, graph, window, offsets,
                  eta=float(config.get("eta", 0.25)), stats=stats)
    lines = ["time," + ",".join(series.node_ids)]
    for m, row in zip(minutes, fc.values[:, :, 0]):
        lines.append(f"{m:g}," + ",".join(repr(float(v)) for v in row))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_estimate_delays(args) -> int:
    _require_files(args.flows, args.adj)
    series = dataio.load_flows_csv(args.flows)
    graph = dataio.load_adjacency_csv(args.adj, node_count=series.num_nodes)
    if not args.full_series:
        series, _, _ = dataio.split_dataset(series)
    peak = _parse_peak_windows(args.peak) if args.peak else DEFAULT_PEAK_WINDOWS
    table = estimate_all_delays(series, graph, args.max_shift, peak_windows=peak)
    save_delays_csv(table, graph, args.out)
    flagged = int(table.degenerate.sum()) if table.degenerate is not None else 0
    print(f"estimated delays for {graph.edge_count} edges "
          f"({flagged} degenerate) -> {args.out}")
    return 0


def _cmd_stability(args) -> int:
    _require_files(args.adj, args.delays)
    graph = dataio.load_adjacency_csv(args.adj)
    if args.delays:
        table = load_delays_csv(args.delays, graph)
    else:
        table = zero_delay_table(graph, tau_max=12.0)
    env = build_envelope(graph, args.c, table, regime=args.regime)
    p = {"1": 1, "2": 2, "inf": np.inf}[args.p]
    report = check_stability(env, p)
    print(format_report(report, as_kv=args.json))
    return 0


def _cmd_generate(args) -> int:
    start = _minutes_of_day(args.start_tod) if args.start_tod else None
    spec = dataio.SyntheticSpec(
        node_count=args.nodes,
        edges=_parse_edges(args.edges),
        noise_std=args.noise_std,
        length=args.length,
        interval_minutes=args.interval,
        start_minute_of_day=start,
    )
    series, graph, truth = dataio.generate_synthetic(spec, seed=args.seed)
    dataio.save_flows_csv(series, args.out_flows)
    dataio.save_adjacency_csv([(s, d, g) for s, d, _, g in spec.edges], args.out_adj)
    save_delays_csv(truth, graph, args.out_delays)
    print(f"wrote {series.length}x{series.num_nodes} flows to {args.out_flows}")
    return 0


def _cmd_evaluate(args) -> int:
    _require_files(args.pred, args.truth)
    pred = dataio.load_flows_csv(args.pred)
    truth = dataio.load_flows_csv(args.truth)
    if pred.values.shape != truth.values.shape:
        raise InputError(
            f"shape mismatch: pred {pred.values.shape}, truth {truth.values.shape}"
        )
    mae, rmse, mape = metrics(pred.values, truth.values)
    print(f"MAE={mae:.6f}")
    print(f"RMSE={rmse:.6f}")
    print(f"MAPE={'nan' if mape != mape else f'{mape:.6f}'}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "predict": _cmd_predict,
    "estimate-delays": _cmd_estimate_delays,
    "stability-check": _cmd_stability,
    "generate-synthetic": _cmd_generate,
    "evaluate": _cmd_evaluate,
}


def run(config: argparse.Namespace) -> int:
    return _COMMANDS[config.command](config)


def main(argv=None) -> int:
    try:
        config = parse(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:     # --help and friends
        return int(exc.code or 0)
    try:
        return run(config)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
