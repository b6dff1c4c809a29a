"""gflsim command line: generate | train | sweep | report.

Exit codes: 0 success, 1 runtime or data error, 2 config or usage error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import PARSERS, ConfigError, RunConfig, default_config, load_config
from .fedruntime import RoundError, TransportError, run_training
from .fedruntime.wire import write_checkpoint
from .graphgen import GraphFileError, InfeasibleSplitError, load_graph_files, sample_data, write_task_files
from .labkit.experiments import data_rng, layout_diagnostics, repeat_experiment
from .labkit.history import ExperimentSummary, fmt_float, read_summary, write_metrics

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

SWEEP_KEYS = {
    "I": "train.I",
    "d": "task.d",
    "sigma": "dp.sigma",
    "eta": "train.eta",
    "T": "train.T",
    "alpha": "model.alpha",
}
REPORT_COLUMNS = ("source", "variable", "value", "connectivity_index", "phi", "seeds", "mean", "half_width")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    changes = {}
    if args.seed_count is not None:
        if args.seed_count < 1:
            raise UsageError("--seed-count must be >= 1")
        first = cfg.seeds[0]
        changes["train__seeds"] = tuple(range(first, first + args.seed_count))
    if args.out:
        changes["io__out_dir"] = args.out
    if args.data:
        changes["io__data_dir"] = args.data
    return cfg.with_values(**changes) if changes else cfg


def _echo(cfg: RunConfig, args) -> None:
    print("# resolved config")
    for line in cfg.lines():
        print(line)
    print(f"# threads = {args.threads}")
    print(f"# transport = {args.transport}")
    sys.stdout.flush()


def _load_data(cfg: RunConfig):
    d = Path(cfg["io.data_dir"])
    for name in ("edges.txt", "features.csv", "labels.csv"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"{d / name}: no such file")
    rows = d / "rows.csv"
    return load_graph_files(d / "edges.txt", d / "features.csv", d / "labels.csv", rows if rows.is_file() else None)


def cmd_generate(cfg: RunConfig, args) -> int:
    task = cfg.task_spec()
    layout = task.layout()
    seed = cfg.seeds[0]
    data = sample_data(layout, data_rng(seed), task.noise)
    out = Path(cfg["io.out_dir"])
    paths = write_task_files(out, layout.graph, data)
    diag = layout_diagnostics(layout)
    for name, p in paths.items():
        print(f"wrote {name}: {p}")
    print(f"clients = {data.n_clients}, rows per client = {task.per_client}, labeled = {int(data.labeled.sum())}")
    print(f"phi = {diag['phi']:.4f}")
    print(f"connectivity_index = {diag['connectivity_index']:.6g}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    seed = cfg.seeds[0]
    tcfg = cfg.training(seed=seed, threads=args.threads, transport=args.transport)
    if cfg["io.data_dir"]:
        graph, data = _load_data(cfg)
        diag = {}
    else:
        task = cfg.task_spec()
        layout = task.layout()
        graph, data = layout.graph, sample_data(layout, data_rng(seed), task.noise)
        diag = layout_diagnostics(layout)
    hist = run_training(tcfg, graph, data)
    out = Path(cfg["io.out_dir"])
    write_metrics(hist, out / "history.csv", comments={"seed": seed, **diag})
    print(f"wrote {out / 'history.csv'} ({len(hist.records)} records)")
    if isinstance(hist.best_params, dict):
        print("local MLPs keep one model per client; no checkpoint written")
    else:
        write_checkpoint(out / "model.ckpt", hist.best_params, len(hist.records))
        print(f"wrote {out / 'model.ckpt'} (best update {hist.best_update})")
    print(f"test_acc = {fmt_float(hist.test_acc)}")
    return EXIT_OK


def _value_text(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def cmd_sweep(cfg: RunConfig, args) -> int:
    key = SWEEP_KEYS[args.variable]
    try:
        values = [PARSERS[key](v.strip()) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad sweep value for {args.variable}: {exc}") from None
    if not values:
        raise UsageError("sweep needs at least one value")
    out = Path(cfg["io.out_dir"])
    loaded = _load_data(cfg) if cfg["io.data_dir"] else None
    for v in values:
        changes = {key.replace(".", "__"): v}
        if key == "dp.sigma" and cfg["dp.target"] == "none":
            changes["dp__target"] = "h_and_grad"
        run = cfg.with_values(**changes)
        tcfg = run.training(threads=args.threads, transport=args.transport)
        if loaded is None:
            summary = repeat_experiment(run.task_spec(), tcfg, list(run.seeds))
        else:
            graph, data = loaded
            accs = [run_training(tcfg.replace(seed=s), graph, data).test_acc for s in run.seeds]
            summary = ExperimentSummary(list(run.seeds), accs, tcfg.echo())
        path = out / f"summary_{args.variable}_{_value_text(v)}.csv"
        write_metrics(summary, path, comments={"variable": args.variable, "value": _value_text(v)})
        hw = fmt_float(summary.half_width) if len(summary.seeds) > 1 else "nan"
        print(f"{args.variable} = {_value_text(v)}: mean {summary.mean:.4f} half_width {hw} -> {path}")
        sys.stdout.flush()
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for p in args.paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"{p}: no such file")
        summary, comments = read_summary(p)
        rows.append(
            {
                "source": str(p),
                "variable": comments.get("variable", ""),
                "value": comments.get("value", ""),
                "connectivity_index": comments.get("connectivity_index", ""),
                "phi": comments.get("phi", ""),
                "seeds": len(summary.seeds),
                "mean": fmt_float(summary.mean),
                "half_width": comments.get("half_width", "nan"),
            }
        )
    out = Path(args.out) if args.out else Path("report.csv")
    if out.is_dir() or (args.out and args.out.endswith("/")):
        out = out / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(",".join(str(r[c]) for c in REPORT_COLUMNS))
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (section.key = value lines)")
    common.add_argument("--out", help="output directory (overrides io.out_dir)")
    common.add_argument("--seed-count", type=int, help="use this many consecutive seeds from the first configured seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    common.add_argument("--transport", choices=("inproc", "socket"), default="inproc")
    common.add_argument("--data", help="directory with edges.txt, features.csv, labels.csv[, rows.csv]")

    ap = argparse.ArgumentParser(prog="gflsim", description="Graph federated learning simulator")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic task to disk")
    sub.add_parser("train", parents=[common], help="train one seed; write history.csv and model.ckpt")
    sw = sub.add_parser("sweep", parents=[common], help="repeat over seeds for each value of one variable")
    sw.add_argument("variable", choices=sorted(SWEEP_KEYS))
    sw.add_argument("values", help="comma-separated values, e.g. 1,10,20,50")
    rp = sub.add_parser("report", help="merge summary CSVs into one table")
    rp.add_argument("paths", nargs="+")
    rp.add_argument("--out", help="output CSV path or directory (default report.csv)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = _config(args)
        _echo(cfg, args)
        if args.command == "generate":
            return cmd_generate(cfg, args)
        if args.command == "train":
            return cmd_train(cfg, args)
        return cmd_sweep(cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"gflsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, GraphFileError, InfeasibleSplitError, RoundError, TransportError, ValueError, RuntimeError) as exc:
        print(f"gflsim: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
