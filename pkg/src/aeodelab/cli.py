"""Command-line entry point: run experiment configs, compare traces, list kinds."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import KINDS, ConfigError, degenerate_spikes, example_configs, load_config, validate
from .spectra import DatasetError
from .traces import Trace, TraceFormatError, compare_traces

EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


def resolve_threads(flag: int | None) -> int:
    """--threads, else AEODELAB_THREADS, else 1."""
    if flag is not None:
        if flag < 1:
            raise ConfigError("--threads: must be positive")
        return flag
    env = os.environ.get("AEODELAB_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"AEODELAB_THREADS: expected an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("AEODELAB_THREADS: must be positive")
        return n
    return 1


def _cmd_run(args) -> int:
    from .experiments import format_summary, run_experiment, write_artifacts

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.experiment.seed = args.seed
    if args.out is not None:
        cfg.output.directory = args.out
    validate(cfg)
    threads = resolve_threads(args.threads)
    if cfg.kind in ("truncated_vs_vanilla", "online_pca_bench") and degenerate_spikes(cfg):
        print("warning: equal spike strengths; individual eigenvectors are not identifiable", file=sys.stderr)
    result = run_experiment(cfg, threads)
    out = write_artifacts(result, cfg.output.directory)
    sys.stdout.write(format_summary(result.summary))
    print(f"wrote {out / 'run.csv'}, {out / 'summary.txt'}, {out / 'plot.svg'}")
    return 0


def _column_pairs(a: Trace, b: Trace, specs: list[str] | None, same_file: bool) -> list[tuple[str, str]]:
    if specs:
        pairs = []
        for spec in specs:
            left, _, right = spec.partition(":")
            pairs.append((left, right or left))
    elif same_file:
        raise ConfigError("--columns: required when comparing columns of a single trace")
    else:
        pairs = [(c, c) for c in a.columns if c != "s" and "stderr" not in c and c in b.columns]
        if not pairs:
            raise TraceFormatError("the traces share no columns besides s")
    for left, right in pairs:
        if left not in a.columns:
            raise TraceFormatError(f"column {left!r} missing from the first trace")
        if right not in b.columns:
            raise TraceFormatError(f"column {right!r} missing from the second trace")
    return pairs


def _cmd_compare(args) -> int:
    a = Trace.from_csv(args.a)
    b = Trace.from_csv(args.b) if args.b else a
    pairs = _column_pairs(a, b, args.columns, args.b is None)
    ok = True
    pointwise = Trace()
    lines = []
    for left, right in pairs:
        s, dev = compare_traces(a, b, left, s_min=args.s_min, column_b=right)
        if dev.size == 0:
            raise TraceFormatError(f"no overlapping times for {left}")
        worst = float(np.nanmax(dev))
        passed = worst <= args.tolerance
        ok &= passed
        name = left if left == right else f"{left}:{right}"
        lines.append(f"{name}: max_rel_dev={worst:.6g} mean_rel_dev={float(np.nanmean(dev)):.6g} {'pass' if passed else 'FAIL'}")
        for i, (t, v) in enumerate(zip(s, dev)):
            if i >= len(pointwise.rows):
                pointwise.append({"s": float(t)})
            pointwise.rows[i][f"rel_dev_{name}"] = float(v)
    print("\n".join(lines))
    print(f"tolerance {args.tolerance:g}: {'pass' if ok else 'FAIL'}")
    if args.out:
        pointwise.to_csv(args.out)
    return 0 if ok else EXIT_FAIL


def _cmd_list_kinds(args) -> int:
    shipped = example_configs()
    for k in KINDS:
        print(f"{k}\t{shipped[k]}" if k in shipped else k)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aeodelab", description="Autoencoder learning-dynamics experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("--config", required=True, metavar="PATH", help="INI experiment config")
    r.add_argument("--seed", type=int, help="override experiment.seed")
    r.add_argument("--out", metavar="DIR", help="override output.directory")
    r.add_argument("--threads", type=int, help="worker threads for independent runs (default: AEODELAB_THREADS or 1)")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="relative deviation between trace columns")
    c.add_argument("a", metavar="A.csv")
    c.add_argument("b", metavar="B.csv", nargs="?", help="second trace (default: compare columns within A)")
    c.add_argument("--columns", nargs="+", metavar="COL[:COL_B]", help="columns to compare (default: all shared)")
    c.add_argument("--tolerance", type=float, default=0.05)
    c.add_argument("--s-min", type=float, default=0.0, help="ignore times below this")
    c.add_argument("--out", metavar="PATH", help="write pointwise deviations as CSV")
    c.set_defaults(func=_cmd_compare)

    lk = sub.add_parser("list-kinds", help="list experiment kinds and shipped example configs")
    lk.set_defaults(func=_cmd_list_kinds)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceFormatError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
