"""Command-line entry point: ``ocnopt train|verify|bench|plot|gen-data``.

Exit codes: 0 success, 1 usage or input error, 2 verification failure,
3 training divergence.
"""
import argparse
import csv
import json
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .config import TrainConfig
from .data import SYNTHETIC, make_synthetic, write_csv
from .errors import DivergedError, OcnoptError
from .train import TrainRun

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(path, overrides):
    cfg = TrainConfig.from_json(path)
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_train(args):
    cfg = _load_config(args.config, args.set)
    if args.resume:
        run = TrainRun.from_checkpoint(args.resume, args.out, cfg)
    else:
        run = TrainRun(cfg, args.out)
    summary = run.run(args.epochs)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_verify(args):
    from .verify import format_table, radicand_sign_error, run_claims

    if args.mutate == "radicand-sign":
        with radicand_sign_error():
            results = run_claims(args.level, only=args.only)
    else:
        results = run_claims(args.level, only=args.only)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} claims passed")
    return EXIT_VERIFY if failed or not results else EXIT_OK


def cmd_bench(args):
    cfg = _load_config(args.config, args.set)
    t0 = time.perf_counter()
    run = TrainRun(cfg, args.out)
    t1 = time.perf_counter()
    summary = run.run(args.epochs)
    t2 = time.perf_counter()
    steps = max(run.step, 1)
    summary.update(setup_s=round(t1 - t0, 4), train_s=round(t2 - t1, 4),
                   ms_per_step=round(1e3 * (t2 - t1) / steps, 4))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def summarize_metrics(path):
    """Per-column summary statistics of a metrics CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {"rows": len(rows), "columns": {}}
    if not rows:
        return out
    for col in rows[0]:
        vals = [float(r[col]) for r in rows if r[col] not in ("", None)]
        if not vals:
            continue
        a = np.asarray(vals)
        fin = a[np.isfinite(a)]
        ends = [float(v) if np.isfinite(v) else None for v in (a[0], a[-1])]
        stats = {"count": int(a.size), "first": ends[0], "last": ends[1]}
        if fin.size:
            stats.update(min=float(fin.min()), max=float(fin.max()), mean=float(fin.mean()))
        stats["non_finite"] = int(a.size - fin.size)
        out["columns"][col] = stats
    return out


def cmd_plot(args):
    print(json.dumps(summarize_metrics(args.metrics), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gen_data(args):
    ds = make_synthetic(args.kind, args.n, args.noise, args.seed)
    write_csv(args.out, ds.X, ds.y, args.label_column)
    print(f"wrote {len(ds.y)} rows x {ds.in_dim} features to {args.out}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="ocnopt", description="Layer-wise optimal-control network optimizer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key, e.g. curvature.kind=kfac")
    t.add_argument("--out", help="output directory for metrics, manifest and checkpoints")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="total epochs (default: train.epochs)")
    t.set_defaults(fn=cmd_train)

    v = sub.add_parser("verify", help="check factorization and equivalence claims")
    v.add_argument("--level", choices=("fast", "full"), default="fast")
    v.add_argument("--only", help="run only claims whose name contains this text")
    v.add_argument("--mutate", choices=("radicand-sign",),
                   help="inject a known bug; the affected claims must fail")
    v.set_defaults(fn=cmd_verify)

    b = sub.add_parser("bench", help="time a training run")
    b.add_argument("config")
    b.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    b.add_argument("--out")
    b.add_argument("--epochs", type=int)
    b.set_defaults(fn=cmd_bench)

    pl = sub.add_parser("plot", help="summary statistics of a metrics CSV as JSON")
    pl.add_argument("metrics")
    pl.set_defaults(fn=cmd_plot)

    g = sub.add_parser("gen-data", help="write a generated dataset to CSV")
    g.add_argument("kind", choices=SYNTHETIC)
    g.add_argument("out")
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--label-column", default="label")
    g.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    threads = int(os.environ.get("OCNOPT_THREADS", "1") or 1)
    try:
        with threadpool_limits(limits=max(threads, 1)):
            return args.fn(args)
    except DivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OcnoptError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
