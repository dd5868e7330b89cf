"""Command line: ``stmdeim {fom,offline,online,report} --config PATH [...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, parse_methods
from .pipeline import PipelineError, format_table, run_fom, run_offline, run_online, summarize


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--eps", help="comma separated tolerances, e.g. 1e-2,1e-3")
    common.add_argument("--methods", help="comma separated subset of STD,ST,FUN,STFUN")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stmdeim", description="Space-time reduced basis with MDEIM hyper-reduction")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fom", parents=[common], help="solve the full model on the training set and dump snapshots")
    sub.add_parser("offline", parents=[common], help="build bases, interpolants and reduced models")
    sub.add_parser("online", parents=[common], help="solve FOM and ROM on test parameters, write report.csv")
    rep = sub.add_parser("report", parents=[common], help="aggregate report CSVs into per-method means")
    rep.add_argument("reports", nargs="*", type=Path, help="report CSVs (default: <out>/report.csv)")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    eps = tuple(float(e) for e in args.eps.split(",")) if args.eps else None
    methods = parse_methods(args.methods) if args.methods else None
    return cfg.with_overrides(eps=eps, methods=methods, seed=args.seed, out=args.out)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "fom":
            snaps = run_fom(cfg)
            print(f"{snaps.n_params} snapshots written to {cfg.out_dir / 'snapshots'}")
        elif args.command == "offline":
            manifest = run_offline(cfg)
            for name, m in manifest["models"].items():
                print(f"{name}: n_s={m['n_s']} n_t={m['n_t']} n_s_a={m['n_s_a']} n_t_a={m['n_t_a']}")
        elif args.command == "online":
            print(f"report written to {run_online(cfg)}")
        else:
            paths = args.reports or [cfg.out_dir / "report.csv"]
            table = summarize(paths, out=cfg.out_dir / "summary.csv")
            print(format_table(table))
    except (ConfigError, PipelineError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
