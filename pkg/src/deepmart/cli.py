"""``dmrun`` command line."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, InvalidArgumentError, TrainingDivergenceError
from .experiment import TABLES, ExperimentConfig, run_experiment, run_table, sweep_dimension, sweep_n0

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ACCEPTANCE = 0, 2, 3, 4

log = logging.getLogger("deepmart")


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmrun",
                                     description="Primal-dual bounds for Bermudan stopping problems")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML experiment file")
        p.add_argument("--seed", type=int, help="override training and evaluation seeds")
        p.add_argument("--threads", type=int, help="worker cap for evaluation")
        p.add_argument("--deterministic", action="store_true",
                       help="force single-threaded reductions")
        p.add_argument("--out", help="output directory")
        p.add_argument("-q", "--quiet", action="store_true")

    common(sub.add_parser("run", help="one experiment"))
    p = sub.add_parser("sweep-n0", help="vary the number of sub-steps")
    common(p)
    p.add_argument("--values", type=_int_list, required=True)
    p = sub.add_parser("sweep-dim", help="vary the dimension")
    common(p)
    p.add_argument("--dims", type=_int_list, required=True)
    p = sub.add_parser("table", help="reproduce a benchmark table at desk scale")
    common(p, config_required=False)
    p.add_argument("--which", choices=sorted(TABLES), required=True)
    p.add_argument("--dims", type=_int_list, help="restrict to these dimensions")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_toml(args.config) if args.config else ExperimentConfig()
    training, evaluation, output = {}, {}, {}
    if args.seed is not None:
        training["seed"] = evaluation["seed"] = args.seed
    if args.threads is not None:
        training["threads"] = args.threads
    if args.deterministic:
        training["deterministic"] = True
    elif args.threads is not None:
        training["deterministic"] = False
    if args.out:
        output["dir"] = args.out
    return cfg.replace(training=training, evaluation=evaluation, output=output)


def _print_rows(rows):
    print("D,s0,L0,sigma_L,U0,sigma_U,ci_lo,ci_hi")
    for r in rows:
        print(f"{r.D},{r.s0:g},{r.L0:.4f},{r.sigma_L:.4f},{r.U0:.4f},{r.sigma_U:.4f},"
              f"{r.ci_lo:.4f},{r.ci_hi:.4f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "run":
            rows = [run_experiment(cfg, log=log.info)]
        elif args.command == "sweep-n0":
            rows = sweep_n0(cfg, args.values, log=log.info)
        elif args.command == "sweep-dim":
            rows = sweep_dimension(cfg, args.dims, log=log.info)
        else:
            rows, checks = run_table(args.which, cfg, args.dims, log=log.info)
            _print_rows(rows)
            ok = True
            for r, row_checks in zip(rows, checks):
                for name, passed in row_checks:
                    print(f"{'PASS' if passed else 'FAIL'} D={r.D} s0={r.s0:g}: {name}")
                    ok &= passed
            return EXIT_OK if ok else EXIT_ACCEPTANCE
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _print_rows(rows)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
