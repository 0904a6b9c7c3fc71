"""Command-line harness for the inversion experiments.

Subcommands mirror the pipeline stages; ``run-all`` executes the whole
triptych and writes a manifest.  Exit codes: 0 success, 2 configuration
error, 3 numerical failure, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import config as config_mod, experiment
from .fem import NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_NONCONVERGED = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="robininv",
        description="Basal Robin coefficient inversion with approximation-error "
                    "premarginalization over the conductivity.",
    )
    parser.add_argument("--config", help="JSON config file (defaults otherwise)")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--paper-scale", action="store_true",
                        help="use the published mesh resolutions")
    parser.add_argument("--case", choices=[config_mod.ISOTROPIC, config_mod.ANISOTROPIC],
                        help="override the conductivity-prior case")
    parser.add_argument("--bae-samples", type=int,
                        help="override the approximation-error sample count")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synthesize", help="draw truth fields and synthetic data")
    sub.add_parser("error-stats", help="Monte Carlo approximation-error statistics")
    p = sub.add_parser("invert", help="MAP estimation for one error model")
    p.add_argument("--model", choices=experiment.MODELS, required=True)
    p = sub.add_parser("posterior", help="low-rank posterior at a MAP point")
    p.add_argument("--model", choices=experiment.MODELS, required=True)
    sub.add_parser("report", help="coverage, dominance, and cost summary")
    sub.add_parser("run-all", help="full pipeline plus manifest")
    return parser


def _resolve_config(args):
    if args.config:
        cfg = config_mod.load_config(args.config, paper_scale=args.paper_scale)
    else:
        cfg = config_mod.default_config(
            case=args.case or config_mod.ISOTROPIC, paper_scale=args.paper_scale
        )
    if args.case:
        cfg = config_mod.from_dict(
            {**config_mod.to_dict(cfg), "case": args.case}, paper_scale=args.paper_scale
        )
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.bae_samples is not None:
        if args.bae_samples < 50:
            raise ValueError("bae samples below 50 are too few to estimate a covariance")
        if args.bae_samples < 200:
            print("warning: fewer than 200 approximation-error samples", file=sys.stderr)
        cfg.bae_samples = args.bae_samples
    if args.out:
        cfg.output_dir = args.out
    return config_mod.validate_config(cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = cfg.output_dir
    try:
        if args.command == "synthesize":
            experiment.synthesize_data(cfg, out)
            print(f"synthetic data written to {out}")
        elif args.command == "error-stats":
            stats = experiment.error_stats_stage(cfg, out)
            print(f"error statistics from {stats.sample_count} samples written to {out}")
        elif args.command == "invert":
            _, record = experiment.invert_stage(cfg, out, args.model)
            print(f"{args.model}: {record.flag} after {record.gn_iterations} iterations, "
                  f"{record.total_poisson} Poisson solves")
            if not record.converged:
                return EXIT_NONCONVERGED
        elif args.command == "posterior":
            lr, _ = experiment.posterior_stage(cfg, out, args.model)
            print(f"{args.model}: retained rank {lr.rank} of "
                  f"{lr.full_spectrum.size} computed eigenvalues")
        elif args.command == "report":
            report = experiment.report_stage(cfg, out)
            for model, cov in sorted(report["coverage"].items()):
                print(f"coverage[{model}] = {cov:.3f}")
            print(f"dominance: {report['dominance']['dominant']}")
        elif args.command == "run-all":
            manifest = experiment.run_all(cfg, out)
            print(f"manifest written to {out}/manifest.json")
            bad = [m for m in ("ref", "bae") if manifest["flags"][m] != "converged"]
            if bad:
                print(f"non-converged inversions: {', '.join(bad)}", file=sys.stderr)
                return EXIT_NONCONVERGED
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"missing stage output: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
