import argparse
import json
import logging
import sys
from typing import List, Optional

import numpy as np

from .config import load_config, parse_assignments
from .exceptions import ConfigError, EllipticityError, MissingArtifactError
from .harness import Experiment, compare, online_sample, run, study
from .reporting import summarize_directory


def _configure_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _print(payload):
    print(json.dumps(payload, ensure_ascii=False, indent=2, default=str))


def _offline(args, config):
    experiment = Experiment(config, args.run_id)
    bank = experiment.offline()
    ledger = experiment.finalize_ledger()
    return {
        "config": config.name,
        "method": config.method,
        "surrogates": len(bank),
        "k_m_histogram": experiment.k_m_histogram(),
        "offline_seconds": ledger.stages.get("offline", 0.0),
        "n_off": ledger.n_off,
    }


def _online(args, config):
    result, path = online_sample(config, args.sample, args.run_id, require_artifacts=not args.build)
    return {"sample": args.sample, "n_fallback": result.n_fallback,
            "max_abs": float(np.max(np.abs(result.values))), "output": str(path)}


def _estimate(args, config):
    gamma_sizes = (32, 64, 128) if args.gamma else None
    report, ledger, outputs = run(config, args.run_id, estimator=args.method, measure_gamma_sizes=gamma_sizes)
    return {"report": report.summary(), "cost": ledger.model_dump(), "outputs": outputs}


def _compare(args, config):
    report, reference, rows, ledger, outputs = compare(config, args.against, args.run_id, estimator=args.method)
    return {
        "method": config.method,
        "against": args.against,
        "errors": [{"method": m, "N": n, "error": e} for m, n, e in rows],
        "cost": ledger.model_dump(),
        "outputs": outputs,
    }


def _study(args, config):
    parts = ("rates", "cost") if args.part == "all" else (args.part,)
    rows, rates, table, outputs = study(config, args.run_id, parts)
    return {
        "errors": [{"method": m, "N": n, "error": e} for m, n, e in rows],
        "rates": rates,
        "cost_table": table,
        "outputs": outputs,
    }


def _report(args, config):
    return summarize_directory(args.directory or config.output_dir)


COMMANDS = {
    "offline": _offline,
    "online": _online,
    "estimate": _estimate,
    "compare": _compare,
    "study": _study,
    "report": _report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stomsfem", description="Stochastic multiscale FEM experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file (PRESET=..., GRID__REFINE=...)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--run-id", default=None, help="correlation id used as the log prefix")
        p.add_argument("--verbose", action="store_true")
        return p

    common(sub.add_parser("offline", help="build and store the per-patch surrogates"))
    p = common(sub.add_parser("online", help="solve one coarse sample from stored surrogates"))
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--build", action="store_true", help="build missing surrogates instead of failing")
    p = common(sub.add_parser("estimate", help="run an estimator and write mean/std/cost outputs"))
    p.add_argument("--method", choices=["mc", "mc2", "sc"], default=None)
    p.add_argument("--gamma", action="store_true", help="fit the fine-solve cost exponent")
    p = common(sub.add_parser("compare", help="compare against another method on the same samples"))
    p.add_argument("--against", default="fine_fem", choices=["fine_fem", "msfem_direct"])
    p.add_argument("--method", choices=["mc", "mc2", "sc"], default=None)
    p = common(sub.add_parser("study", help="fit estimator convergence rates and sweep the online cost over refine"))
    p.add_argument("--part", choices=["rates", "cost", "all"], default="all")
    p = common(sub.add_parser("report", help="summarize an output directory"))
    p.add_argument("directory", nargs="?", default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Command line interface for running experiments."""
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        config = load_config(args.config, parse_assignments(args.set))
        _print(COMMANDS[args.command](args, config))
    except (ConfigError, EllipticityError, MissingArtifactError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
