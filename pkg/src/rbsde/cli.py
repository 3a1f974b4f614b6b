"""Command line front end.

One subcommand per pipeline stage plus `run` for full experiment configs
and `zoo list` for the problem catalogue.  Exit codes follow the pipeline:
0 all executed stages pass, 2 an invariant or comparison failed, 3 the
configuration or the problem is invalid.
"""

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError
from .experiment import (
    experiment_config_from_dict,
    load_experiment_config,
    run_experiment,
)
from .zoo import zoo_get, zoo_list

_STAGE_PIPELINES = {
    "validate": ("validate",),
    "simulate": ("validate", "simulate"),
    "solve-bsde": ("validate", "solve-bsde"),
    "solve-hjb": ("validate", "solve-hjb"),
    "compare": ("validate", "solve-bsde", "solve-hjb", "compare"),
}

_STAGE_HELP = {
    "validate": "check the standing assumptions on a problem",
    "simulate": "simulate the randomized pair and check moment bounds",
    "solve-bsde": "run the penalized backward scheme over the schedule",
    "solve-hjb": "solve the HJB equation on a finite-difference grid",
    "compare": "solve both ways and compare against reference values",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rbsde",
        description="Discounted stochastic control via randomized controls "
                    "and penalized BSDEs.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in _STAGE_HELP.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("problem",
                        help="zoo problem name or problem JSON file")
        sp.add_argument("--seed", type=int, default=0,
                        help="master seed (default 0)")
        sp.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (default 1, reproducible)")
        sp.add_argument("--out-dir", default="rbsde-out",
                        help="artifact directory (default rbsde-out)")

    run_p = sub.add_parser("run", help="execute an experiment config file")
    run_p.add_argument("config", help="experiment JSON config")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    run_p.add_argument("--threads", type=int, default=None,
                       help="override the config thread cap")
    run_p.add_argument("--out-dir", default=None,
                       help="override the config output directory")

    zoo_p = sub.add_parser("zoo", help="problem catalogue")
    zoo_p.add_argument("action", choices=["list"])
    return parser


def _problem_argument(arg: str):
    """A positional problem is a JSON file when it looks like one."""
    if arg.endswith(".json") or Path(arg).exists():
        try:
            with open(arg) as fh:
                return json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"no problem file at {arg}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"problem file {arg} is not valid JSON: "
                              f"{exc}") from None
        except OSError as exc:
            raise ConfigError(str(exc)) from None
    return arg


def _print_zoo() -> int:
    names = zoo_list()
    width = max(len(n) for n in names)
    for name in names:
        entry = zoo_get(name)
        if entry.known_value is not None:
            ref = f"{entry.known_value:.6g} [{entry.provenance}]"
        else:
            ref = f"[{entry.bsde_stage}]"
        print(f"{name:<{width}}  {ref:<28}  {entry.description}")
    return 0


def _print_result(result) -> None:
    for r in result.records:
        parts = [f"{r.name:<11} {r.status}"]
        if r.summary_value is not None:
            parts.append(f"value={r.summary_value:.6g}")
        if r.summary_error is not None:
            parts.append(f"+-{r.summary_error:.2g}")
        if r.note:
            parts.append(f"({r.note})")
        err = r.detail.get("error") if isinstance(r.detail, dict) else None
        if r.status in ("error", "config-error") and err:
            parts.append(str(err))
        print(" ".join(parts))
    print(f"report: {result.output_dir / 'report.json'}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "zoo":
        return _print_zoo()
    try:
        if args.command == "run":
            config = load_experiment_config(args.config)
            overrides = {}
            if args.seed is not None:
                overrides["seed"] = args.seed
            if args.threads is not None:
                overrides["threads"] = args.threads
            if args.out_dir is not None:
                overrides["output_dir"] = args.out_dir
            if overrides:
                config = config.replace(**overrides)
        else:
            config = experiment_config_from_dict({
                "problem": _problem_argument(args.problem),
                "seed": args.seed,
                "pipeline": list(_STAGE_PIPELINES[args.command]),
                "threads": args.threads,
                "output_dir": args.out_dir,
            })
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    result = run_experiment(config)
    _print_result(result)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
